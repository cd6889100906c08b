#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "lengthlab/error.hpp"
#include "lengthlab/rng.hpp"

namespace lengthlab {

using TokenId = std::int32_t;

enum class TokenClass { Special, Topic, Info, Filler };

/// Small closed vocabulary. Token classes and topic associations are encoded
/// in the surface strings so a vocab file is self-describing:
///   "<bos>" "<eos>" "<pad>"   specials
///   "T<k>"                     topic k
///   "I<k>.<j>"                 j-th info token associated with topic k
///   "F<j>"                     filler
class Vocab {
 public:
  static constexpr std::size_t kMaxSize = 64;

  Vocab(std::vector<std::string> surfaces, TokenId bos, TokenId eos, TokenId pad)
      : surfaces_(std::move(surfaces)), bos_(bos), eos_(eos), pad_(pad) {
    classify();
  }

  static Vocab standard(int topics = 6, int info_per_topic = 5, int fillers = 16) {
    std::vector<std::string> s{"<bos>", "<eos>", "<pad>"};
    for (int k = 0; k < topics; ++k) s.push_back("T" + std::to_string(k));
    for (int k = 0; k < topics; ++k)
      for (int j = 0; j < info_per_topic; ++j)
        s.push_back("I" + std::to_string(k) + "." + std::to_string(j));
    for (int j = 0; j < fillers; ++j) s.push_back("F" + std::to_string(j));
    return Vocab(std::move(s), 0, 1, 2);
  }

  std::size_t size() const noexcept { return surfaces_.size(); }
  TokenId bos() const noexcept { return bos_; }
  TokenId eos() const noexcept { return eos_; }
  TokenId pad() const noexcept { return pad_; }

  const std::string& surface(TokenId id) const { return surfaces_.at(static_cast<std::size_t>(id)); }
  TokenClass token_class(TokenId id) const { return classes_.at(static_cast<std::size_t>(id)); }
  bool is_special(TokenId id) const { return token_class(id) == TokenClass::Special; }

  std::size_t num_topics() const noexcept { return topic_tokens_.size(); }
  const std::vector<TokenId>& topic_tokens() const noexcept { return topic_tokens_; }
  const std::vector<TokenId>& info_tokens() const noexcept { return info_tokens_; }
  const std::vector<TokenId>& filler_tokens() const noexcept { return filler_tokens_; }

  /// Topic index of a TOPIC token, or of the topic an INFO token belongs to.
  std::optional<int> topic_of(TokenId id) const {
    const auto t = topic_of_.at(static_cast<std::size_t>(id));
    if (t < 0) return std::nullopt;
    return t;
  }

  /// INFO tokens associated with topic `k`.
  const std::vector<TokenId>& info_for_topic(int k) const { return info_by_topic_.at(static_cast<std::size_t>(k)); }

  std::optional<TokenId> find(const std::string& surface) const {
    auto it = index_.find(surface);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Three header lines `bos <id>`, `eos <id>`, `pad <id>`, then one surface
  /// per line in id order.
  std::string serialize() const {
    std::ostringstream out;
    out << "bos " << bos_ << "\neos " << eos_ << "\npad " << pad_ << "\n";
    for (const auto& s : surfaces_) out << s << "\n";
    return out.str();
  }

  std::uint64_t hash() const { return fnv1a(serialize()); }

  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write vocab file " + path);
    out << serialize();
  }

  static Vocab read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read vocab file " + path);
    std::string line;
    TokenId ids[3];
    const char* names[3] = {"bos", "eos", "pad"};
    for (int i = 0; i < 3; ++i) {
      if (!std::getline(in, line)) throw ParseError(i + 1, "missing special-id header");
      std::istringstream hs(line);
      std::string key;
      long v = -1;
      if (!(hs >> key >> v) || key != names[i] || v < 0)
        throw ParseError(i + 1, std::string("expected '") + names[i] + " <id>'");
      ids[i] = static_cast<TokenId>(v);
    }
    std::vector<std::string> surfaces;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      surfaces.push_back(line);
    }
    return Vocab(std::move(surfaces), ids[0], ids[1], ids[2]);
  }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.surfaces_ == b.surfaces_ && a.bos_ == b.bos_ && a.eos_ == b.eos_ && a.pad_ == b.pad_;
  }

 private:
  void classify() {
    const auto n = surfaces_.size();
    if (n > kMaxSize) throw ConfigError("vocab has " + std::to_string(n) + " tokens, limit is 64");
    auto valid = [n](TokenId id) { return id >= 0 && static_cast<std::size_t>(id) < n; };
    if (!valid(bos_) || !valid(eos_) || !valid(pad_)) throw ConfigError("special id out of range");
    if (bos_ == eos_ || bos_ == pad_ || eos_ == pad_) throw ConfigError("BOS/EOS/PAD ids must be distinct");

    classes_.assign(n, TokenClass::Filler);
    topic_of_.assign(n, -1);
    std::vector<std::pair<int, TokenId>> info_pairs;
    for (std::size_t i = 0; i < n; ++i) {
      const auto id = static_cast<TokenId>(i);
      const auto& s = surfaces_[i];
      if (!index_.emplace(s, id).second) throw ConfigError("duplicate token surface '" + s + "'");
      if (id == bos_ || id == eos_ || id == pad_) {
        classes_[i] = TokenClass::Special;
      } else if (s.size() >= 2 && s[0] == 'T') {
        classes_[i] = TokenClass::Topic;
        topic_of_[i] = parse_int(s.substr(1), s);
        topic_tokens_.push_back(id);
      } else if (s.size() >= 2 && s[0] == 'I') {
        classes_[i] = TokenClass::Info;
        const auto dot = s.find('.');
        topic_of_[i] = parse_int(s.substr(1, dot == std::string::npos ? std::string::npos : dot - 1), s);
        info_tokens_.push_back(id);
      } else if (s.size() >= 2 && s[0] == 'F') {
        filler_tokens_.push_back(id);
      } else {
        throw ConfigError("token '" + s + "' has no class prefix (T/I/F)");
      }
    }
    int max_topic = -1;
    for (TokenId t : topic_tokens_) max_topic = std::max(max_topic, topic_of_[static_cast<std::size_t>(t)]);
    if (max_topic + 1 != static_cast<int>(topic_tokens_.size()))
      throw ConfigError("topic tokens must be numbered 0..k-1");
    info_by_topic_.assign(topic_tokens_.size(), {});
    for (TokenId t : info_tokens_) {
      const int k = topic_of_[static_cast<std::size_t>(t)];
      if (k < 0 || k > max_topic) throw ConfigError("info token '" + surfaces_[static_cast<std::size_t>(t)] + "' names an unknown topic");
      info_by_topic_[static_cast<std::size_t>(k)].push_back(t);
    }
  }

  static int parse_int(const std::string& digits, const std::string& surface) {
    if (digits.empty()) throw ConfigError("malformed token '" + surface + "'");
    int v = 0;
    for (char c : digits) {
      if (c < '0' || c > '9') throw ConfigError("malformed token '" + surface + "'");
      v = v * 10 + (c - '0');
    }
    return v;
  }

  std::vector<std::string> surfaces_;
  TokenId bos_, eos_, pad_;
  std::vector<TokenClass> classes_;
  std::vector<int> topic_of_;
  std::vector<TokenId> topic_tokens_, info_tokens_, filler_tokens_;
  std::vector<std::vector<TokenId>> info_by_topic_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace lengthlab
