#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lengthlab/error.hpp"
#include "lengthlab/rng.hpp"
#include "lengthlab/sequence.hpp"
#include "lengthlab/vocab.hpp"

namespace lengthlab {

struct CorpusConfig {
  std::size_t num_prompts = 5000;
  std::size_t responses_per_prompt = 4;  // two responses per preference pair
  double info_weight = 1.0;              // alpha
  double length_bias = 0.0;              // beta, utility per token
  double noise_std = 1.0;
  std::size_t min_len = 4;
  std::size_t max_len = 96;
  std::uint64_t seed = 0;

  void validate(std::size_t max_generation_len) const {
    if (min_len < 1) throw ConfigError("corpus.min_len: must be >= 1");
    if (max_len < min_len) throw ConfigError("corpus.max_len: must be >= corpus.min_len");
    if (max_len > max_generation_len)
      throw ConfigError("corpus.max_len: exceeds the policy generation limit " + std::to_string(max_generation_len));
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("corpus.noise_std: must be finite and >= 0");
    if (!std::isfinite(info_weight)) throw ConfigError("corpus.info_weight: must be finite");
    if (!std::isfinite(length_bias)) throw ConfigError("corpus.length_bias: must be finite");
    if (responses_per_prompt < 2 && num_prompts > 0)
      throw ConfigError("corpus.responses_per_prompt: must be >= 2");
  }
};

/// Synthetic prompts, responses and labelled pairs.
///
/// A prompt is 3-8 tokens: FILLER tokens followed by one TOPIC token. A
/// response with fraction f of INFO tokens carries round(f * |relevant|)
/// distinct INFO tokens associated with the prompt's topic; remaining INFO
/// slots repeat those (p = 0.7) or draw unrelated INFO tokens. Content
/// quality is therefore independent of length, and the only length
/// preference in the labels is the one injected through `length_bias`.
class CorpusGenerator {
 public:
  static constexpr double kRepeatRelevant = 0.7;

  CorpusGenerator(const Vocab& vocab, CorpusConfig cfg, std::size_t max_generation_len = 256)
      : vocab_(&vocab), cfg_(cfg) {
    cfg_.validate(max_generation_len);
    if (vocab.num_topics() == 0 || vocab.filler_tokens().empty() || vocab.info_tokens().empty())
      throw ConfigError("vocab needs TOPIC, INFO and FILLER tokens");
  }

  const CorpusConfig& config() const noexcept { return cfg_; }
  const Vocab& vocab() const noexcept { return *vocab_; }

  std::vector<TokenSequence> gen_prompts(Rng& rng) const {
    std::vector<TokenSequence> prompts;
    prompts.reserve(cfg_.num_prompts);
    const auto& fillers = vocab_->filler_tokens();
    const auto& topics = vocab_->topic_tokens();
    for (std::size_t i = 0; i < cfg_.num_prompts; ++i) {
      const int n = uniform_int(rng, 3, 8);
      std::vector<TokenId> ids;
      ids.reserve(static_cast<std::size_t>(n));
      for (int j = 0; j + 1 < n; ++j) ids.push_back(fillers[uniform_index(rng, fillers.size())]);
      ids.push_back(topics[uniform_index(rng, topics.size())]);
      prompts.push_back(make_prompt(std::move(ids)));
    }
    return prompts;
  }

  /// INFO tokens relevant to any TOPIC token in the prompt, sorted.
  std::vector<TokenId> relevant_info(const TokenSequence& prompt) const {
    std::vector<TokenId> rel;
    for (TokenId t : prompt.ids) {
      if (vocab_->token_class(t) != TokenClass::Topic) continue;
      const auto& info = vocab_->info_for_topic(*vocab_->topic_of(t));
      rel.insert(rel.end(), info.begin(), info.end());
    }
    std::sort(rel.begin(), rel.end());
    rel.erase(std::unique(rel.begin(), rel.end()), rel.end());
    return rel;
  }

  TokenSequence gen_response(const TokenSequence& prompt, std::size_t target_len, double info_fraction,
                             Rng& rng) const {
    if (target_len < cfg_.min_len || target_len > cfg_.max_len)
      throw RangeError("target_len " + std::to_string(target_len) + " outside [" + std::to_string(cfg_.min_len) +
                       ", " + std::to_string(cfg_.max_len) + "]");
    if (!(info_fraction >= 0.0 && info_fraction <= 1.0)) throw RangeError("info_fraction outside [0, 1]");

    auto rel = relevant_info(prompt);
    std::vector<TokenId> unrelated;
    for (TokenId t : vocab_->info_tokens())
      if (!std::binary_search(rel.begin(), rel.end(), t)) unrelated.push_back(t);

    const auto n_info = static_cast<std::size_t>(std::lround(info_fraction * static_cast<double>(target_len)));
    const auto n_distinct = std::min(
        n_info, static_cast<std::size_t>(std::lround(info_fraction * static_cast<double>(rel.size()))));

    // Partial Fisher-Yates picks the distinct relevant subset.
    for (std::size_t i = 0; i < n_distinct; ++i) std::swap(rel[i], rel[i + uniform_index(rng, rel.size() - i)]);
    std::vector<TokenId> body(rel.begin(), rel.begin() + static_cast<std::ptrdiff_t>(n_distinct));
    body.reserve(target_len);
    for (std::size_t i = n_distinct; i < n_info; ++i) {
      const bool repeat = n_distinct > 0 && (unrelated.empty() || uniform01(rng) < kRepeatRelevant);
      if (repeat) {
        body.push_back(body[uniform_index(rng, n_distinct)]);
      } else if (!unrelated.empty()) {
        body.push_back(unrelated[uniform_index(rng, unrelated.size())]);
      } else {
        const auto& info = vocab_->info_tokens();
        body.push_back(info[uniform_index(rng, info.size())]);
      }
    }
    const auto& fillers = vocab_->filler_tokens();
    while (body.size() < target_len) body.push_back(fillers[uniform_index(rng, fillers.size())]);
    for (std::size_t i = body.size(); i > 1; --i) std::swap(body[i - 1], body[uniform_index(rng, i)]);
    return make_response(std::move(body), vocab_->eos());
  }

  /// Number of distinct INFO tokens in the response relevant to the prompt.
  std::size_t distinct_relevant(const TokenSequence& prompt, std::span<const TokenId> body) const {
    const auto rel = relevant_info(prompt);
    std::vector<TokenId> seen;
    for (TokenId t : body)
      if (std::binary_search(rel.begin(), rel.end(), t) && std::find(seen.begin(), seen.end(), t) == seen.end())
        seen.push_back(t);
    return seen.size();
  }

  /// u(y) = alpha * distinct relevant INFO + beta * len(y).
  double latent_utility(const TokenSequence& prompt, const TokenSequence& response) const {
    return cfg_.info_weight * static_cast<double>(distinct_relevant(prompt, response.body())) +
           cfg_.length_bias * static_cast<double>(response.len());
  }

  /// Log-uniform integer length in [min_len, max_len].
  std::size_t sample_length(Rng& rng) const {
    const double lo = std::log(static_cast<double>(cfg_.min_len));
    const double hi = std::log(static_cast<double>(cfg_.max_len) + 1.0);
    const auto len = static_cast<std::size_t>(std::exp(lo + (hi - lo) * uniform01(rng)));
    return std::clamp(len, cfg_.min_len, cfg_.max_len);
  }

  PreferencePair gen_preference_pair(const TokenSequence& prompt, Rng& rng) const {
    for (;;) {
      const auto len_a = sample_length(rng);
      const double f_a = uniform01(rng);
      auto a = gen_response(prompt, len_a, f_a, rng);
      const auto len_b = sample_length(rng);
      const double f_b = uniform01(rng);
      auto b = gen_response(prompt, len_b, f_b, rng);
      const double u_a = latent_utility(prompt, a);
      const double u_b = latent_utility(prompt, b);
      const double s_a = u_a + gaussian(rng, 0.0, cfg_.noise_std);
      const double s_b = u_b + gaussian(rng, 0.0, cfg_.noise_std);
      const bool coin = uniform01(rng) < 0.5;
      if (a == b) continue;
      const bool a_wins = s_a > s_b || (s_a == s_b && coin);
      PreferencePair p;
      p.prompt = prompt;
      p.source = PairSource::Gold;
      if (a_wins) {
        p.preferred = std::move(a);
        p.dispreferred = std::move(b);
        p.u_plus = u_a;
        p.u_minus = u_b;
      } else {
        p.preferred = std::move(b);
        p.dispreferred = std::move(a);
        p.u_plus = u_b;
        p.u_minus = u_a;
      }
      return p;
    }
  }

  /// Full dataset from cfg.seed: prompts, then responses_per_prompt / 2
  /// pairs per prompt in prompt order.
  std::vector<PreferencePair> generate() const {
    Rng rng(cfg_.seed);
    const auto prompts = gen_prompts(rng);
    std::vector<PreferencePair> pairs;
    pairs.reserve(prompts.size() * (cfg_.responses_per_prompt / 2));
    for (const auto& prompt : prompts)
      for (std::size_t j = 0; j < cfg_.responses_per_prompt / 2; ++j) pairs.push_back(gen_preference_pair(prompt, rng));
    return pairs;
  }

 private:
  const Vocab* vocab_;
  CorpusConfig cfg_;
};

/// Random train/eval split. Both halves keep input order.
struct DatasetSplit {
  std::vector<PreferencePair> train;
  std::vector<PreferencePair> eval;
};

inline DatasetSplit split_dataset(const std::vector<PreferencePair>& pairs, double eval_fraction, Rng& rng) {
  if (!(eval_fraction > 0.0 && eval_fraction < 0.5)) throw ConfigError("eval_fraction: must be in (0, 0.5)");
  std::vector<std::size_t> idx(pairs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
  const auto n_eval = static_cast<std::size_t>(std::lround(eval_fraction * static_cast<double>(pairs.size())));
  std::vector<char> is_eval(pairs.size(), 0);
  for (std::size_t i = 0; i < n_eval; ++i) is_eval[idx[i]] = 1;
  DatasetSplit split;
  for (std::size_t i = 0; i < pairs.size(); ++i) (is_eval[i] ? split.eval : split.train).push_back(pairs[i]);
  return split;
}

// ---------------------------------------------------------------------------
// Line-delimited dataset records.

namespace detail {

inline std::vector<TokenId> ids_from_json(const nlohmann::json& j, const char* field, std::size_t line) {
  if (!j.contains(field)) throw ParseError(line, std::string("missing \"") + field + "\" field");
  const auto& arr = j.at(field);
  if (!arr.is_array()) throw ParseError(line, std::string("\"") + field + "\" must be an array of token ids");
  std::vector<TokenId> ids;
  ids.reserve(arr.size());
  for (const auto& v : arr) {
    if (!v.is_number_integer()) throw ParseError(line, std::string("\"") + field + "\" contains a non-integer id");
    ids.push_back(v.get<TokenId>());
  }
  return ids;
}

inline std::optional<double> utility_from_json(const nlohmann::json& j, const char* field, std::size_t line) {
  if (!j.contains(field) || j.at(field).is_null()) return std::nullopt;
  if (!j.at(field).is_number()) throw ParseError(line, std::string("\"") + field + "\" must be a number or null");
  return j.at(field).get<double>();
}

}  // namespace detail

inline nlohmann::json pair_to_json(const PreferencePair& p) {
  nlohmann::json j = p.extra.is_object() ? p.extra : nlohmann::json::object();
  j["prompt"] = p.prompt.ids;
  j["preferred"] = p.preferred.ids;
  j["dispreferred"] = p.dispreferred.ids;
  j["source"] = p.source == PairSource::Gold ? "GOLD" : "AUGMENTED";
  j["u_plus"] = p.u_plus ? nlohmann::json(*p.u_plus) : nlohmann::json(nullptr);
  j["u_minus"] = p.u_minus ? nlohmann::json(*p.u_minus) : nlohmann::json(nullptr);
  return j;
}

inline PreferencePair pair_from_json(const nlohmann::json& j, std::size_t line) {
  if (!j.is_object()) throw ParseError(line, "record is not an object");
  PreferencePair p;
  p.prompt = {detail::ids_from_json(j, "prompt", line), Role::Prompt};
  p.preferred = {detail::ids_from_json(j, "preferred", line), Role::Response};
  p.dispreferred = {detail::ids_from_json(j, "dispreferred", line), Role::Response};
  if (j.contains("source")) {
    const auto& s = j.at("source");
    if (s == "GOLD") {
      p.source = PairSource::Gold;
    } else if (s == "AUGMENTED") {
      p.source = PairSource::Augmented;
    } else {
      throw ParseError(line, "\"source\" must be \"GOLD\" or \"AUGMENTED\"");
    }
  }
  p.u_plus = detail::utility_from_json(j, "u_plus", line);
  p.u_minus = detail::utility_from_json(j, "u_minus", line);
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    if (k == "prompt" || k == "preferred" || k == "dispreferred" || k == "source" || k == "u_plus" || k == "u_minus")
      continue;
    p.extra[k] = it.value();
  }
  return p;
}

inline std::string serialize_dataset(const std::vector<PreferencePair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += pair_to_json(p).dump();
    out += '\n';
  }
  return out;
}

inline void write_dataset(const std::vector<PreferencePair>& pairs, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset " + path);
  out << serialize_dataset(pairs);
  if (!out) throw Error("write failed for " + path);
}

inline std::vector<PreferencePair> read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read dataset " + path);
  std::vector<PreferencePair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(lineno, e.what());
    }
    pairs.push_back(pair_from_json(j, lineno));
  }
  return pairs;
}

}  // namespace lengthlab
