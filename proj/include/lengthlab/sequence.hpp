#pragma once

#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "lengthlab/vocab.hpp"

namespace lengthlab {

enum class Role { Prompt, Response };

/// Prompt or response token ids. Responses end with exactly one EOS and
/// `len()` excludes it.
struct TokenSequence {
  std::vector<TokenId> ids;
  Role role = Role::Prompt;

  std::size_t len() const noexcept {
    if (role == Role::Response && !ids.empty()) return ids.size() - 1;
    return ids.size();
  }
  /// Response tokens without the trailing EOS.
  std::span<const TokenId> body() const noexcept {
    return std::span<const TokenId>(ids).first(len());
  }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

inline TokenSequence make_prompt(std::vector<TokenId> ids) { return {std::move(ids), Role::Prompt}; }

inline TokenSequence make_response(std::vector<TokenId> body, TokenId eos) {
  body.push_back(eos);
  return {std::move(body), Role::Response};
}

/// True when `seq` is a well-formed response under `vocab`.
inline bool is_valid_response(const TokenSequence& seq, const Vocab& vocab) {
  if (seq.role != Role::Response || seq.ids.empty() || seq.ids.back() != vocab.eos()) return false;
  for (std::size_t i = 0; i + 1 < seq.ids.size(); ++i) {
    const auto t = seq.ids[i];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab.size()) return false;
    if (t == vocab.eos() || t == vocab.bos() || t == vocab.pad()) return false;
  }
  return true;
}

enum class PairSource { Gold, Augmented };

/// (prompt, preferred, dispreferred) with hidden oracle utilities. Fields of
/// externally produced records that this schema does not know are kept in
/// `extra` and written back out.
struct PreferencePair {
  TokenSequence prompt;
  TokenSequence preferred;
  TokenSequence dispreferred;
  PairSource source = PairSource::Gold;
  std::optional<double> u_plus;
  std::optional<double> u_minus;
  nlohmann::json extra = nlohmann::json::object();

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

}  // namespace lengthlab
