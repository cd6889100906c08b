#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "lengthlab/nnet/policy.hpp"
#include "lengthlab/sequence.hpp"

namespace lengthlab::nnet {

/// KL(p || q) = sum p_i ln(p_i / q_i) with 0 ln 0 = 0.
inline double exact_token_kl(std::span<const double> p, std::span<const double> q) {
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  return std::max(kl, 0.0);
}

inline std::vector<double> lm_next_token_dist(const PolicyModel& policy, std::span<const TokenId> context,
                                              std::size_t position = 0) {
  return policy.next_token_dist(context, position);
}

/// Sum of next-token log probabilities over the response, EOS included.
/// When `max_len` > 0 an EOS sitting at position `max_len` was forced by
/// truncation and contributes log 1 = 0.
inline double sequence_logprob(const PolicyModel& policy, const TokenSequence& prompt, const TokenSequence& response,
                               std::size_t max_len = 0) {
  PolicyModel::Step step;
  double lp = 0.0;
  for (std::size_t t = 0; t < response.ids.size(); ++t) {
    if (max_len > 0 && t == max_len && response.ids[t] == policy.config().eos) break;
    policy.forward(policy.context_at(prompt.ids, response.ids, t), t, step);
    lp += std::log(step.probs[static_cast<std::size_t>(response.ids[t])]);
  }
  return lp;
}

struct DecodeConfig {
  double top_p = 1.0;
  double temperature = 1.0;
  double repetition_penalty = 1.0;
  std::size_t max_len = 256;

  void validate() const {
    if (max_len < 1) throw ConfigError("decode.max_len: must be >= 1");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("decode.top_p: must be in (0, 1]");
    if (!(temperature > 0.0)) throw ConfigError("decode.temperature: must be > 0");
    if (!(repetition_penalty >= 1.0)) throw ConfigError("decode.repetition_penalty: must be >= 1");
  }
  bool is_identity() const noexcept { return top_p >= 1.0 && temperature == 1.0 && repetition_penalty == 1.0; }
};

struct SampledSequence {
  TokenSequence response;
  std::vector<double> logprob_final;  // under the modified sampling distribution
  std::vector<double> logprob_raw;    // under the unmodified model distribution
  bool truncated = false;             // EOS appended at max_len, logprobs 0
  std::vector<std::vector<double>> raw_dists;  // per position, if requested
};

/// Applies, in order: BOS/PAD masking, repetition penalty on tokens already
/// emitted in this response (positive logits divided, negative multiplied),
/// temperature, nucleus truncation; then samples.
inline std::vector<double> decode_distribution(const PolicyConfig& pc, std::span<const double> logits,
                                               std::span<const TokenId> emitted, const DecodeConfig& decode) {
  std::vector<double> z(logits.begin(), logits.end());
  z[static_cast<std::size_t>(pc.bos)] = -INFINITY;
  z[static_cast<std::size_t>(pc.pad)] = -INFINITY;
  if (decode.repetition_penalty != 1.0) {
    std::vector<char> seen(z.size(), 0);
    for (TokenId t : emitted) seen[static_cast<std::size_t>(t)] = 1;
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (!seen[i] || !std::isfinite(z[i])) continue;
      z[i] = z[i] > 0.0 ? z[i] / decode.repetition_penalty : z[i] * decode.repetition_penalty;
    }
  }
  if (decode.temperature != 1.0)
    for (double& v : z) v /= decode.temperature;
  softmax_inplace(z);
  if (decode.top_p < 1.0) {
    std::vector<std::size_t> order(z.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
    double mass = 0.0;
    std::size_t keep = 0;
    while (keep < order.size()) {
      mass += z[order[keep++]];
      if (mass >= decode.top_p) break;
    }
    for (std::size_t i = keep; i < order.size(); ++i) z[order[i]] = 0.0;
    for (double& v : z) v /= mass;
  }
  return z;
}

inline std::size_t sample_index(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last = i;
    if (u < acc) return i;
  }
  return last;
}

inline SampledSequence sample_sequence(const PolicyModel& policy, const TokenSequence& prompt,
                                       const DecodeConfig& decode, Rng& rng, bool keep_raw_dists = false) {
  const auto& pc = policy.config();
  SampledSequence out;
  out.response.role = Role::Response;
  auto& ids = out.response.ids;
  PolicyModel::Step step;
  for (std::size_t t = 0; t < decode.max_len; ++t) {
    policy.forward(policy.context_at(prompt.ids, ids, t), t, step);
    const auto q = decode_distribution(pc, step.logits, ids, decode);
    const auto a = sample_index(q, rng);
    ids.push_back(static_cast<TokenId>(a));
    out.logprob_final.push_back(std::log(q[a]));
    out.logprob_raw.push_back(std::log(step.probs[a]));
    if (keep_raw_dists) out.raw_dists.push_back(step.probs);
    if (static_cast<TokenId>(a) == pc.eos) return out;
  }
  ids.push_back(pc.eos);
  out.logprob_final.push_back(0.0);
  out.logprob_raw.push_back(0.0);
  out.truncated = true;
  if (keep_raw_dists) {
    std::vector<double> forced(pc.vocab_size, 0.0);
    forced[static_cast<std::size_t>(pc.eos)] = 1.0;
    out.raw_dists.push_back(std::move(forced));
  }
  return out;
}

struct SftExample {
  const TokenSequence* prompt;
  const TokenSequence* response;
};

/// Mean negative log-likelihood per response token (EOS included). Adds the
/// gradient of that mean to the policy's gradient buffer when `with_grad`.
inline double sft_loss(PolicyModel& policy, std::span<const SftExample> batch, bool with_grad = true) {
  std::size_t n_tokens = 0;
  for (const auto& ex : batch) n_tokens += ex.response->ids.size();
  if (n_tokens == 0) throw ConfigError("sft batch has no tokens");
  const double inv = 1.0 / static_cast<double>(n_tokens);
  PolicyModel::Step step;
  std::vector<double> dlogits;
  double nll = 0.0;
  for (const auto& ex : batch) {
    const auto& ids = ex.response->ids;
    for (std::size_t t = 0; t < ids.size(); ++t) {
      policy.forward(policy.context_at(ex.prompt->ids, ids, t), t, step);
      const auto y = static_cast<std::size_t>(ids[t]);
      nll -= std::log(step.probs[y]);
      if (with_grad) {
        dlogits = step.probs;
        dlogits[y] -= 1.0;
        for (double& g : dlogits) g *= inv;
        policy.backward(step, dlogits);
      }
    }
  }
  return nll * inv;
}

/// One Adam step on the mean per-token cross-entropy. Returns the loss
/// before the update.
inline double sft_step(PolicyModel& policy, Adam& opt, std::span<const SftExample> batch) {
  if (batch.empty()) throw ConfigError("sft_step: empty batch");
  policy.params().zero_grad();
  const double loss = sft_loss(policy, batch, true);
  if (!std::isfinite(loss) || !policy.params().grads_finite()) throw TrainingError("sft: non-finite loss or gradient");
  opt.step(policy.params().values(), policy.params().grads());
  return loss;
}

}  // namespace lengthlab::nnet
