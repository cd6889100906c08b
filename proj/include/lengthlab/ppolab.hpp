#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lengthlab/nnet/lm.hpp"
#include "lengthlab/nnet/params.hpp"
#include "lengthlab/nnet/policy.hpp"
#include "lengthlab/nnet/scalar_model.hpp"

namespace lengthlab::ppolab {

using nnet::DecodeConfig;
using nnet::PolicyModel;
using nnet::ValueModel;

/// Scores a (prompt, response) pair; the reward model or any stand-in.
using RewardFn = std::function<double(const TokenSequence&, const TokenSequence&)>;

/// R*(y) = 1 - |len(y) / L - 1|, unclamped.
inline double length_only_reward(std::size_t len, std::size_t target) {
  if (target < 1) throw ConfigError("length_only_reward: L must be >= 1");
  return 1.0 - std::abs(static_cast<double>(len) / static_cast<double>(target) - 1.0);
}

/// R' = R + (1 - len(y) / N) * sigma.
inline double penalize_length(double r, std::size_t len, std::size_t max_len, double sigma) {
  if (max_len < 1) throw ConfigError("penalize_length: N must be >= 1");
  return r + (1.0 - static_cast<double>(len) / static_cast<double>(max_len)) * sigma;
}

/// Per-batch reward mean and population standard deviation over the last
/// `window` batches.
class RewardStats {
 public:
  explicit RewardStats(std::size_t window = 10) : window_(window) {
    if (window < 1) throw ConfigError("RewardStats: window must be >= 1");
  }

  void push(double mean, double stddev) {
    buf_.emplace_back(mean, stddev);
    while (buf_.size() > window_) buf_.pop_front();
  }
  void push_batch(std::span<const double> rewards) {
    double m = 0.0;
    for (double r : rewards) m += r;
    m /= static_cast<double>(rewards.size());
    double v = 0.0;
    for (double r : rewards) v += (r - m) * (r - m);
    push(m, std::sqrt(v / static_cast<double>(rewards.size())));
  }

  std::size_t size() const noexcept { return buf_.size(); }
  std::size_t window() const noexcept { return window_; }
  double mean_mu() const {
    double s = 0.0;
    for (const auto& b : buf_) s += b.first;
    return buf_.empty() ? 0.0 : s / static_cast<double>(buf_.size());
  }
  double mean_sigma() const {
    double s = 0.0;
    for (const auto& b : buf_) s += b.second;
    return buf_.empty() ? 0.0 : s / static_cast<double>(buf_.size());
  }

 private:
  std::size_t window_;
  std::deque<std::pair<double, double>> buf_;
};

/// Pushes this batch's statistics, then returns (R - mu_bar) / sigma_bar
/// using the moving averages (current batch included). Zeros when
/// sigma_bar < 1e-8.
inline std::vector<double> scale_rewards(std::span<const double> raw, RewardStats& stats) {
  std::vector<double> out(raw.size(), 0.0);
  if (raw.empty()) return out;
  stats.push_batch(raw);
  const double mu = stats.mean_mu(), sigma = stats.mean_sigma();
  if (sigma < 1e-8) return out;
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - mu) / sigma;
  return out;
}

enum class RewardSource { RM, LengthOnly, RmPlusLengthPenalty, RmScaled };

inline const char* reward_source_name(RewardSource s) {
  switch (s) {
    case RewardSource::RM: return "RM";
    case RewardSource::LengthOnly: return "LENGTH_ONLY";
    case RewardSource::RmPlusLengthPenalty: return "RM_PLUS_LENGTH_PENALTY";
    case RewardSource::RmScaled: return "RM_SCALED";
  }
  return "?";
}

inline RewardSource parse_reward_source(const std::string& s) {
  if (s == "RM") return RewardSource::RM;
  if (s == "LENGTH_ONLY") return RewardSource::LengthOnly;
  if (s == "RM_PLUS_LENGTH_PENALTY") return RewardSource::RmPlusLengthPenalty;
  if (s == "RM_SCALED") return RewardSource::RmScaled;
  throw ConfigError("ppo.reward: expected RM, LENGTH_ONLY, RM_PLUS_LENGTH_PENALTY or RM_SCALED, got '" + s + "'");
}

struct PpoConfig {
  double kl_coef = 0.04;
  std::size_t batch_size = 64;
  std::size_t steps = 200;
  double clip = 0.2;
  double value_coef = 0.5;
  double lr = 1e-3;
  double value_lr = 1e-3;
  RewardSource reward = RewardSource::RM;
  std::size_t target_length = 40;       // L for LENGTH_ONLY
  std::size_t penalty_max_length = 40;  // N for RM_PLUS_LENGTH_PENALTY
  std::size_t stats_window = 10;        // W for scaling / penalty sigma
  std::optional<std::size_t> omit_long;
  std::size_t checkpoint_every = 50;
  DecodeConfig decode;

  void validate() const {
    if (!(kl_coef >= 0.0) || !std::isfinite(kl_coef)) throw ConfigError("ppo.kl_coef: must be >= 0");
    if (!(clip > 0.0 && clip < 1.0)) throw ConfigError("ppo.clip: must be in (0, 1)");
    if (steps < 1) throw ConfigError("ppo.steps: must be >= 1");
    if (batch_size < 1) throw ConfigError("ppo.batch_size: must be >= 1");
    if (!(lr > 0.0) || !(value_lr > 0.0)) throw ConfigError("ppo.lr: must be > 0");
    if (!(value_coef >= 0.0)) throw ConfigError("ppo.value_coef: must be >= 0");
    if (target_length < 1) throw ConfigError("ppo.target_length: must be >= 1");
    if (penalty_max_length < 1) throw ConfigError("ppo.penalty_max_length: must be >= 1");
    if (stats_window < 1) throw ConfigError("ppo.stats_window: must be >= 1");
    decode.validate();
  }
};

/// One rollout. Per-token arrays have response.ids.size() entries (EOS
/// included). A truncated sample's appended EOS is not a policy action: its
/// logprob and KL are 0 and it receives no policy gradient.
struct RolloutSample {
  TokenSequence prompt;
  TokenSequence response;
  bool truncated = false;
  std::vector<double> old_logprob;
  std::vector<std::vector<double>> rl_dists;
  std::vector<std::vector<double>> ref_dists;  // reference distributions at the visited states
  std::vector<double> kl;
  double raw_reward = 0.0;   // reward source output before penalty / scaling
  double reward_used = 0.0;  // what enters the return
  std::vector<double> shaped;
  std::vector<double> values, returns, advantages;

  std::size_t len() const noexcept { return response.len(); }
  bool trainable(std::size_t t) const noexcept { return !(truncated && t + 1 == response.ids.size()); }
};

struct RolloutBatch {
  std::vector<RolloutSample> samples;
  std::size_t step = 0;
  double stats_mu = 0.0;
  double stats_sigma = 0.0;
  std::size_t omitted = 0;
  double adv_scale = 1.0;  // whitening divisor of the advantages

  double mean_len() const {
    double s = 0.0;
    for (const auto& x : samples) s += static_cast<double>(x.len());
    return samples.empty() ? 0.0 : s / static_cast<double>(samples.size());
  }
};

inline RolloutBatch collect_rollouts(const PolicyModel& policy, std::span<const TokenSequence> prompts,
                                     std::size_t batch_size, const DecodeConfig& decode, Rng& rng) {
  if (prompts.empty()) throw ConfigError("collect_rollouts: no prompts");
  RolloutBatch batch;
  batch.samples.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const auto& prompt = prompts[uniform_index(rng, prompts.size())];
    auto s = nnet::sample_sequence(policy, prompt, decode, rng, true);
    RolloutSample r;
    r.prompt = prompt;
    r.response = std::move(s.response);
    r.truncated = s.truncated;
    r.old_logprob = std::move(s.logprob_raw);
    r.rl_dists = std::move(s.raw_dists);
    batch.samples.push_back(std::move(r));
  }
  return batch;
}

/// Replaces every sample longer than `threshold` with a uniformly chosen
/// (with replacement) sample at or under it.
inline RolloutBatch omit_long(RolloutBatch batch, std::size_t threshold, Rng& rng) {
  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < batch.samples.size(); ++i)
    if (batch.samples[i].len() <= threshold) ok.push_back(i);
  if (ok.empty())
    throw InterventionError("omit_long: all " + std::to_string(batch.samples.size()) + " samples exceed length " +
                            std::to_string(threshold));
  const auto original = batch.samples;
  for (auto& s : batch.samples) {
    if (s.len() <= threshold) continue;
    s = original[ok[uniform_index(rng, ok.size())]];
    ++batch.omitted;
  }
  return batch;
}

/// Raw reward from the configured source, length penalty or scaling applied
/// per cfg, exact per-token KL against the reference, and shaped rewards:
/// -kl_coef * kl_t at every token plus the reward at the final token.
inline void assemble_rewards(RolloutBatch& batch, const RewardFn& rm, const PolicyModel& reference,
                             const PpoConfig& cfg, RewardStats& stats) {
  const std::size_t n = batch.samples.size();
  std::vector<double> raw(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = batch.samples[i];
    if (cfg.reward == RewardSource::LengthOnly) {
      raw[i] = length_only_reward(s.len(), cfg.target_length);
    } else {
      raw[i] = rm(s.prompt, s.response);
      if (!std::isfinite(raw[i])) {
        std::ostringstream dump;
        dump << "non-finite reward for sample " << i << ": prompt=[";
        for (auto t : s.prompt.ids) dump << t << ' ';
        dump << "] response=[";
        for (auto t : s.response.ids) dump << t << ' ';
        dump << "]";
        throw TrainingError(dump.str());
      }
    }
    s.raw_reward = raw[i];
  }
  std::vector<double> used = raw;
  if (cfg.reward == RewardSource::RmScaled) {
    used = scale_rewards(raw, stats);
  } else if (cfg.reward == RewardSource::RmPlusLengthPenalty) {
    stats.push_batch(raw);
    const double sigma = stats.mean_sigma();
    for (std::size_t i = 0; i < n; ++i)
      used[i] = penalize_length(raw[i], batch.samples[i].len(), cfg.penalty_max_length, sigma);
  }
  batch.stats_mu = stats.mean_mu();
  batch.stats_sigma = stats.mean_sigma();

  PolicyModel::Step step;
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = batch.samples[i];
    const std::size_t T = s.response.ids.size();
    s.reward_used = used[i];
    s.kl.assign(T, 0.0);
    s.shaped.assign(T, 0.0);
    s.ref_dists.assign(T, {});
    for (std::size_t t = 0; t < T; ++t) {
      if (!s.trainable(t)) continue;
      reference.forward(reference.context_at(s.prompt.ids, s.response.ids, t), t, step);
      s.ref_dists[t] = step.probs;
      s.kl[t] = nnet::exact_token_kl(s.rl_dists[t], step.probs);
      s.shaped[t] = -cfg.kl_coef * s.kl[t];
    }
    s.shaped[T - 1] += s.reward_used;
  }
}

/// Fills values, undiscounted returns, and batch-whitened advantages.
inline void compute_advantages(RolloutBatch& batch, const ValueModel& value) {
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (auto& s : batch.samples) {
    const std::size_t T = s.response.ids.size();
    s.values.assign(T, 0.0);
    s.returns.assign(T, 0.0);
    s.advantages.assign(T, 0.0);
    double g = 0.0;
    for (std::size_t t = T; t-- > 0;) {
      g += s.shaped[t];
      s.returns[t] = g;
    }
    const auto body = std::span<const TokenId>(s.response.ids);
    for (std::size_t t = 0; t < T; ++t) {
      s.values[t] = value.forward(s.prompt.ids, body.first(t));
      s.advantages[t] = s.returns[t] - s.values[t];
      if (s.trainable(t)) {
        sum += s.advantages[t];
        ++count;
      }
    }
  }
  if (count == 0) return;
  const double mean = sum / static_cast<double>(count);
  for (const auto& s : batch.samples)
    for (std::size_t t = 0; t < s.advantages.size(); ++t)
      if (s.trainable(t)) sq += (s.advantages[t] - mean) * (s.advantages[t] - mean);
  const double sd = std::sqrt(sq / static_cast<double>(count));
  batch.adv_scale = sd >= 1e-8 ? sd : 1.0;
  for (auto& s : batch.samples)
    for (std::size_t t = 0; t < s.advantages.size(); ++t)
      s.advantages[t] = (s.trainable(t) && sd >= 1e-8) ? (s.advantages[t] - mean) / sd : 0.0;
}

struct SurrogateStats {
  double surrogate = 0.0;  // mean over trainable tokens
  double kl = 0.0;         // mean exact KL to the reference at the visited states
  double loss = 0.0;       // -surrogate + kl_coef * kl / adv_scale
  double mean_ratio = 0.0;
  double frac_clipped = 0.0;
  std::size_t tokens = 0;
};

/// Policy loss: the negated clipped surrogate E[min(rho A, clip(rho) A)]
/// plus kl_coef * KL(pi || ref) at each visited state.
///
/// The KL shaping inside the returns only credits earlier actions for
/// reaching a state; the KL at the state itself depends on the parameters
/// directly, and that gradient is added here. It is divided by the same
/// factor as the whitened advantages so both terms keep their relative
/// weight. Accumulates gradients when `with_grad`.
inline SurrogateStats ppo_policy_objective(PolicyModel& policy, const RolloutBatch& batch, double clip,
                                           double kl_coef, bool with_grad) {
  SurrogateStats st;
  for (const auto& s : batch.samples)
    for (std::size_t t = 0; t < s.response.ids.size(); ++t) st.tokens += s.trainable(t) ? 1 : 0;
  if (st.tokens == 0) return st;
  const double inv = 1.0 / static_cast<double>(st.tokens);
  PolicyModel::Step step;
  std::vector<double> dlogits;
  std::size_t clipped = 0;
  for (const auto& s : batch.samples) {
    for (std::size_t t = 0; t < s.response.ids.size(); ++t) {
      if (!s.trainable(t)) continue;
      policy.forward(policy.context_at(s.prompt.ids, s.response.ids, t), t, step);
      const auto a = static_cast<std::size_t>(s.response.ids[t]);
      const double rho = std::exp(std::log(step.probs[a]) - s.old_logprob[t]);
      const double adv = s.advantages[t];
      const double rho_c = std::clamp(rho, 1.0 - clip, 1.0 + clip);
      const bool active = adv >= 0.0 ? rho <= 1.0 + clip : rho >= 1.0 - clip;
      st.surrogate += std::min(rho * adv, rho_c * adv);
      st.mean_ratio += rho;
      if (rho < 1.0 - clip || rho > 1.0 + clip) ++clipped;
      const auto& ref = s.ref_dists[t];
      const double kl = kl_coef > 0.0 ? nnet::exact_token_kl(step.probs, ref) : 0.0;
      st.kl += kl;
      if (!with_grad) continue;
      dlogits.assign(step.probs.size(), 0.0);
      if (active && adv != 0.0) {
        // d(-rho A)/dlogits = A rho (p - onehot)
        for (std::size_t i = 0; i < dlogits.size(); ++i) dlogits[i] = adv * rho * step.probs[i];
        dlogits[a] -= adv * rho;
      }
      if (kl_coef > 0.0) {
        // dKL/dz_j = p_j (ln p_j - ln q_j - KL)
        for (std::size_t i = 0; i < dlogits.size(); ++i)
          if (step.probs[i] > 0.0)
            dlogits[i] += kl_coef / batch.adv_scale * step.probs[i] * (std::log(step.probs[i]) - std::log(ref[i]) - kl);
      }
      for (double& g : dlogits) g *= inv;
      policy.backward(step, dlogits);
    }
  }
  st.surrogate *= inv;
  st.kl *= inv;
  st.loss = -st.surrogate + kl_coef * st.kl / batch.adv_scale;
  st.mean_ratio *= inv;
  st.frac_clipped = static_cast<double>(clipped) * inv;
  return st;
}

/// value_coef * mean (V_t - G_t)^2 over every position; accumulates gradients.
inline double value_loss(ValueModel& value, const RolloutBatch& batch, double value_coef, bool with_grad) {
  std::size_t n = 0;
  for (const auto& s : batch.samples) n += s.response.ids.size();
  if (n == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(n);
  ValueModel::Cache cache;
  double loss = 0.0;
  for (const auto& s : batch.samples) {
    const auto body = std::span<const TokenId>(s.response.ids);
    for (std::size_t t = 0; t < body.size(); ++t) {
      const double v = value.forward(s.prompt.ids, body.first(t), &cache);
      const double diff = v - s.returns[t];
      loss += diff * diff;
      if (with_grad) value.backward(cache, 2.0 * value_coef * diff * inv);
    }
  }
  return value_coef * loss * inv;
}

struct UpdateStats {
  double surrogate = 0.0;
  double value_loss = 0.0;
  double mean_ratio = 0.0;
  double frac_clipped = 0.0;
};

/// One gradient step on the policy (clipped surrogate) and the value model.
inline UpdateStats ppo_update(PolicyModel& policy, nnet::Adam& policy_opt, ValueModel& value, nnet::Adam& value_opt,
                              RolloutBatch& batch, const PpoConfig& cfg) {
  compute_advantages(batch, value);
  policy.params().zero_grad();
  const auto st = ppo_policy_objective(policy, batch, cfg.clip, cfg.kl_coef, true);
  value.params().zero_grad();
  const double vl = value_loss(value, batch, cfg.value_coef, true);
  if (!std::isfinite(st.surrogate) || !std::isfinite(vl) || !policy.params().grads_finite() ||
      !value.params().grads_finite())
    throw TrainingError("ppo_update: non-finite objective or gradient at step " + std::to_string(batch.step));
  policy_opt.step(policy.params().values(), policy.params().grads());
  value_opt.step(value.params().values(), value.params().grads());
  return {st.surrogate, vl, st.mean_ratio, st.frac_clipped};
}

struct TimelineRow {
  std::size_t step = 0;
  double mean_len = 0.0;
  double mean_raw_reward = 0.0;
  double mean_kl = 0.0;  // per token
  double surrogate = 0.0;
  double value_loss = 0.0;
  double frac_clipped = 0.0;
  std::size_t omitted_count = 0;
  bool skipped = false;
};

inline std::string timeline_csv(const std::vector<TimelineRow>& rows) {
  std::ostringstream out;
  out << "step,mean_len,mean_raw_reward,mean_kl,surrogate,value_loss,frac_clipped,omitted_count\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%zu\n", r.step, r.mean_len,
                  r.mean_raw_reward, r.mean_kl, r.surrogate, r.value_loss, r.frac_clipped, r.omitted_count);
    out << buf;
  }
  return out.str();
}

struct PpoRun {
  PolicyModel policy;
  ValueModel value;
  std::vector<TimelineRow> timeline;
  std::vector<std::string> errors;  // skipped steps
};

struct PpoHooks {
  std::function<void(std::size_t step, const PolicyModel&)> on_checkpoint;
  /// Called on each assembled batch right before the update.
  std::function<void(const RolloutBatch&)> on_batch;
};

/// PPO from `sft` (cloned as the frozen reference) on `prompts`. A step whose
/// omit_long intervention fails is skipped and recorded.
inline PpoRun run_ppo(const PolicyModel& sft, std::span<const TokenSequence> prompts, const RewardFn& rm,
                      const PpoConfig& cfg, Rng& rng, const PpoHooks& hooks = {}) {
  cfg.validate();
  if (cfg.reward != RewardSource::LengthOnly && !rm) throw ConfigError("run_ppo: reward source needs a scorer");
  const PolicyModel reference = sft;
  nnet::ScalarConfig vc;
  vc.vocab_size = sft.config().vocab_size;
  vc.pad = sft.config().pad;
  vc.window = std::max<std::size_t>(cfg.decode.max_len + 1, 1);
  vc.length_feature = true;
  PpoRun run{sft, ValueModel::random(vc, rng), {}, {}};
  nnet::Adam popt(run.policy.params().values().size(), {cfg.lr});
  nnet::Adam vopt(run.value.params().values().size(), {cfg.value_lr});
  RewardStats stats(cfg.stats_window);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    auto batch = collect_rollouts(run.policy, prompts, cfg.batch_size, cfg.decode, rng);
    batch.step = step;
    TimelineRow row;
    row.step = step;
    if (cfg.omit_long) {
      try {
        batch = omit_long(std::move(batch), *cfg.omit_long, rng);
      } catch (const InterventionError& e) {
        row.mean_len = batch.mean_len();
        row.omitted_count = batch.samples.size();
        row.skipped = true;
        run.errors.push_back("step " + std::to_string(step) + ": " + e.what());
        run.timeline.push_back(row);
        continue;
      }
    }
    assemble_rewards(batch, rm, reference, cfg, stats);
    if (hooks.on_batch) hooks.on_batch(batch);
    const auto up = ppo_update(run.policy, popt, run.value, vopt, batch, cfg);

    double kl = 0.0, raw = 0.0;
    std::size_t tokens = 0;
    for (const auto& s : batch.samples) {
      raw += s.raw_reward;
      for (std::size_t t = 0; t < s.kl.size(); ++t)
        if (s.trainable(t)) {
          kl += s.kl[t];
          ++tokens;
        }
    }
    row.mean_len = batch.mean_len();
    row.mean_raw_reward = raw / static_cast<double>(batch.samples.size());
    row.mean_kl = tokens ? kl / static_cast<double>(tokens) : 0.0;
    row.surrogate = up.surrogate;
    row.value_loss = up.value_loss;
    row.frac_clipped = up.frac_clipped;
    row.omitted_count = batch.omitted;
    run.timeline.push_back(row);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      hooks.on_checkpoint(step, run.policy);
  }
  return run;
}

/// Longest of k independent samples; the first one wins ties.
inline TokenSequence sft_long_sample(const PolicyModel& policy, const TokenSequence& prompt, std::size_t k,
                                     const DecodeConfig& decode, Rng& rng) {
  if (k < 1) throw ConfigError("sft_long_sample: k must be >= 1");
  TokenSequence best;
  for (std::size_t i = 0; i < k; ++i) {
    auto s = nnet::sample_sequence(policy, prompt, decode, rng).response;
    if (i == 0 || s.len() > best.len()) best = std::move(s);
  }
  return best;
}

}  // namespace lengthlab::ppolab
