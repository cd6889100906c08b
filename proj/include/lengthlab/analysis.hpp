#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lengthlab/corpus.hpp"
#include "lengthlab/nnet/lm.hpp"
#include "lengthlab/rmlab.hpp"

namespace lengthlab::analysis {

struct ScoredOutput {
  std::size_t prompt_id = 0;
  TokenSequence response;
  std::size_t len = 0;
  double reward = 0.0;
  std::string system;
};

inline ScoredOutput make_scored(std::size_t prompt_id, TokenSequence response, double reward, std::string system) {
  if (!std::isfinite(reward)) throw RangeError("scored output with non-finite reward");
  const auto len = response.len();
  return {prompt_id, std::move(response), len, reward, std::move(system)};
}

/// One sample per prompt, scored by `scorer`; prompt ids are indices.
template <class Scorer>
std::vector<ScoredOutput> sample_and_score(const nnet::PolicyModel& policy, std::span<const TokenSequence> prompts,
                                           const Scorer& scorer, const nnet::DecodeConfig& decode, Rng& rng,
                                           const std::string& system) {
  std::vector<ScoredOutput> out;
  out.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    auto r = nnet::sample_sequence(policy, prompts[i], decode, rng).response;
    const double s = scorer(prompts[i], r);
    out.push_back(make_scored(i, std::move(r), s, system));
  }
  return out;
}

// Length buckets and NRG.

inline std::map<std::size_t, std::vector<ScoredOutput>> bucketize(std::span<const ScoredOutput> outputs,
                                                                   std::size_t width = 20) {
  if (width < 1) throw ConfigError("bucketize: width must be >= 1");
  std::map<std::size_t, std::vector<ScoredOutput>> b;
  for (const auto& o : outputs) b[o.len / width].push_back(o);
  return b;
}

struct BucketRow {
  std::size_t index = 0;
  std::size_t lower_edge = 0;
  std::size_t count_sft = 0;
  std::size_t count_ppo = 0;
  double mean_reward_sft = 0.0;
  double mean_reward_ppo = 0.0;
  std::optional<double> delta;  // only when both sides are present
};

struct NrgReport {
  std::size_t width = 20;
  double delta_r = 0.0;
  std::optional<double> nrg;
  std::optional<double> ratio;
  double excluded_fraction = 0.0;  // share of all outputs sitting in one-sided buckets
  std::vector<BucketRow> buckets;

  bool excluded_flag() const noexcept { return excluded_fraction > 0.2; }

  std::string to_csv() const {
    std::ostringstream out;
    out << "bucket,lower_edge,count_sft,count_ppo,mean_reward_sft,mean_reward_ppo,delta\n";
    char buf[256];
    for (const auto& b : buckets) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%zu,", b.index, b.lower_edge, b.count_sft, b.count_ppo);
      out << buf;
      auto num = [&](std::optional<double> v, bool last) {
        if (v) {
          std::snprintf(buf, sizeof buf, "%.10g", *v);
          out << buf;
        }
        out << (last ? '\n' : ',');
      };
      num(b.count_sft ? std::optional<double>(b.mean_reward_sft) : std::nullopt, false);
      num(b.count_ppo ? std::optional<double>(b.mean_reward_ppo) : std::nullopt, false);
      num(b.delta, true);
    }
    return out.str();
  }
};

inline NrgReport nrg(std::span<const ScoredOutput> sft, std::span<const ScoredOutput> ppo, std::size_t width = 20) {
  if (sft.empty() || ppo.empty()) throw RangeError("nrg: both output lists must be non-empty");
  if (width < 1) throw ConfigError("nrg: width must be >= 1");
  NrgReport r;
  r.width = width;
  double ms = 0.0, mp = 0.0;
  for (const auto& o : sft) ms += o.reward;
  for (const auto& o : ppo) mp += o.reward;
  r.delta_r = mp / static_cast<double>(ppo.size()) - ms / static_cast<double>(sft.size());

  std::map<std::size_t, BucketRow> rows;
  for (const auto& o : sft) {
    auto& b = rows[o.len / width];
    ++b.count_sft;
    b.mean_reward_sft += o.reward;
  }
  for (const auto& o : ppo) {
    auto& b = rows[o.len / width];
    ++b.count_ppo;
    b.mean_reward_ppo += o.reward;
  }
  double num = 0.0, den = 0.0, excluded = 0.0;
  for (auto& [k, b] : rows) {
    b.index = k;
    b.lower_edge = k * width;
    if (b.count_sft) b.mean_reward_sft /= static_cast<double>(b.count_sft);
    if (b.count_ppo) b.mean_reward_ppo /= static_cast<double>(b.count_ppo);
    const auto w = static_cast<double>(b.count_sft + b.count_ppo);
    if (b.count_sft && b.count_ppo) {
      b.delta = b.mean_reward_ppo - b.mean_reward_sft;
      num += w * *b.delta;
      den += w;
    } else {
      excluded += w;
    }
    r.buckets.push_back(b);
  }
  r.excluded_fraction = excluded / static_cast<double>(sft.size() + ppo.size());
  if (den > 0.0) r.nrg = num / den;
  if (r.nrg && std::abs(r.delta_r) >= 1e-9) r.ratio = *r.nrg / r.delta_r;
  return r;
}

// Length heuristic and correlations.

inline double length_heuristic_accuracy(std::span<const PreferencePair> pairs) {
  if (pairs.empty()) throw RangeError("length_heuristic_accuracy: no pairs");
  double s = 0.0;
  for (const auto& p : pairs) {
    const auto a = p.preferred.len(), b = p.dispreferred.len();
    s += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
  }
  return s / static_cast<double>(pairs.size());
}

/// Pearson r; nullopt when either variance is below 1e-12.
inline std::optional<double> pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw RangeError("pearson: length mismatch");
  if (xs.size() < 2) throw RangeError("pearson: need at least 2 points");
  const auto n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx / n < 1e-12 || syy / n < 1e-12) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Ranks starting at 1; ties share their average rank.
inline std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> r(xs.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw RangeError("spearman: length mismatch");
  const auto rx = average_ranks(xs), ry = average_ranks(ys);
  return pearson(rx, ry);
}

struct WithinBatch {
  std::optional<double> mean;  // nullopt when every group is degenerate
  std::size_t used = 0;
  std::size_t skipped = 0;
};

/// Mean per-group Pearson(len, reward); degenerate groups are skipped.
inline WithinBatch within_batch_corr_groups(const std::vector<std::vector<std::pair<double, double>>>& groups) {
  WithinBatch w;
  double s = 0.0;
  std::vector<double> xs, ys;
  for (const auto& g : groups) {
    xs.clear();
    ys.clear();
    for (const auto& [l, r] : g) {
      xs.push_back(l);
      ys.push_back(r);
    }
    const auto c = xs.size() >= 2 ? pearson(xs, ys) : std::nullopt;
    if (c) {
      s += *c;
      ++w.used;
    } else {
      ++w.skipped;
    }
  }
  if (w.used) w.mean = s / static_cast<double>(w.used);
  return w;
}

/// Samples k outputs per prompt from `policy`, scores them, and averages the
/// per-prompt length/reward correlation.
template <class Scorer>
WithinBatch within_batch_corr(const Scorer& rm, const nnet::PolicyModel& policy, std::span<const TokenSequence> prompts,
                              std::size_t k, const nnet::DecodeConfig& decode, Rng& rng) {
  if (prompts.empty()) throw RangeError("within_batch_corr: no prompts");
  if (k < 2) throw ConfigError("within_batch_corr: k must be >= 2");
  std::vector<std::vector<std::pair<double, double>>> groups(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const auto y = nnet::sample_sequence(policy, prompts[i], decode, rng).response;
      groups[i].emplace_back(static_cast<double>(y.len()), rm(prompts[i], y));
    }
  return within_batch_corr_groups(groups);
}

// Cartography.

struct ConfidenceBin {
  double bin_center = 0.0;
  double mean_conf = 0.0;
  double heuristic_acc = 0.0;
  std::size_t count = 0;
};

/// Equal-width bins over the observed mean-confidence range; only occupied
/// bins are returned, in increasing center order.
inline std::vector<ConfidenceBin> confidence_bins_vs_heuristic(const rmlab::TrainingTrace& trace,
                                                               std::span<const PreferencePair> dataset,
                                                               std::size_t num_bins) {
  if (num_bins < 2) throw ConfigError("confidence bins: num_bins must be >= 2");
  if (trace.num_examples() != dataset.size())
    throw RangeError("confidence bins: trace covers " + std::to_string(trace.num_examples()) + " examples, dataset has " +
                     std::to_string(dataset.size()));
  if (dataset.empty()) return {};
  const auto cbar = rmlab::mean_confidences(trace);
  const auto [mn, mx] = std::minmax_element(cbar.begin(), cbar.end());
  const double lo = *mn, hi = *mx;
  const double w = (hi - lo) / static_cast<double>(num_bins);
  std::vector<std::vector<std::size_t>> members(num_bins);
  for (std::size_t i = 0; i < cbar.size(); ++i) {
    std::size_t b = 0;
    if (w > 0.0) b = std::min(num_bins - 1, static_cast<std::size_t>((cbar[i] - lo) / w));
    members[b].push_back(i);
  }
  std::vector<ConfidenceBin> out;
  std::vector<PreferencePair> slice;
  for (std::size_t b = 0; b < num_bins; ++b) {
    if (members[b].empty()) continue;
    ConfidenceBin cb;
    cb.bin_center = w > 0.0 ? lo + (static_cast<double>(b) + 0.5) * w : lo;
    cb.count = members[b].size();
    slice.clear();
    for (auto i : members[b]) {
      cb.mean_conf += cbar[i];
      slice.push_back(dataset[i]);
    }
    cb.mean_conf /= static_cast<double>(cb.count);
    cb.heuristic_acc = length_heuristic_accuracy(slice);
    out.push_back(cb);
  }
  return out;
}

inline std::string confidence_bins_csv(const std::vector<ConfidenceBin>& bins) {
  std::ostringstream out;
  out << "bin_center,mean_conf,heuristic_acc,count\n";
  char buf[256];
  for (const auto& b : bins) {
    std::snprintf(buf, sizeof buf, "%.10g,%.10g,%.10g,%zu\n", b.bin_center, b.mean_conf, b.heuristic_acc, b.count);
    out << buf;
  }
  return out.str();
}

/// Per-example cartography coordinates: mean and variance of confidence.
inline std::string cartography_points_csv(const rmlab::TrainingTrace& trace) {
  std::ostringstream out;
  out << "example_id,mean_conf,var_conf\n";
  char buf[128];
  for (std::size_t i = 0; i < trace.num_examples(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g\n", i, rmlab::mean_confidence(trace, i),
                  rmlab::var_confidence(trace, i));
    out << buf;
  }
  return out.str();
}

// Judges and win rates.

struct Judge {
  std::string name;
  std::function<double(const TokenSequence& prompt, const TokenSequence& response)> score;
};

/// The corpus's hidden utility.
inline Judge oracle_judge(const CorpusGenerator& gen) {
  return {"oracle", [&gen](const TokenSequence& p, const TokenSequence& y) { return gen.latent_utility(p, y); }};
}

/// Hidden utility plus gamma per token of length.
inline Judge length_biased_judge(const CorpusGenerator& gen, double gamma) {
  return {"length_biased", [&gen, gamma](const TokenSequence& p, const TokenSequence& y) {
            return gen.latent_utility(p, y) + gamma * static_cast<double>(y.len());
          }};
}

struct JudgeVerdict {
  std::vector<double> outcomes;  // per prompt: 1 A wins, 0 B wins, 0.5 tie
  std::size_t half_wins = 0;     // 2 * wins + ties, exact
  double win_rate = 0.5;
  double p_value = 1.0;
  std::size_t n() const noexcept { return outcomes.size(); }
};

/// Paired bootstrap over prompts: p = #{|W* - W| >= |W - 0.5|} / B.
inline double paired_bootstrap_p(std::span<const double> outcomes, double win_rate, std::size_t resamples, Rng& rng) {
  if (outcomes.empty() || resamples == 0) return 1.0;
  const double obs = std::abs(win_rate - 0.5);
  const std::uint64_t base = rng();
  const std::size_t n = outcomes.size();
  std::size_t extreme = 0;
  for (std::size_t b = 0; b < resamples; ++b) {
    Rng r(base ^ (0x9E3779B97F4A7C15ULL * (b + 1)));
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += outcomes[uniform_index(r, n)];
    if (std::abs(s / static_cast<double>(n) - win_rate) >= obs) ++extreme;
  }
  return static_cast<double>(extreme) / static_cast<double>(resamples);
}

/// Win rate of system A over B; outputs are matched by prompt id (order may
/// differ) and `prompts[prompt_id]` is the prompt.
inline JudgeVerdict judge_winrate(std::span<const ScoredOutput> a, std::span<const ScoredOutput> b, const Judge& judge,
                                  std::span<const TokenSequence> prompts, Rng& rng, std::size_t resamples = 10000) {
  if (a.size() != b.size()) throw RangeError("judge_winrate: systems have different output counts");
  std::map<std::size_t, const ScoredOutput*> by_id;
  for (const auto& o : b) by_id[o.prompt_id] = &o;
  JudgeVerdict v;
  v.outcomes.reserve(a.size());
  for (const auto& oa : a) {
    auto it = by_id.find(oa.prompt_id);
    if (it == by_id.end()) throw RangeError("judge_winrate: prompt id " + std::to_string(oa.prompt_id) + " missing from B");
    if (oa.prompt_id >= prompts.size()) throw RangeError("judge_winrate: prompt id out of range");
    const auto& p = prompts[oa.prompt_id];
    const double sa = judge.score(p, oa.response), sb = judge.score(p, it->second->response);
    const std::size_t h = sa > sb ? 2 : (sa == sb ? 1 : 0);
    v.half_wins += h;
    v.outcomes.push_back(0.5 * static_cast<double>(h));
  }
  if (v.outcomes.empty()) return v;
  v.win_rate = static_cast<double>(v.half_wins) / static_cast<double>(2 * v.n());
  v.p_value = paired_bootstrap_p(v.outcomes, v.win_rate, resamples, rng);
  return v;
}

// Length x reward heatmap.

struct Heatmap {
  std::size_t len_width = 20;
  std::size_t reward_bins = 10;
  double reward_lo = 0.0;
  double reward_width = 0.0;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> cells;

  double reward_center(std::size_t rb) const { return reward_lo + (static_cast<double>(rb) + 0.5) * reward_width; }

  std::string to_csv() const {
    std::ostringstream out;
    out << "len_bin,reward_bin,count\n";
    for (const auto& [k, c] : cells) out << k.first << ',' << k.second << ',' << c << '\n';
    return out.str();
  }

  /// Spearman correlation between length bin and the count-weighted mean
  /// reward-bin center of that length bin.
  std::optional<double> rank_correlation() const {
    std::map<std::size_t, std::pair<double, std::size_t>> acc;
    for (const auto& [k, c] : cells) {
      acc[k.first].first += reward_center(k.second) * static_cast<double>(c);
      acc[k.first].second += c;
    }
    std::vector<double> xs, ys;
    for (const auto& [lb, a] : acc) {
      xs.push_back(static_cast<double>(lb));
      ys.push_back(a.first / static_cast<double>(a.second));
    }
    if (xs.size() < 2) return std::nullopt;
    return spearman(xs, ys);
  }
};

inline Heatmap length_reward_heatmap(std::span<const ScoredOutput> outputs, std::size_t len_width = 20,
                                     std::size_t reward_bins = 10) {
  if (len_width < 1 || reward_bins < 1) throw ConfigError("heatmap: bin counts must be >= 1");
  Heatmap h;
  h.len_width = len_width;
  h.reward_bins = reward_bins;
  if (outputs.empty()) return h;
  double lo = outputs.front().reward, hi = lo;
  for (const auto& o : outputs) {
    lo = std::min(lo, o.reward);
    hi = std::max(hi, o.reward);
  }
  h.reward_lo = lo;
  h.reward_width = hi > lo ? (hi - lo) / static_cast<double>(reward_bins) : 1.0;
  for (const auto& o : outputs) {
    const auto rb = std::min(reward_bins - 1, static_cast<std::size_t>((o.reward - lo) / h.reward_width));
    ++h.cells[{o.len / len_width, rb}];
  }
  return h;
}

// Corpus calibration.

/// Bisects beta so the generated dataset's length-heuristic agreement hits
/// `target`. Agreement grows with beta; `hi` must bracket the target.
inline double calibrate_length_bias(const Vocab& vocab, CorpusConfig cfg, double target, std::size_t num_pairs = 10000,
                                    double hi = 1.0, int iterations = 30) {
  const std::size_t per_prompt = std::max<std::size_t>(1, cfg.responses_per_prompt / 2);
  cfg.num_prompts = (num_pairs + per_prompt - 1) / per_prompt;
  auto agreement = [&](double beta) {
    cfg.length_bias = beta;
    return length_heuristic_accuracy(CorpusGenerator(vocab, cfg).generate());
  };
  double lo = 0.0;
  if (agreement(hi) < target) throw ConfigError("calibrate_length_bias: target not reachable below beta = " + std::to_string(hi));
  for (int i = 0; i < iterations; ++i) {
    const double mid = 0.5 * (lo + hi);
    (agreement(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace lengthlab::analysis
