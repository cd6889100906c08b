#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lengthlab/corpus.hpp"
#include "lengthlab/nnet/params.hpp"
#include "lengthlab/nnet/scalar_model.hpp"

namespace lengthlab::rmlab {

using nnet::RewardModel;

/// -ln sigmoid(r_plus - r_minus), evaluated without overflow.
inline double bt_loss(double r_plus, double r_minus) {
  const double d = r_plus - r_minus;
  return d > 0.0 ? std::log1p(std::exp(-d)) : -d + std::log1p(std::exp(d));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// (dL/dr_plus, dL/dr_minus).
inline std::pair<double, double> bt_loss_grad(double r_plus, double r_minus) {
  const double s = sigmoid(r_minus - r_plus);
  return {-s, s};
}

enum class RmIntervention { None, Balance, RandomPairing, ConfidenceTruncation };
enum class ThresholdMode { Quantile, Absolute };

inline const char* intervention_name(RmIntervention i) {
  switch (i) {
    case RmIntervention::None: return "NONE";
    case RmIntervention::Balance: return "BAL";
    case RmIntervention::RandomPairing: return "R-DA";
    case RmIntervention::ConfidenceTruncation: return "C-TR";
  }
  return "?";
}

inline RmIntervention parse_intervention(const std::string& s) {
  if (s == "NONE") return RmIntervention::None;
  if (s == "BAL") return RmIntervention::Balance;
  if (s == "R-DA") return RmIntervention::RandomPairing;
  if (s == "C-TR") return RmIntervention::ConfidenceTruncation;
  throw ConfigError("rm.intervention: expected NONE, BAL, R-DA or C-TR, got '" + s + "'");
}

struct RmTrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double eval_fraction = 0.1;
  RmIntervention intervention = RmIntervention::None;
  std::size_t bin_width = 10;
  double augment_fraction = 0.25;
  ThresholdMode theta_mode = ThresholdMode::Quantile;
  double theta1 = 0.25;  // quantile in Quantile mode, confidence value in Absolute mode
  double theta2 = 0.75;
  nnet::ScalarConfig model;

  void validate() const {
    if (epochs < 1) throw ConfigError("rm.epochs: must be >= 1");
    if (intervention == RmIntervention::ConfidenceTruncation && epochs < 2)
      throw ConfigError("rm.epochs: C-TR needs >= 2 epochs of confidence history");
    if (batch_size < 1) throw ConfigError("rm.batch_size: must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("rm.lr: must be > 0");
    if (!(eval_fraction > 0.0 && eval_fraction < 0.5)) throw ConfigError("rm.eval_fraction: must be in (0, 0.5)");
    if (bin_width < 1) throw ConfigError("rm.bin_width: must be >= 1");
    if (!(augment_fraction >= 0.0 && augment_fraction <= 1.0))
      throw ConfigError("rm.augment_fraction: must be in [0, 1]");
    if (!std::isfinite(theta1) || !std::isfinite(theta2)) throw ConfigError("rm.theta: must be finite");
    if (theta_mode == ThresholdMode::Quantile &&
        !(theta1 >= 0.0 && theta1 <= 1.0 && theta2 >= 0.0 && theta2 <= 1.0))
      throw ConfigError("rm.theta: quantiles must be in [0, 1]");
  }
};

/// Per-example confidence R(x, y+) - R(x, y-) snapshotted at the end of each
/// epoch, plus eval accuracy per epoch. Epochs are numbered from 1.
struct TrainingTrace {
  std::vector<std::vector<double>> confidence;  // [epoch - 1][example]
  std::vector<double> eval_accuracy;            // [epoch - 1]

  std::size_t epochs() const noexcept { return confidence.size(); }
  std::size_t num_examples() const noexcept { return confidence.empty() ? 0 : confidence.front().size(); }
  double at(std::size_t example, std::size_t epoch) const { return confidence.at(epoch - 1).at(example); }

  std::string to_csv() const {
    std::ostringstream out;
    out << "example_id,epoch,confidence\n";
    char buf[64];
    for (std::size_t i = 0; i < num_examples(); ++i)
      for (std::size_t e = 1; e <= epochs(); ++e) {
        std::snprintf(buf, sizeof buf, "%.17g", at(i, e));
        out << i << ',' << e << ',' << buf << '\n';
      }
    return out.str();
  }

  static TrainingTrace from_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read trace " + path);
    std::string line;
    std::getline(in, line);
    if (line.rfind("example_id,epoch,confidence", 0) != 0) throw ParseError(1, "bad trace header");
    TrainingTrace t;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::size_t i = 0, e = 0;
      double c = 0.0;
      if (std::sscanf(line.c_str(), "%zu,%zu,%lf", &i, &e, &c) != 3 || e == 0) throw ParseError(lineno, "bad trace row");
      if (t.confidence.size() < e) t.confidence.resize(e);
      auto& row = t.confidence[e - 1];
      if (row.size() <= i) row.resize(i + 1, 0.0);
      row[i] = c;
    }
    return t;
  }
};

/// Mean confidence over epochs 2..E (epoch 1 excluded). E = 1 falls back to
/// epoch 1 so single-epoch traces remain usable.
inline double mean_confidence(const TrainingTrace& trace, std::size_t i) {
  const std::size_t first = trace.epochs() >= 2 ? 2 : 1;
  double s = 0.0;
  for (std::size_t e = first; e <= trace.epochs(); ++e) s += trace.at(i, e);
  return s / static_cast<double>(trace.epochs() - first + 1);
}

/// Population variance over epochs 2..E; 0 when only one epoch qualifies.
inline double var_confidence(const TrainingTrace& trace, std::size_t i) {
  const std::size_t first = trace.epochs() >= 2 ? 2 : 1;
  const double m = mean_confidence(trace, i);
  double s = 0.0;
  for (std::size_t e = first; e <= trace.epochs(); ++e) s += (trace.at(i, e) - m) * (trace.at(i, e) - m);
  return s / static_cast<double>(trace.epochs() - first + 1);
}

inline std::vector<double> mean_confidences(const TrainingTrace& trace) {
  std::vector<double> out(trace.num_examples());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mean_confidence(trace, i);
  return out;
}

/// Linear-interpolation quantile (R type 7).
inline double quantile(std::vector<double> xs, double q) {
  if (xs.empty()) throw ConfigError("quantile of empty set");
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

/// Fraction of pairs the scorer ranks correctly; exact score ties count 0.5.
template <class Scorer>
double eval_accuracy(const Scorer& score, std::span<const PreferencePair> pairs) {
  if (pairs.empty()) throw ConfigError("eval_accuracy: no pairs");
  double hits = 0.0;
  for (const auto& p : pairs) {
    const double a = score(p.prompt, p.preferred);
    const double b = score(p.prompt, p.dispreferred);
    hits += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
  }
  return hits / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Preference-data interventions.

/// Signed length difference len(y+) - len(y-).
inline long length_gap(const PreferencePair& p) {
  return static_cast<long>(p.preferred.len()) - static_cast<long>(p.dispreferred.len());
}

/// Bins d = len(y+) - len(y-) by magnitude, k = floor(|d| / w), with d >= 0
/// on the positive side; bin +k holds d in [kw, (k+1)w) and its mirror -k
/// holds d in (-(k+1)w, -kw] (k = 0 mirror is (-w, 0)). The larger side of
/// every mirror pair is subsampled to the smaller side's count.
inline std::vector<PreferencePair> balance_by_length(const std::vector<PreferencePair>& pairs, std::size_t bin_width,
                                                     Rng& rng) {
  if (bin_width < 1) throw ConfigError("balance_by_length: bin_width must be >= 1");
  std::map<long, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> bins;
  const auto w = static_cast<long>(bin_width);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const long d = length_gap(pairs[i]);
    auto& slot = bins[std::abs(d) / w];
    (d >= 0 ? slot.first : slot.second).push_back(i);
  }
  std::vector<char> keep(pairs.size(), 0);
  for (auto& [k, sides] : bins) {
    auto& [pos, neg] = sides;
    const std::size_t target = std::min(pos.size(), neg.size());
    for (auto* side : {&pos, &neg}) {
      auto& v = *side;
      for (std::size_t i = 0; i < target; ++i) std::swap(v[i], v[i + uniform_index(rng, v.size() - i)]);
      for (std::size_t i = 0; i < target; ++i) keep[v[i]] = 1;
    }
  }
  std::vector<PreferencePair> out;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (keep[i]) out.push_back(pairs[i]);
  return out;
}

/// Appends round(fraction * n) AUGMENTED pairs (x_i, y_i^-, y_j^+) where pair
/// j has a different prompt than pair i. Source pairs i are drawn without
/// replacement.
inline std::vector<PreferencePair> augment_random_pairing(const std::vector<PreferencePair>& pairs, double fraction,
                                                          Rng& rng) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("augment_random_pairing: fraction must be in [0, 1]");
  std::vector<PreferencePair> out = pairs;
  if (fraction == 0.0) return out;
  bool distinct = false;
  for (std::size_t i = 1; i < pairs.size() && !distinct; ++i) distinct = pairs[i].prompt != pairs[0].prompt;
  if (!distinct) throw ConfigError("augment_random_pairing: needs at least two distinct prompts");
  const auto n_aug = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(pairs.size())));
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; i < n_aug; ++i) std::swap(order[i], order[i + uniform_index(rng, order.size() - i)]);
  for (std::size_t a = 0; a < n_aug; ++a) {
    const std::size_t i = order[a];
    std::size_t j;
    do {
      j = uniform_index(rng, pairs.size());
    } while (pairs[j].prompt == pairs[i].prompt);
    PreferencePair p;
    p.prompt = pairs[i].prompt;
    p.preferred = pairs[i].dispreferred;
    p.dispreferred = pairs[j].preferred;
    p.source = PairSource::Augmented;
    p.extra["augmented_from"] = {i, j};
    out.push_back(std::move(p));
  }
  return out;
}

/// Keeps example i when theta1 < mean_conf_i < theta2 (band mode,
/// theta1 < theta2) or when mean_conf_i < theta1 or mean_conf_i > theta2
/// (exclusion mode, theta1 >= theta2). Input order is kept.
inline std::vector<PreferencePair> confidence_truncate(const std::vector<PreferencePair>& pairs,
                                                       const TrainingTrace& trace, double theta1, double theta2) {
  if (trace.num_examples() != pairs.size())
    throw ConfigError("confidence_truncate: trace covers " + std::to_string(trace.num_examples()) +
                      " examples, dataset has " + std::to_string(pairs.size()));
  std::vector<PreferencePair> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double c = mean_confidence(trace, i);
    const bool keep = theta1 < theta2 ? (theta1 < c && c < theta2) : (c < theta1 || c > theta2);
    if (keep) out.push_back(pairs[i]);
  }
  if (out.empty()) throw ConfigError("confidence_truncate: no examples retained");
  return out;
}

// ---------------------------------------------------------------------------
// Training.

struct RmResult {
  RewardModel model;
  TrainingTrace trace;
  std::vector<PreferencePair> train;  // the train split actually used
};

namespace detail {

inline std::vector<double> confidences(const RewardModel& rm, const std::vector<PreferencePair>& pairs) {
  std::vector<double> c(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i)
    c[i] = rm.score(pairs[i].prompt, pairs[i].preferred) - rm.score(pairs[i].prompt, pairs[i].dispreferred);
  return c;
}

}  // namespace detail

/// Mean Bradley-Terry loss over a batch; accumulates gradients when asked.
inline double bt_batch_loss(RewardModel& rm, std::span<const PreferencePair* const> batch, bool with_grad) {
  RewardModel::Cache cp, cm;
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto* p : batch) {
    const double rp = rm.forward(p->prompt.ids, p->preferred.body(), &cp);
    const double rn = rm.forward(p->prompt.ids, p->dispreferred.body(), &cm);
    total += bt_loss(rp, rn);
    if (with_grad) {
      const auto [gp, gn] = bt_loss_grad(rp, rn);
      rm.backward(cp, gp * inv);
      rm.backward(cm, gn * inv);
    }
  }
  return total * inv;
}

/// Minibatch Adam on the mean Bradley-Terry loss, no interventions.
inline RmResult train_rm_plain(const std::vector<PreferencePair>& train, std::span<const PreferencePair> eval,
                               const RmTrainConfig& cfg, Rng& rng) {
  cfg.validate();
  if (train.empty()) throw ConfigError("train_rm: empty train split");
  RmResult res{RewardModel::random(cfg.model, rng), {}, train};
  auto& rm = res.model;
  nnet::Adam opt(rm.params().values().size(), {cfg.lr});
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<const PreferencePair*> batch;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k)
        batch.push_back(&train[order[k]]);
      rm.params().zero_grad();
      const double loss = bt_batch_loss(rm, batch, true);
      if (!std::isfinite(loss) || !rm.params().grads_finite())
        throw TrainingError("train_rm: non-finite loss at epoch " + std::to_string(epoch));
      opt.step(rm.params().values(), rm.params().grads());
    }
    res.trace.confidence.push_back(detail::confidences(rm, train));
    res.trace.eval_accuracy.push_back(eval.empty() ? 0.0 : eval_accuracy(rm, eval));
  }
  return res;
}

/// Applies the configured intervention to the train split, then trains.
/// C-TR trains a preliminary model on the full train split, keeps the band
/// of mean confidence given by theta1/theta2, and retrains on it.
inline RmResult train_rm(const std::vector<PreferencePair>& train, std::span<const PreferencePair> eval,
                         const RmTrainConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<PreferencePair> used;
  switch (cfg.intervention) {
    case RmIntervention::None: used = train; break;
    case RmIntervention::Balance: used = balance_by_length(train, cfg.bin_width, rng); break;
    case RmIntervention::RandomPairing: used = augment_random_pairing(train, cfg.augment_fraction, rng); break;
    case RmIntervention::ConfidenceTruncation: {
      auto prelim = train_rm_plain(train, eval, cfg, rng);
      double lo = cfg.theta1, hi = cfg.theta2;
      if (cfg.theta_mode == ThresholdMode::Quantile) {
        const auto means = mean_confidences(prelim.trace);
        lo = quantile(means, cfg.theta1);
        hi = quantile(means, cfg.theta2);
      }
      used = confidence_truncate(train, prelim.trace, lo, hi);
      break;
    }
  }
  if (used.empty()) throw ConfigError("train_rm: train split is empty after " +
                                      std::string(intervention_name(cfg.intervention)));
  return train_rm_plain(used, eval, cfg, rng);
}

/// Splits `dataset` by cfg.eval_fraction, then trains on the train split.
inline std::pair<RmResult, std::vector<PreferencePair>> train_rm(const std::vector<PreferencePair>& dataset,
                                                                 const RmTrainConfig& cfg, Rng& rng) {
  auto split = split_dataset(dataset, cfg.eval_fraction, rng);
  auto res = train_rm(split.train, split.eval, cfg, rng);
  return {std::move(res), std::move(split.eval)};
}

/// Single-line eval record.
inline std::string eval_report(double accuracy, std::size_t epochs, std::size_t n_train, std::size_t n_eval,
                               RmIntervention intervention) {
  nlohmann::ordered_json j;
  j["accuracy"] = accuracy;
  j["epochs"] = epochs;
  j["n_train"] = n_train;
  j["n_eval"] = n_eval;
  j["intervention"] = intervention_name(intervention);
  return j.dump();
}

}  // namespace lengthlab::rmlab
