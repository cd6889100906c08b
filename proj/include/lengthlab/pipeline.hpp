#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lengthlab/analysis.hpp"
#include "lengthlab/corpus.hpp"
#include "lengthlab/nnet/checkpoint.hpp"
#include "lengthlab/nnet/lm.hpp"
#include "lengthlab/ppolab.hpp"
#include "lengthlab/rmlab.hpp"

namespace lengthlab::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "0.1.0";
inline const std::vector<std::string> kStages = {"gen-data", "sft", "rm", "ppo", "analyze"};

// Config.

struct SftConfig {
  std::size_t steps = 1500;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::size_t length_samples = 500;  // samples used to measure the SFT mean length
};

struct AnalysisConfig {
  std::size_t num_prompts = 500;
  std::size_t bucket_width = 20;
  std::size_t within_batch_k = 8;
  std::size_t within_batch_prompts = 200;
  std::size_t cartography_bins = 5;
  std::size_t heatmap_reward_bins = 10;
  double judge_gamma = 0.05;
  std::size_t bootstrap_resamples = 10000;
};

struct ExperimentConfig {
  std::string run_name = "run";
  std::uint64_t seed = 1;
  std::size_t topics = 6, info_per_topic = 5, fillers = 16;
  CorpusConfig corpus;
  double eval_fraction = 0.1;
  nnet::PolicyConfig policy;  // vocab ids and max_positions are filled from the vocab / decode
  std::size_t rm_d_emb = 16, rm_d_hidden = 32;
  SftConfig sft;
  rmlab::RmTrainConfig rm;
  ppolab::PpoConfig ppo;
  bool target_length_set = false;
  double target_length_factor = 1.5;
  bool penalty_max_length_set = false;
  double penalty_factor = 1.5;
  std::optional<double> omit_long_factor;
  AnalysisConfig analysis;

  Vocab vocab() const {
    return Vocab::standard(static_cast<int>(topics), static_cast<int>(info_per_topic), static_cast<int>(fillers));
  }

  void validate() const {
    if (run_name.empty() || run_name.front() == '.' ||
        run_name.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-") !=
            std::string::npos)
      throw ConfigError("run_name: must be non-empty, use only [A-Za-z0-9._-] and not start with '.'");
    (void)vocab();
    corpus.validate(ppo.decode.max_len);
    if (!(eval_fraction > 0.0 && eval_fraction < 0.5)) throw ConfigError("corpus.eval_fraction: must be in (0, 0.5)");
    if (sft.steps < 1 || sft.batch_size < 1 || !(sft.lr > 0.0)) throw ConfigError("sft: steps, batch_size, lr must be positive");
    if (sft.length_samples < 1) throw ConfigError("sft.length_samples: must be >= 1");
    if (policy.context < 1 || policy.d_emb < 1 || policy.d_hidden < 1) throw ConfigError("policy: dimensions must be >= 1");
    if (rm_d_emb < 1 || rm_d_hidden < 1) throw ConfigError("rm: dimensions must be >= 1");
    rm.validate();
    ppo.validate();
    if (!(target_length_factor > 0.0)) throw ConfigError("ppo.target_length_factor: must be > 0");
    if (!(penalty_factor > 0.0)) throw ConfigError("ppo.penalty_factor: must be > 0");
    if (omit_long_factor && !(*omit_long_factor > 0.0)) throw ConfigError("ppo.omit_long_factor: must be > 0");
    if (analysis.num_prompts < 1) throw ConfigError("analysis.num_prompts: must be >= 1");
    if (analysis.bucket_width < 1) throw ConfigError("analysis.bucket_width: must be >= 1");
    if (analysis.within_batch_k < 2) throw ConfigError("analysis.within_batch_k: must be >= 2");
    if (analysis.within_batch_prompts < 1) throw ConfigError("analysis.within_batch_prompts: must be >= 1");
    if (analysis.cartography_bins < 2) throw ConfigError("analysis.cartography_bins: must be >= 2");
    if (analysis.heatmap_reward_bins < 1) throw ConfigError("analysis.heatmap_reward_bins: must be >= 1");
    if (analysis.bootstrap_resamples < 1) throw ConfigError("analysis.bootstrap_resamples: must be >= 1");
  }

  nnet::PolicyConfig policy_config(const Vocab& v) const {
    auto c = policy;
    c.vocab_size = v.size();
    c.bos = v.bos();
    c.eos = v.eos();
    c.pad = v.pad();
    c.max_positions = ppo.decode.max_len;
    return c;
  }

  nnet::ScalarConfig rm_config(const Vocab& v) const {
    nnet::ScalarConfig c;
    c.vocab_size = v.size();
    c.pad = v.pad();
    c.d_emb = rm_d_emb;
    c.d_hidden = rm_d_hidden;
    c.window = ppo.decode.max_len;
    return c;
  }

  /// Fills length targets given as factors of the SFT mean length.
  ppolab::PpoConfig resolve_ppo(double sft_mean_len) const {
    auto c = ppo;
    auto scaled = [&](double f) { return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(f * sft_mean_len))); };
    if (!target_length_set) c.target_length = scaled(target_length_factor);
    if (!penalty_max_length_set) c.penalty_max_length = scaled(penalty_factor);
    if (omit_long_factor) c.omit_long = scaled(*omit_long_factor);
    return c;
  }

  bool standard_ppo() const {
    return ppo.reward == ppolab::RewardSource::RM && !ppo.omit_long && !omit_long_factor && ppo.kl_coef == 0.04;
  }
};

/// Name of the PPO variant in reports.
inline std::string variant_name(const ExperimentConfig& c) {
  std::string name;
  switch (c.ppo.reward) {
    case ppolab::RewardSource::RM: name = "PPO"; break;
    case ppolab::RewardSource::LengthOnly: name = "LPPO"; break;
    case ppolab::RewardSource::RmPlusLengthPenalty: name = "PPO-PENALIZE-LENGTH"; break;
    case ppolab::RewardSource::RmScaled: name = "PPO-REWARD-SCALING"; break;
  }
  if (c.ppo.omit_long || c.omit_long_factor) name += "-OMIT-LONG";
  if (c.ppo.kl_coef != 0.04) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "-KL%g", c.ppo.kl_coef);
    name += buf;
  }
  if (c.rm.intervention != rmlab::RmIntervention::None)
    name += std::string("-RM-") + rmlab::intervention_name(c.rm.intervention);
  return name;
}

namespace detail {

/// Typed, strict access to one JSON object; unknown keys are errors.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where("") + "expected an object");
  }

  bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where(key) + "expected true/false");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where(key) + "expected a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where(key) + "expected a number");
      out = v.get<double>();
    } else {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ConfigError(where(key) + "expected a non-negative integer");
      out = static_cast<T>(v.get<std::uint64_t>());
    }
  }

  template <class T>
  bool read_opt(const char* key, std::optional<T>& out) {
    T v{};
    const bool present = has(key);
    read(key, v);
    if (present) out = v;
    return present;
  }

  Section sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(has(key) ? j_.at(key) : empty, path_.empty() ? key : path_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where(k.c_str()) + "unknown field");
  }

  std::string where(const char* key) const {
    std::string p = path_;
    if (*key) p += (p.empty() ? "" : ".") + std::string(key);
    return (p.empty() ? "config" : p) + ": ";
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  detail::Section root(j, "");
  root.read("run_name", c.run_name);
  root.read("seed", c.seed);

  auto v = root.sub("vocab");
  v.read("topics", c.topics);
  v.read("info_per_topic", c.info_per_topic);
  v.read("fillers", c.fillers);
  v.finish();

  auto co = root.sub("corpus");
  co.read("num_prompts", c.corpus.num_prompts);
  co.read("responses_per_prompt", c.corpus.responses_per_prompt);
  co.read("info_weight", c.corpus.info_weight);
  co.read("length_bias", c.corpus.length_bias);
  co.read("noise_std", c.corpus.noise_std);
  co.read("min_len", c.corpus.min_len);
  co.read("max_len", c.corpus.max_len);
  co.read("eval_fraction", c.eval_fraction);
  co.finish();

  auto po = root.sub("policy");
  po.read("context", c.policy.context);
  po.read("d_emb", c.policy.d_emb);
  po.read("d_hidden", c.policy.d_hidden);
  po.finish();

  auto sf = root.sub("sft");
  sf.read("steps", c.sft.steps);
  sf.read("batch_size", c.sft.batch_size);
  sf.read("lr", c.sft.lr);
  sf.read("length_samples", c.sft.length_samples);
  sf.finish();

  auto rm = root.sub("rm");
  rm.read("epochs", c.rm.epochs);
  rm.read("batch_size", c.rm.batch_size);
  rm.read("lr", c.rm.lr);
  rm.read("d_emb", c.rm_d_emb);
  rm.read("d_hidden", c.rm_d_hidden);
  std::string s;
  rm.read("intervention", s);
  if (!s.empty()) {
    try {
      c.rm.intervention = rmlab::parse_intervention(s);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(e.what()));
    }
  }
  rm.read("bin_width", c.rm.bin_width);
  rm.read("augment_fraction", c.rm.augment_fraction);
  s.clear();
  rm.read("theta_mode", s);
  if (s == "absolute") c.rm.theta_mode = rmlab::ThresholdMode::Absolute;
  else if (s == "quantile" || s.empty()) c.rm.theta_mode = rmlab::ThresholdMode::Quantile;
  else throw ConfigError("rm.theta_mode: expected 'quantile' or 'absolute', got '" + s + "'");
  rm.read("theta1", c.rm.theta1);
  rm.read("theta2", c.rm.theta2);
  rm.finish();

  auto pp = root.sub("ppo");
  pp.read("kl_coef", c.ppo.kl_coef);
  pp.read("batch_size", c.ppo.batch_size);
  pp.read("steps", c.ppo.steps);
  pp.read("clip", c.ppo.clip);
  pp.read("value_coef", c.ppo.value_coef);
  pp.read("lr", c.ppo.lr);
  pp.read("value_lr", c.ppo.value_lr);
  s.clear();
  pp.read("reward", s);
  if (!s.empty()) c.ppo.reward = ppolab::parse_reward_source(s);
  c.target_length_set = pp.has("target_length");
  pp.read("target_length", c.ppo.target_length);
  pp.read("target_length_factor", c.target_length_factor);
  c.penalty_max_length_set = pp.has("penalty_max_length");
  pp.read("penalty_max_length", c.ppo.penalty_max_length);
  pp.read("penalty_factor", c.penalty_factor);
  pp.read("stats_window", c.ppo.stats_window);
  pp.read_opt("omit_long", c.ppo.omit_long);
  pp.read_opt("omit_long_factor", c.omit_long_factor);
  if (c.ppo.omit_long && c.omit_long_factor) throw ConfigError("ppo.omit_long: give either omit_long or omit_long_factor");
  pp.read("checkpoint_every", c.ppo.checkpoint_every);
  pp.finish();

  auto de = root.sub("decode");
  de.read("top_p", c.ppo.decode.top_p);
  de.read("temperature", c.ppo.decode.temperature);
  de.read("repetition_penalty", c.ppo.decode.repetition_penalty);
  de.read("max_len", c.ppo.decode.max_len);
  de.finish();

  auto an = root.sub("analysis");
  an.read("num_prompts", c.analysis.num_prompts);
  an.read("bucket_width", c.analysis.bucket_width);
  an.read("within_batch_k", c.analysis.within_batch_k);
  an.read("within_batch_prompts", c.analysis.within_batch_prompts);
  an.read("cartography_bins", c.analysis.cartography_bins);
  an.read("heatmap_reward_bins", c.analysis.heatmap_reward_bins);
  an.read("judge_gamma", c.analysis.judge_gamma);
  an.read("bootstrap_resamples", c.analysis.bootstrap_resamples);
  an.finish();

  root.finish();
  c.rm.eval_fraction = c.eval_fraction;
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

/// Normalised snapshot; every effective value is spelled out.
inline ordered_json config_to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["run_name"] = c.run_name;
  j["seed"] = c.seed;
  j["vocab"] = {{"topics", c.topics}, {"info_per_topic", c.info_per_topic}, {"fillers", c.fillers}};
  j["corpus"] = {{"num_prompts", c.corpus.num_prompts},   {"responses_per_prompt", c.corpus.responses_per_prompt},
                 {"info_weight", c.corpus.info_weight},   {"length_bias", c.corpus.length_bias},
                 {"noise_std", c.corpus.noise_std},       {"min_len", c.corpus.min_len},
                 {"max_len", c.corpus.max_len},           {"eval_fraction", c.eval_fraction}};
  j["policy"] = {{"context", c.policy.context}, {"d_emb", c.policy.d_emb}, {"d_hidden", c.policy.d_hidden}};
  j["sft"] = {{"steps", c.sft.steps}, {"batch_size", c.sft.batch_size}, {"lr", c.sft.lr},
              {"length_samples", c.sft.length_samples}};
  j["rm"] = {{"epochs", c.rm.epochs},
             {"batch_size", c.rm.batch_size},
             {"lr", c.rm.lr},
             {"d_emb", c.rm_d_emb},
             {"d_hidden", c.rm_d_hidden},
             {"intervention", rmlab::intervention_name(c.rm.intervention)},
             {"bin_width", c.rm.bin_width},
             {"augment_fraction", c.rm.augment_fraction},
             {"theta_mode", c.rm.theta_mode == rmlab::ThresholdMode::Quantile ? "quantile" : "absolute"},
             {"theta1", c.rm.theta1},
             {"theta2", c.rm.theta2}};
  ordered_json p;
  p["kl_coef"] = c.ppo.kl_coef;
  p["batch_size"] = c.ppo.batch_size;
  p["steps"] = c.ppo.steps;
  p["clip"] = c.ppo.clip;
  p["value_coef"] = c.ppo.value_coef;
  p["lr"] = c.ppo.lr;
  p["value_lr"] = c.ppo.value_lr;
  p["reward"] = ppolab::reward_source_name(c.ppo.reward);
  if (c.target_length_set) p["target_length"] = c.ppo.target_length;
  else p["target_length_factor"] = c.target_length_factor;
  if (c.penalty_max_length_set) p["penalty_max_length"] = c.ppo.penalty_max_length;
  else p["penalty_factor"] = c.penalty_factor;
  p["stats_window"] = c.ppo.stats_window;
  if (c.ppo.omit_long) p["omit_long"] = *c.ppo.omit_long;
  if (c.omit_long_factor) p["omit_long_factor"] = *c.omit_long_factor;
  p["checkpoint_every"] = c.ppo.checkpoint_every;
  j["ppo"] = p;
  j["decode"] = {{"top_p", c.ppo.decode.top_p},
                 {"temperature", c.ppo.decode.temperature},
                 {"repetition_penalty", c.ppo.decode.repetition_penalty},
                 {"max_len", c.ppo.decode.max_len}};
  j["analysis"] = {{"num_prompts", c.analysis.num_prompts},
                   {"bucket_width", c.analysis.bucket_width},
                   {"within_batch_k", c.analysis.within_batch_k},
                   {"within_batch_prompts", c.analysis.within_batch_prompts},
                   {"cartography_bins", c.analysis.cartography_bins},
                   {"heatmap_reward_bins", c.analysis.heatmap_reward_bins},
                   {"judge_gamma", c.analysis.judge_gamma},
                   {"bootstrap_resamples", c.analysis.bootstrap_resamples}};
  return j;
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Hash of the normalised config without the seed.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
  auto j = config_to_json(c);
  j.erase("seed");
  return fnv1a(j.dump());
}

/// Sub-seed for a stage: seed + fnv1a(stage name).
inline std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) { return seed + fnv1a(stage); }

inline fs::path runs_root() {
  const char* env = std::getenv("LENGTHLAB_RUNS");
  return env && *env ? fs::path(env) : fs::path("runs");
}

inline std::string run_dir_name(const ExperimentConfig& c) {
  return c.run_name + "-" + hex64(config_hash(c)).substr(0, 8) + "-s" + std::to_string(c.seed);
}

// Files.

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Write to a temporary sibling, then rename over the target.
inline void write_file_atomic(const fs::path& p, const std::string& content) {
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << content;
    if (!out.flush()) throw Error("write failed for " + tmp);
  }
  fs::rename(tmp, p);
}

inline std::string file_hash(const fs::path& p) { return hex64(fnv1a(read_file(p))); }

/// Exclusive lock file held for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(fs::path dir) : path_(std::move(dir) / ".lock") {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw Error("run directory is locked (remove " + path_.string() + " if no other process is running)");
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

// Output tables.

inline std::string outputs_csv(const std::vector<analysis::ScoredOutput>& outs) {
  std::ostringstream out;
  out << "prompt_id,len,reward,response\n";
  char buf[64];
  for (const auto& o : outs) {
    std::snprintf(buf, sizeof buf, "%.10g", o.reward);
    out << o.prompt_id << ',' << o.len << ',' << buf << ',';
    for (std::size_t i = 0; i < o.response.ids.size(); ++i) out << (i ? " " : "") << o.response.ids[i];
    out << '\n';
  }
  return out.str();
}

inline std::vector<analysis::ScoredOutput> read_outputs_csv(const fs::path& p, const std::string& system) {
  std::istringstream in(read_file(p));
  std::string line;
  std::getline(in, line);
  if (line != "prompt_id,len,reward,response") throw ParseError(1, p.string() + ": bad header");
  std::vector<analysis::ScoredOutput> outs;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f[4];
    for (int k = 0; k < 3; ++k)
      if (!std::getline(ls, f[k], ',')) throw ParseError(lineno, p.string() + ": too few fields");
    std::getline(ls, f[3]);
    analysis::ScoredOutput o;
    try {
      o.prompt_id = std::stoul(f[0]);
      o.len = std::stoul(f[1]);
      o.reward = std::stod(f[2]);
    } catch (const std::exception&) {
      throw ParseError(lineno, p.string() + ": bad number");
    }
    std::istringstream ids(f[3]);
    TokenId t;
    while (ids >> t) o.response.ids.push_back(t);
    o.response.role = Role::Response;
    o.system = system;
    outs.push_back(std::move(o));
  }
  return outs;
}

/// Distinct prompts in first-seen order.
inline std::vector<TokenSequence> unique_prompts(const std::vector<PreferencePair>& pairs) {
  std::vector<TokenSequence> out;
  std::set<std::vector<TokenId>> seen;
  for (const auto& p : pairs)
    if (seen.insert(p.prompt.ids).second) out.push_back(p.prompt);
  return out;
}

inline double mean_len(const std::vector<analysis::ScoredOutput>& o) {
  double s = 0.0;
  for (const auto& x : o) s += static_cast<double>(x.len);
  return o.empty() ? 0.0 : s / static_cast<double>(o.size());
}

inline double mean_reward(const std::vector<analysis::ScoredOutput>& o) {
  double s = 0.0;
  for (const auto& x : o) s += x.reward;
  return o.empty() ? 0.0 : s / static_cast<double>(o.size());
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string fmt(std::optional<double> v) { return v ? fmt(*v) : std::string("undefined"); }

struct WinrateRow {
  std::string system_a, system_b, judge;
  analysis::JudgeVerdict verdict;
};

inline std::string winrate_csv(const std::vector<WinrateRow>& rows) {
  std::ostringstream out;
  out << "system_a,system_b,judge,n,win_rate,p_value,significant\n";
  for (const auto& r : rows)
    out << r.system_a << ',' << r.system_b << ',' << r.judge << ',' << r.verdict.n() << ',' << fmt(r.verdict.win_rate)
        << ',' << fmt(r.verdict.p_value) << ',' << (r.verdict.p_value < 0.05 ? "yes" : "no") << '\n';
  return out.str();
}

// Runner.

/// Executes stages in a run directory `<root>/<run_name>-<hash8>-s<seed>`.
/// Each stage records its output files and their hashes in manifest.json
/// and reads upstream files only through the manifest.
class Runner {
 public:
  Runner(ExperimentConfig cfg, fs::path root, bool force = false, std::ostream* log = &std::cerr)
      : cfg_(std::move(cfg)), dir_(std::move(root) / run_dir_name(cfg_)), force_(force), log_(log) {
    cfg_.validate();
  }

  const fs::path& run_dir() const noexcept { return dir_; }
  const ExperimentConfig& config() const noexcept { return cfg_; }

  void run(const std::vector<std::string>& stages) {
    for (const auto& s : stages)
      if (std::find(kStages.begin(), kStages.end(), s) == kStages.end())
        throw ConfigError("--stages: unknown stage '" + s + "'");
    fs::create_directories(dir_);
    RunLock lock(dir_);
    load_manifest();
    for (const auto& s : kStages) {
      if (std::find(stages.begin(), stages.end(), s) == stages.end()) continue;
      if (s == "gen-data") gen_data();
      if (s == "sft") sft();
      if (s == "rm") rm();
      if (s == "ppo") ppo();
      if (s == "analyze") analyze();
    }
  }

  /// Length-heuristic accuracy of the generated data (set by gen-data).
  std::optional<double> heuristic_accuracy() const { return heuristic_; }

  json manifest() const { return manifest_; }

 private:
  // Manifest.

  void load_manifest() {
    const auto p = dir_ / "manifest.json";
    if (fs::exists(p)) {
      manifest_ = json::parse(read_file(p));
    } else {
      manifest_ = json::object();
      manifest_["tool_version"] = kToolVersion;
      manifest_["config"] = config_to_json(cfg_);
      manifest_["stages"] = json::object();
      save_manifest();
    }
  }

  void save_manifest() { write_file_atomic(dir_ / "manifest.json", manifest_.dump(2) + "\n"); }

  /// Path of `file` recorded by `stage`, verified on disk.
  fs::path need(const std::string& stage, const std::string& file) const {
    const auto& st = manifest_.at("stages");
    if (!st.contains(stage) || !st.at(stage).at("files").contains(file))
      throw DependencyError(stage, "missing dependency: stage '" + stage + "' has not produced " + file +
                                       " (run it first)");
    const auto p = dir_ / file;
    if (!fs::exists(p) || file_hash(p) != st.at(stage).at("files").at(file).get<std::string>())
      throw DependencyError(stage, "missing dependency: " + file + " from stage '" + stage +
                                       "' is missing or modified; rerun that stage");
    return p;
  }

  bool has_file(const std::string& stage, const std::string& file) const {
    const auto& st = manifest_.at("stages");
    return st.contains(stage) && st.at(stage).at("files").contains(file);
  }

  std::string inputs_key(const std::vector<std::string>& upstream) const {
    std::string key = hex64(config_hash(cfg_)) + ":" + std::to_string(cfg_.seed);
    for (const auto& s : upstream) key += "|" + s + "=" + manifest_.at("stages").at(s).at("files").dump();
    return hex64(fnv1a(key));
  }

  bool up_to_date(const std::string& stage, const std::string& key) const {
    if (force_) return false;
    const auto& st = manifest_.at("stages");
    if (!st.contains(stage) || st.at(stage).value("inputs", "") != key) return false;
    for (const auto& [f, h] : st.at(stage).at("files").items())
      if (!fs::exists(dir_ / f) || file_hash(dir_ / f) != h.get<std::string>()) return false;
    *log_ << "[" << stage << "] up to date, skipping (use --force to rerun)\n";
    return true;
  }

  void emit(const std::string& file, const std::string& content) {
    write_file_atomic(dir_ / file, content);
    pending_[file] = hex64(fnv1a(content));
  }

  void record(const std::string& stage, const std::string& key) {
    json files = json::object();
    for (const auto& [f, h] : pending_) files[f] = h;
    pending_.clear();
    manifest_["stages"][stage] = {{"inputs", key}, {"files", files}};
    // Downstream records are stale once an upstream stage is rewritten.
    bool after = false;
    for (const auto& s : kStages) {
      if (after) manifest_["stages"].erase(s);
      if (s == stage) after = true;
    }
    save_manifest();
  }

  // Stages.

  void gen_data() {
    const auto key = inputs_key({});
    if (up_to_date("gen-data", key)) {
      heuristic_ = manifest_["stages"]["gen-data"].value("heuristic_accuracy", 0.0);
      return;
    }
    const auto vocab = cfg_.vocab();
    auto cc = cfg_.corpus;
    cc.seed = stage_seed(cfg_.seed, "gen-data");
    CorpusGenerator gen(vocab, cc, cfg_.ppo.decode.max_len);
    const auto pairs = gen.generate();
    Rng rng(stage_seed(cfg_.seed, "split"));
    const auto split = split_dataset(pairs, cfg_.eval_fraction, rng);
    heuristic_ = pairs.empty() ? 0.5 : analysis::length_heuristic_accuracy(pairs);
    emit("vocab.txt", vocab.serialize());
    emit("train.jsonl", serialize_dataset(split.train));
    emit("eval.jsonl", serialize_dataset(split.eval));
    ordered_json s;
    s["pairs"] = pairs.size();
    s["train"] = split.train.size();
    s["eval"] = split.eval.size();
    s["length_heuristic_accuracy"] = *heuristic_;
    s["length_bias"] = cc.length_bias;
    emit("data_summary.json", s.dump(2) + "\n");
    *log_ << "[gen-data] " << pairs.size() << " pairs, length-heuristic accuracy " << fmt(*heuristic_) << "\n";
    record("gen-data", key);
    manifest_["stages"]["gen-data"]["heuristic_accuracy"] = *heuristic_;
    save_manifest();
  }

  Vocab load_vocab() const { return Vocab::read(need("gen-data", "vocab.txt").string()); }

  void sft() {
    need("gen-data", "train.jsonl");
    const auto key = inputs_key({"gen-data"});
    if (up_to_date("sft", key)) return;
    const auto vocab = load_vocab();
    const auto train = read_dataset(need("gen-data", "train.jsonl").string());
    if (train.empty()) throw ConfigError("sft: empty train split");
    std::vector<nnet::SftExample> examples;
    for (const auto& p : train) {
      examples.push_back({&p.prompt, &p.preferred});
      examples.push_back({&p.prompt, &p.dispreferred});
    }
    Rng rng(stage_seed(cfg_.seed, "sft"));
    auto policy = nnet::PolicyModel::random(cfg_.policy_config(vocab), rng);
    nnet::Adam opt(policy.params().values().size(), {cfg_.sft.lr});
    std::vector<nnet::SftExample> batch;
    double loss = 0.0;
    for (std::size_t step = 1; step <= cfg_.sft.steps; ++step) {
      batch.clear();
      for (std::size_t i = 0; i < cfg_.sft.batch_size; ++i) batch.push_back(examples[uniform_index(rng, examples.size())]);
      loss = nnet::sft_step(policy, opt, batch);
    }
    const auto prompts = unique_prompts(train);
    double len = 0.0;
    for (std::size_t i = 0; i < cfg_.sft.length_samples; ++i)
      len += static_cast<double>(
          nnet::sample_sequence(policy, prompts[i % prompts.size()], cfg_.ppo.decode, rng).response.len());
    len /= static_cast<double>(cfg_.sft.length_samples);
    emit("sft.ckpt", nnet::serialize_checkpoint(policy));
    ordered_json s;
    s["final_loss"] = loss;
    s["mean_len"] = len;
    emit("sft_stats.json", s.dump(2) + "\n");
    *log_ << "[sft] final loss " << fmt(loss) << ", mean length " << fmt(len) << "\n";
    record("sft", key);
  }

  void rm() {
    need("gen-data", "train.jsonl");
    const auto key = inputs_key({"gen-data"});
    if (up_to_date("rm", key)) return;
    const auto vocab = load_vocab();
    const auto train = read_dataset(need("gen-data", "train.jsonl").string());
    const auto eval = read_dataset(need("gen-data", "eval.jsonl").string());
    auto rc = cfg_.rm;
    rc.model = cfg_.rm_config(vocab);
    Rng rng(stage_seed(cfg_.seed, "rm"));
    const auto res = rmlab::train_rm(train, eval, rc, rng);
    const double acc = res.trace.eval_accuracy.back();
    emit("rm.ckpt", nnet::serialize_checkpoint(res.model));
    emit("rm_trace.csv", res.trace.to_csv());
    emit("rm_train.jsonl", serialize_dataset(res.train));
    emit("rm_eval.json", rmlab::eval_report(acc, rc.epochs, res.train.size(), eval.size(), rc.intervention) + "\n");
    *log_ << "[rm] " << rmlab::intervention_name(rc.intervention) << " trained on " << res.train.size()
          << " pairs, eval accuracy " << fmt(acc) << "\n";
    record("rm", key);
  }

  double sft_mean_len() const {
    return json::parse(read_file(need("sft", "sft_stats.json"))).at("mean_len").get<double>();
  }

  void ppo() {
    need("sft", "sft.ckpt");
    need("rm", "rm.ckpt");
    const auto key = inputs_key({"gen-data", "sft", "rm"});
    if (up_to_date("ppo", key)) return;
    const auto sft = nnet::load_checkpoint<nnet::PolicyModel>(need("sft", "sft.ckpt").string());
    const auto rm = nnet::load_checkpoint<nnet::RewardModel>(need("rm", "rm.ckpt").string());
    const auto prompts = unique_prompts(read_dataset(need("gen-data", "train.jsonl").string()));
    const ppolab::RewardFn score = [&rm](const TokenSequence& p, const TokenSequence& y) { return rm.score(p, y); };
    const double base_len = sft_mean_len();

    auto train_one = [&](const ppolab::PpoConfig& pc, const std::string& prefix, const std::string& stream) {
      Rng rng(stage_seed(cfg_.seed, stream));
      ppolab::PpoHooks hooks;
      hooks.on_checkpoint = [&](std::size_t step, const nnet::PolicyModel& m) {
        emit(prefix + "_step" + std::to_string(step) + ".ckpt", nnet::serialize_checkpoint(m));
      };
      auto run = ppolab::run_ppo(sft, prompts, score, pc, rng, hooks);
      emit(prefix + ".ckpt", nnet::serialize_checkpoint(run.policy));
      emit(prefix + "_timeline.csv", ppolab::timeline_csv(run.timeline));
      if (!run.errors.empty()) {
        std::string e;
        for (const auto& s : run.errors) e += s + "\n";
        emit(prefix + "_errors.txt", e);
      }
      const auto& last = run.timeline.back();
      *log_ << "[ppo] " << prefix << ": final mean length " << fmt(last.mean_len) << ", raw reward "
            << fmt(last.mean_raw_reward) << ", KL/token " << fmt(last.mean_kl) << ", skipped steps "
            << run.errors.size() << "\n";
    };
    const auto pc = cfg_.resolve_ppo(base_len);
    train_one(pc, "ppo", "ppo");
    if (!cfg_.standard_ppo()) {
      auto std_cfg = cfg_.ppo;
      std_cfg.reward = ppolab::RewardSource::RM;
      std_cfg.omit_long.reset();
      std_cfg.kl_coef = 0.04;
      train_one(std_cfg, "ppo_std", "ppo-std");
    }
    ordered_json info;
    info["variant"] = variant_name(cfg_);
    info["target_length"] = pc.target_length;
    info["penalty_max_length"] = pc.penalty_max_length;
    if (pc.omit_long) info["omit_long"] = *pc.omit_long;
    info["has_standard_baseline"] = !cfg_.standard_ppo();
    emit("ppo_info.json", info.dump(2) + "\n");
    record("ppo", key);
  }

  void analyze() {
    need("ppo", "ppo.ckpt");
    const auto key = inputs_key({"gen-data", "sft", "rm", "ppo"});
    if (up_to_date("analyze", key)) return;
    const auto vocab = load_vocab();
    const auto eval = read_dataset(need("gen-data", "eval.jsonl").string());
    const auto train = read_dataset(need("gen-data", "train.jsonl").string());
    const auto sft = nnet::load_checkpoint<nnet::PolicyModel>(need("sft", "sft.ckpt").string());
    const auto rm = nnet::load_checkpoint<nnet::RewardModel>(need("rm", "rm.ckpt").string());
    const auto trace = rmlab::TrainingTrace::from_csv(need("rm", "rm_trace.csv").string());
    const auto rm_train = read_dataset(need("rm", "rm_train.jsonl").string());
    const auto policy = nnet::load_checkpoint<nnet::PolicyModel>(need("ppo", "ppo.ckpt").string());
    std::optional<nnet::PolicyModel> baseline;
    if (has_file("ppo", "ppo_std.ckpt"))
      baseline = nnet::load_checkpoint<nnet::PolicyModel>(need("ppo", "ppo_std.ckpt").string());
    const double rm_acc = json::parse(read_file(need("rm", "rm_eval.json"))).at("accuracy").get<double>();

    auto prompts = unique_prompts(eval);
    if (prompts.size() > cfg_.analysis.num_prompts) prompts.resize(cfg_.analysis.num_prompts);
    const auto& A = cfg_.analysis;
    const auto& decode = cfg_.ppo.decode;
    auto score = [&rm](const TokenSequence& p, const TokenSequence& y) { return rm.score(p, y); };
    const auto variant = variant_name(cfg_);

    Rng rng(stage_seed(cfg_.seed, "analyze"));
    const auto out_sft = analysis::sample_and_score(sft, prompts, score, decode, rng, "SFT");
    const auto out_pol = analysis::sample_and_score(policy, prompts, score, decode, rng, variant);
    std::vector<analysis::ScoredOutput> out_std;
    if (baseline) out_std = analysis::sample_and_score(*baseline, prompts, score, decode, rng, "PPO");
    emit("outputs_sft.csv", outputs_csv(out_sft));
    emit("outputs_policy.csv", outputs_csv(out_pol));
    if (baseline) emit("outputs_std.csv", outputs_csv(out_std));

    const auto report = analysis::nrg(out_sft, out_pol, A.bucket_width);
    emit("bucket_report.csv", report.to_csv());

    const auto heat = analysis::length_reward_heatmap(out_sft, A.bucket_width, A.heatmap_reward_bins);
    emit("heatmap.csv", heat.to_csv());

    const auto wb_prompts = std::span<const TokenSequence>(prompts).first(std::min(prompts.size(), A.within_batch_prompts));
    const auto wb = analysis::within_batch_corr(score, sft, wb_prompts, A.within_batch_k, decode, rng);

    const auto bins = analysis::confidence_bins_vs_heuristic(trace, rm_train, A.cartography_bins);
    emit("cartography.csv", analysis::confidence_bins_csv(bins));
    emit("cartography_points.csv", analysis::cartography_points_csv(trace));

    CorpusConfig cc = cfg_.corpus;
    CorpusGenerator gen(vocab, cc, decode.max_len);
    const auto oracle = analysis::oracle_judge(gen);
    const auto biased = analysis::length_biased_judge(gen, A.judge_gamma);
    std::vector<WinrateRow> rows;
    for (const auto* judge : {&oracle, &biased}) {
      rows.push_back({variant, "SFT", judge->name,
                      analysis::judge_winrate(out_pol, out_sft, *judge, prompts, rng, A.bootstrap_resamples)});
      if (baseline)
        rows.push_back({variant, "PPO", judge->name,
                        analysis::judge_winrate(out_pol, out_std, *judge, prompts, rng, A.bootstrap_resamples)});
    }
    emit("winrate.csv", winrate_csv(rows));

    std::vector<std::pair<std::string, std::string>> kv = {
        {"variant", variant},
        {"length_heuristic_accuracy_train", fmt(analysis::length_heuristic_accuracy(train))},
        {"length_heuristic_accuracy_eval", fmt(analysis::length_heuristic_accuracy(eval))},
        {"rm_eval_accuracy", fmt(rm_acc)},
        {"within_batch_corr", fmt(wb.mean)},
        {"within_batch_prompts_used", std::to_string(wb.used)},
        {"within_batch_prompts_skipped", std::to_string(wb.skipped)},
        {"sft_mean_len", fmt(mean_len(out_sft))},
        {"sft_mean_reward", fmt(mean_reward(out_sft))},
        {"policy_mean_len", fmt(mean_len(out_pol))},
        {"policy_mean_reward", fmt(mean_reward(out_pol))},
        {"delta_r", fmt(report.delta_r)},
        {"nrg", fmt(report.nrg)},
        {"nrg_ratio", fmt(report.ratio)},
        {"nrg_excluded_fraction", fmt(report.excluded_fraction)},
        {"nrg_excluded_flag", report.excluded_flag() ? "yes" : "no"},
        {"heatmap_rank_corr", fmt(heat.rank_correlation())},
    };
    if (baseline) {
      kv.emplace_back("std_mean_len", fmt(mean_len(out_std)));
      kv.emplace_back("std_mean_reward", fmt(mean_reward(out_std)));
    }
    std::string summary = "key,value\n";
    for (const auto& [k, v] : kv) summary += k + "," + v + "\n";
    emit("summary.csv", summary);
    *log_ << "[analyze] " << variant << ": length " << fmt(mean_len(out_sft)) << " -> " << fmt(mean_len(out_pol))
          << ", NRG ratio " << fmt(report.ratio) << ", within-batch corr " << fmt(wb.mean) << "\n";
    record("analyze", key);
  }

  ExperimentConfig cfg_;
  fs::path dir_;
  bool force_;
  std::ostream* log_;
  json manifest_;
  std::map<std::string, std::string> pending_;
  std::optional<double> heuristic_;
};

// Compare.

/// Side-by-side report of two analysed runs; neither run is modified.
inline std::string compare_runs(const fs::path& a, const fs::path& b) {
  auto load = [](const fs::path& d) {
    const auto mp = d / "manifest.json";
    if (!fs::exists(mp)) throw DependencyError("analyze", "missing dependency: " + d.string() + " is not a run directory");
    auto m = json::parse(read_file(mp));
    if (!m["stages"].contains("analyze"))
      throw DependencyError("analyze", "missing dependency: run " + d.string() + " has not been analysed");
    return m;
  };
  const auto ma = load(a), mb = load(b);
  const auto va = read_file(a / "vocab.txt"), vb = read_file(b / "vocab.txt");
  if (fnv1a(va) != fnv1a(vb)) throw ConfigError("compare: runs use different vocabularies (vocab hash mismatch)");
  const auto cfg_a = config_from_json(ma["config"]);
  auto prompts_a = unique_prompts(read_dataset((a / "eval.jsonl").string()));
  auto prompts_b = unique_prompts(read_dataset((b / "eval.jsonl").string()));
  prompts_a.resize(std::min(prompts_a.size(), cfg_a.analysis.num_prompts));
  prompts_b.resize(std::min(prompts_b.size(), prompts_a.size()));
  if (prompts_a != prompts_b) throw ConfigError("compare: runs were evaluated on different prompts");

  const auto vocab = Vocab::read((a / "vocab.txt").string());
  CorpusGenerator gen(vocab, cfg_a.corpus, cfg_a.ppo.decode.max_len);
  const auto oracle = analysis::oracle_judge(gen);
  const auto biased = analysis::length_biased_judge(gen, cfg_a.analysis.judge_gamma);
  const std::string na = a.filename().string(), nb = b.filename().string();
  struct Sys {
    std::string name;
    std::vector<analysis::ScoredOutput> out;
  };
  const Sys pa{na + ":policy", read_outputs_csv(a / "outputs_policy.csv", "A")};
  const Sys pb{nb + ":policy", read_outputs_csv(b / "outputs_policy.csv", "B")};
  const Sys sb{nb + ":sft", read_outputs_csv(b / "outputs_sft.csv", "B")};

  std::ostringstream out;
  out << "system_a,system_b,judge,n,mean_len_a,mean_len_b,mean_reward_a,mean_reward_b,win_rate,p_value,significant\n";
  Rng rng(fnv1a(na + "|" + nb));
  for (const auto* other : {&pb, &sb})
    for (const auto* judge : {&oracle, &biased}) {
      const auto v = analysis::judge_winrate(pa.out, other->out, *judge, prompts_a, rng,
                                             cfg_a.analysis.bootstrap_resamples);
      out << pa.name << ',' << other->name << ',' << judge->name << ',' << v.n() << ',' << fmt(mean_len(pa.out)) << ','
          << fmt(mean_len(other->out)) << ',' << fmt(mean_reward(pa.out)) << ',' << fmt(mean_reward(other->out)) << ','
          << fmt(v.win_rate) << ',' << fmt(v.p_value) << ',' << (v.p_value < 0.05 ? "*" : "") << '\n';
    }
  return out.str();
}

}  // namespace lengthlab::pipeline
