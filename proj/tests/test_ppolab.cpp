#include <gtest/gtest.h>

#include <deque>

#include "fixtures.hpp"

using namespace lengthlab;
using namespace lengthlab::ppolab;
using nnet::PolicyModel;

namespace {

/// Shared SFT policy trained on corpus responses of 10-30 tokens.
struct World {
  Vocab vocab = Vocab::standard();
  std::vector<TokenSequence> prompts;
  std::optional<PolicyModel> sft;
  double sft_mean = 0.0;
};

double mean_sampled_len(const PolicyModel& m, const std::vector<TokenSequence>& prompts, std::size_t n, Rng& rng) {
  double s = 0.0;
  nnet::DecodeConfig d;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(nnet::sample_sequence(m, prompts[i % prompts.size()], d, rng).response.len());
  return s / static_cast<double>(n);
}

const World& world() {
  static const World w = [] {
    World w;
    CorpusConfig c;
    c.num_prompts = 1000;
    c.min_len = 12;
    c.max_len = 30;
    c.seed = 5;
    const auto pairs = CorpusGenerator(w.vocab, c).generate();
    std::vector<nnet::SftExample> ex;
    for (const auto& p : pairs) {
      ex.push_back({&p.prompt, &p.preferred});
      ex.push_back({&p.prompt, &p.dispreferred});
    }
    Rng rng(6);
    auto cfg = nnet::PolicyConfig::for_vocab(w.vocab);
    cfg.max_positions = 256;
    auto m = PolicyModel::random(cfg, rng);
    nnet::Adam opt(m.params().values().size(), {1e-3});
    std::vector<nnet::SftExample> batch;
    for (int s = 0; s < 1500; ++s) {
      batch.clear();
      for (int b = 0; b < 32; ++b) batch.push_back(ex[uniform_index(rng, ex.size())]);
      nnet::sft_step(m, opt, batch);
    }
    for (const auto& p : pairs) w.prompts.push_back(p.prompt);
    w.sft_mean = mean_sampled_len(m, w.prompts, 1000, rng);
    w.sft = std::move(m);
    return w;
  }();
  return w;
}

/// Tiny random policy over ids {BOS, EOS, PAD, 3..8}.
PolicyModel tiny_policy(Rng& rng, double sd = 0.5) {
  auto m = PolicyModel::random(fixtures::policy_config(9, 2, 3, 4, 16), rng);
  for (std::size_t i = 0; i < m.params().slices().size(); ++i) m.params().fill_gaussian(i, sd, rng);
  return m;
}

nnet::ValueModel tiny_value(Rng& rng) {
  nnet::ScalarConfig c;
  c.vocab_size = 9;
  c.pad = 2;
  c.d_emb = 3;
  c.d_hidden = 4;
  c.window = 17;
  c.length_feature = true;
  return nnet::ValueModel::random(c, rng);
}

RolloutSample sample_of_len(std::size_t len, double reward = 0.0) {
  RolloutSample s;
  s.prompt = make_prompt({3});
  s.response = make_response(std::vector<TokenId>(len, 4), 1);
  s.raw_reward = reward;
  return s;
}

const RewardFn length_reward = [](const TokenSequence&, const TokenSequence& y) { return static_cast<double>(y.len()); };

PpoConfig small_cfg() {
  PpoConfig c;
  c.batch_size = 6;
  c.decode.max_len = 8;
  return c;
}

}  // namespace

TEST(LengthOnlyReward, Examples) {
  EXPECT_DOUBLE_EQ(length_only_reward(40, 40), 1.0);
  EXPECT_DOUBLE_EQ(length_only_reward(0, 40), 0.0);
  EXPECT_DOUBLE_EQ(length_only_reward(120, 40), -1.0);
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto len = uniform_index(rng, 300), L = 1 + uniform_index(rng, 200);
    const double ratio = static_cast<double>(len) / static_cast<double>(L);
    EXPECT_NEAR(length_only_reward(len, L), 1.0 - std::abs(ratio - 1.0), 1e-12);
  }
  EXPECT_THROW(length_only_reward(3, 0), ConfigError);
}

TEST(PenalizeLength, Examples) {
  EXPECT_DOUBLE_EQ(penalize_length(0.7, 100, 100, 0.4), 0.7);
  EXPECT_NEAR(penalize_length(0.5, 120, 100, 0.4), 0.42, 1e-12);
  for (std::size_t len : {0, 7, 300}) EXPECT_DOUBLE_EQ(penalize_length(-1.5, len, 50, 0.0), -1.5);
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const double r = gaussian(rng), sig = uniform01(rng) * 3;
    const auto len = uniform_index(rng, 300), N = 1 + uniform_index(rng, 200);
    EXPECT_NEAR(penalize_length(r, len, N, sig), r + sig - sig * static_cast<double>(len) / static_cast<double>(N), 1e-9);
  }
}

TEST(ScaleRewards, FirstBatchAndDegenerateCases) {
  RewardStats st(10);
  const std::vector<double> raw = {1, 2, 3};
  const auto out = scale_rewards(raw, st);
  const double sd = std::sqrt(2.0 / 3.0);
  EXPECT_NEAR(out[0], -1.0 / sd, 1e-12);
  EXPECT_NEAR(out[1], 0.0, 1e-12);
  EXPECT_NEAR(out[2], 1.0 / sd, 1e-12);

  RewardStats st2(10);
  const std::vector<double> flat = {4, 4, 4, 4};
  for (double v : scale_rewards(flat, st2)) EXPECT_EQ(v, 0.0);

  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    RewardStats one(1);
    std::vector<double> r(2 + uniform_index(rng, 30));
    for (double& x : r) x = gaussian(rng, 5.0, 2.0);
    const auto z = scale_rewards(r, one);
    double m = 0, v = 0;
    for (double x : z) m += x / static_cast<double>(z.size());
    for (double x : z) v += (x - m) * (x - m) / static_cast<double>(z.size());
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(std::sqrt(v), 1.0, 1e-9);
  }
}

TEST(ScaleRewards, MovingAverageMatchesBruteForce) {
  Rng rng(4);
  for (int inst = 0; inst < 25; ++inst) {
    const std::size_t W = 1 + uniform_index(rng, 5);
    RewardStats st(W);
    std::vector<std::pair<double, double>> history;
    for (int b = 0; b < 12; ++b) {
      std::vector<double> r(1 + uniform_index(rng, 8));
      for (double& x : r) x = gaussian(rng, 1.0, 3.0);
      double m = 0.0;
      for (double x : r) m += x;
      m /= static_cast<double>(r.size());
      double v = 0.0;
      for (double x : r) v += (x - m) * (x - m);
      history.emplace_back(m, std::sqrt(v / static_cast<double>(r.size())));
      const std::size_t from = history.size() > W ? history.size() - W : 0;
      double mu = 0.0, sg = 0.0;
      for (std::size_t k = from; k < history.size(); ++k) {
        mu += history[k].first;
        sg += history[k].second;
      }
      mu /= static_cast<double>(history.size() - from);
      sg /= static_cast<double>(history.size() - from);
      const auto z = scale_rewards(r, st);
      for (std::size_t i = 0; i < r.size(); ++i)
        EXPECT_NEAR(z[i], sg < 1e-8 ? 0.0 : (r[i] - mu) / sg, 1e-9);
    }
  }
}

TEST(OmitLong, SwapsOnlyOverThreshold) {
  Rng rng(5);
  RolloutBatch b;
  for (std::size_t len : {3, 5, 4, 2}) b.samples.push_back(sample_of_len(len, static_cast<double>(len)));
  const auto same = omit_long(b, 5, rng);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(same.samples[i].response, b.samples[i].response);
  EXPECT_EQ(same.omitted, 0u);

  b.samples[1] = sample_of_len(9, 9.0);
  for (int trial = 0; trial < 50; ++trial) {
    const auto out = omit_long(b, 5, rng);
    EXPECT_EQ(out.omitted, 1u);
    const auto len = out.samples[1].len();
    EXPECT_TRUE(len == 3 || len == 4 || len == 2) << len;
    for (const auto& s : out.samples) EXPECT_LE(s.len(), 5u);
    EXPECT_EQ(out.samples[0].len(), 3u);
    EXPECT_EQ(out.samples[2].len(), 4u);
    EXPECT_EQ(out.samples[3].len(), 2u);
  }
  EXPECT_THROW(omit_long(b, 0, rng), InterventionError);
}

TEST(AssembleRewards, ShapedSumIdentities) {
  Rng rng(6);
  auto ref = tiny_policy(rng);
  const std::vector<TokenSequence> prompts = {make_prompt({3, 4}), make_prompt({5})};
  auto cfg = small_cfg();

  // Rollouts from the reference itself: every KL is 0.
  auto batch = collect_rollouts(ref, prompts, 6, cfg.decode, rng);
  RewardStats st;
  assemble_rewards(batch, length_reward, ref, cfg, st);
  for (const auto& s : batch.samples) {
    double sum = 0.0;
    for (std::size_t t = 0; t < s.kl.size(); ++t) {
      EXPECT_NEAR(s.kl[t], 0.0, 1e-12);
      sum += s.shaped[t];
    }
    EXPECT_NEAR(sum, s.raw_reward, 1e-12);
  }

  // A different policy with lambda = 0 and lambda = 0.04.
  auto pol = tiny_policy(rng);
  for (double lambda : {0.0, 0.04}) {
    cfg.kl_coef = lambda;
    auto b2 = collect_rollouts(pol, prompts, 6, cfg.decode, rng);
    RewardStats st2;
    assemble_rewards(b2, length_reward, ref, cfg, st2);
    for (const auto& s : b2.samples) {
      double shaped = 0.0, kl = 0.0;
      for (std::size_t t = 0; t < s.shaped.size(); ++t) {
        shaped += s.shaped[t];
        if (!s.trainable(t)) continue;
        // Independent KL from both models' next-token distributions.
        const auto p = nnet::lm_next_token_dist(pol, pol.context_at(s.prompt.ids, s.response.ids, t), t);
        const auto q = nnet::lm_next_token_dist(ref, ref.context_at(s.prompt.ids, s.response.ids, t), t);
        double direct = 0.0;
        for (std::size_t v = 0; v < p.size(); ++v)
          if (p[v] > 0) direct += p[v] * std::log(p[v] / q[v]);
        EXPECT_NEAR(s.kl[t], direct, 1e-12);
        kl += direct;
      }
      EXPECT_NEAR(shaped, s.raw_reward - lambda * kl, 1e-12);
      EXPECT_EQ(s.raw_reward, static_cast<double>(s.len()));
    }
  }
}

TEST(AssembleRewards, FixedThreeTokenRollout) {
  Rng rng(7);
  auto ref = tiny_policy(rng), pol = tiny_policy(rng);
  RolloutBatch b;
  RolloutSample s;
  s.prompt = make_prompt({4, 5});
  s.response = make_response({6, 3}, 1);
  for (std::size_t t = 0; t < 3; ++t) {
    const auto p = nnet::lm_next_token_dist(pol, pol.context_at(s.prompt.ids, s.response.ids, t), t);
    s.rl_dists.push_back(p);
    s.old_logprob.push_back(std::log(p[static_cast<std::size_t>(s.response.ids[t])]));
  }
  b.samples.push_back(s);
  auto cfg = small_cfg();
  const RewardFn r = [](const TokenSequence&, const TokenSequence&) { return 0.8; };
  RewardStats st;
  assemble_rewards(b, r, ref, cfg, st);
  const auto& o = b.samples[0];
  const double want = 0.8 - 0.04 * (o.kl[0] + o.kl[1] + o.kl[2]);
  EXPECT_NEAR(o.shaped[0] + o.shaped[1] + o.shaped[2], want, 1e-12);
  EXPECT_NEAR(o.shaped[2], 0.8 - 0.04 * o.kl[2], 1e-12);
}

TEST(AssembleRewards, PenaltyScalingAndNonFinite) {
  Rng rng(8);
  auto ref = tiny_policy(rng);
  const std::vector<TokenSequence> prompts = {make_prompt({3})};
  auto cfg = small_cfg();
  cfg.reward = RewardSource::RmPlusLengthPenalty;
  cfg.penalty_max_length = 4;
  auto b = collect_rollouts(ref, prompts, 6, cfg.decode, rng);
  RewardStats st(3);
  assemble_rewards(b, length_reward, ref, cfg, st);
  RewardStats oracle(3);
  std::vector<double> raw;
  for (const auto& s : b.samples) raw.push_back(static_cast<double>(s.len()));
  oracle.push_batch(raw);
  for (const auto& s : b.samples)
    EXPECT_NEAR(s.reward_used, s.raw_reward + (1.0 - static_cast<double>(s.len()) / 4.0) * oracle.mean_sigma(), 1e-12);

  cfg.reward = RewardSource::RmScaled;
  RewardStats st2, oracle2;
  auto b2 = collect_rollouts(ref, prompts, 6, cfg.decode, rng);
  assemble_rewards(b2, length_reward, ref, cfg, st2);
  raw.clear();
  for (const auto& s : b2.samples) raw.push_back(s.raw_reward);
  const auto z = scale_rewards(raw, oracle2);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(b2.samples[i].reward_used, z[i], 1e-12);

  cfg.reward = RewardSource::RM;
  const RewardFn bad = [](const TokenSequence&, const TokenSequence&) { return std::nan(""); };
  RewardStats st3;
  EXPECT_THROW(assemble_rewards(b2, bad, ref, cfg, st3), TrainingError);
}

TEST(Advantages, ReturnsAndTokenWeightedWhitening) {
  Rng rng(9);
  auto value = tiny_value(rng);
  RolloutBatch b;
  for (std::size_t len : {2, 5, 0, 8}) {
    auto s = sample_of_len(len);
    s.truncated = len == 8;
    s.shaped.resize(s.response.ids.size());
    for (double& x : s.shaped) x = gaussian(rng);
    b.samples.push_back(s);
  }
  compute_advantages(b, value);
  std::vector<double> raw_adv;
  for (const auto& s : b.samples) {
    const std::size_t T = s.response.ids.size();
    for (std::size_t t = 0; t < T; ++t) {
      double g = 0.0;
      for (std::size_t k = t; k < T; ++k) g += s.shaped[k];
      EXPECT_NEAR(s.returns[t], g, 1e-12);
      const double v = value.forward(s.prompt.ids, std::span<const TokenId>(s.response.ids).first(t));
      EXPECT_NEAR(s.values[t], v, 1e-12);
      if (s.trainable(t)) raw_adv.push_back(g - v);
    }
  }
  double m = 0.0, var = 0.0;
  for (double a : raw_adv) m += a / static_cast<double>(raw_adv.size());
  for (double a : raw_adv) var += (a - m) * (a - m) / static_cast<double>(raw_adv.size());
  EXPECT_NEAR(b.adv_scale, std::sqrt(var), 1e-12);
  std::size_t k = 0;
  for (const auto& s : b.samples)
    for (std::size_t t = 0; t < s.advantages.size(); ++t) {
      if (!s.trainable(t)) {
        EXPECT_EQ(s.advantages[t], 0.0);
        continue;
      }
      EXPECT_NEAR(s.advantages[t], (raw_adv[k++] - m) / std::sqrt(var), 1e-12);
    }
}

TEST(PpoUpdate, FirstPassRatiosAreOne) {
  Rng rng(10);
  auto pol = tiny_policy(rng);
  auto value = tiny_value(rng);
  auto cfg = small_cfg();
  auto b = collect_rollouts(pol, std::vector<TokenSequence>{make_prompt({3}), make_prompt({4, 5})}, 6, cfg.decode, rng);
  RewardStats st;
  assemble_rewards(b, length_reward, pol, cfg, st);
  compute_advantages(b, value);
  const auto s = ppo_policy_objective(pol, b, cfg.clip, cfg.kl_coef, false);
  EXPECT_NEAR(s.mean_ratio, 1.0, 1e-12);
  EXPECT_NEAR(s.surrogate, 0.0, 1e-9);
  EXPECT_EQ(s.frac_clipped, 0.0);
  EXPECT_NEAR(s.kl, 0.0, 1e-12);
}

TEST(PpoUpdate, EqualAdvantagesGiveZeroGradient) {
  Rng rng(11);
  auto pol = tiny_policy(rng);
  auto value = tiny_value(rng);
  value.params().fill(value.slice_head_weight(), 0.0);
  value.params().fill(value.slice_head_bias(), 0.0);
  auto cfg = small_cfg();
  cfg.kl_coef = 0.0;
  auto b = collect_rollouts(pol, std::vector<TokenSequence>{make_prompt({3})}, 6, cfg.decode, rng);
  const RewardFn one = [](const TokenSequence&, const TokenSequence&) { return 1.0; };
  RewardStats st;
  assemble_rewards(b, one, pol, cfg, st);
  compute_advantages(b, value);
  for (const auto& s : b.samples)
    for (double a : s.advantages) EXPECT_EQ(a, 0.0);
  pol.params().zero_grad();
  ppo_policy_objective(pol, b, cfg.clip, 0.0, true);
  for (double g : pol.params().grads()) EXPECT_EQ(g, 0.0);
}

TEST(GradCheck, PpoSurrogateWithKlAtRandomPoints) {
  Rng rng(12);
  for (double kl_coef : {0.0, 0.04}) {
    for (int point = 0; point < 3; ++point) {
      auto ref = tiny_policy(rng);
      auto pol = tiny_policy(rng);
      auto value = tiny_value(rng);
      auto cfg = small_cfg();
      cfg.kl_coef = kl_coef;
      auto b = collect_rollouts(pol, std::vector<TokenSequence>{make_prompt({3}), make_prompt({6, 4})}, 2, cfg.decode, rng);
      RewardStats st;
      assemble_rewards(b, length_reward, ref, cfg, st);
      compute_advantages(b, value);
      // Move away from the sampling policy so ratios differ from 1.
      for (double& w : pol.params().values()) w += gaussian(rng, 0.0, 0.05);
      auto loss = nnet::model_loss(pol, [&](PolicyModel& m) {
        return ppo_policy_objective(m, b, cfg.clip, cfg.kl_coef, true).loss;
      });
      EXPECT_LT(nnet::grad_check(pol.params().values(), loss, 60, rng), 1e-4) << "kl_coef " << kl_coef;
    }
  }
}

TEST(GradCheck, ValueRegressionAtRandomPoints) {
  Rng rng(13);
  for (int point = 0; point < 3; ++point) {
    auto pol = tiny_policy(rng);
    auto value = tiny_value(rng);
    auto cfg = small_cfg();
    auto b = collect_rollouts(pol, std::vector<TokenSequence>{make_prompt({3})}, 3, cfg.decode, rng);
    RewardStats st;
    assemble_rewards(b, length_reward, pol, cfg, st);
    compute_advantages(b, value);
    auto loss = nnet::model_loss(value, [&](nnet::ValueModel& m) { return value_loss(m, b, 0.5, true); });
    EXPECT_LT(nnet::grad_check(value.params().values(), loss, 60, rng), 1e-4);
  }
}

TEST(RunPpo, DeterministicAndRecordsSkippedSteps) {
  Rng r0(14);
  const auto pol = tiny_policy(r0);
  const std::vector<TokenSequence> prompts = {make_prompt({3}), make_prompt({4, 5})};
  auto cfg = small_cfg();
  cfg.steps = 5;
  Rng a(15), b(15);
  const auto ra = run_ppo(pol, prompts, length_reward, cfg, a);
  const auto rb = run_ppo(pol, prompts, length_reward, cfg, b);
  EXPECT_EQ(timeline_csv(ra.timeline), timeline_csv(rb.timeline));
  EXPECT_EQ(timeline_csv(ra.timeline).substr(0, 80),
            std::string("step,mean_len,mean_raw_reward,mean_kl,surrogate,value_loss,frac_clipped,omitted_count\n")
                .substr(0, 80));
  for (const auto& row : ra.timeline) EXPECT_EQ(row.frac_clipped, 0.0);

  // Every response has at least the EOS, so length 0 is the only admissible
  // one; with EOS masked out no sample survives the threshold.
  auto never_stop = pol;
  never_stop.params().data(never_stop.slice_output_bias())[1] = -1000.0;
  cfg.omit_long = 0;
  Rng c(16);
  const auto rc = run_ppo(never_stop, prompts, length_reward, cfg, c);
  EXPECT_EQ(rc.errors.size(), 5u);
  for (const auto& row : rc.timeline) EXPECT_TRUE(row.skipped);
}

TEST(RunPpo, LengthOnlyRewardReachesTarget) {
  const auto& w = world();
  ASSERT_NEAR(w.sft_mean, 20.0, 4.0);
  PpoConfig cfg;
  cfg.reward = RewardSource::LengthOnly;
  cfg.target_length = 40;
  // A doubling of length against the default KL coefficient needs more than
  // 200 steps; a lighter penalty keeps the example within budget.
  cfg.kl_coef = 0.01;
  cfg.lr = 5e-3;
  cfg.steps = 200;
  Rng rng(17);
  const auto run = run_ppo(*w.sft, w.prompts, nullptr, cfg, rng);
  const double final_len = mean_sampled_len(run.policy, w.prompts, 1000, rng);
  EXPECT_GE(final_len, 36.0);
  EXPECT_LE(final_len, 44.0);
}

TEST(RunPpo, LengthRewardLengthensOutputs) {
  const auto& w = world();
  PpoConfig cfg;
  cfg.steps = 60;
  cfg.lr = 3e-3;
  Rng rng(18);
  const auto run = run_ppo(*w.sft, w.prompts, length_reward, cfg, rng);
  EXPECT_GT(mean_sampled_len(run.policy, w.prompts, 1000, rng), w.sft_mean);
}

TEST(RunPpo, LargeKlPinsPolicyToReference) {
  const auto& w = world();
  PpoConfig cfg;
  cfg.kl_coef = 10.0;
  cfg.steps = 100;
  Rng rng(19);
  const auto run = run_ppo(*w.sft, w.prompts, length_reward, cfg, rng);
  EXPECT_LT(run.timeline.back().mean_kl, 0.05);
  EXPECT_NEAR(mean_sampled_len(run.policy, w.prompts, 1000, rng), w.sft_mean, 0.2 * w.sft_mean);
}

TEST(SftLongSample, MaxOfKSamples) {
  const auto& w = world();
  nnet::DecodeConfig d;
  Rng a(20), b(20);
  for (int i = 0; i < 20; ++i) {
    const auto& p = w.prompts[static_cast<std::size_t>(i)];
    EXPECT_EQ(sft_long_sample(*w.sft, p, 1, d, a), nnet::sample_sequence(*w.sft, p, d, b).response);
  }
  Rng rng(21);
  double long_mean = 0.0, single_mean = 0.0;
  for (std::size_t i = 0; i < 1000; ++i) {
    const auto& p = w.prompts[i % w.prompts.size()];
    Rng replay = rng;
    const auto best = sft_long_sample(*w.sft, p, 8, d, rng);
    std::size_t mx = 0;
    for (int k = 0; k < 8; ++k) mx = std::max(mx, nnet::sample_sequence(*w.sft, p, d, replay).response.len());
    EXPECT_EQ(best.len(), mx);
    long_mean += static_cast<double>(best.len()) / 1000.0;
    single_mean += static_cast<double>(nnet::sample_sequence(*w.sft, p, d, rng).response.len()) / 1000.0;
  }
  EXPECT_GT(long_mean, single_mean);
}

TEST(PpoConfig, Validation) {
  PpoConfig c;
  c.clip = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.decode.top_p = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_reward_source("LEN"), ConfigError);
  EXPECT_EQ(parse_reward_source(reward_source_name(RewardSource::RmScaled)), RewardSource::RmScaled);
}
