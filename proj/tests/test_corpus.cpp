#include <gtest/gtest.h>

#include <fstream>

#include "fixtures.hpp"

using namespace lengthlab;

namespace {

CorpusConfig cfg_with(std::size_t prompts, double beta = 0.0, double noise = 1.0, std::uint64_t seed = 1) {
  CorpusConfig c;
  c.num_prompts = prompts;
  c.length_bias = beta;
  c.noise_std = noise;
  c.seed = seed;
  return c;
}

std::size_t count_class(const Vocab& v, const TokenSequence& s, TokenClass k) {
  std::size_t n = 0;
  for (auto t : s.body()) n += v.token_class(t) == k;
  return n;
}

}  // namespace

TEST(Vocab, StandardLayoutAndRoundTrip) {
  const auto v = Vocab::standard();
  EXPECT_EQ(v.size(), 3u + 6 + 30 + 16);
  EXPECT_EQ(v.surface(v.bos()), "<bos>");
  EXPECT_EQ(v.num_topics(), 6u);
  for (int k = 0; k < 6; ++k)
    for (auto t : v.info_for_topic(k)) EXPECT_EQ(v.surface(t).substr(0, 1 + std::to_string(k).size()), "I" + std::to_string(k));
  const auto dir = fixtures::temp_dir("vocab");
  v.write((dir / "v.txt").string());
  const auto r = Vocab::read((dir / "v.txt").string());
  EXPECT_EQ(r, v);
  EXPECT_EQ(r.hash(), v.hash());
}

TEST(GenPrompts, ZeroPromptsGivesEmptyList) {
  const auto v = Vocab::standard();
  CorpusGenerator g(v, cfg_with(0));
  Rng rng(3);
  EXPECT_TRUE(g.gen_prompts(rng).empty());
}

TEST(GenPrompts, SameSeedSameList) {
  const auto v = Vocab::standard();
  CorpusGenerator g(v, cfg_with(10));
  Rng a(7), b(7);
  EXPECT_EQ(g.gen_prompts(a), g.gen_prompts(b));
}

TEST(GenPrompts, LengthsAndShape) {
  const auto v = Vocab::standard();
  CorpusGenerator g(v, cfg_with(100));
  Rng rng(11);
  const auto ps = g.gen_prompts(rng);
  ASSERT_EQ(ps.size(), 100u);
  for (const auto& p : ps) {
    EXPECT_GE(p.len(), 3u);
    EXPECT_LE(p.len(), 8u);
    EXPECT_EQ(v.token_class(p.ids.back()), TokenClass::Topic);
    for (std::size_t i = 0; i + 1 < p.ids.size(); ++i) EXPECT_EQ(v.token_class(p.ids[i]), TokenClass::Filler);
  }
}

TEST(GenResponse, FractionBoundariesAndCounts) {
  const auto v = Vocab::standard();
  CorpusGenerator g(v, cfg_with(1));
  Rng rng(5);
  const auto prompt = make_prompt({v.filler_tokens()[0], v.topic_tokens()[2]});
  auto r0 = g.gen_response(prompt, 10, 0.0, rng);
  EXPECT_EQ(r0.ids.size(), 11u);
  EXPECT_EQ(r0.ids.back(), v.eos());
  EXPECT_EQ(count_class(v, r0, TokenClass::Filler), 10u);
  auto r1 = g.gen_response(prompt, 10, 1.0, rng);
  EXPECT_EQ(count_class(v, r1, TokenClass::Info), 10u);
  EXPECT_TRUE(is_valid_response(r1, v));
  auto r5 = g.gen_response(prompt, 20, 0.5, rng);
  EXPECT_EQ(count_class(v, r5, TokenClass::Info), 10u);
  EXPECT_EQ(count_class(v, r5, TokenClass::Filler), 10u);
  EXPECT_THROW(g.gen_response(prompt, 200, 0.5, rng), RangeError);
  EXPECT_THROW(g.gen_response(prompt, 10, 1.5, rng), RangeError);
}

TEST(LatentUtility, DefinitionCases) {
  const auto v = Vocab::standard();
  const auto prompt = make_prompt({v.filler_tokens()[1], v.topic_tokens()[0]});
  const auto& rel = v.info_for_topic(0);
  const auto& other = v.info_for_topic(1);

  auto c = cfg_with(1);
  c.info_weight = 1.0;
  CorpusGenerator g0(v, c);
  const auto fillers = make_response(std::vector<TokenId>(12, v.filler_tokens()[0]), v.eos());
  EXPECT_DOUBLE_EQ(g0.latent_utility(prompt, fillers), 0.0);

  // 4 distinct relevant, plus repeats and unrelated INFO that must not count.
  std::vector<TokenId> body = {rel[0], rel[1], rel[2], rel[3], rel[0], other[0], other[1]};
  EXPECT_DOUBLE_EQ(g0.latent_utility(prompt, make_response(body, v.eos())), 4.0);

  c.length_bias = 0.05;
  CorpusGenerator g1(v, c);
  body.resize(40, v.filler_tokens()[3]);
  EXPECT_NEAR(g1.latent_utility(prompt, make_response(body, v.eos())), 4.0 + 0.05 * 40, 1e-12);
}

TEST(LatentUtility, MatchesSurfaceOracleOnRandomResponses) {
  const auto v = Vocab::standard();
  auto c = cfg_with(50, 0.037);
  c.info_weight = 1.3;
  CorpusGenerator g(v, c);
  Rng rng(19);
  for (const auto& p : g.gen_prompts(rng))
    for (int k = 0; k < 5; ++k) {
      const auto y = g.gen_response(p, g.sample_length(rng), uniform01(rng), rng);
      EXPECT_NEAR(g.latent_utility(p, y), fixtures::utility_from_surfaces(v, p, y, 1.3, 0.037), 1e-12);
    }
}

TEST(PreferencePairs, NoiselessLabelsFollowUtility) {
  const auto v = Vocab::standard();
  CorpusGenerator g(v, cfg_with(300, 0.02, 0.0));
  for (const auto& p : g.generate()) {
    const double up = fixtures::utility_from_surfaces(v, p.prompt, p.preferred, 1.0, 0.02);
    const double um = fixtures::utility_from_surfaces(v, p.prompt, p.dispreferred, 1.0, 0.02);
    EXPECT_GE(up, um);
    EXPECT_NEAR(*p.u_plus, up, 1e-12);
    EXPECT_NEAR(*p.u_minus, um, 1e-12);
    EXPECT_NE(p.preferred, p.dispreferred);
  }
}

TEST(PreferencePairs, LargeBetaNoContentGivesStrongLengthAgreement) {
  const auto v = Vocab::standard();
  auto c = cfg_with(5000, 1.0);
  c.info_weight = 0.0;
  const auto pairs = CorpusGenerator(v, c).generate();
  ASSERT_EQ(pairs.size(), 10000u);
  EXPECT_GE(analysis::length_heuristic_accuracy(pairs), 0.95);
}

TEST(PreferencePairs, CalibratedBetaHitsSixtyPercentBand) {
  const auto v = Vocab::standard();
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto pairs = CorpusGenerator(v, cfg_with(5000, 0.0239891, 1.0, seed)).generate();
    EXPECT_NEAR(analysis::length_heuristic_accuracy(pairs), 0.60, 0.02) << "seed " << seed;
  }
}

TEST(PreferencePairs, ZeroBetaHasNoLengthPreference) {
  const auto v = Vocab::standard();
  const auto pairs = CorpusGenerator(v, cfg_with(5000, 0.0)).generate();
  EXPECT_NEAR(analysis::length_heuristic_accuracy(pairs), 0.5, 0.02);
}

TEST(Dataset, RoundTripEmptyAndErrors) {
  const auto v = Vocab::standard();
  const auto pairs = CorpusGenerator(v, cfg_with(500)).generate();
  ASSERT_EQ(pairs.size(), 1000u);
  const auto dir = fixtures::temp_dir("dataset");
  const auto path = (dir / "d.jsonl").string();
  write_dataset(pairs, path);
  EXPECT_EQ(read_dataset(path), pairs);

  std::ofstream(dir / "empty.jsonl").close();
  EXPECT_TRUE(read_dataset((dir / "empty.jsonl").string()).empty());

  {
    std::ofstream out(dir / "bad.jsonl");
    out << serialize_dataset({pairs[0], pairs[1]});
    out << R"({"prompt":[3,4],"dispreferred":[5,1]})" << "\n";
  }
  try {
    read_dataset((dir / "bad.jsonl").string());
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("preferred"), std::string::npos);
  }
}

TEST(Dataset, UnknownFieldsSurviveRoundTrip) {
  const auto dir = fixtures::temp_dir("extra");
  {
    std::ofstream out(dir / "x.jsonl");
    out << R"({"prompt":[3],"preferred":[4,1],"dispreferred":[5,1],"annotator":"z9"})" << "\n";
  }
  const auto d = read_dataset((dir / "x.jsonl").string());
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].extra["annotator"], "z9");
  EXPECT_NE(serialize_dataset(d).find("annotator"), std::string::npos);
}

TEST(Dataset, SplitIsDeterministicAndPartitions) {
  const auto v = Vocab::standard();
  const auto pairs = CorpusGenerator(v, cfg_with(500)).generate();
  Rng a(4), b(4);
  const auto s1 = split_dataset(pairs, 0.1, a);
  const auto s2 = split_dataset(pairs, 0.1, b);
  EXPECT_EQ(s1.train, s2.train);
  EXPECT_EQ(s1.eval.size(), 100u);
  EXPECT_EQ(s1.train.size() + s1.eval.size(), pairs.size());
  EXPECT_THROW(split_dataset(pairs, 0.7, a), ConfigError);
}

TEST(CorpusConfig, RejectsInvalidFields) {
  const auto v = Vocab::standard();
  auto c = cfg_with(10);
  c.min_len = 0;
  EXPECT_THROW(CorpusGenerator(v, c), ConfigError);
  c = cfg_with(10);
  c.max_len = 300;
  EXPECT_THROW(CorpusGenerator(v, c, 256), ConfigError);
  c = cfg_with(10);
  c.noise_std = -1.0;
  EXPECT_THROW(CorpusGenerator(v, c), ConfigError);
}
