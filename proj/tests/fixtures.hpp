#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "lengthlab/lengthlab.hpp"

namespace fixtures {

using namespace lengthlab;

/// Policy config over `v` ids where 0/1/2 are BOS/EOS/PAD.
inline nnet::PolicyConfig policy_config(std::size_t v, std::size_t context = 2, std::size_t d_emb = 3,
                                        std::size_t d_hidden = 4, std::size_t max_positions = 16) {
  nnet::PolicyConfig c;
  c.vocab_size = v;
  c.bos = 0;
  c.eos = 1;
  c.pad = 2;
  c.context = context;
  c.d_emb = d_emb;
  c.d_hidden = d_hidden;
  c.max_positions = max_positions;
  return c;
}

inline void zero_slice(nnet::ParamStore& p, std::size_t slice) { p.fill(slice, 0.0); }

/// Fresh directory under the system temp dir, removed first if present.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("lengthlab_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

/// Independent relevance check parsed from surface strings: an INFO token
/// "I<k>.<j>" is relevant to a prompt holding topic "T<k>".
inline double utility_from_surfaces(const Vocab& v, const TokenSequence& prompt, const TokenSequence& response,
                                    double alpha, double beta) {
  std::vector<std::string> topics;
  for (auto t : prompt.ids) {
    const auto& s = v.surface(t);
    if (s.size() > 1 && s[0] == 'T') topics.push_back(s.substr(1));
  }
  std::vector<TokenId> seen;
  for (auto t : response.body()) {
    const auto& s = v.surface(t);
    if (s.size() < 2 || s[0] != 'I') continue;
    const auto topic = s.substr(1, s.find('.') - 1);
    bool rel = false;
    for (const auto& k : topics) rel = rel || k == topic;
    bool dup = false;
    for (auto x : seen) dup = dup || x == t;
    if (rel && !dup) seen.push_back(t);
  }
  return alpha * static_cast<double>(seen.size()) + beta * static_cast<double>(response.len());
}

}  // namespace fixtures
