#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "lengthlab/nnet/params.hpp"
#include "lengthlab/sequence.hpp"

namespace lengthlab::nnet {

struct ScalarConfig {
  std::size_t vocab_size = 0;
  TokenId pad = 2;
  std::size_t d_emb = 16;
  std::size_t d_hidden = 32;
  std::size_t window = 256;     // response pooling window, PAD-filled
  bool length_feature = false;  // append len / window to the features

  static ScalarConfig for_vocab(const Vocab& v) {
    ScalarConfig c;
    c.vocab_size = v.size();
    c.pad = v.pad();
    return c;
  }
};

/// Scalar head over pooled token embeddings:
///
///   p = mean of prompt embeddings
///   r = (sum of response embeddings + (W - len) * E[PAD]) / W
///   x = [p; r; toggle * len / W]
///   out = w2 . tanh(W1 x + b1) + b2
///
/// The response is pooled over a fixed window of W positions with PAD
/// filling the tail, so the pooled vector carries token counts (and hence
/// length) rather than only token frequencies. Responses longer than W are
/// truncated to their first W tokens.
template <ModelKind Kind>
class ScalarModel {
 public:
  static constexpr ModelKind kKind = Kind;

  struct Cache {
    std::vector<TokenId> prompt;
    std::vector<TokenId> body;
    std::size_t count = 0;
    std::vector<double> x, h;
  };

  explicit ScalarModel(ScalarConfig cfg) : cfg_(cfg) {
    if (cfg.vocab_size < 1 || cfg.d_emb < 1 || cfg.d_hidden < 1 || cfg.window < 1)
      throw ConfigError("scalar model: invalid dimensions");
    emb_ = p_.add("embedding", cfg.vocab_size, cfg.d_emb);
    w1_ = p_.add("hidden.weight", cfg.d_hidden, input_dim());
    b1_ = p_.add("hidden.bias", cfg.d_hidden, 1);
    w2_ = p_.add("head.weight", 1, cfg.d_hidden);
    b2_ = p_.add("head.bias", 1, 1);
  }

  static ScalarModel random(ScalarConfig cfg, Rng& rng) {
    ScalarModel m(cfg);
    m.p_.fill_gaussian(m.emb_, 1.0, rng);
    m.p_.fill_gaussian(m.w1_, 1.0 / std::sqrt(static_cast<double>(m.input_dim())), rng);
    m.p_.fill_gaussian(m.w2_, 1.0 / std::sqrt(static_cast<double>(cfg.d_hidden)), rng);
    return m;
  }

  const ScalarConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return p_; }
  const ParamStore& params() const noexcept { return p_; }
  std::size_t input_dim() const noexcept { return 2 * cfg_.d_emb + 1; }
  std::size_t slice_head_weight() const noexcept { return w2_; }
  std::size_t slice_head_bias() const noexcept { return b2_; }

  double forward(std::span<const TokenId> prompt, std::span<const TokenId> body, Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    const auto de = cfg_.d_emb, dh = cfg_.d_hidden;
    const double win = static_cast<double>(cfg_.window);
    c.prompt.assign(prompt.begin(), prompt.end());
    c.count = std::min(body.size(), cfg_.window);
    c.body.assign(body.begin(), body.begin() + static_cast<std::ptrdiff_t>(c.count));
    c.x.assign(input_dim(), 0.0);
    if (!prompt.empty()) {
      for (TokenId t : prompt) {
        const double* e = row(t);
        for (std::size_t k = 0; k < de; ++k) c.x[k] += e[k];
      }
      for (std::size_t k = 0; k < de; ++k) c.x[k] /= static_cast<double>(prompt.size());
    }
    for (TokenId t : c.body) {
      const double* e = row(t);
      for (std::size_t k = 0; k < de; ++k) c.x[de + k] += e[k];
    }
    const double n_pad = win - static_cast<double>(c.count);
    const double* ep = row(cfg_.pad);
    for (std::size_t k = 0; k < de; ++k) c.x[de + k] = (c.x[de + k] + n_pad * ep[k]) / win;
    c.x[2 * de] = cfg_.length_feature ? static_cast<double>(c.count) / win : 0.0;

    c.h.resize(dh);
    affine(p_.data(w1_), p_.data(b1_), c.x.data(), dh, input_dim(), c.h.data());
    double out = p_.data(b2_)[0];
    const double* w2 = p_.data(w2_);
    for (std::size_t j = 0; j < dh; ++j) {
      c.h[j] = std::tanh(c.h[j]);
      out += w2[j] * c.h[j];
    }
    return out;
  }

  double score(const TokenSequence& prompt, const TokenSequence& response) const {
    return forward(prompt.ids, response.role == Role::Response ? response.body() : std::span<const TokenId>(response.ids));
  }

  double operator()(const TokenSequence& prompt, const TokenSequence& response) const { return score(prompt, response); }

  /// Accumulates parameter gradients for dLoss/dout.
  void backward(const Cache& c, double dout) {
    const auto de = cfg_.d_emb, dh = cfg_.d_hidden;
    const double win = static_cast<double>(cfg_.window);
    p_.grad(b2_)[0] += dout;
    const double* w2 = p_.data(w2_);
    double* gw2 = p_.grad(w2_);
    std::vector<double> dpre(dh);
    for (std::size_t j = 0; j < dh; ++j) {
      gw2[j] += dout * c.h[j];
      dpre[j] = dout * w2[j] * (1.0 - c.h[j] * c.h[j]);
    }
    std::vector<double> dx(input_dim(), 0.0);
    affine_backward(p_.data(w1_), c.x.data(), dpre.data(), dh, input_dim(), p_.grad(w1_), p_.grad(b1_), dx.data());
    if (!c.prompt.empty()) {
      const double inv = 1.0 / static_cast<double>(c.prompt.size());
      for (TokenId t : c.prompt) {
        double* g = grow(t);
        for (std::size_t k = 0; k < de; ++k) g[k] += dx[k] * inv;
      }
    }
    for (TokenId t : c.body) {
      double* g = grow(t);
      for (std::size_t k = 0; k < de; ++k) g[k] += dx[de + k] / win;
    }
    const double pad_w = (win - static_cast<double>(c.count)) / win;
    double* gp = grow(cfg_.pad);
    for (std::size_t k = 0; k < de; ++k) gp[k] += dx[de + k] * pad_w;
  }

  Meta meta() const {
    return {{"vocab_size", static_cast<std::int64_t>(cfg_.vocab_size)},
            {"pad", cfg_.pad},
            {"d_emb", static_cast<std::int64_t>(cfg_.d_emb)},
            {"d_hidden", static_cast<std::int64_t>(cfg_.d_hidden)},
            {"window", static_cast<std::int64_t>(cfg_.window)},
            {"length_feature", cfg_.length_feature ? 1 : 0}};
  }

  static ScalarModel from_meta(const Meta& m) {
    ScalarConfig c;
    c.vocab_size = static_cast<std::size_t>(meta_get(m, "vocab_size"));
    c.pad = static_cast<TokenId>(meta_get(m, "pad"));
    c.d_emb = static_cast<std::size_t>(meta_get(m, "d_emb"));
    c.d_hidden = static_cast<std::size_t>(meta_get(m, "d_hidden"));
    c.window = static_cast<std::size_t>(meta_get(m, "window"));
    c.length_feature = meta_get(m, "length_feature") != 0;
    return ScalarModel(c);
  }

 private:
  const double* row(TokenId t) const { return p_.data(emb_) + static_cast<std::size_t>(t) * cfg_.d_emb; }
  double* grow(TokenId t) { return p_.grad(emb_) + static_cast<std::size_t>(t) * cfg_.d_emb; }

  ScalarConfig cfg_;
  ParamStore p_;
  std::size_t emb_, w1_, b1_, w2_, b2_;
};

using RewardModel = ScalarModel<ModelKind::Reward>;
using ValueModel = ScalarModel<ModelKind::Value>;

}  // namespace lengthlab::nnet
