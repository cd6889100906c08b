#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "lengthlab/nnet/params.hpp"
#include "lengthlab/vocab.hpp"

namespace lengthlab::nnet {

struct PolicyConfig {
  std::size_t vocab_size = 0;
  TokenId bos = 0;
  TokenId eos = 1;
  TokenId pad = 2;
  std::size_t context = 4;
  std::size_t d_emb = 16;
  std::size_t d_hidden = 32;
  std::size_t max_positions = 256;

  static PolicyConfig for_vocab(const Vocab& v) {
    PolicyConfig c;
    c.vocab_size = v.size();
    c.bos = v.bos();
    c.eos = v.eos();
    c.pad = v.pad();
    return c;
  }
};

/// Fixed-context feedforward language model:
///
///   x      = [E[c_1]; ...; E[c_n]]           last n tokens, BOS-padded
///   h      = tanh(W1 x + b1 + P[t] + u t / 32)   t = position in the response
///   logits = W2 h + b2,  BOS and PAD masked to -inf
///
/// The position table P and the ramp u let the model represent
/// length-dependent stopping; the ramp shares one signal across positions so
/// stopping behaviour shifts quickly, the table refines it per position.
/// BOS and PAD can never be emitted, so they carry no probability; otherwise
/// mass parked on them would inflate the KL to the reference without any
/// change in behaviour.
class PolicyModel {
 public:
  static constexpr ModelKind kKind = ModelKind::Policy;

  struct Step {
    std::vector<TokenId> ctx;
    std::size_t pos = 0;
    std::vector<double> x, h, logits, probs;
  };

  explicit PolicyModel(PolicyConfig cfg) : cfg_(cfg) {
    if (cfg.vocab_size < 2 || cfg.context < 1 || cfg.d_emb < 1 || cfg.d_hidden < 1 || cfg.max_positions < 1)
      throw ConfigError("policy: invalid dimensions");
    emb_ = p_.add("embedding", cfg.vocab_size, cfg.d_emb);
    w1_ = p_.add("hidden.weight", cfg.d_hidden, cfg.context * cfg.d_emb);
    b1_ = p_.add("hidden.bias", cfg.d_hidden, 1);
    pos_ = p_.add("position", cfg.max_positions, cfg.d_hidden);
    ramp_ = p_.add("position.ramp", cfg.d_hidden, 1);
    w2_ = p_.add("output.weight", cfg.vocab_size, cfg.d_hidden);
    b2_ = p_.add("output.bias", cfg.vocab_size, 1);
  }

  static PolicyModel random(PolicyConfig cfg, Rng& rng) {
    PolicyModel m(cfg);
    m.p_.fill_gaussian(m.emb_, 1.0, rng);
    m.p_.fill_gaussian(m.w1_, 1.0 / std::sqrt(static_cast<double>(cfg.context * cfg.d_emb)), rng);
    m.p_.fill_gaussian(m.pos_, 0.01, rng);
    m.p_.fill_gaussian(m.w2_, 0.01, rng);
    return m;
  }

  const PolicyConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return p_; }
  const ParamStore& params() const noexcept { return p_; }
  std::size_t vocab_size() const noexcept { return cfg_.vocab_size; }

  std::size_t slice_embedding() const noexcept { return emb_; }
  std::size_t slice_output_weight() const noexcept { return w2_; }
  std::size_t slice_output_bias() const noexcept { return b2_; }

  /// Last `context` tokens of prompt ++ response[0, t), left-padded with BOS.
  std::vector<TokenId> context_at(std::span<const TokenId> prompt, std::span<const TokenId> response,
                                  std::size_t t) const {
    std::vector<TokenId> ctx(cfg_.context, cfg_.bos);
    const std::size_t total = prompt.size() + t;
    for (std::size_t i = 0; i < cfg_.context && i < total; ++i) {
      const std::size_t src = total - 1 - i;
      ctx[cfg_.context - 1 - i] = src < prompt.size() ? prompt[src] : response[src - prompt.size()];
    }
    return ctx;
  }

  void forward(std::span<const TokenId> ctx, std::size_t pos, Step& s) const {
    const auto n = cfg_.context, de = cfg_.d_emb, dh = cfg_.d_hidden, v = cfg_.vocab_size;
    s.ctx.assign(ctx.begin(), ctx.end());
    s.pos = std::min(pos, cfg_.max_positions - 1);
    s.x.resize(n * de);
    for (std::size_t i = 0; i < n; ++i) {
      const double* e = p_.data(emb_) + static_cast<std::size_t>(ctx[i]) * de;
      std::copy(e, e + de, s.x.begin() + static_cast<std::ptrdiff_t>(i * de));
    }
    s.h.resize(dh);
    affine(p_.data(w1_), p_.data(b1_), s.x.data(), dh, n * de, s.h.data());
    const double* pr = p_.data(pos_) + s.pos * dh;
    const double* ramp = p_.data(ramp_);
    const double r = ramp_feature(s.pos);
    for (std::size_t j = 0; j < dh; ++j) s.h[j] = std::tanh(s.h[j] + pr[j] + ramp[j] * r);
    s.logits.resize(v);
    affine(p_.data(w2_), p_.data(b2_), s.h.data(), v, dh, s.logits.data());
    s.logits[static_cast<std::size_t>(cfg_.bos)] = -INFINITY;
    s.logits[static_cast<std::size_t>(cfg_.pad)] = -INFINITY;
    s.probs = s.logits;
    softmax_inplace(s.probs);
  }

  std::vector<double> next_token_dist(std::span<const TokenId> ctx, std::size_t pos = 0) const {
    Step s;
    forward(ctx, pos, s);
    return s.probs;
  }

  /// Accumulates parameter gradients given dLoss/dlogits for one step.
  void backward(const Step& s, std::span<const double> dlogits) {
    const auto n = cfg_.context, de = cfg_.d_emb, dh = cfg_.d_hidden, v = cfg_.vocab_size;
    std::vector<double> dh_vec(dh, 0.0);
    affine_backward(p_.data(w2_), s.h.data(), dlogits.data(), v, dh, p_.grad(w2_), p_.grad(b2_), dh_vec.data());
    for (std::size_t j = 0; j < dh; ++j) dh_vec[j] *= 1.0 - s.h[j] * s.h[j];
    double* dpos = p_.grad(pos_) + s.pos * dh;
    double* dramp = p_.grad(ramp_);
    const double r = ramp_feature(s.pos);
    for (std::size_t j = 0; j < dh; ++j) {
      dpos[j] += dh_vec[j];
      dramp[j] += dh_vec[j] * r;
    }
    std::vector<double> dx(n * de, 0.0);
    affine_backward(p_.data(w1_), s.x.data(), dh_vec.data(), dh, n * de, p_.grad(w1_), p_.grad(b1_), dx.data());
    for (std::size_t i = 0; i < n; ++i) {
      double* de_row = p_.grad(emb_) + static_cast<std::size_t>(s.ctx[i]) * de;
      for (std::size_t k = 0; k < de; ++k) de_row[k] += dx[i * de + k];
    }
  }

  Meta meta() const {
    return {{"vocab_size", static_cast<std::int64_t>(cfg_.vocab_size)},
            {"bos", cfg_.bos},
            {"eos", cfg_.eos},
            {"pad", cfg_.pad},
            {"context", static_cast<std::int64_t>(cfg_.context)},
            {"d_emb", static_cast<std::int64_t>(cfg_.d_emb)},
            {"d_hidden", static_cast<std::int64_t>(cfg_.d_hidden)},
            {"max_positions", static_cast<std::int64_t>(cfg_.max_positions)}};
  }

  static PolicyModel from_meta(const Meta& m) {
    PolicyConfig c;
    c.vocab_size = static_cast<std::size_t>(meta_get(m, "vocab_size"));
    c.bos = static_cast<TokenId>(meta_get(m, "bos"));
    c.eos = static_cast<TokenId>(meta_get(m, "eos"));
    c.pad = static_cast<TokenId>(meta_get(m, "pad"));
    c.context = static_cast<std::size_t>(meta_get(m, "context"));
    c.d_emb = static_cast<std::size_t>(meta_get(m, "d_emb"));
    c.d_hidden = static_cast<std::size_t>(meta_get(m, "d_hidden"));
    c.max_positions = static_cast<std::size_t>(meta_get(m, "max_positions"));
    return PolicyModel(c);
  }

 private:
  PolicyConfig cfg_;
  ParamStore p_;
  static double ramp_feature(std::size_t pos) noexcept { return static_cast<double>(pos) / 32.0; }

  std::size_t emb_, w1_, b1_, pos_, ramp_, w2_, b2_;
};

}  // namespace lengthlab::nnet
