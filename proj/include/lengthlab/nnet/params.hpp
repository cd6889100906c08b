#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lengthlab/error.hpp"
#include "lengthlab/rng.hpp"

namespace lengthlab::nnet {

/// Named row-major matrix inside a ParamStore.
struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const noexcept { return rows * cols; }
};

/// All parameters of a model in one contiguous buffer, with a gradient
/// buffer of the same shape. Copying a store copies the model.
class ParamStore {
 public:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols) {
    slices_.push_back({std::move(name), values_.size(), rows, cols});
    values_.resize(values_.size() + rows * cols, 0.0);
    grads_.resize(values_.size(), 0.0);
    return slices_.size() - 1;
  }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> grads() noexcept { return grads_; }
  std::span<const double> grads() const noexcept { return grads_; }

  double* data(std::size_t slice) noexcept { return values_.data() + slices_[slice].offset; }
  const double* data(std::size_t slice) const noexcept { return values_.data() + slices_[slice].offset; }
  double* grad(std::size_t slice) noexcept { return grads_.data() + slices_[slice].offset; }

  const std::vector<ParamSlice>& slices() const noexcept { return slices_; }
  const ParamSlice& slice(std::size_t i) const { return slices_.at(i); }

  void zero_grad() noexcept { std::fill(grads_.begin(), grads_.end(), 0.0); }

  void fill(std::size_t slice, double v) noexcept {
    std::fill_n(data(slice), slices_[slice].size(), v);
  }
  void fill_gaussian(std::size_t slice, double stddev, Rng& rng) {
    double* p = data(slice);
    for (std::size_t i = 0; i < slices_[slice].size(); ++i) p[i] = gaussian(rng, 0.0, stddev);
  }

  bool all_finite() const noexcept {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }
  bool grads_finite() const noexcept {
    for (double v : grads_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::vector<ParamSlice> slices_;
  std::vector<double> values_;
  std::vector<double> grads_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam optimizer state for one parameter buffer.
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw Error("Adam: parameter count changed");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
      params[i] -= cfg_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
    }
  }

  std::int64_t steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }
  void set_lr(double lr) noexcept { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  std::int64_t t_ = 0;
};

// y = W x + b, W is rows x cols row-major.
inline void affine(const double* w, const double* b, const double* x, std::size_t rows, std::size_t cols, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wr = w + r * cols;
    double acc = b ? b[r] : 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
    y[r] = acc;
  }
}

// dW += dy x^T, db += dy, dx += W^T dy (dx may be null).
inline void affine_backward(const double* w, const double* x, const double* dy, std::size_t rows, std::size_t cols,
                            double* dw, double* db, double* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    if (db) db[r] += g;
    double* dwr = dw + r * cols;
    const double* wr = w + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      dwr[c] += g * x[c];
      if (dx) dx[c] += g * wr[c];
    }
  }
}

/// Softmax in place with max subtraction. -inf entries map to exactly 0.
inline void softmax_inplace(std::span<double> z) {
  double mx = -INFINITY;
  for (double v : z) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : z) v /= sum;
}

}  // namespace lengthlab::nnet

namespace lengthlab::nnet {

/// Tag written into checkpoints so a file is only loaded as the model type
/// that produced it.
enum class ModelKind : std::uint32_t { Policy = 1, Reward = 2, Value = 3 };

inline const char* kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::Policy: return "policy";
    case ModelKind::Reward: return "reward";
    case ModelKind::Value: return "value";
  }
  return "unknown";
}

using Meta = std::vector<std::pair<std::string, std::int64_t>>;

inline std::int64_t meta_get(const Meta& meta, const std::string& key) {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  throw CheckpointError("checkpoint is missing field '" + key + "'");
}

}  // namespace lengthlab::nnet
