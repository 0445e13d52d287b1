#pragma once

#include "wsrtl/ops.hpp"

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace wsrtl {

/// Parameter ownership groups; optimizer steps and freezing act per group.
enum class ParamGroup { backbone, generator, discriminator, classifier, flow };

const char* group_name(ParamGroup group);

template <typename Scalar>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    ParamGroup group;
    Var<Scalar> var;
  };

  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Var<Scalar> add(const std::string& name, ParamGroup group, Tensor<Scalar> init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, group, Var<Scalar>(std::move(init), true)});
    return entries_.back().var;
  }

  /// Non-learnable state (batch-norm running statistics). References stay
  /// valid for the store's lifetime.
  Tensor<Scalar>& add_buffer(const std::string& name, Tensor<Scalar> init) {
    if (buffer_index_.count(name)) throw std::invalid_argument("duplicate buffer " + name);
    buffers_.push_back({name, std::move(init)});
    buffer_index_[name] = buffers_.size() - 1;
    return buffers_.back().second;
  }

  const std::deque<Entry>& entries() const { return entries_; }
  std::deque<Entry>& entries() { return entries_; }
  const std::deque<std::pair<std::string, Tensor<Scalar>>>& buffers() const { return buffers_; }
  std::deque<std::pair<std::string, Tensor<Scalar>>>& buffers() { return buffers_; }

  Var<Scalar>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].var;
  }
  Tensor<Scalar>* find_buffer(const std::string& name) {
    auto it = buffer_index_.find(name);
    return it == buffer_index_.end() ? nullptr : &buffers_[it->second].second;
  }

  void set_trainable(ParamGroup group, bool on) {
    for (auto& e : entries_)
      if (e.group == group) e.var.set_requires_grad(on);
  }
  void set_all_trainable(bool on) {
    for (auto& e : entries_) e.var.set_requires_grad(on);
  }
  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

  std::int64_t count(ParamGroup group) const {
    std::int64_t n = 0;
    for (const auto& e : entries_)
      if (e.group == group) n += e.var.value().size();
    return n;
  }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.var.value().size();
    return n;
  }

  /// FNV-1a over the raw bytes of one group's values; used to observe updates.
  std::uint64_t hash(ParamGroup group) const;

 private:
  std::deque<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::deque<std::pair<std::string, Tensor<Scalar>>> buffers_;
  std::map<std::string, std::size_t> buffer_index_;
};

namespace init {

template <typename Scalar>
Tensor<Scalar> normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor<Scalar> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
Tensor<Scalar> uniform(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor<Scalar> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

/// He-normal for layers followed by a rectifier.
template <typename Scalar>
Tensor<Scalar> he_normal(Shape shape, int fan_in, std::mt19937_64& rng) {
  return normal<Scalar>(std::move(shape), std::sqrt(2.0 / fan_in), rng);
}

template <typename Scalar>
Tensor<Scalar> xavier_uniform(Shape shape, int fan_in, int fan_out, std::mt19937_64& rng) {
  return uniform<Scalar>(std::move(shape), std::sqrt(6.0 / (fan_in + fan_out)), rng);
}

}  // namespace init

template <typename Scalar>
struct Conv2d {
  Var<Scalar> weight, bias;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParameterStore<Scalar>& store, const std::string& name, ParamGroup group, int in, int out, int kernel,
         int stride_, int pad_, bool with_bias, std::mt19937_64& rng)
      : stride(stride_), pad(pad_) {
    weight = store.add(name + ".weight", group,
                       init::he_normal<Scalar>({out, in, kernel, kernel}, in * kernel * kernel, rng));
    if (with_bias) bias = store.add(name + ".bias", group, Tensor<Scalar>({out}));
  }
  Var<Scalar> operator()(const Var<Scalar>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
};

template <typename Scalar>
struct ConvTranspose2d {
  Var<Scalar> weight, bias;
  int stride = 1, pad = 0;

  ConvTranspose2d() = default;
  ConvTranspose2d(ParameterStore<Scalar>& store, const std::string& name, ParamGroup group, int in, int out,
                  int kernel, int stride_, int pad_, std::mt19937_64& rng)
      : stride(stride_), pad(pad_) {
    // Each output pixel sums about in*kernel^2/stride^2 taps.
    const int fan = std::max(1, in * kernel * kernel / (stride_ * stride_));
    weight = store.add(name + ".weight", group, init::he_normal<Scalar>({in, out, kernel, kernel}, fan, rng));
    bias = store.add(name + ".bias", group, Tensor<Scalar>({out}));
  }
  Var<Scalar> operator()(const Var<Scalar>& x) const { return ops::conv_transpose2d(x, weight, bias, stride, pad); }
};

template <typename Scalar>
struct BatchNorm2d {
  Var<Scalar> gamma, beta;
  Tensor<Scalar>* running_mean = nullptr;
  Tensor<Scalar>* running_var = nullptr;
  static constexpr double momentum = 0.1;
  static constexpr double eps = 1e-5;

  BatchNorm2d() = default;
  BatchNorm2d(ParameterStore<Scalar>& store, const std::string& name, ParamGroup group, int channels) {
    gamma = store.add(name + ".weight", group, Tensor<Scalar>({channels}, Scalar(1)));
    beta = store.add(name + ".bias", group, Tensor<Scalar>({channels}));
    running_mean = &store.add_buffer(name + ".running_mean", Tensor<Scalar>({channels}));
    running_var = &store.add_buffer(name + ".running_var", Tensor<Scalar>({channels}, Scalar(1)));
  }
  Var<Scalar> operator()(const Var<Scalar>& x, bool training) const {
    return ops::batch_norm2d(x, gamma, beta, *running_mean, *running_var, training, Scalar(momentum), Scalar(eps));
  }
};

template <typename Scalar>
struct Linear {
  Var<Scalar> weight, bias;

  Linear() = default;
  Linear(ParameterStore<Scalar>& store, const std::string& name, ParamGroup group, int in, int out,
         std::mt19937_64& rng) {
    weight = store.add(name + ".weight", group, init::xavier_uniform<Scalar>({out, in}, in, out, rng));
    bias = store.add(name + ".bias", group, Tensor<Scalar>({out}));
  }
  Var<Scalar> operator()(const Var<Scalar>& x) const { return ops::linear(x, weight, bias); }
};

template <typename Scalar>
struct LayerNorm {
  Var<Scalar> gamma, beta;
  static constexpr double eps = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParameterStore<Scalar>& store, const std::string& name, ParamGroup group, int dim) {
    gamma = store.add(name + ".weight", group, Tensor<Scalar>({dim}, Scalar(1)));
    beta = store.add(name + ".bias", group, Tensor<Scalar>({dim}));
  }
  Var<Scalar> operator()(const Var<Scalar>& x) const {
    return ops::layer_norm_last(x, gamma, beta, Scalar(eps));
  }
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam without weight decay. Moments and step counts are kept per parameter
/// because groups are stepped at different rates.
template <typename Scalar>
class Adam {
 public:
  struct Slot {
    Tensor<Scalar> m, v;
    std::int64_t steps = 0;
  };

  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Applies one update to every parameter of the listed groups. Parameters
  /// without an accumulated gradient are treated as having a zero gradient.
  void step(ParameterStore<Scalar>& store, const std::vector<ParamGroup>& groups);

  const AdamConfig& config() const { return config_; }
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  AdamConfig config_;
  std::map<std::string, Slot> slots_;
};

}  // namespace wsrtl
