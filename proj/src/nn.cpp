#include "wsrtl/nn.hpp"

#include <algorithm>
#include <cstring>

namespace wsrtl {

const char* group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::generator: return "generator";
    case ParamGroup::discriminator: return "discriminator";
    case ParamGroup::classifier: return "classifier";
    case ParamGroup::flow: return "flow";
  }
  return "unknown";
}

template <typename Scalar>
std::uint64_t ParameterStore<Scalar>::hash(ParamGroup group) const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& e : entries_) {
    if (e.group != group) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(e.var.value().data());
    const std::size_t n = static_cast<std::size_t>(e.var.value().size()) * sizeof(Scalar);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

template <typename Scalar>
void Adam<Scalar>::step(ParameterStore<Scalar>& store, const std::vector<ParamGroup>& groups) {
  const Scalar b1 = Scalar(config_.beta1), b2 = Scalar(config_.beta2);
  for (auto& e : store.entries()) {
    if (std::find(groups.begin(), groups.end(), e.group) == groups.end()) continue;
    auto& value = e.var.mutable_value();
    auto& slot = slots_[e.name];
    if (slot.m.empty()) {
      slot.m = Tensor<Scalar>(value.shape());
      slot.v = Tensor<Scalar>(value.shape());
    }
    ++slot.steps;
    const auto& grad = e.var.grad();
    if (grad.empty()) {
      slot.m.array() *= b1;
      slot.v.array() *= b2;
    } else {
      slot.m.array() = b1 * slot.m.array() + (Scalar(1) - b1) * grad.array();
      slot.v.array() = b2 * slot.v.array() + (Scalar(1) - b2) * grad.array().square();
    }
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(slot.steps));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(slot.steps));
    const Scalar step = Scalar(config_.lr / c1);
    const Scalar root_c2 = Scalar(std::sqrt(c2));
    value.array() -= step * slot.m.array() / (slot.v.array().sqrt() / root_c2 + Scalar(config_.eps));
  }
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class Adam<float>;
template class Adam<double>;

}  // namespace wsrtl
