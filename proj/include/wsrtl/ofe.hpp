#pragma once

#include "wsrtl/backbone.hpp"
#include "wsrtl/flow.hpp"
#include "wsrtl/nn.hpp"

#include <optional>
#include <vector>

namespace wsrtl {

/// Two stride-2 transposed convs from the deepest stage map (stride 32) to a
/// two-channel (u, v) grid at stride 8.
template <typename Scalar>
class FlowHead {
 public:
  FlowHead() = default;
  FlowHead(ParameterStore<Scalar>& store, const ModelConfig& config, std::mt19937_64& rng);
  /// [B, C4, S/32, S/32] -> [B, 2, S/8, S/8].
  Var<Scalar> operator()(const Var<Scalar>& deepest) const;

 private:
  ConvTranspose2d<Scalar> up1_, up2_;
};

/// Ground truth on the head's grid: each available flow is average pooled
/// by `factor`; the mask marks samples that carry flow.
struct FlowTarget {
  TensorF flow;               // [B, 2, S/f, S/f]
  std::vector<int> rows;      // samples with flow
};

FlowTarget flow_target(const std::vector<std::optional<FlowField>>& flows, int factor);

/// Mean absolute difference over every component; throws on shape mismatch.
template <typename Scalar>
Var<Scalar> flow_loss(const Var<Scalar>& predicted, const Var<Scalar>& target);

}  // namespace wsrtl
