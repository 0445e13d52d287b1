#include "wsrtl/ofe.hpp"

#include <algorithm>
#include <stdexcept>

namespace wsrtl {

template <typename Scalar>
FlowHead<Scalar>::FlowHead(ParameterStore<Scalar>& store, const ModelConfig& config, std::mt19937_64& rng) {
  const int c4 = config.stage_channels(3);
  up1_ = ConvTranspose2d<Scalar>(store, "flow.0", ParamGroup::flow, c4, std::max(1, c4 / 2), 4, 2, 1, rng);
  up2_ = ConvTranspose2d<Scalar>(store, "flow.1", ParamGroup::flow, std::max(1, c4 / 2), 2, 4, 2, 1, rng);
}

template <typename Scalar>
Var<Scalar> FlowHead<Scalar>::operator()(const Var<Scalar>& deepest) const {
  return up2_(ops::leaky_relu(up1_(deepest), Scalar(0.2)));
}

FlowTarget flow_target(const std::vector<std::optional<FlowField>>& flows, int factor) {
  FlowTarget t;
  int grid = -1;
  for (std::size_t i = 0; i < flows.size(); ++i) {
    if (!flows[i]) continue;
    const int g = flows[i]->height() / factor;
    if (grid >= 0 && g != grid) throw std::invalid_argument("flow_target: flows differ in size");
    grid = g;
  }
  t.flow = TensorF({static_cast<int>(flows.size()), 2, std::max(grid, 0), std::max(grid, 0)});
  for (std::size_t i = 0; i < flows.size(); ++i) {
    if (!flows[i]) continue;
    const FlowField pooled = flows[i]->average_pooled(factor);
    const int row = static_cast<int>(i);
    t.rows.push_back(row);
    for (int y = 0; y < grid; ++y)
      for (int x = 0; x < grid; ++x) {
        t.flow.at(row, 0, y, x) = pooled.u(y, x);
        t.flow.at(row, 1, y, x) = pooled.v(y, x);
      }
  }
  return t;
}

template <typename Scalar>
Var<Scalar> flow_loss(const Var<Scalar>& predicted, const Var<Scalar>& target) {
  if (predicted.shape() != target.shape())
    throw std::invalid_argument("flow_loss: " + shape_string(predicted.shape()) + " vs " +
                                shape_string(target.shape()));
  return ops::l1_mean(predicted, target);
}

template class FlowHead<float>;
template class FlowHead<double>;
template Var<float> flow_loss<float>(const Var<float>&, const Var<float>&);
template Var<double> flow_loss<double>(const Var<double>&, const Var<double>&);

}  // namespace wsrtl
