#include "wsrtl/model.hpp"

#include <stdexcept>

namespace wsrtl {

template <typename Scalar>
WsrtlModel<Scalar>::WsrtlModel(const ModelConfig& config)
    : config_(config), store_(std::make_unique<ParameterStore<Scalar>>()) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  backbone_ = Backbone<Scalar>(*store_, config_, rng);
  roi_ = RoILearner<Scalar>(*store_, config_, rng);
  transformer_ = RelationTransformer<Scalar>(*store_, config_, rng);
  heads_ = PredictionHeads<Scalar>(*store_, config_, rng);
  if (config_.training_heads) {
    generator_ = PatchGenerator<Scalar>(*store_, config_, rng);
    discriminator_ = PatchCritic<Scalar>(*store_, "discriminator", ParamGroup::discriminator, config_, rng);
    classifier_ = PatchCritic<Scalar>(*store_, "classifier", ParamGroup::classifier, config_, rng);
    flow_ = FlowHead<Scalar>(*store_, config_, rng);
  }
}

template <typename Scalar>
ForwardResult<Scalar> WsrtlModel<Scalar>::forward(const Var<Scalar>& images, const std::vector<AUCenters>& centers,
                                                  bool training, AttentionTrace<Scalar>* trace) const {
  ForwardResult<Scalar> r;
  r.pyramid = backbone_(images, training);
  auto [left, right] = roi_.sequences(r.pyramid.fused, centers);
  r.relation = transformer_(left, right, trace);
  auto regional = ops::per_token_linear(r.relation.average, heads_.regional_weight, heads_.regional_bias);
  auto global = heads_.global(ops::global_avg_pool(r.pyramid.stages[3]));
  r.prediction = fuse_predictions(regional, global);
  return r;
}

template <typename Scalar>
void WsrtlModel<Scalar>::require_heads() const {
  if (!config_.training_heads) throw std::logic_error("model was built without training heads");
  ++head_calls_;
}

template <typename Scalar>
Var<Scalar> WsrtlModel<Scalar>::generate(const Var<Scalar>& features) const {
  require_heads();
  return generator_(features);
}

template <typename Scalar>
Var<Scalar> WsrtlModel<Scalar>::discriminate(const Var<Scalar>& patches) const {
  require_heads();
  return discriminator_(patches);
}

template <typename Scalar>
Var<Scalar> WsrtlModel<Scalar>::classify(const Var<Scalar>& patches) const {
  require_heads();
  return classifier_(patches);
}

template <typename Scalar>
Var<Scalar> WsrtlModel<Scalar>::estimate_flow(const Var<Scalar>& deepest) const {
  require_heads();
  return flow_(deepest);
}

template class WsrtlModel<float>;
template class WsrtlModel<double>;

}  // namespace wsrtl
