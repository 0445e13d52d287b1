#pragma once

#include "wsrtl/backbone.hpp"
#include "wsrtl/ofe.hpp"
#include "wsrtl/roii.hpp"
#include "wsrtl/transformer.hpp"

#include <memory>

namespace wsrtl {

template <typename Scalar>
struct ForwardResult {
  FeaturePyramid<Scalar> pyramid;
  RelationOutput<Scalar> relation;
  Prediction<Scalar> prediction;
};

/// Backbone, relation transformer and prediction heads, plus the training-only
/// inpainting and flow heads. All parameters live in one store.
template <typename Scalar>
class WsrtlModel {
 public:
  explicit WsrtlModel(const ModelConfig& config);
  WsrtlModel(const WsrtlModel&) = delete;
  WsrtlModel& operator=(const WsrtlModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore<Scalar>& store() { return *store_; }
  const ParameterStore<Scalar>& store() const { return *store_; }

  ForwardResult<Scalar> forward(const Var<Scalar>& images, const std::vector<AUCenters>& centers, bool training,
                                AttentionTrace<Scalar>* trace = nullptr) const;
  /// Inference path: backbone and prediction heads only.
  Prediction<Scalar> predict(const Var<Scalar>& images, const std::vector<AUCenters>& centers,
                             bool training = false) const {
    return forward(images, centers, training).prediction;
  }

  const Backbone<Scalar>& backbone() const { return backbone_; }
  const RoILearner<Scalar>& roi() const { return roi_; }
  const RelationTransformer<Scalar>& transformer() const { return transformer_; }

  // Training heads; throw when the model was built without them.
  Var<Scalar> generate(const Var<Scalar>& features) const;
  Var<Scalar> discriminate(const Var<Scalar>& patches) const;
  Var<Scalar> classify(const Var<Scalar>& patches) const;
  Var<Scalar> estimate_flow(const Var<Scalar>& deepest) const;

  /// Calls into G, D, C and the flow head since construction or reset.
  int head_calls() const { return head_calls_; }
  void reset_head_calls() { head_calls_ = 0; }

  std::int64_t inference_parameters() const { return store_->count(ParamGroup::backbone); }
  std::int64_t total_parameters() const { return store_->count(); }

 private:
  void require_heads() const;

  ModelConfig config_;
  std::unique_ptr<ParameterStore<Scalar>> store_;
  Backbone<Scalar> backbone_;
  RoILearner<Scalar> roi_;
  RelationTransformer<Scalar> transformer_;
  PredictionHeads<Scalar> heads_;
  PatchGenerator<Scalar> generator_;
  PatchCritic<Scalar> discriminator_, classifier_;
  FlowHead<Scalar> flow_;
  mutable int head_calls_ = 0;
};

}  // namespace wsrtl
