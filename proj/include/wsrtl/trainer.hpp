#pragma once

#include "wsrtl/dataset.hpp"
#include "wsrtl/metrics.hpp"
#include "wsrtl/mixmatch.hpp"
#include "wsrtl/model.hpp"

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>

namespace wsrtl {

struct TrainConfig {
  int iterations = 2000;
  int batch_size = 4;
  double lambda1 = 0.1;
  double lambda2 = 0.1;
  double lambda_f = 0.2;
  double lambda_u = 1.0;
  double temperature = 0.5;
  double alpha = 0.75;  // mixup Beta parameter
  double lr = 3e-4;
  int flow_step = 3;    // frames between the flow pair; recorded, applied at extraction
  std::uint64_t seed = 0;
  bool augment = true;
  bool use_semi = true;
  bool use_roii = true;
  bool use_ofe = true;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

/// Loss values of one iteration. total is the joint objective
/// L_Sup + L_D + L_G + lambda_f * L_F.
struct LossReport {
  std::int64_t iter = 0;
  double total = 0;
  double semi = 0;
  double sup = 0;
  double d = 0;
  double g = 0;
  double f = 0;
  double c = 0;
  double rec = 0;
  double adv_g = 0;
  double c_g = 0;
  int flow_rows = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, LossReport report) : std::runtime_error(what), report_(report) {}
  const LossReport& report() const { return report_; }

 private:
  LossReport report_;
};

/// Mean BCE over entries with mask 1. An all-masked input returns 0 and
/// increments `all_masked` when given.
template <typename Scalar>
Var<Scalar> masked_supervised_loss(const Var<Scalar>& probs, const Tensor<Scalar>& labels, const Tensor<Scalar>& mask,
                                   int* all_masked = nullptr);

struct JointLoss {
  double sup = 0, d = 0, g = 0, f = 0;
};
inline double joint_loss(const JointLoss& l, double lambda_f) { return l.sup + l.d + l.g + lambda_f * l.f; }

/// Optimizer phases of one iteration, in order.
enum class Phase { semi, discriminator, classifier, joint };

class Trainer {
 public:
  using Observer = std::function<void(Phase)>;

  /// Unlabeled samples may be empty; the semi step and unlabeled inpainting
  /// are then skipped.
  Trainer(WsrtlModel<float>& model, const TrainConfig& config, const Dataset& labeled, const Dataset& unlabeled,
          const AURuleTable& rules);

  /// Draws the next batch pair and runs one iteration.
  LossReport step();
  /// One iteration on the given batches. `unlabeled` may be null.
  LossReport train_step(const Batch& labeled, const Batch* unlabeled);

  /// Called after every optimizer update.
  void set_observer(Observer observer) { observer_ = std::move(observer); }

  std::int64_t iteration() const { return iteration_; }
  int all_masked_batches() const { return all_masked_; }
  const TrainConfig& config() const { return config_; }
  WsrtlModel<float>& model() { return model_; }
  const AURuleTable& rules() const { return rules_; }

  /// Model, optimizer, sampler and rng state. Written through a temporary
  /// file; throws on any IO failure.
  void save_checkpoint(const std::string& path) const;
  /// Throws when the checkpoint was written for another model config.
  void load_checkpoint(const std::string& path);

 private:
  void notify(Phase p) {
    if (observer_) observer_(p);
  }

  WsrtlModel<float>& model_;
  TrainConfig config_;
  const AURuleTable& rules_;
  Adam<float> adam_;
  std::mt19937_64 rng_;
  std::optional<BatchIterator> labeled_it_, unlabeled_it_;
  std::int64_t iteration_ = 0;
  int all_masked_ = 0;
  Observer observer_;
};

struct FitOptions {
  std::string log_path;         // JSON lines; empty disables logging
  std::string checkpoint_path;  // empty disables checkpoints
  int checkpoint_every = 0;
  int eval_every = 0;
  /// Samples scored at each evaluation (center crop).
  const Dataset* eval_set = nullptr;
  /// Stop once the evaluated average F1 reaches this value (0 disables).
  double target_f1 = 0;
  std::function<void(const LossReport&)> on_step;
};

struct FitResult {
  std::vector<LossReport> history;
  std::optional<double> last_f1;
  bool reached_target = false;
};

/// Runs until the trainer's iteration count reaches config.iterations or the
/// F1 target is met. Log lines carry iter, L, L_semi, L_Sup, L_D,
/// L_G, L_F and, on evaluation iterations, f1_avg.
FitResult fit(Trainer& trainer, const FitOptions& options);

/// The JSON-lines record of one iteration.
std::string log_line(const LossReport& report, std::optional<double> f1_avg);

}  // namespace wsrtl
