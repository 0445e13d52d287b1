#pragma once

#include "wsrtl/dataset.hpp"
#include "wsrtl/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace wsrtl {

struct F1Report {
  std::vector<double> f1;
  std::vector<std::int64_t> tp, fp, fn;
  /// AUs where precision + recall = 0; their F1 is reported as 0.
  std::vector<bool> degenerate;
  double average = 0;

  int num_aus() const { return static_cast<int>(f1.size()); }
};

/// probs and labels [M, N]; a prediction is positive when prob >= threshold.
F1Report f1_per_au(const TensorF& probs, const TensorF& labels, double threshold = 0.5);

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Subjects shuffled under the seed and dealt round-robin, so test folds
/// differ in size by at most one. Throws when there are fewer than k subjects.
std::vector<Fold> subject_kfold(const std::vector<std::string>& subject_ids, int k, std::uint64_t seed);

struct Evaluation {
  F1Report report;
  TensorF probs;   // [M, N]
  TensorF labels;  // [M, N]
};

/// Center crop only, evaluation-mode forward, no gradients. Every sample
/// must carry labels.
Evaluation evaluate(const WsrtlModel<float>& model, const Dataset& samples, const AURuleTable& rules,
                    int batch_size = 16);

/// One row per AU and a final "Avg." row.
std::string report_markdown(const F1Report& report, const std::vector<std::string>& au_names);
std::string report_csv(const F1Report& report, const std::vector<std::string>& au_names);

}  // namespace wsrtl
