#pragma once

#include "wsrtl/au_rules.hpp"
#include "wsrtl/dataset.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace wsrtl {

/// Procedural faces: a shaded ellipse per subject with one oriented grating
/// stamp per active AU, drawn at both symmetric centers.
///
/// Label structure: AU 0 and AU 1 co-occur (AU 1 copies AU 0 with a small
/// flip probability), AU 2 and AU 3 are mutually exclusive, the rest are
/// independent fair coins. The motion AU moves its two stamps apart
/// horizontally (and by motion_y vertically) in the second frame of a pair.
struct SyntheticSpec {
  int num_aus = 6;
  int subjects = 8;
  int samples_per_subject = 16;
  int image_size = 200;
  int roi_image_size = 48;
  /// Unlabeled samples are spread evenly through each subject's sequence
  /// (every second one at 0.5).
  double unlabeled_fraction = 0.5;
  double cooccur_flip = 0.05;
  /// Index of the moving AU; -1 selects the last one.
  int motion_au = -1;
  int motion_x = 2;
  int motion_y = 1;
  std::optional<float> force_label;
  float noise = 0.02f;
  int stamp_size = 20;
  int landmark_jitter = 2;
};

struct FramePair {
  int sample = 0;  // index into labeled
  Image frame_a;
  Image frame_b;
  FlowField flow;
};

struct SyntheticDataset {
  Dataset labeled;
  Dataset unlabeled;  // carries reference labels for evaluation only
  std::vector<FramePair> pairs;
  AURuleTable rules;
  std::vector<Point2> layout;
};

/// Deterministic given (spec, seed). Labeled samples carry analytic flow_gt
/// from their frame pair.
SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed);

/// Labeled and unlabeled samples in one set, labeled first.
Dataset merged(const SyntheticDataset& data);

}  // namespace wsrtl
