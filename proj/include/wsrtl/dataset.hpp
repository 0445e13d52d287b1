#pragma once

#include "wsrtl/au_rules.hpp"
#include "wsrtl/flow.hpp"
#include "wsrtl/image.hpp"
#include "wsrtl/tensor.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace wsrtl {

struct Sample {
  Image image;
  std::vector<Point2> landmarks;
  /// Binary AU labels. Unlabeled samples may still carry reference labels
  /// for evaluation; training reads them only when is_labeled is set.
  std::vector<float> labels;
  std::optional<FlowField> flow_gt;
  std::string subject_id;
  bool is_labeled = false;

  bool has_labels() const { return !labels.empty(); }
  /// Throws std::invalid_argument when an invariant is broken.
  void validate(int num_aus) const;
};

using Dataset = std::vector<Sample>;

std::vector<Point2> read_landmarks(const std::string& path);
void write_landmarks(const std::string& path, const std::vector<Point2>& landmarks);

struct ManifestOptions {
  int num_aus = 0;
  /// When set, raw label values are intensities and v > threshold is positive.
  std::optional<double> intensity_threshold;
  /// When set, every image is aligned onto these landmarks.
  std::vector<Point2> reference_landmarks;
  int aligned_size = 200;
};

/// One JSON object per line: image_path, landmarks_path or landmarks
/// ([[x, y], ...]), optional labels, subject_id, optional flow_path. Relative
/// paths resolve against the manifest's directory.
Dataset load_manifest(const std::string& path, const ManifestOptions& options);
/// Writes images, landmarks and flows next to the manifest.
void save_manifest(const std::string& path, const Dataset& samples);

/// Centers in the crop frame. Mirroring maps a center c to width - c, which
/// maps the half-open patch [c - s/2, c + s/2) onto the mirrored pixels.
AUCenters mirror_centers(const AUCenters& centers, int width);

/// Samples restricted to the listed subjects.
Dataset filter_subjects(const Dataset& samples, const std::vector<std::string>& subjects);
std::vector<std::string> subject_list(const Dataset& samples);

struct Batch {
  TensorF images;  // [B, 3, S, S]
  std::vector<AUCenters> centers;
  TensorF labels;  // [B, N]; zero rows where a sample has no labels
  std::vector<bool> labeled;
  std::vector<std::optional<FlowField>> flow;  // S x S, crop frame
  std::vector<int> indices;

  int size() const { return static_cast<int>(indices.size()); }
};

struct CropOptions {
  int crop_size = 192;
  bool random_crop = false;
  bool flip = false;
};

/// Crops (and optionally flips) one sample into row `row` of a batch whose
/// tensors are already sized.
void fill_batch_row(Batch& batch, int row, const Sample& sample, int index, const AURuleTable& rules,
                    int crop_y, int crop_x, bool flip, int crop_size);

/// Center-cropped, unflipped batch of the given sample indices.
Batch make_batch(const Dataset& samples, const std::vector<int>& indices, const AURuleTable& rules,
                 int crop_size = 192);

/// Endless stream of fixed-size batches. Each epoch is a seeded permutation;
/// a trailing partial batch is dropped. With augmentation every sample gets a
/// random crop and a coin-flip horizontal mirror, otherwise a center crop.
class BatchIterator {
 public:
  BatchIterator(const Dataset& samples, const AURuleTable& rules, int batch_size, std::uint64_t seed,
                bool augment, int crop_size = 192);

  Batch next();
  std::uint64_t epoch() const { return epoch_; }

  /// Engine state, for checkpointing.
  std::string rng_state() const;
  void set_rng_state(const std::string& state);
  std::size_t cursor() const { return cursor_; }
  const std::vector<int>& order() const { return order_; }
  void restore(const std::string& rng_state, std::size_t cursor, std::vector<int> order, std::uint64_t epoch);

 private:
  void reshuffle();

  const Dataset* samples_;
  const AURuleTable* rules_;
  int batch_size_;
  bool augment_;
  int crop_size_;
  std::mt19937_64 rng_;
  std::vector<int> order_;
  std::size_t cursor_ = 0;
  std::uint64_t epoch_ = 0;
};

}  // namespace wsrtl
