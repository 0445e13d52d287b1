#pragma once

#include "wsrtl/synthetic.hpp"
#include "wsrtl/trainer.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace wsrtl {

/// Malformed or inconsistent configuration (as opposed to a runtime failure).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "manifest"
  SyntheticSpec synthetic;
  std::uint64_t seed = 0;            // synthetic generation
  std::string labeled_manifest;
  std::string unlabeled_manifest;    // optional
  std::string rules;                 // AU rule table, manifest source only
  double intensity_threshold = -1;   // < 0: labels are already binary
  int folds = 4;
  int fold = 0;
  std::uint64_t fold_seed = 0;
};

/// Everything a run needs, from one JSON file. Sections "model", "train" and
/// "data" mirror the structs; absent keys keep their defaults, unknown keys
/// are rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  int eval_every = 0;
  int checkpoint_every = 0;

  /// Throws ConfigError.
  void validate() const;
  std::string to_json() const;  // canonical, key order fixed
  std::uint64_t hash() const;   // FNV-1a of to_json()
  std::uint64_t seed() const { return train.seed; }

  static RunConfig from_json(const std::string& text);
  /// `overrides` are "dotted.key=value" pairs; a value that parses as JSON is
  /// used as such, anything else as a string.
  static RunConfig load(const std::string& path, const std::vector<std::string>& overrides);
  static RunConfig from_text(const std::string& text, const std::vector<std::string>& overrides);
};

struct RunData {
  Dataset labeled;    // training subjects
  Dataset unlabeled;  // training subjects
  Dataset test;       // held-out subjects, every sample with labels
  AURuleTable rules;
  std::vector<std::string> test_subjects;
};

/// Builds or loads the samples and splits them by subject for `fold`.
RunData load_run_data(const RunConfig& config, int fold);

}  // namespace wsrtl
