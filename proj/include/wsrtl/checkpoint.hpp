#pragma once

#include "wsrtl/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace wsrtl {

struct SamplerState {
  bool present = false;
  std::string rng_state;
  std::size_t cursor = 0;
  std::vector<int> order;
  std::uint64_t epoch = 0;
};

struct CheckpointState {
  std::int64_t iteration = 0;
  int all_masked = 0;
  std::string rng_state;
  std::string train_config;
  std::vector<SamplerState> samplers;
};

/// Binary archive: magic "WCKP", format version, model config hash and JSON,
/// named parameters and buffers, optional optimizer slots and trainer state.
/// Written to a temporary file that is renamed into place.
void write_checkpoint(const std::string& path, const WsrtlModel<float>& model, const Adam<float>* adam,
                      const CheckpointState& state);

/// Restores into a model built with the same config; throws on a config hash
/// mismatch, a missing tensor or a shape mismatch.
void read_checkpoint(const std::string& path, WsrtlModel<float>& model, Adam<float>* adam, CheckpointState* state);

/// Model config stored in a checkpoint.
ModelConfig checkpoint_config(const std::string& path);

}  // namespace wsrtl
