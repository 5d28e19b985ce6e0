#pragma once

// Checkpoint container "CRCK1": magic, u32 version, a JSON header with the
// configuration snapshot, then named float32 tensors and a trailing FNV-1a
// checksum of everything before it. Little-endian throughout.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "curling/model.hpp"
#include "curling/objective.hpp"
#include "curling/training.hpp"

namespace curling {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Mat<float> value;

  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  ModelConfig model;
  training::TrainingConfig training;
  objective::LossConfig loss;
  std::vector<std::string> vocab;
  std::vector<std::string> attribute_categories;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> buffers;
  std::vector<NamedTensor> adam_m;  // empty when saved without optimizer state
  std::vector<NamedTensor> adam_v;

  // Identity of the servable model: config, vocabulary and every parameter
  // and buffer. Optimizer state does not participate.
  std::uint64_t fingerprint() const;
  std::string fingerprint_hex() const;

  bool operator==(const Checkpoint&) const = default;
};

// Snapshot of a model (and optionally its optimizer state).
Checkpoint capture(const Model<float>& model, const training::TrainState* state, const training::TrainingConfig& tc,
                   const objective::LossConfig& loss, const data::Vocab& vocab,
                   const std::vector<std::string>& attribute_categories);

// Copies tensors into a model built with a compatible config. Everything is
// validated before the first write: SchemaError names the first mismatched
// config key or tensor.
void restore(const Checkpoint& ckpt, Model<float>& model, training::TrainState* state = nullptr);

// Written to a sibling temporary and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// FormatError on bad magic, unknown version, truncation or checksum mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

data::Vocab checkpoint_vocab(const Checkpoint& ckpt);

}  // namespace curling
