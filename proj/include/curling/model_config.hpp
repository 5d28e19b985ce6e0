#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "json.hpp"

namespace curling {

enum class TemporalReduce { kMean, kLast };
enum class CompositionMode { kCurling, kSum };

// Architecture hyperparameters. Everything a checkpoint needs to rebuild a
// model with matching tensor shapes.
struct ModelConfig {
  std::size_t d_img = 2048;
  std::size_t vocab_size = 2;
  std::size_t n_attr = 6;
  std::size_t d_w = 300;
  std::size_t vlad_clusters = 4;
  std::size_t d_e = 512;
  std::size_t gru_hidden = 256;
  std::size_t d_l = 384;  // split evenly over kernel widths 2, 3 and 4
  std::size_t d_f = 256;
  std::size_t d_ce = 256;
  std::size_t sweep_rank = 4;
  std::size_t sweep_dim = 128;
  bool share_filters = false;
  TemporalReduce temporal = TemporalReduce::kMean;
  CompositionMode composition = CompositionMode::kCurling;
  double dropout = 0.1;
  double bn_momentum = 0.9;
  std::uint64_t seed = 7;

  std::size_t n_experts() const { return 1 + n_attr; }
  std::size_t d_temporal() const { return 2 * gru_hidden; }
  std::size_t d_text() const { return d_w + d_temporal() + d_l; }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
// Missing keys keep defaults; unknown keys raise SchemaError.
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace curling
