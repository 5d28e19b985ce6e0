#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "curling/data_model.hpp"
#include "curling/model.hpp"
#include "json.hpp"

namespace curling::training {

struct TrainingConfig {
  double lr0 = 0.0005;
  double decay = 0.95;            // multiplied in once every decay_every steps
  std::size_t decay_every = 1;
  std::size_t batch_size = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 7;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t max_len = data::kDefaultMaxLen;

  void validate() const;
  bool operator==(const TrainingConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainingConfig& c);
// Missing keys keep defaults; unknown keys raise SchemaError.
void from_json(const nlohmann::json& j, TrainingConfig& c);

double lr_at(std::uint64_t step, const TrainingConfig& config);

// Optimizer state. Moments are aligned with the model registry's params.
struct TrainState {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::vector<Mat<float>> adam_m;
  std::vector<Mat<float>> adam_v;

  static TrainState fresh(const Model<float>& model);
  bool operator==(const TrainState&) const;
};

// A triplet already mapped to model input.
struct Example {
  ImageInput source;
  ImageInput target;
  data::TokenSequence text;
};

std::vector<Example> prepare_examples(const data::DatasetBundle& bundle, const data::Vocab& vocab,
                                      const std::vector<std::string>& attribute_categories, std::size_t max_len);

struct StepRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

nlohmann::json to_json(const StepRecord& r);

using StepLogger = std::function<void(const StepRecord&)>;

// One Adam step on a batch. Parameters that received no gradient are left
// untouched, moments included. Returns the batch loss before the update.
double train_step(Model<float>& model, TrainState& state, std::span<const Example> batch,
                  const TrainingConfig& config, const objective::LossConfig& loss);

// Seeded permutation of [0, n) for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

struct EpochResult {
  double mean_loss = 0.0;
  std::size_t batches = 0;
  std::size_t dropped = 0;   // triplets in a final batch too short to train on
  bool stopped = false;      // hit the step budget mid-epoch
};

// Shuffles with seed + epoch, trains sequential batches of L and drops a final
// batch smaller than 2. Stops early once state.step reaches max_steps (0 = no cap).
EpochResult train_epoch(Model<float>& model, TrainState& state, std::span<const Example> examples,
                        const TrainingConfig& config, const objective::LossConfig& loss,
                        const StepLogger& log = {}, std::uint64_t max_steps = 0);

// Fraction of rows of the evaluation-mode L x L similarity whose argmax is
// the diagonal (ties count against). Batches of at most chunk examples.
double in_batch_recall_at_1(Model<float>& model, std::span<const Example> examples, std::size_t chunk = 32);

}  // namespace curling::training
