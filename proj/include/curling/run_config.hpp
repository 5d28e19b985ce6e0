#pragma once

// One experiment's settings: a JSON object with one section per module.
// Every section and key is optional; unknown ones are rejected.
//
//   {"data": {...}, "model": {...}, "training": {...}, "loss": {...},
//    "evaluation": {...}, "service": {...}}

#include <filesystem>
#include <string>

#include "curling/model_config.hpp"
#include "curling/objective.hpp"
#include "curling/training.hpp"
#include "json.hpp"

namespace curling {

struct DataSection {
  int min_count = 1;
  std::size_t max_attrs = 19;
  std::string word_vectors;  // optional "token v1 ... v_dw" file for the embedding

  bool operator==(const DataSection&) const = default;
};

struct EvaluationSection {
  std::size_t dump_k = 50;  // ids kept per query in the ranking dump
  std::vector<double> ensemble_weights;  // empty: uniform

  bool operator==(const EvaluationSection&) const = default;
};

struct ServiceSection {
  std::string bind = "127.0.0.1:8080";
  std::string thumbnail_dir;

  bool operator==(const ServiceSection&) const = default;
};

struct RunConfig {
  DataSection data;
  ModelConfig model;
  training::TrainingConfig training;
  objective::LossConfig loss;
  EvaluationSection evaluation;
  ServiceSection service;

  bool operator==(const RunConfig&) const = default;
};

void to_json(nlohmann::json& j, const RunConfig& c);
// SchemaError on unknown sections or keys and on ill-typed values.
void from_json(const nlohmann::json& j, RunConfig& c);

// UsageError when the file does not exist; SchemaError when it is not valid.
RunConfig load_run_config(const std::filesystem::path& path);
void write_run_config(const std::filesystem::path& path, const RunConfig& c);

}  // namespace curling
