#pragma once

#include <random>
#include <string>
#include <vector>

#include "curling/data_model.hpp"
#include "curling/model.hpp"

namespace curling::testing {

// Small enough for scalar oracles and finite differences, with every
// dimension distinct so transposition mistakes show up as shape errors.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.d_img = 6;
  c.vocab_size = 12;
  c.n_attr = 2;
  c.d_w = 4;
  c.vlad_clusters = 2;
  c.d_e = 5;
  c.gru_hidden = 3;
  c.d_l = 6;
  c.d_f = 3;
  c.d_ce = 4;
  c.sweep_rank = 2;
  c.sweep_dim = 3;
  c.dropout = 0.0;
  c.seed = 11;
  return c;
}

// attribute_counts[c] tokens in category c; 0 makes the expert unavailable.
inline ImageInput random_image(const ModelConfig& c, std::mt19937_64& rng, const std::vector<int>& attribute_counts) {
  std::normal_distribution<float> feat(0.0f, 1.0f);
  std::uniform_int_distribution<int> token(2, static_cast<int>(c.vocab_size) - 1);
  ImageInput img;
  img.feature.resize(c.d_img);
  for (auto& v : img.feature) v = feat(rng);
  img.attribute_tokens.resize(c.n_attr);
  for (std::size_t a = 0; a < c.n_attr; ++a)
    for (int k = 0; k < attribute_counts[a]; ++k) img.attribute_tokens[a].push_back(token(rng));
  return img;
}

inline ImageInput random_image(const ModelConfig& c, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(0, 3);
  std::vector<int> counts(c.n_attr);
  for (auto& k : counts) k = count(rng);
  return random_image(c, rng, counts);
}

inline data::TokenSequence random_sequence(const ModelConfig& c, std::mt19937_64& rng, int length,
                                           std::size_t max_len = 8) {
  std::uniform_int_distribution<int> token(1, static_cast<int>(c.vocab_size) - 1);
  data::TokenSequence s;
  s.length = length;
  s.ids.assign(std::max<std::size_t>(max_len, static_cast<std::size_t>(length)), data::Vocab::kPad);
  for (int i = 0; i < length; ++i) s.ids[static_cast<std::size_t>(i)] = token(rng);
  return s;
}

template <class S>
std::vector<std::pair<std::string, Parameter<S>*>> params_with_prefix(Model<S>& m,
                                                                      const std::vector<std::string>& prefixes) {
  std::vector<std::pair<std::string, Parameter<S>*>> out;
  for (auto& [name, p] : m.registry().params)
    for (const auto& prefix : prefixes)
      if (name.rfind(prefix, 0) == 0) {
        out.emplace_back(name, p);
        break;
      }
  return out;
}

// Gives BatchNorm running statistics non-trivial values so evaluation mode
// exercises them.
template <class S>
void perturb_running_stats(Model<S>& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mean(-0.3, 0.3), var(0.5, 1.5);
  for (auto& [name, buf] : m.registry().buffers) {
    const bool is_var = name.find("running_var") != std::string::npos;
    for (Index i = 0; i < buf->size(); ++i) buf->data()[i] = static_cast<S>(is_var ? var(rng) : mean(rng));
  }
}

}  // namespace curling::testing
