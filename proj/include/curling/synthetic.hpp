#pragma once

// Seeded synthetic corpora in the canonical schema, for fixtures, smoke runs
// and throughput measurements. Captions and attributes draw from small
// fashion-flavoured word pools so every token is in-vocabulary.

#include <cstdint>
#include <string>

#include "curling/data_model.hpp"

namespace curling::synthetic {

struct CorpusSpec {
  std::string category = "dress";
  data::Split split = data::Split::kTrain;
  std::size_t images = 16;
  std::size_t triplets = 8;
  std::size_t d_img = 2048;
  std::size_t n_attr = 6;
  double attribute_rate = 0.7;  // chance an image carries a given category
  std::uint64_t seed = 1;
};

// When 2 * triplets <= images, triplet i pairs images 2i and 2i+1 so no image
// is shared between triplets; otherwise pairs are drawn at random.
data::DatasetBundle make_corpus(const CorpusSpec& spec);

// The attribute category names used by make_corpus, first n of a fixed list.
std::vector<std::string> attribute_names(std::size_t n);

}  // namespace curling::synthetic
