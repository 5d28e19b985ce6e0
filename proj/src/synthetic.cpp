#include "curling/synthetic.hpp"

#include <algorithm>
#include <cstdio>
#include <random>

#include "curling/errors.hpp"

namespace curling::synthetic {

namespace {

const std::vector<std::string> kCategories = {"texture", "fabric", "shape", "part", "style", "color", "fit", "length"};

const std::vector<std::string> kAttributeWords = {
    "floral", "striped", "plaid",  "solid",   "lace",    "denim",  "cotton", "silk",   "knit",   "leather",
    "aline",  "sheath",  "wrap",   "shift",   "collar",  "sleeve", "pocket", "button", "zipper", "hood",
    "boho",   "casual",  "formal", "vintage", "sporty",  "red",    "blue",   "black",  "white",  "green",
    "slim",   "loose",   "boxy",   "fitted",  "maxi",    "midi",   "mini",   "cropped"};

const std::vector<std::string> kCaptionWords = {
    "is",      "more",   "less",    "has",    "with",     "darker", "lighter", "longer", "shorter", "brighter",
    "red",     "blue",   "black",   "white",  "pink",     "yellow", "green",   "purple", "grey",    "beige",
    "sleeves", "straps", "pattern", "print",  "graphic",  "logo",   "neckline", "collar", "buttons", "pockets",
    "flowy",   "tight",  "casual",  "formal", "elegant",  "sporty", "shiny",    "matte",  "sheer",   "textured"};

std::string pick(const std::vector<std::string>& pool, std::mt19937_64& rng) {
  return pool[static_cast<std::size_t>(rng() % pool.size())];
}

std::string caption(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(3, 6);
  std::string out;
  const int n = len(rng);
  for (int i = 0; i < n; ++i) {
    if (i) out += ' ';
    out += pick(kCaptionWords, rng);
  }
  return out;
}

}  // namespace

std::vector<std::string> attribute_names(std::size_t n) {
  if (n > kCategories.size())
    throw SchemaError("synthetic corpora support at most " + std::to_string(kCategories.size()) +
                      " attribute categories");
  return {kCategories.begin(), kCategories.begin() + static_cast<std::ptrdiff_t>(n)};
}

data::DatasetBundle make_corpus(const CorpusSpec& spec) {
  if (spec.triplets > 0 && spec.images < 2) throw DataError("synthetic corpus: triplets need at least 2 images");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<float> feat(0.0f, 1.0f);
  std::bernoulli_distribution has_attr(spec.attribute_rate);
  std::uniform_int_distribution<int> attr_count(1, 3);

  data::DatasetBundle b;
  b.category = spec.category;
  b.split = spec.split;
  b.d_img = spec.d_img;
  b.attribute_categories = attribute_names(spec.n_attr);
  for (std::size_t i = 0; i < spec.images; ++i) {
    data::ImageRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "img%06zu", i);
    r.id = id;
    r.category = spec.category;
    r.split = spec.split;
    r.backbone_feature.resize(spec.d_img);
    for (auto& v : r.backbone_feature) v = feat(rng);
    for (const auto& cat : b.attribute_categories) {
      if (!has_attr(rng)) continue;
      std::vector<std::string> toks;
      const int n = attr_count(rng);
      for (int k = 0; k < n; ++k) toks.push_back(pick(kAttributeWords, rng));
      r.attributes[cat] = std::move(toks);
    }
    b.records.push_back(std::move(r));
  }

  const bool disjoint = 2 * spec.triplets <= spec.images;
  for (std::size_t t = 0; t < spec.triplets; ++t) {
    std::size_t s = 0, g = 0;
    if (disjoint) {
      s = 2 * t;
      g = 2 * t + 1;
    } else {
      s = static_cast<std::size_t>(rng() % spec.images);
      do g = static_cast<std::size_t>(rng() % spec.images);
      while (g == s);
    }
    data::QueryTriplet q;
    q.source_id = b.records[s].id;
    q.target_id = b.records[g].id;
    q.captions = {caption(rng), caption(rng)};
    q.category = spec.category;
    b.triplets.push_back(std::move(q));
  }
  b.vocab = data::bundle_vocab(b);
  return b;
}

}  // namespace curling::synthetic
