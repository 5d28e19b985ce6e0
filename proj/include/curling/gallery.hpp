#pragma once

// Gallery index and the batched query-conditioned scorer behind both offline
// ranking and the search service.
//
// The sweep of candidate e under query text t is
//   a = e + z W,  z = sum_r (e U_r) * (t V_r),  W = the d' x d_e projection.
// e U is query independent and stored per candidate, as is e W^T, so that
//   q . a    = q . e + z . (W q)
//   |a|^2    = |e|^2 + 2 z . (e W^T) + z (W W^T) z
// need only d'-wide work per candidate at query time.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "curling/checkpoint.hpp"
#include "curling/data_model.hpp"
#include "curling/model.hpp"

namespace curling::gallery {

inline constexpr std::uint32_t kIndexVersion = 1;

struct GalleryIndex {
  std::string category;
  std::string split;
  std::string checkpoint_fingerprint;  // hex, Checkpoint::fingerprint_hex()
  std::vector<std::string> ids;        // ascending
  std::vector<std::map<std::string, std::vector<std::string>>> attributes;  // per id, for listing
  std::vector<Mat<float>> experts;     // per expert N x d_e, zero rows where missing
  Mask availability;                   // N x n_experts
  std::vector<Mat<float>> sweep_u;     // per expert N x R*d'
  std::vector<Mat<float>> sweep_ew;    // per expert N x d'

  std::size_t size() const { return ids.size(); }
  std::optional<std::size_t> find(std::string_view id) const;
  ExpertBank<float> bank(std::size_t row) const;

  bool operator==(const GalleryIndex&) const = default;
};

// Encodes every record of the bundle in evaluation mode and precomputes the
// query-independent sweep factors. SchemaError if the bundle does not fit the
// checkpoint's dimensions.
GalleryIndex build_index(Model<float>& model, const Checkpoint& ckpt, const data::DatasetBundle& bundle);

// Same from ready-made banks (rows ascending by id), for synthetic galleries.
GalleryIndex index_from_banks(Model<float>& model, const std::string& checkpoint_fingerprint,
                              std::vector<std::string> ids, const std::vector<ExpertBank<float>>& banks);

// "CRIX1", u32 version, JSON header, named float32 matrices, FNV-1a checksum.
void save_index(const std::filesystem::path& path, const GalleryIndex& index);
GalleryIndex load_index(const std::filesystem::path& path);
// Content hash of the serialized index.
std::string index_fingerprint(const GalleryIndex& index);

struct QueryEncoding {
  ExpertBank<float> query;  // composed (delivered) source bank
  TextEncoding<float> text;
};

struct Ranked {
  std::vector<std::size_t> rows;  // gallery rows, best first
  std::vector<float> scores;
};

class Scorer {
 public:
  // The model must stay alive and unmodified while the scorer is in use.
  Scorer(Model<float>& model, const GalleryIndex& index);

  QueryEncoding encode(const ExpertBank<float>& source, const data::TokenSequence& text) const;
  // One score per gallery row.
  std::vector<float> scores(const QueryEncoding& q) const;

  Model<float>& model() const { return *model_; }
  const GalleryIndex& index() const { return *index_; }

 private:
  Model<float>* model_;
  const GalleryIndex* index_;
  std::vector<Mat<float>> gram_;  // per filter W W^T
};

// Top k rows by (score desc, id asc), skipping `exclude`. Partial selection.
Ranked top_k(const std::vector<float>& scores, const std::vector<std::string>& ids, std::size_t k,
             std::optional<std::size_t> exclude);

}  // namespace curling::gallery
