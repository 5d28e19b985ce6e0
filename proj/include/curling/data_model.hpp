#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace curling::data {

enum class Split { kTrain, kVal, kTest };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

// The three Fashion-IQ garment categories. Other category names are accepted
// anywhere a category is taken; these are the ones the challenge score needs.
const std::vector<std::string>& challenge_categories();

struct ImageRecord {
  std::string id;
  std::string category;
  Split split = Split::kTrain;
  std::vector<float> backbone_feature;
  std::map<std::string, std::vector<std::string>> attributes;

  bool operator==(const ImageRecord&) const = default;
};

struct QueryTriplet {
  std::string source_id;
  std::string target_id;
  std::array<std::string, 2> captions;
  std::string category;

  bool operator==(const QueryTriplet&) const = default;
};

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnkToken = "<unk>";

  Vocab();

  // Rebuilds a vocabulary from a persisted token list (index = position).
  static Vocab from_tokens(std::vector<std::string> tokens, int min_count = 1);

  int index(std::string_view token) const;  // UNK for unknown tokens
  bool contains(std::string_view token) const;
  const std::string& token(int index) const { return tokens_.at(static_cast<std::size_t>(index)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  int min_count() const { return min_count_; }

  bool operator==(const Vocab& other) const {
    return tokens_ == other.tokens_ && min_count_ == other.min_count_;
  }

 private:
  void push(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int min_count_ = 1;
};

// Lowercase, punctuation to spaces, split on whitespace.
std::vector<std::string> tokenize(std::string_view text);

// Tokens ordered by (descending frequency, ascending text) after PAD and UNK.
Vocab build_vocab(const std::vector<std::string>& texts, int min_count);

struct LoadConfig {
  std::size_t d_img = 0;  // 0 accepts whatever dimension the feature file declares
  std::size_t max_attrs = 19;
  int min_count = 1;
};

struct DatasetBundle {
  std::string category;
  Split split = Split::kTrain;
  std::size_t d_img = 0;
  std::vector<ImageRecord> records;  // sorted by id
  std::vector<QueryTriplet> triplets;
  Vocab vocab;
  std::vector<std::string> attribute_categories;

  const ImageRecord* find(std::string_view id) const;
  const ImageRecord& at(std::string_view id) const;  // IntegrityError when missing

  bool operator==(const DatasetBundle&) const = default;
};

// Canonical corpus file names under a data root.
std::filesystem::path images_file(const std::filesystem::path& root, std::string_view category, Split split);
std::filesystem::path features_file(const std::filesystem::path& root, std::string_view category, Split split);
std::filesystem::path triplets_file(const std::filesystem::path& root, std::string_view category, Split split);
std::filesystem::path attribute_categories_file(const std::filesystem::path& root);

DatasetBundle load_dataset(const std::filesystem::path& root, const std::string& category, Split split,
                           const LoadConfig& config = {});
void save_dataset(const DatasetBundle& bundle, const std::filesystem::path& root);

// Vocabulary over both captions and attribute tokens of a bundle.
Vocab bundle_vocab(const DatasetBundle& bundle, int min_count = 1);

// Dense feature block: "CRLF1", u32 count, u32 dim, count*dim float32.
std::vector<std::vector<float>> read_features(const std::filesystem::path& path, std::size_t* dim_out);
void write_features(const std::filesystem::path& path, const std::vector<std::vector<float>>& rows, std::size_t dim);

struct TokenSequence {
  std::vector<int> ids;  // padded with PAD to max_len
  int length = 0;        // number of real tokens

  bool operator==(const TokenSequence&) const = default;
};

inline constexpr std::size_t kDefaultMaxLen = 30;

// caption1 tokens followed by caption2 tokens, UNK fallback, truncated and padded.
TokenSequence assemble_query_text(const QueryTriplet& triplet, const Vocab& vocab,
                                  std::size_t max_len = kDefaultMaxLen);

// Same mapping for a single free-text refinement string.
TokenSequence encode_query_text(std::string_view text, const Vocab& vocab, std::size_t max_len = kDefaultMaxLen);

// Attribute tokens of one image, one index list per attribute category.
std::vector<std::vector<int>> attribute_indices(const ImageRecord& record, const Vocab& vocab,
                                                const std::vector<std::string>& attribute_categories);

// Converts the official Fashion-IQ release layout into the canonical layout.
struct ImportSummary {
  std::size_t images = 0;
  std::size_t triplets = 0;
  std::size_t skipped_triplets = 0;
};
ImportSummary import_fashioniq(const std::filesystem::path& src, const std::filesystem::path& dst);

}  // namespace curling::data
