#include "curling/data_model.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "curling/binary_io.hpp"
#include "curling/errors.hpp"
#include "json.hpp"

namespace curling::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kFeatureMagic = "CRLF1";

std::ifstream open_in(const fs::path& path, bool binary = false) {
  if (!fs::exists(path)) throw LoadError("missing file: " + path.string());
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  if (!in) throw LoadError("cannot open: " + path.string());
  return in;
}

std::ofstream open_out(const fs::path& path, bool binary = false) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!out) throw LoadError("cannot write: " + path.string());
  return out;
}

json parse_json(const std::string& text, const fs::path& path, std::size_t line) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(path.string() + ":" + std::to_string(line) + ": invalid JSON: " + e.what());
  }
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in = open_in(path);
  std::vector<json> rows;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    rows.push_back(parse_json(line, path, number));
  }
  return rows;
}

std::string string_field(const json& obj, const char* key, const fs::path& path) {
  if (!obj.is_object() || !obj.contains(key) || !obj.at(key).is_string())
    throw SchemaError(path.string() + ": record lacks string field '" + key + "'");
  return obj.at(key).get<std::string>();
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw UsageError("unknown split '" + std::string(name) + "' (expected train, val or test)");
}

const std::vector<std::string>& challenge_categories() {
  static const std::vector<std::string> kCategories = {"dress", "shirt", "toptee"};
  return kCategories;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocab::Vocab() {
  push(std::string(kPadToken));
  push(std::string(kUnkToken));
}

void Vocab::push(std::string token) {
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens, int min_count) {
  if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken)
    throw SchemaError("vocabulary must start with " + std::string(kPadToken) + ", " + std::string(kUnkToken));
  Vocab v;
  v.min_count_ = min_count;
  for (std::size_t i = 2; i < tokens.size(); ++i) {
    if (v.index_.count(tokens[i])) throw SchemaError("duplicate vocabulary token '" + tokens[i] + "'");
    v.push(std::move(tokens[i]));
  }
  return v;
}

int Vocab::index(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (c >= 0x80 || std::isalnum(c)) {
      current.push_back(c >= 0x80 ? raw : static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      out.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

Vocab build_vocab(const std::vector<std::string>& texts, int min_count) {
  if (min_count < 1) throw UsageError("min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& text : texts)
    for (auto& tok : tokenize(text)) ++counts[tok];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n < static_cast<std::size_t>(min_count)) continue;
    if (tok == Vocab::kPadToken || tok == Vocab::kUnkToken) continue;
    kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> tokens = {std::string(Vocab::kPadToken), std::string(Vocab::kUnkToken)};
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return Vocab::from_tokens(std::move(tokens), min_count);
}

// ---------------------------------------------------------------------------
// Files

fs::path images_file(const fs::path& root, std::string_view category, Split split) {
  return root / ("images." + std::string(category) + "." + std::string(to_string(split)) + ".jsonl");
}

fs::path features_file(const fs::path& root, std::string_view category, Split split) {
  return root / ("features." + std::string(category) + "." + std::string(to_string(split)) + ".npyish");
}

fs::path triplets_file(const fs::path& root, std::string_view category, Split split) {
  return root / ("triplets." + std::string(category) + "." + std::string(to_string(split)) + ".jsonl");
}

fs::path attribute_categories_file(const fs::path& root) { return root / "attribute_categories.json"; }

std::vector<std::vector<float>> read_features(const fs::path& path, std::size_t* dim_out) {
  std::ifstream in = open_in(path, true);
  std::vector<std::vector<float>> rows;
  try {
    io::expect_magic(in, kFeatureMagic, path.string().c_str());
    const std::uint32_t count = io::read_u32(in, "feature count");
    const std::uint32_t dim = io::read_u32(in, "feature dim");
    rows.resize(count, std::vector<float>(dim));
    for (auto& row : rows) io::read_bytes(in, row.data(), row.size() * sizeof(float), "feature rows");
    if (dim_out) *dim_out = dim;
  } catch (const FormatError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
  return rows;
}

void write_features(const fs::path& path, const std::vector<std::vector<float>>& rows, std::size_t dim) {
  std::ofstream out = open_out(path, true);
  io::write_bytes(out, kFeatureMagic, 5);
  io::write_u32(out, static_cast<std::uint32_t>(rows.size()));
  io::write_u32(out, static_cast<std::uint32_t>(dim));
  for (const auto& row : rows) {
    if (row.size() != dim) throw SchemaError("feature row has dimension " + std::to_string(row.size()));
    io::write_bytes(out, row.data(), row.size() * sizeof(float));
  }
}

const ImageRecord* DatasetBundle::find(std::string_view id) const {
  auto it = std::lower_bound(records.begin(), records.end(), id,
                             [](const ImageRecord& r, std::string_view key) { return r.id < key; });
  return (it != records.end() && it->id == id) ? &*it : nullptr;
}

const ImageRecord& DatasetBundle::at(std::string_view id) const {
  const ImageRecord* r = find(id);
  if (!r) throw IntegrityError("unknown image id '" + std::string(id) + "'");
  return *r;
}

DatasetBundle load_dataset(const fs::path& root, const std::string& category, Split split,
                           const LoadConfig& config) {
  DatasetBundle bundle;
  bundle.category = category;
  bundle.split = split;

  {
    const fs::path path = attribute_categories_file(root);
    std::ifstream in = open_in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    json names = parse_json(ss.str(), path, 1);
    if (!names.is_array()) throw SchemaError(path.string() + ": expected a JSON array of names");
    std::set<std::string> seen;
    for (const auto& n : names) {
      if (!n.is_string()) throw SchemaError(path.string() + ": attribute category names must be strings");
      if (!seen.insert(n.get<std::string>()).second)
        throw SchemaError(path.string() + ": duplicate attribute category " + n.get<std::string>());
      bundle.attribute_categories.push_back(n.get<std::string>());
    }
  }

  const fs::path img_path = images_file(root, category, split);
  const fs::path feat_path = features_file(root, category, split);
  const fs::path trip_path = triplets_file(root, category, split);
  const std::vector<json> image_rows = read_jsonl(img_path);
  std::size_t dim = 0;
  std::vector<std::vector<float>> features = read_features(feat_path, &dim);
  const std::vector<json> triplet_rows = read_jsonl(trip_path);

  if (features.size() != image_rows.size())
    throw SchemaError(feat_path.string() + ": holds " + std::to_string(features.size()) + " rows but " +
                      img_path.string() + " lists " + std::to_string(image_rows.size()) + " images");
  if (config.d_img != 0 && !image_rows.empty() && dim != config.d_img)
    throw SchemaError(feat_path.string() + ": feature dimension " + std::to_string(dim) + " != configured d_img " +
                      std::to_string(config.d_img));
  bundle.d_img = image_rows.empty() && config.d_img != 0 ? config.d_img : dim;

  const std::set<std::string> known_attrs(bundle.attribute_categories.begin(), bundle.attribute_categories.end());
  for (std::size_t i = 0; i < image_rows.size(); ++i) {
    const json& row = image_rows[i];
    ImageRecord rec;
    rec.id = string_field(row, "id", img_path);
    rec.category = category;
    rec.split = split;
    rec.backbone_feature = std::move(features[i]);
    if (row.contains("attributes")) {
      const json& attrs = row.at("attributes");
      if (!attrs.is_object()) throw SchemaError(img_path.string() + ": 'attributes' of " + rec.id + " is not an object");
      for (auto it = attrs.begin(); it != attrs.end(); ++it) {
        if (!known_attrs.count(it.key()))
          throw SchemaError(img_path.string() + ": image " + rec.id + " uses unknown attribute category '" + it.key() +
                            "'");
        if (!it.value().is_array()) throw SchemaError(img_path.string() + ": attribute list must be an array");
        std::vector<std::string> tokens;
        for (const auto& tok : it.value()) {
          if (!tok.is_string()) throw SchemaError(img_path.string() + ": attribute tokens must be strings");
          tokens.push_back(tok.get<std::string>());
        }
        if (tokens.size() > config.max_attrs)
          throw SchemaError(img_path.string() + ": image " + rec.id + " has " + std::to_string(tokens.size()) +
                            " '" + it.key() + "' attributes (max " + std::to_string(config.max_attrs) + ")");
        rec.attributes.emplace(it.key(), std::move(tokens));
      }
    }
    bundle.records.push_back(std::move(rec));
  }
  std::sort(bundle.records.begin(), bundle.records.end(),
            [](const ImageRecord& a, const ImageRecord& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < bundle.records.size(); ++i)
    if (bundle.records[i].id == bundle.records[i - 1].id)
      throw IntegrityError("duplicate image id '" + bundle.records[i].id + "' in " + img_path.string());

  for (std::size_t i = 0; i < triplet_rows.size(); ++i) {
    const json& row = triplet_rows[i];
    QueryTriplet t;
    t.source_id = string_field(row, "source", trip_path);
    t.target_id = string_field(row, "target", trip_path);
    t.category = category;
    if (!row.contains("captions") || !row.at("captions").is_array() || row.at("captions").size() != 2)
      throw SchemaError(trip_path.string() + ": triplet " + std::to_string(i + 1) + " must have exactly 2 captions");
    for (int c = 0; c < 2; ++c) {
      const json& cap = row.at("captions").at(static_cast<std::size_t>(c));
      if (!cap.is_string()) throw SchemaError(trip_path.string() + ": captions must be strings");
      t.captions[static_cast<std::size_t>(c)] = cap.get<std::string>();
      if (tokenize(t.captions[static_cast<std::size_t>(c)]).empty())
        throw DataError(trip_path.string() + ": triplet " + std::to_string(i + 1) + " caption " +
                        std::to_string(c + 1) + " is empty after tokenization");
    }
    if (t.source_id == t.target_id)
      throw IntegrityError(trip_path.string() + ": triplet " + std::to_string(i + 1) + " has source == target (" +
                           t.source_id + ")");
    if (!bundle.find(t.source_id)) throw IntegrityError("triplet references unknown image id '" + t.source_id + "'");
    if (!bundle.find(t.target_id)) throw IntegrityError("triplet references unknown image id '" + t.target_id + "'");
    bundle.triplets.push_back(std::move(t));
  }

  bundle.vocab = bundle_vocab(bundle, config.min_count);
  return bundle;
}

Vocab bundle_vocab(const DatasetBundle& bundle, int min_count) {
  std::vector<std::string> texts;
  for (const auto& t : bundle.triplets) {
    texts.push_back(t.captions[0]);
    texts.push_back(t.captions[1]);
  }
  for (const auto& r : bundle.records)
    for (const auto& [cat, toks] : r.attributes)
      for (const auto& tok : toks) texts.push_back(tok);
  return build_vocab(texts, min_count);
}

void save_dataset(const DatasetBundle& bundle, const fs::path& root) {
  fs::create_directories(root);
  {
    std::ofstream out = open_out(attribute_categories_file(root));
    out << json(bundle.attribute_categories).dump() << "\n";
  }
  {
    std::ofstream out = open_out(images_file(root, bundle.category, bundle.split));
    std::vector<std::vector<float>> rows;
    for (const auto& r : bundle.records) {
      json attrs = json::object();
      for (const auto& [cat, toks] : r.attributes) attrs[cat] = toks;
      out << json{{"id", r.id}, {"attributes", attrs}}.dump() << "\n";
      rows.push_back(r.backbone_feature);
    }
    write_features(features_file(root, bundle.category, bundle.split), rows, bundle.d_img);
  }
  {
    std::ofstream out = open_out(triplets_file(root, bundle.category, bundle.split));
    for (const auto& t : bundle.triplets)
      out << json{{"source", t.source_id}, {"target", t.target_id}, {"captions", t.captions}}.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// Query text

namespace {

TokenSequence finish_sequence(const std::vector<std::string>& words, const Vocab& vocab, std::size_t max_len) {
  TokenSequence seq;
  const std::size_t n = std::min(words.size(), max_len);
  seq.ids.assign(max_len, Vocab::kPad);
  for (std::size_t i = 0; i < n; ++i) seq.ids[i] = vocab.index(words[i]);
  seq.length = static_cast<int>(n);
  return seq;
}

}  // namespace

TokenSequence assemble_query_text(const QueryTriplet& triplet, const Vocab& vocab, std::size_t max_len) {
  std::vector<std::string> words = tokenize(triplet.captions[0]);
  for (auto& w : tokenize(triplet.captions[1])) words.push_back(std::move(w));
  if (words.empty()) throw DataError("both captions are empty after tokenization");
  return finish_sequence(words, vocab, max_len);
}

TokenSequence encode_query_text(std::string_view text, const Vocab& vocab, std::size_t max_len) {
  const std::vector<std::string> words = tokenize(text);
  if (words.empty()) throw DataError("query text is empty after tokenization");
  return finish_sequence(words, vocab, max_len);
}

std::vector<std::vector<int>> attribute_indices(const ImageRecord& record, const Vocab& vocab,
                                                const std::vector<std::string>& attribute_categories) {
  std::vector<std::vector<int>> out(attribute_categories.size());
  for (std::size_t c = 0; c < attribute_categories.size(); ++c) {
    auto it = record.attributes.find(attribute_categories[c]);
    if (it == record.attributes.end()) continue;
    for (const auto& tok : it->second)
      for (const auto& word : tokenize(tok)) out[c].push_back(vocab.index(word));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fashion-IQ import
//
// Expected source layout:
//   image_splits/split.<category>.<split>.json   JSON array of image ids
//   captions/cap.<category>.<split>.json         [{"candidate", "target", "captions": [a, b]}]
//   tags/asin2attr.<category>.<split>.json       optional {id: [[type-1 tokens], [type-2 tokens], ...]}
//   features/<category>.<split>.txt              "id v1 v2 ... vd" per line
//   attribute_names.json                         optional ordered names for the tag positions

ImportSummary import_fashioniq(const fs::path& src, const fs::path& dst) {
  ImportSummary summary;
  const fs::path split_dir = src / "image_splits";
  if (!fs::is_directory(split_dir)) throw LoadError("missing directory: " + split_dir.string());

  std::vector<std::string> attr_names = {"texture", "fabric", "shape", "part", "style"};
  if (fs::exists(src / "attribute_names.json")) {
    std::ifstream in = open_in(src / "attribute_names.json");
    std::stringstream ss;
    ss << in.rdbuf();
    attr_names = parse_json(ss.str(), src / "attribute_names.json", 1).get<std::vector<std::string>>();
  }
  fs::create_directories(dst);
  {
    std::ofstream out = open_out(attribute_categories_file(dst));
    out << json(attr_names).dump() << "\n";
  }

  const std::regex split_name(R"(split\.([A-Za-z0-9_-]+)\.(train|val|test)\.json)");
  std::vector<fs::path> split_files;
  for (const auto& entry : fs::directory_iterator(split_dir)) split_files.push_back(entry.path());
  std::sort(split_files.begin(), split_files.end());

  for (const auto& path : split_files) {
    std::smatch m;
    const std::string name = path.filename().string();
    if (!std::regex_match(name, m, split_name)) continue;
    const std::string category = m[1];
    const Split split = parse_split(m[2].str());
    const std::string stem = category + "." + std::string(to_string(split));

    std::vector<std::string> ids;
    {
      std::ifstream in = open_in(path);
      std::stringstream ss;
      ss << in.rdbuf();
      ids = parse_json(ss.str(), path, 1).get<std::vector<std::string>>();
    }

    std::map<std::string, std::vector<float>> features;
    std::size_t dim = 0;
    {
      const fs::path fpath = src / "features" / (stem + ".txt");
      std::ifstream in = open_in(fpath);
      std::string line;
      while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string id;
        if (!(ls >> id)) continue;
        std::vector<float> v;
        float x = 0;
        while (ls >> x) v.push_back(x);
        if (dim == 0) dim = v.size();
        if (v.size() != dim) throw SchemaError(fpath.string() + ": inconsistent feature dimension for " + id);
        features[id] = std::move(v);
      }
    }

    json tags = json::object();
    const fs::path tag_path = src / "tags" / ("asin2attr." + stem + ".json");
    if (fs::exists(tag_path)) {
      std::ifstream in = open_in(tag_path);
      std::stringstream ss;
      ss << in.rdbuf();
      tags = parse_json(ss.str(), tag_path, 1);
    }

    DatasetBundle bundle;
    bundle.category = category;
    bundle.split = split;
    bundle.d_img = dim;
    bundle.attribute_categories = attr_names;
    std::set<std::string> seen;
    for (const auto& id : ids) {
      if (!seen.insert(id).second) continue;
      auto f = features.find(id);
      if (f == features.end()) throw LoadError("no backbone feature for image '" + id + "' (" + stem + ")");
      ImageRecord rec;
      rec.id = id;
      rec.category = category;
      rec.split = split;
      rec.backbone_feature = f->second;
      if (tags.contains(id)) {
        const json& lists = tags.at(id);
        for (std::size_t c = 0; c < lists.size() && c < attr_names.size(); ++c) {
          std::vector<std::string> toks;
          for (const auto& t : lists.at(c))
            if (t.is_string()) toks.push_back(t.get<std::string>());
          if (!toks.empty()) rec.attributes[attr_names[c]] = std::move(toks);
        }
      }
      bundle.records.push_back(std::move(rec));
    }
    std::sort(bundle.records.begin(), bundle.records.end(),
              [](const ImageRecord& a, const ImageRecord& b) { return a.id < b.id; });

    const fs::path cap_path = src / "captions" / ("cap." + stem + ".json");
    if (fs::exists(cap_path)) {
      std::ifstream in = open_in(cap_path);
      std::stringstream ss;
      ss << in.rdbuf();
      for (const auto& row : parse_json(ss.str(), cap_path, 1)) {
        if (!row.contains("candidate") || !row.contains("target") || !row.contains("captions") ||
            row.at("captions").size() != 2) {
          ++summary.skipped_triplets;
          continue;
        }
        QueryTriplet t;
        t.source_id = row.at("candidate").get<std::string>();
        t.target_id = row.at("target").get<std::string>();
        t.captions = {row.at("captions").at(0).get<std::string>(), row.at("captions").at(1).get<std::string>()};
        t.category = category;
        if (t.source_id == t.target_id || !bundle.find(t.source_id) || !bundle.find(t.target_id) ||
            tokenize(t.captions[0]).empty() || tokenize(t.captions[1]).empty()) {
          ++summary.skipped_triplets;
          continue;
        }
        bundle.triplets.push_back(std::move(t));
      }
    }
    summary.images += bundle.records.size();
    summary.triplets += bundle.triplets.size();
    save_dataset(bundle, dst);
  }
  return summary;
}

}  // namespace curling::data
