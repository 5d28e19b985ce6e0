#include "curling/gallery.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <sstream>

#include "curling/binary_io.hpp"
#include "curling/errors.hpp"

namespace curling::gallery {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kMagic = "CRIX1";
constexpr Index kEncodeChunk = 256;

composition::SweepParams<float>& filter(Model<float>& m, std::size_t expert) {
  return composition::filter_for(m.sweeps, static_cast<Index>(expert));
}

void precompute_factors(Model<float>& model, GalleryIndex& idx) {
  idx.sweep_u.clear();
  idx.sweep_ew.clear();
  for (std::size_t i = 0; i < idx.experts.size(); ++i) {
    auto& f = filter(model, i);
    idx.sweep_u.push_back(idx.experts[i] * f.u.weight.value);
    idx.sweep_ew.push_back(idx.experts[i] * f.proj.weight.value.transpose());
  }
}

std::string serialize_body(const GalleryIndex& idx) {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, 5);
  io::write_u32(out, kIndexVersion);
  json attrs = json::array();
  for (const auto& a : idx.attributes) attrs.push_back(a);
  const json header = {{"category", idx.category},
                       {"split", idx.split},
                       {"checkpoint_fingerprint", idx.checkpoint_fingerprint},
                       {"ids", idx.ids},
                       {"attributes", attrs}};
  io::write_string(out, header.dump());
  std::vector<std::pair<std::string, Mat<float>>> mats;
  mats.emplace_back("availability", idx.availability.cast<float>());
  for (std::size_t i = 0; i < idx.experts.size(); ++i) mats.emplace_back("expert." + std::to_string(i), idx.experts[i]);
  for (std::size_t i = 0; i < idx.sweep_u.size(); ++i) mats.emplace_back("sweep_u." + std::to_string(i), idx.sweep_u[i]);
  for (std::size_t i = 0; i < idx.sweep_ew.size(); ++i)
    mats.emplace_back("sweep_ew." + std::to_string(i), idx.sweep_ew[i]);
  io::write_u32(out, static_cast<std::uint32_t>(mats.size()));
  for (const auto& [name, m] : mats) {
    io::write_string(out, name);
    io::write_u32(out, static_cast<std::uint32_t>(m.rows()));
    io::write_u32(out, static_cast<std::uint32_t>(m.cols()));
    io::write_bytes(out, m.data(), sizeof(float) * static_cast<std::size_t>(m.size()));
  }
  return out.str();
}

std::uint64_t digest(const std::string& bytes) {
  io::Fnv1a h;
  h.update(bytes);
  return h.digest();
}

}  // namespace

std::optional<std::size_t> GalleryIndex::find(std::string_view id) const {
  auto it = std::lower_bound(ids.begin(), ids.end(), id);
  if (it == ids.end() || *it != id) return std::nullopt;
  return static_cast<std::size_t>(it - ids.begin());
}

ExpertBank<float> GalleryIndex::bank(std::size_t row) const {
  ExpertBank<float> b;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    b.experts.push_back(experts[i].row(static_cast<Index>(row)).transpose());
    b.availability.push_back(availability(static_cast<Index>(row), static_cast<Index>(i)) != 0);
  }
  return b;
}

GalleryIndex build_index(Model<float>& model, const Checkpoint& ckpt, const data::DatasetBundle& bundle) {
  const ModelConfig& c = model.config();
  if (!bundle.records.empty() && bundle.d_img != c.d_img)
    throw SchemaError("gallery feature dimension " + std::to_string(bundle.d_img) + " != checkpoint d_img " +
                      std::to_string(c.d_img));
  if (bundle.attribute_categories != ckpt.attribute_categories)
    throw SchemaError("gallery attribute categories differ from the checkpoint's");
  const data::Vocab vocab = checkpoint_vocab(ckpt);

  GalleryIndex idx;
  idx.category = bundle.category;
  idx.split = std::string(data::to_string(bundle.split));
  idx.checkpoint_fingerprint = ckpt.fingerprint_hex();
  const auto n = static_cast<Index>(bundle.records.size());
  const auto n_exp = static_cast<Index>(c.n_experts());
  idx.availability = Mask::Zero(n, n_exp);
  for (Index i = 0; i < n_exp; ++i) idx.experts.push_back(Mat<float>::Zero(n, static_cast<Index>(c.d_e)));
  // Row order is by id whatever order the bundle lists its records in.
  std::vector<const data::ImageRecord*> rows;
  for (const auto& r : bundle.records) rows.push_back(&r);
  std::sort(rows.begin(), rows.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
  for (const auto* r : rows) {
    if (!idx.ids.empty() && idx.ids.back() == r->id) throw IntegrityError("duplicate gallery id '" + r->id + "'");
    idx.ids.push_back(r->id);
    idx.attributes.push_back(r->attributes);
  }

  for (Index begin = 0; begin < n; begin += kEncodeChunk) {
    const Index end = std::min(n, begin + kEncodeChunk);
    std::vector<ImageInput> inputs;
    for (Index r = begin; r < end; ++r)
      inputs.push_back(to_image_input(*rows[static_cast<std::size_t>(r)], vocab, ckpt.attribute_categories));
    Tape<float> t(false);
    ExpertBankVar<float> bank = model.encode_images(t, inputs);
    for (Index i = 0; i < n_exp; ++i)
      idx.experts[static_cast<std::size_t>(i)].middleRows(begin, end - begin) =
          bank.experts[static_cast<std::size_t>(i)].value();
    idx.availability.middleRows(begin, end - begin) = bank.availability;
  }
  precompute_factors(model, idx);
  return idx;
}

GalleryIndex index_from_banks(Model<float>& model, const std::string& checkpoint_fingerprint,
                              std::vector<std::string> ids, const std::vector<ExpertBank<float>>& banks) {
  if (ids.size() != banks.size()) throw ShapeError("index_from_banks: ids and banks differ in length");
  if (!std::is_sorted(ids.begin(), ids.end())) throw IntegrityError("gallery ids must be sorted");
  const ModelConfig& c = model.config();
  GalleryIndex idx;
  idx.checkpoint_fingerprint = checkpoint_fingerprint;
  idx.ids = std::move(ids);
  idx.attributes.resize(idx.ids.size());
  const auto n = static_cast<Index>(banks.size());
  const auto n_exp = static_cast<Index>(c.n_experts());
  idx.availability = Mask::Zero(n, n_exp);
  for (Index i = 0; i < n_exp; ++i) {
    Mat<float> m(n, static_cast<Index>(c.d_e));
    for (Index r = 0; r < n; ++r) {
      const auto& b = banks[static_cast<std::size_t>(r)];
      m.row(r) = b.experts.at(static_cast<std::size_t>(i)).transpose();
      idx.availability(r, i) = b.availability.at(static_cast<std::size_t>(i)) ? 1 : 0;
    }
    idx.experts.push_back(std::move(m));
  }
  precompute_factors(model, idx);
  return idx;
}

void save_index(const fs::path& path, const GalleryIndex& index) {
  const std::string body = serialize_body(index);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write index: " + tmp.string());
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    io::write_u64(out, digest(body));
    if (!out) throw LoadError("failed writing index: " + tmp.string());
  }
  fs::rename(tmp, path);
}

GalleryIndex load_index(const fs::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw LoadError("cannot open index: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  if (bytes.size() < 5 + 4 + 8) throw FormatError("index truncated: " + path.string());
  std::istringstream in(bytes, std::ios::binary);
  io::expect_magic(in, kMagic, "gallery index");
  const std::uint32_t version = io::read_u32(in, "index version");
  if (version != kIndexVersion) throw FormatError("unsupported index version " + std::to_string(version));
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (stored != digest(bytes.substr(0, bytes.size() - 8)))
    throw FormatError("index checksum mismatch (truncated or corrupt): " + path.string());

  GalleryIndex idx;
  try {
    const json header = json::parse(io::read_string(in, "index header"));
    idx.category = header.at("category").get<std::string>();
    idx.split = header.at("split").get<std::string>();
    idx.checkpoint_fingerprint = header.at("checkpoint_fingerprint").get<std::string>();
    idx.ids = header.at("ids").get<std::vector<std::string>>();
    for (const auto& a : header.at("attributes"))
      idx.attributes.push_back(a.get<std::map<std::string, std::vector<std::string>>>());
  } catch (const json::exception& e) {
    throw FormatError(std::string("index header: ") + e.what());
  }
  const std::uint32_t count = io::read_u32(in, "matrix count");
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = io::read_string(in, "matrix name", 4096);
    const std::uint32_t rows = io::read_u32(in, "matrix rows");
    const std::uint32_t cols = io::read_u32(in, "matrix cols");
    if (rows != idx.ids.size()) throw FormatError("index matrix " + name + " is not row-aligned with the ids");
    Mat<float> m(rows, cols);
    io::read_bytes(in, m.data(), sizeof(float) * static_cast<std::size_t>(m.size()), "matrix data");
    if (name == "availability") {
      idx.availability = m.cast<std::uint8_t>();
    } else if (name.rfind("expert.", 0) == 0) {
      idx.experts.push_back(std::move(m));
    } else if (name.rfind("sweep_u.", 0) == 0) {
      idx.sweep_u.push_back(std::move(m));
    } else if (name.rfind("sweep_ew.", 0) == 0) {
      idx.sweep_ew.push_back(std::move(m));
    } else {
      throw FormatError("unknown index matrix " + name);
    }
  }
  if (idx.attributes.size() != idx.ids.size() || idx.sweep_u.size() != idx.experts.size() ||
      idx.sweep_ew.size() != idx.experts.size() || idx.availability.cols() != static_cast<Index>(idx.experts.size()))
    throw FormatError("index matrices are inconsistent: " + path.string());
  return idx;
}

std::string index_fingerprint(const GalleryIndex& index) { return io::hex64(digest(serialize_body(index))); }

Scorer::Scorer(Model<float>& model, const GalleryIndex& index) : model_(&model), index_(&index) {
  const ModelConfig& c = model.config();
  const auto n_exp = c.n_experts();
  const auto d_e = static_cast<Index>(c.d_e);
  const auto width = static_cast<Index>(c.sweep_rank * c.sweep_dim);
  if (index.experts.size() != n_exp || index.availability.cols() != static_cast<Index>(n_exp))
    throw SchemaError("index has " + std::to_string(index.experts.size()) + " experts, model expects " +
                      std::to_string(n_exp));
  for (std::size_t i = 0; i < n_exp; ++i) {
    if (index.experts[i].cols() != d_e || index.sweep_u[i].cols() != width ||
        index.sweep_ew[i].cols() != static_cast<Index>(c.sweep_dim))
      throw SchemaError("index matrices for expert " + std::to_string(i) + " do not match the model dimensions");
  }
  for (const auto& f : model.sweeps) gram_.push_back(f.proj.weight.value * f.proj.weight.value.transpose());
}

QueryEncoding Scorer::encode(const ExpertBank<float>& source, const data::TokenSequence& text) const {
  QueryEncoding q;
  q.text = model_->encode_text(text);
  q.query = model_->deliver(source, q.text);
  return q;
}

std::vector<float> Scorer::scores(const QueryEncoding& q) const {
  const GalleryIndex& idx = *index_;
  Model<float>& m = *model_;
  const auto n = static_cast<Index>(idx.size());
  const std::size_t n_exp = idx.experts.size();
  std::vector<float> out(static_cast<std::size_t>(n), 0.0f);
  if (n == 0) return out;

  if (m.config().composition == CompositionMode::kSum) {
    Vec<float> s = idx.experts[0] * q.query.experts[0];
    std::copy(s.data(), s.data() + n, out.begin());
    return out;
  }

  // Per-expert cosines between the query and every swept candidate.
  Mat<float> cos = Mat<float>::Zero(n, static_cast<Index>(n_exp));
  const auto t_row = q.text.concat.transpose();
  for (std::size_t i = 0; i < n_exp; ++i) {
    if (!q.query.availability[i]) continue;
    auto& f = filter(m, i);
    const Mat<float>& gram = gram_[m.sweeps.size() == 1 ? 0 : i];
    const Index dp = f.factor_dim();
    const Vec<float>& qi = q.query.experts[i];
    const Mat<float> tv = t_row * f.v.weight.value;  // 1 x R*d'
    Mat<float> z = idx.sweep_u[i].leftCols(dp) * tv.leftCols(dp).transpose().asDiagonal();
    for (Index r = 1; r < f.rank; ++r)
      z.noalias() += idx.sweep_u[i].middleCols(r * dp, dp) * tv.middleCols(r * dp, dp).transpose().asDiagonal();
    const Vec<float> wq = f.proj.weight.value * qi;  // d'
    const Vec<float> num = idx.experts[i] * qi + z * wq;
    const Mat<float> zg = z * gram;
    const Vec<float> norm_sq = idx.experts[i].rowwise().squaredNorm() +
                               2.0f * z.cwiseProduct(idx.sweep_ew[i]).rowwise().sum() +
                               zg.cwiseProduct(z).rowwise().sum();
    for (Index r = 0; r < n; ++r) {
      if (!idx.availability(r, static_cast<Index>(i))) continue;
      const float ns = norm_sq[r];
      if (ns > std::numeric_limits<float>::min()) cos(r, static_cast<Index>(i)) = num[r] / std::sqrt(ns);
    }
  }

  // Text-conditioned mixture, renormalized over the experts both sides have.
  const Vec<float> logits = (t_row * m.mix.weight.value + m.mix.bias.value).transpose();
  for (Index r = 0; r < n; ++r) {
    float best = -std::numeric_limits<float>::infinity();
    for (std::size_t i = 0; i < n_exp; ++i)
      if (q.query.availability[i] && idx.availability(r, static_cast<Index>(i)))
        best = std::max(best, logits[static_cast<Index>(i)]);
    float total = 0.0f, acc = 0.0f;
    for (std::size_t i = 0; i < n_exp; ++i) {
      if (!(q.query.availability[i] && idx.availability(r, static_cast<Index>(i)))) continue;
      const float w = std::exp(logits[static_cast<Index>(i)] - best);
      total += w;
      acc += w * cos(r, static_cast<Index>(i));
    }
    out[static_cast<std::size_t>(r)] = total > 0.0f ? acc / total : 0.0f;
  }
  return out;
}

Ranked top_k(const std::vector<float>& scores, const std::vector<std::string>& ids, std::size_t k,
             std::optional<std::size_t> exclude) {
  std::vector<std::size_t> rows;
  rows.reserve(scores.size());
  for (std::size_t r = 0; r < scores.size(); ++r)
    if (!exclude || r != *exclude) rows.push_back(r);
  k = std::min(k, rows.size());
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  };
  std::partial_sort(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(k), rows.end(), better);
  rows.resize(k);
  Ranked out;
  out.rows = rows;
  for (auto r : rows) out.scores.push_back(scores[r]);
  return out;
}

}  // namespace curling::gallery
