#include "curling/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "curling/binary_io.hpp"
#include "curling/errors.hpp"

namespace curling {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kMagic = "CRCK1";
constexpr std::uint32_t kMaxDim = 1u << 28;

// Config keys that decide tensor shapes, in the order they are reported.
const std::vector<std::string>& shape_keys() {
  static const std::vector<std::string> keys = {"d_img", "vocab_size", "n_attr",    "d_w",        "vlad_clusters",
                                                "d_e",   "gru_hidden", "d_l",       "d_f",        "d_ce",
                                                "sweep_rank", "sweep_dim", "share_filters"};
  return keys;
}

void hash_tensor(io::Fnv1a& h, const NamedTensor& t) {
  h.update(t.name);
  const std::uint64_t shape[2] = {static_cast<std::uint64_t>(t.value.rows()), static_cast<std::uint64_t>(t.value.cols())};
  h.update(shape, sizeof shape);
  h.update(t.value.data(), sizeof(float) * static_cast<std::size_t>(t.value.size()));
}

void write_tensor(std::ostream& out, const std::string& group, const NamedTensor& t) {
  io::write_string(out, group + ":" + t.name);
  io::write_u32(out, static_cast<std::uint32_t>(t.value.rows()));
  io::write_u32(out, static_cast<std::uint32_t>(t.value.cols()));
  io::write_bytes(out, t.value.data(), sizeof(float) * static_cast<std::size_t>(t.value.size()));
}

std::vector<NamedTensor>& group_of(Checkpoint& c, const std::string& group) {
  if (group == "param") return c.params;
  if (group == "buffer") return c.buffers;
  if (group == "adam.m") return c.adam_m;
  if (group == "adam.v") return c.adam_v;
  throw FormatError("checkpoint: unknown tensor group '" + group + "'");
}

template <class Named>
const NamedTensor* find(const std::vector<NamedTensor>& list, const Named& name) {
  for (const auto& t : list)
    if (t.name == name) return &t;
  return nullptr;
}

void check_tensor(const std::vector<NamedTensor>& list, const std::string& group, const std::string& name,
                  const Mat<float>& target) {
  const NamedTensor* t = find(list, name);
  if (!t) throw SchemaError("checkpoint lacks " + group + " '" + name + "'");
  if (t->value.rows() != target.rows() || t->value.cols() != target.cols())
    throw SchemaError("checkpoint " + group + " '" + name + "' is " + std::to_string(t->value.rows()) + "x" +
                      std::to_string(t->value.cols()) + ", model expects " + std::to_string(target.rows()) + "x" +
                      std::to_string(target.cols()));
}

}  // namespace

std::uint64_t Checkpoint::fingerprint() const {
  io::Fnv1a h;
  h.update(json(model).dump());
  for (const auto& tok : vocab) {
    h.update(tok);
    h.update("\n", 1);
  }
  for (const auto& cat : attribute_categories) {
    h.update(cat);
    h.update("\n", 1);
  }
  for (const auto& t : params) hash_tensor(h, t);
  for (const auto& t : buffers) hash_tensor(h, t);
  return h.digest();
}

std::string Checkpoint::fingerprint_hex() const { return io::hex64(fingerprint()); }

Checkpoint capture(const Model<float>& model, const training::TrainState* state, const training::TrainingConfig& tc,
                   const objective::LossConfig& loss, const data::Vocab& vocab,
                   const std::vector<std::string>& attribute_categories) {
  Checkpoint c;
  c.model = model.config();
  c.training = tc;
  c.loss = loss;
  c.vocab = vocab.tokens();
  c.attribute_categories = attribute_categories;
  const auto& reg = model.registry();
  for (const auto& [name, p] : reg.params) c.params.push_back({name, p->value});
  for (const auto& [name, b] : reg.buffers) c.buffers.push_back({name, *b});
  if (state) {
    if (state->adam_m.size() != reg.params.size() || state->adam_v.size() != reg.params.size())
      throw ShapeError("capture: optimizer state does not match model");
    c.step = state->step;
    c.epoch = state->epoch;
    for (std::size_t i = 0; i < reg.params.size(); ++i) {
      c.adam_m.push_back({reg.params[i].first, state->adam_m[i]});
      c.adam_v.push_back({reg.params[i].first, state->adam_v[i]});
    }
  }
  return c;
}

void restore(const Checkpoint& ckpt, Model<float>& model, training::TrainState* state) {
  const json have = json(ckpt.model);
  const json want = json(model.config());
  for (const auto& key : shape_keys())
    if (have.at(key) != want.at(key))
      throw SchemaError("checkpoint config key '" + key + "' is " + have.at(key).dump() + ", model has " +
                        want.at(key).dump());

  auto& reg = model.registry();
  for (const auto& [name, p] : reg.params) check_tensor(ckpt.params, "param", name, p->value);
  for (const auto& [name, b] : reg.buffers) check_tensor(ckpt.buffers, "buffer", name, *b);
  if (ckpt.params.size() != reg.params.size() || ckpt.buffers.size() != reg.buffers.size())
    throw SchemaError("checkpoint holds tensors the model does not have");
  const bool with_optimizer = state && !ckpt.adam_m.empty();
  if (with_optimizer) {
    for (const auto& [name, p] : reg.params) {
      check_tensor(ckpt.adam_m, "adam.m", name, p->value);
      check_tensor(ckpt.adam_v, "adam.v", name, p->value);
    }
  }

  for (const auto& [name, p] : reg.params) {
    p->value = find(ckpt.params, name)->value;
    p->clear_grad();
  }
  for (const auto& [name, b] : reg.buffers) *b = find(ckpt.buffers, name)->value;
  if (state) {
    *state = training::TrainState::fresh(model);
    state->step = ckpt.step;
    state->epoch = ckpt.epoch;
    if (with_optimizer) {
      for (std::size_t i = 0; i < reg.params.size(); ++i) {
        state->adam_m[i] = find(ckpt.adam_m, reg.params[i].first)->value;
        state->adam_v[i] = find(ckpt.adam_v, reg.params[i].first)->value;
      }
    }
  }
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  std::ostringstream body(std::ios::binary);
  body.write(kMagic, 5);
  io::write_u32(body, ckpt.version);
  json header = {{"model", ckpt.model},
                 {"training", ckpt.training},
                 {"loss", ckpt.loss},
                 {"vocab", ckpt.vocab},
                 {"attribute_categories", ckpt.attribute_categories},
                 {"step", ckpt.step},
                 {"epoch", ckpt.epoch}};
  io::write_string(body, header.dump());
  const std::size_t count = ckpt.params.size() + ckpt.buffers.size() + ckpt.adam_m.size() + ckpt.adam_v.size();
  io::write_u32(body, static_cast<std::uint32_t>(count));
  for (const auto& t : ckpt.params) write_tensor(body, "param", t);
  for (const auto& t : ckpt.buffers) write_tensor(body, "buffer", t);
  for (const auto& t : ckpt.adam_m) write_tensor(body, "adam.m", t);
  for (const auto& t : ckpt.adam_v) write_tensor(body, "adam.v", t);
  const std::string bytes = body.str();
  io::Fnv1a h;
  h.update(bytes);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write checkpoint: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    io::write_u64(out, h.digest());
    if (!out) throw LoadError("failed writing checkpoint: " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw LoadError("cannot open checkpoint: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  if (bytes.size() < 5 + 4 + 8) throw FormatError("checkpoint truncated: " + path.string());
  std::istringstream in(bytes, std::ios::binary);
  io::expect_magic(in, kMagic, "checkpoint");
  Checkpoint c;
  c.version = io::read_u32(in, "checkpoint version");
  if (c.version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(c.version) + " in " + path.string());

  io::Fnv1a h;
  h.update(bytes.data(), bytes.size() - 8);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (stored != h.digest()) throw FormatError("checkpoint checksum mismatch (truncated or corrupt): " + path.string());

  try {
    const json header = json::parse(io::read_string(in, "checkpoint header"));
    c.model = header.at("model").get<ModelConfig>();
    c.training = header.at("training").get<training::TrainingConfig>();
    c.loss = header.at("loss").get<objective::LossConfig>();
    c.vocab = header.at("vocab").get<std::vector<std::string>>();
    c.attribute_categories = header.at("attribute_categories").get<std::vector<std::string>>();
    c.step = header.at("step").get<std::uint64_t>();
    c.epoch = header.at("epoch").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  const std::uint32_t count = io::read_u32(in, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string full = io::read_string(in, "tensor name", 4096);
    const auto colon = full.find(':');
    if (colon == std::string::npos) throw FormatError("checkpoint tensor name without group: " + full);
    NamedTensor t;
    t.name = full.substr(colon + 1);
    const std::uint32_t rows = io::read_u32(in, "tensor rows");
    const std::uint32_t cols = io::read_u32(in, "tensor cols");
    if (rows > kMaxDim || cols > kMaxDim) throw FormatError("implausible tensor shape for " + full);
    t.value.resize(rows, cols);
    io::read_bytes(in, t.value.data(), sizeof(float) * static_cast<std::size_t>(t.value.size()), "tensor data");
    group_of(c, full.substr(0, colon)).push_back(std::move(t));
  }
  if (static_cast<std::size_t>(in.tellg()) != bytes.size() - 8)
    throw FormatError("checkpoint has trailing bytes: " + path.string());
  return c;
}

data::Vocab checkpoint_vocab(const Checkpoint& ckpt) { return data::Vocab::from_tokens(ckpt.vocab); }

}  // namespace curling
