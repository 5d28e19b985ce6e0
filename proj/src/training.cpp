#include "curling/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "curling/errors.hpp"

namespace curling::training {

using nlohmann::json;

void TrainingConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw SchemaError("training config: " + msg);
  };
  require(lr0 >= 0.0 && std::isfinite(lr0), "lr0 must be finite and >= 0");
  require(decay > 0.0 && decay <= 1.0, "decay must lie in (0, 1]");
  require(decay_every >= 1, "decay_every must be >= 1");
  require(batch_size >= 2, "batch_size must be >= 2");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam betas must lie in [0, 1)");
  require(eps > 0.0, "eps must be positive");
  require(max_len >= 1, "max_len must be >= 1");
}

void to_json(json& j, const TrainingConfig& c) {
  j = json{{"lr0", c.lr0},           {"decay", c.decay}, {"decay_every", c.decay_every},
           {"batch_size", c.batch_size}, {"epochs", c.epochs}, {"seed", c.seed},
           {"beta1", c.beta1},       {"beta2", c.beta2}, {"eps", c.eps},
           {"max_len", c.max_len}};
}

void from_json(const json& j, TrainingConfig& c) {
  if (!j.is_object()) throw SchemaError("training config must be an object");
  static const std::set<std::string> kKnown = {"lr0",  "decay", "decay_every", "batch_size", "epochs",
                                               "seed", "beta1", "beta2",       "eps",        "max_len"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!kKnown.count(it.key())) throw SchemaError("unknown training config key '" + it.key() + "'");
  auto take = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<std::decay_t<decltype(out)>>();
    } catch (const json::exception& e) {
      throw SchemaError(std::string("training config key '") + key + "': " + e.what());
    }
  };
  take("lr0", c.lr0);
  take("decay", c.decay);
  take("decay_every", c.decay_every);
  take("batch_size", c.batch_size);
  take("epochs", c.epochs);
  take("seed", c.seed);
  take("beta1", c.beta1);
  take("beta2", c.beta2);
  take("eps", c.eps);
  take("max_len", c.max_len);
}

double lr_at(std::uint64_t step, const TrainingConfig& config) {
  const auto k = static_cast<double>(step / config.decay_every);
  return config.lr0 * std::pow(config.decay, k);
}

TrainState TrainState::fresh(const Model<float>& model) {
  TrainState s;
  for (const auto& [name, p] : model.registry().params) {
    s.adam_m.push_back(Mat<float>::Zero(p->value.rows(), p->value.cols()));
    s.adam_v.push_back(Mat<float>::Zero(p->value.rows(), p->value.cols()));
  }
  return s;
}

bool TrainState::operator==(const TrainState& o) const {
  if (step != o.step || epoch != o.epoch || adam_m.size() != o.adam_m.size() || adam_v.size() != o.adam_v.size())
    return false;
  for (std::size_t i = 0; i < adam_m.size(); ++i)
    if (adam_m[i] != o.adam_m[i] || adam_v[i] != o.adam_v[i]) return false;
  return true;
}

std::vector<Example> prepare_examples(const data::DatasetBundle& bundle, const data::Vocab& vocab,
                                      const std::vector<std::string>& attribute_categories, std::size_t max_len) {
  std::vector<Example> out;
  out.reserve(bundle.triplets.size());
  for (const auto& tr : bundle.triplets) {
    out.push_back({to_image_input(bundle.at(tr.source_id), vocab, attribute_categories),
                   to_image_input(bundle.at(tr.target_id), vocab, attribute_categories),
                   data::assemble_query_text(tr, vocab, max_len)});
  }
  return out;
}

json to_json(const StepRecord& r) {
  return json{{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}, {"wall_ms", r.wall_ms}};
}

namespace {

struct BatchInputs {
  std::vector<ImageInput> sources, targets;
  std::vector<data::TokenSequence> texts;
};

BatchInputs unzip(std::span<const Example> batch) {
  BatchInputs b;
  for (const auto& e : batch) {
    b.sources.push_back(e.source);
    b.targets.push_back(e.target);
    b.texts.push_back(e.text);
  }
  return b;
}

// Dropout stream for one step, independent of how many steps ran before.
Rng dropout_rng(std::uint64_t seed, std::uint64_t step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32), 0xd0u};
  return Rng(seq);
}

}  // namespace

double train_step(Model<float>& model, TrainState& state, std::span<const Example> batch,
                  const TrainingConfig& config, const objective::LossConfig& loss) {
  auto& params = model.registry().params;
  if (state.adam_m.size() != params.size()) throw ShapeError("train_step: optimizer state does not match model");
  BatchInputs in = unzip(batch);
  for (auto& [name, p] : params) p->clear_grad();

  Rng drop = dropout_rng(config.seed, state.step);
  ForwardMode mode{true, &drop, model.config().dropout};
  Tape<float> tape(true);
  Var<float> l = model.batch_loss(tape, in.sources, in.targets, in.texts, loss, mode);
  const double value = l.value()(0, 0);
  tape.backward(l);
  if (model.embedding.has_grad()) model.embedding.grad.row(data::Vocab::kPad).setZero();

  // Any non-finite gradient flows from a non-finite forward value, which
  // the loss would already carry; the loss check stands in for a full scan.
  if (!std::isfinite(value)) throw NumericsError("non-finite loss at step " + std::to_string(state.step));

  const double lr = lr_at(state.step, config);
  const auto t = static_cast<double>(state.step + 1);
  const auto b1 = static_cast<float>(config.beta1), b2 = static_cast<float>(config.beta2);
  const auto step_size = static_cast<float>(lr / (1.0 - std::pow(config.beta1, t)));
  const auto v_correction = static_cast<float>(1.0 / std::sqrt(1.0 - std::pow(config.beta2, t)));
  const auto eps = static_cast<float>(config.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<float>& p = *params[i].second;
    if (!p.has_grad()) continue;
    // Cache-sized chunks: each element's four arrays are streamed once.
    constexpr Index kChunk = 4096;
    const Index n = p.value.size();
    for (Index s = 0; s < n; s += kChunk) {
      const Index k = std::min(kChunk, n - s);
      auto g = Eigen::Map<const Eigen::ArrayXf>(p.grad.data() + s, k);
      auto m = Eigen::Map<Eigen::ArrayXf>(state.adam_m[i].data() + s, k);
      auto v = Eigen::Map<Eigen::ArrayXf>(state.adam_v[i].data() + s, k);
      m = b1 * m + (1.0f - b1) * g;
      v = b2 * v + (1.0f - b2) * g.square();
      Eigen::Map<Eigen::ArrayXf>(p.value.data() + s, k) -= step_size * m / (v.sqrt() * v_correction + eps);
    }
  }
  ++state.step;
  return value;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed + epoch);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

EpochResult train_epoch(Model<float>& model, TrainState& state, std::span<const Example> examples,
                        const TrainingConfig& config, const objective::LossConfig& loss, const StepLogger& log,
                        std::uint64_t max_steps) {
  config.validate();
  if (examples.empty()) throw DataError("train_epoch: no training triplets");
  const std::vector<std::size_t> order = epoch_order(examples.size(), config.seed, state.epoch);
  EpochResult result;
  double total = 0.0;
  std::vector<Example> batch;
  for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
    const std::size_t end = std::min(order.size(), begin + config.batch_size);
    if (end - begin < 2) {
      result.dropped = end - begin;
      break;
    }
    if (max_steps != 0 && state.step >= max_steps) {
      result.stopped = true;
      break;
    }
    batch.clear();
    for (std::size_t k = begin; k < end; ++k) batch.push_back(examples[order[k]]);
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(state.step, config);
    const double value = train_step(model, state, batch, config, loss);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (log) log({state.step - 1, lr, value, ms});
    total += value;
    ++result.batches;
  }
  if (!result.stopped) ++state.epoch;
  result.mean_loss = result.batches ? total / static_cast<double>(result.batches) : 0.0;
  return result;
}

double in_batch_recall_at_1(Model<float>& model, std::span<const Example> examples, std::size_t chunk) {
  if (examples.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t begin = 0; begin < examples.size(); begin += chunk) {
    const std::size_t end = std::min(examples.size(), begin + chunk);
    BatchInputs in = unzip(examples.subspan(begin, end - begin));
    Tape<float> tape(false);
    const Mat<float> sim =
        model.batch_similarity(tape, in.sources, in.targets, in.texts, ForwardMode::eval()).value();
    for (Index j = 0; j < sim.rows(); ++j) {
      bool best = true;
      for (Index k = 0; k < sim.cols(); ++k)
        if (k != j && sim(j, k) >= sim(j, j)) best = false;
      if (best) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

}  // namespace curling::training
