#include "curling/model_config.hpp"

#include <set>
#include <string>

#include "curling/errors.hpp"
#include "curling/objective.hpp"

namespace curling {

using nlohmann::json;

namespace {

std::string to_string(TemporalReduce r) { return r == TemporalReduce::kMean ? "mean" : "last"; }
std::string to_string(CompositionMode m) { return m == CompositionMode::kCurling ? "curling" : "sum"; }

template <class T>
void take(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw SchemaError("model config: " + msg);
  };
  require(d_img > 0, "d_img must be positive");
  require(vocab_size >= 2, "vocab_size must cover PAD and UNK");
  require(d_w > 0 && d_e > 0 && gru_hidden > 0 && d_f > 0 && d_ce > 0, "dimensions must be positive");
  require(vlad_clusters > 0, "vlad_clusters must be positive");
  require(d_l > 0 && d_l % 3 == 0, "d_l must be a positive multiple of 3");
  require(sweep_rank > 0 && sweep_dim > 0, "sweep_rank and sweep_dim must be positive");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  require(bn_momentum >= 0.0 && bn_momentum <= 1.0, "bn_momentum must lie in [0, 1]");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"d_img", c.d_img},
           {"vocab_size", c.vocab_size},
           {"n_attr", c.n_attr},
           {"d_w", c.d_w},
           {"vlad_clusters", c.vlad_clusters},
           {"d_e", c.d_e},
           {"gru_hidden", c.gru_hidden},
           {"d_l", c.d_l},
           {"d_f", c.d_f},
           {"d_ce", c.d_ce},
           {"sweep_rank", c.sweep_rank},
           {"sweep_dim", c.sweep_dim},
           {"share_filters", c.share_filters},
           {"temporal", to_string(c.temporal)},
           {"composition", to_string(c.composition)},
           {"dropout", c.dropout},
           {"bn_momentum", c.bn_momentum},
           {"seed", c.seed}};
}

void from_json(const json& j, ModelConfig& c) {
  if (!j.is_object()) throw SchemaError("model config must be an object");
  static const std::set<std::string> kKnown = {
      "d_img", "vocab_size", "n_attr", "d_w", "vlad_clusters", "d_e", "gru_hidden", "d_l", "d_f",
      "d_ce", "sweep_rank", "sweep_dim", "share_filters", "temporal", "composition", "dropout", "bn_momentum", "seed"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!kKnown.count(it.key())) throw SchemaError("unknown model config key '" + it.key() + "'");
  take(j, "d_img", c.d_img);
  take(j, "vocab_size", c.vocab_size);
  take(j, "n_attr", c.n_attr);
  take(j, "d_w", c.d_w);
  take(j, "vlad_clusters", c.vlad_clusters);
  take(j, "d_e", c.d_e);
  take(j, "gru_hidden", c.gru_hidden);
  take(j, "d_l", c.d_l);
  take(j, "d_f", c.d_f);
  take(j, "d_ce", c.d_ce);
  take(j, "sweep_rank", c.sweep_rank);
  take(j, "sweep_dim", c.sweep_dim);
  take(j, "share_filters", c.share_filters);
  take(j, "dropout", c.dropout);
  take(j, "bn_momentum", c.bn_momentum);
  take(j, "seed", c.seed);
  if (j.contains("temporal")) {
    const auto v = j.at("temporal").get<std::string>();
    if (v == "mean") c.temporal = TemporalReduce::kMean;
    else if (v == "last") c.temporal = TemporalReduce::kLast;
    else throw SchemaError("temporal must be 'mean' or 'last'");
  }
  if (j.contains("composition")) {
    const auto v = j.at("composition").get<std::string>();
    if (v == "curling") c.composition = CompositionMode::kCurling;
    else if (v == "sum") c.composition = CompositionMode::kSum;
    else throw SchemaError("composition must be 'curling' or 'sum'");
  }
}

namespace objective {

void LossConfig::validate() const {
  if (!(margin >= 0.0)) throw SchemaError("loss margin must be >= 0");
  if (!(scale > 0.0)) throw SchemaError("loss scale must be > 0");
}

void to_json(json& j, const LossConfig& c) {
  j = json{{"margin", c.margin}, {"scale", c.scale}, {"bidirectional", c.bidirectional}};
}

void from_json(const json& j, LossConfig& c) {
  if (!j.is_object()) throw SchemaError("loss config must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "margin" && it.key() != "scale" && it.key() != "bidirectional")
      throw SchemaError("unknown loss config key '" + it.key() + "'");
  take(j, "margin", c.margin);
  take(j, "scale", c.scale);
  take(j, "bidirectional", c.bidirectional);
}

}  // namespace objective

}  // namespace curling
