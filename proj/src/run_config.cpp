#include "curling/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "curling/errors.hpp"

namespace curling {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::string& section, const std::set<std::string>& known) {
  if (!j.is_object()) throw SchemaError("config section '" + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw SchemaError("unknown key '" + it.key() + "' in config section '" + section + "'");
}

template <class T>
void take(const json& j, const std::string& section, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError("config key '" + section + "." + key + "': " + e.what());
  }
}

}  // namespace

void to_json(json& j, const RunConfig& c) {
  j = json{{"data", {{"min_count", c.data.min_count},
                     {"max_attrs", c.data.max_attrs},
                     {"word_vectors", c.data.word_vectors}}},
           {"model", c.model},
           {"training", c.training},
           {"loss", c.loss},
           {"evaluation", {{"dump_k", c.evaluation.dump_k}, {"ensemble_weights", c.evaluation.ensemble_weights}}},
           {"service", {{"bind", c.service.bind}, {"thumbnail_dir", c.service.thumbnail_dir}}}};
}

void from_json(const json& j, RunConfig& c) {
  reject_unknown(j, "<root>", {"data", "model", "training", "loss", "evaluation", "service"});
  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, "data", {"min_count", "max_attrs", "word_vectors"});
    take(d, "data", "min_count", c.data.min_count);
    take(d, "data", "max_attrs", c.data.max_attrs);
    take(d, "data", "word_vectors", c.data.word_vectors);
    if (c.data.min_count < 1) throw SchemaError("config key 'data.min_count' must be >= 1");
  }
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("training")) from_json(j.at("training"), c.training);
  if (j.contains("loss")) objective::from_json(j.at("loss"), c.loss);
  if (j.contains("evaluation")) {
    const json& e = j.at("evaluation");
    reject_unknown(e, "evaluation", {"dump_k", "ensemble_weights"});
    take(e, "evaluation", "dump_k", c.evaluation.dump_k);
    take(e, "evaluation", "ensemble_weights", c.evaluation.ensemble_weights);
  }
  if (j.contains("service")) {
    const json& s = j.at("service");
    reject_unknown(s, "service", {"bind", "thumbnail_dir"});
    take(s, "service", "bind", c.service.bind);
    take(s, "service", "thumbnail_dir", c.service.thumbnail_dir);
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw UsageError("config file not found: " + path.string());
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw SchemaError(path.string() + ": invalid JSON: " + e.what());
  }
  RunConfig c;
  from_json(j, c);
  return c;
}

void write_run_config(const std::filesystem::path& path, const RunConfig& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << json(c).dump(2) << "\n";
}

}  // namespace curling
