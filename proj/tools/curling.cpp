// curling: import, train, eval, index, serve and ensemble from one binary.
//
// Exit codes: 0 success, 1 usage, 2 data or schema, 3 numerics. Failures
// print one JSON diagnostic line on stderr followed by a human sentence.

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <pthread.h>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "curling/checkpoint.hpp"
#include "curling/errors.hpp"
#include "curling/evaluation.hpp"
#include "curling/gallery.hpp"
#include "curling/run_config.hpp"
#include "curling/service.hpp"
#include "curling/synthetic.hpp"
#include "curling/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace curling;

namespace {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage:
      return 1;
    case ErrorKind::kNumerics:
      return 3;
    default:
      return 2;
  }
}

void diagnose(int code, std::string_view kind, const std::string& message, const json& extra = json::object()) {
  json line = {{"error", kind}, {"exit", code}, {"message", message}};
  line.update(extra);
  std::cerr << line.dump() << "\n" << "curling: " << message << " (" << kind << ")\n";
}

struct Options {
  std::string data;
  std::string config;
  std::vector<std::string> checkpoints;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> steps;
  std::string category;
  std::string split;
  std::optional<std::size_t> k;
  std::string bind;
  std::string index;
  std::string src;
  std::string dst;
  std::vector<double> weights;
};

RunConfig resolve_config(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) {
    c.training.seed = *o.seed;
    c.model.seed = *o.seed;
  }
  if (o.k) c.evaluation.dump_k = *o.k;
  if (!o.bind.empty()) c.service.bind = o.bind;
  if (!o.weights.empty()) c.evaluation.ensemble_weights = o.weights;
  c.model.validate();
  c.training.validate();
  c.loss.validate();
  return c;
}

fs::path require_data(const Options& o) {
  if (o.data.empty()) throw UsageError("no data root: pass --data or set CURLING_DATA_ROOT");
  return o.data;
}

std::string require_one(const std::vector<std::string>& v, const char* what) {
  if (v.size() != 1) throw UsageError(std::string("exactly one ") + what + " is required");
  return v.front();
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// Categories named on the command line, or every category with an image file
// for the split.
std::vector<std::string> categories_for(const fs::path& root, const std::string& arg, data::Split split) {
  if (!arg.empty()) return split_list(arg);
  std::set<std::string> found;
  const std::regex name(R"(images\.(.+)\.(train|val|test)\.jsonl)");
  if (fs::is_directory(root))
    for (const auto& e : fs::directory_iterator(root)) {
      std::smatch m;
      const std::string f = e.path().filename().string();
      if (std::regex_match(f, m, name) && m[2].str() == data::to_string(split)) found.insert(m[1].str());
    }
  if (found.empty()) throw LoadError("no image files for split '" + std::string(data::to_string(split)) + "' under " +
                                     root.string());
  return {found.begin(), found.end()};
}

void emit(const json& j) { std::cout << j.dump() << std::endl; }

// ---------------------------------------------------------------------------

int cmd_import(const Options& o) {
  if (o.src.empty() || o.dst.empty()) throw UsageError("import-fashioniq needs --src and --dst");
  const data::ImportSummary s = data::import_fashioniq(o.src, o.dst);
  emit({{"images", s.images}, {"triplets", s.triplets}, {"skipped_triplets", s.skipped_triplets}, {"out", o.dst}});
  return 0;
}

int cmd_synth(const Options& o, synthetic::CorpusSpec spec, const std::string& splits) {
  if (o.out.empty()) throw UsageError("synth needs --out");
  if (o.seed) spec.seed = *o.seed;
  if (!o.category.empty()) spec.category = o.category;
  json written = json::array();
  for (const auto& name : split_list(splits)) {
    spec.split = data::parse_split(name);
    data::save_dataset(synthetic::make_corpus(spec), o.out);
    ++spec.seed;  // splits differ from one another
    written.push_back(name);
  }
  emit({{"out", o.out}, {"category", spec.category}, {"splits", written}, {"images", spec.images},
        {"triplets", spec.triplets}, {"d_img", spec.d_img}});
  return 0;
}

int cmd_train(const Options& o) {
  RunConfig cfg = resolve_config(o);
  const fs::path root = require_data(o);
  if (o.out.empty()) throw UsageError("train needs --out");
  const fs::path out = o.out;
  const std::string category = o.category.empty() ? "dress" : o.category;
  const data::Split split = data::parse_split(o.split.empty() ? "train" : o.split);

  // Resuming keeps the checkpoint's vocabulary and architecture.
  std::optional<Checkpoint> resume;
  if (!o.checkpoints.empty()) resume = load_checkpoint(require_one(o.checkpoints, "--checkpoint"));

  data::LoadConfig load;
  load.max_attrs = cfg.data.max_attrs;
  load.min_count = cfg.data.min_count;
  load.d_img = resume ? resume->model.d_img : 0;
  const data::DatasetBundle bundle = data::load_dataset(root, category, split, load);
  if (bundle.triplets.empty()) throw DataError("no training triplets for " + category + "/" + o.split);

  data::Vocab vocab = bundle.vocab;
  std::vector<std::string> attr_cats = bundle.attribute_categories;
  if (resume) {
    vocab = checkpoint_vocab(*resume);
    if (attr_cats != resume->attribute_categories)
      throw SchemaError("attribute categories of the data differ from the checkpoint's");
    const ModelConfig from_file = cfg.model;
    cfg.model = resume->model;
    cfg.model.dropout = from_file.dropout;
  } else {
    cfg.model.d_img = bundle.d_img;
    cfg.model.n_attr = attr_cats.size();
    cfg.model.vocab_size = vocab.size();
  }
  cfg.model.validate();

  Model<float> model(cfg.model);
  training::TrainState state = training::TrainState::fresh(model);
  if (resume) restore(*resume, model, resume->adam_m.empty() ? nullptr : &state);
  if (!resume && !cfg.data.word_vectors.empty()) {
    const std::size_t hit = model.load_word_vectors(cfg.data.word_vectors, vocab);
    std::cerr << json{{"word_vectors", cfg.data.word_vectors}, {"matched", hit}}.dump() << "\n";
  }

  fs::create_directories(out);
  write_run_config(out / "config.json", cfg);
  std::ofstream log(out / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
  if (!log) throw LoadError("cannot write " + (out / "train_log.jsonl").string());

  const std::vector<training::Example> examples =
      training::prepare_examples(bundle, vocab, attr_cats, cfg.training.max_len);
  double last_loss = std::numeric_limits<double>::quiet_NaN();
  auto logger = [&](const training::StepRecord& r) {
    log << training::to_json(r).dump() << "\n";
    last_loss = r.loss;
  };

  // With --steps the budget decides when to stop; otherwise the epoch count.
  const std::uint64_t budget = o.steps ? state.step + *o.steps : 0;
  std::size_t dropped = 0;
  try {
    for (std::size_t e = 0;; ++e) {
      if (o.steps ? state.step >= budget : e >= cfg.training.epochs) break;
      const training::EpochResult r = training::train_epoch(model, state, examples, cfg.training, cfg.loss, logger, budget);
      dropped = r.dropped;
      if (r.batches == 0) throw DataError("an epoch produced no batch of at least two triplets");
    }
  } catch (const NumericsError& e) {
    // train_step checks the loss before updating, so the model still holds
    // the last good parameters.
    log.flush();
    const fs::path good = out / "last_good.crck";
    save_checkpoint(good, capture(model, &state, cfg.training, cfg.loss, vocab, attr_cats));
    diagnose(3, to_string(e.kind()), e.what(), {{"last_good_checkpoint", good.string()}, {"step", state.step}});
    return 3;
  }
  log.flush();

  const fs::path ckpt_path = out / "checkpoint.crck";
  const Checkpoint ckpt = capture(model, &state, cfg.training, cfg.loss, vocab, attr_cats);
  save_checkpoint(ckpt_path, ckpt);
  emit({{"checkpoint", ckpt_path.string()},
        {"fingerprint", ckpt.fingerprint_hex()},
        {"steps", state.step},
        {"epochs", state.epoch},
        {"final_loss", last_loss},
        {"dropped_per_epoch", dropped},
        {"triplets", examples.size()}});
  return 0;
}

struct Loaded {
  Checkpoint ckpt;
  std::unique_ptr<Model<float>> model;
};

Loaded load_model(const fs::path& path) {
  Loaded l{load_checkpoint(path), nullptr};
  l.model = std::make_unique<Model<float>>(l.ckpt.model);
  restore(l.ckpt, *l.model);
  return l;
}

data::DatasetBundle load_for(const Checkpoint& ckpt, const RunConfig& cfg, const fs::path& root,
                             const std::string& category, data::Split split) {
  data::LoadConfig load;
  load.d_img = ckpt.model.d_img;
  load.max_attrs = cfg.data.max_attrs;
  load.min_count = cfg.data.min_count;
  return data::load_dataset(root, category, split, load);
}

int cmd_eval(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  const fs::path root = require_data(o);
  if (o.out.empty()) throw UsageError("eval needs --out");
  Loaded m = load_model(require_one(o.checkpoints, "--checkpoint"));
  const data::Split split = data::parse_split(o.split.empty() ? "val" : o.split);
  const data::Vocab vocab = checkpoint_vocab(m.ckpt);
  const std::size_t keep = std::max<std::size_t>(50, cfg.evaluation.dump_k);

  std::map<std::string, evaluation::CategoryRecall> per;
  std::vector<evaluation::RankingResult> all;
  for (const auto& category : categories_for(root, o.category, split)) {
    const data::DatasetBundle bundle = load_for(m.ckpt, cfg, root, category, split);
    const gallery::GalleryIndex index = gallery::build_index(*m.model, m.ckpt, bundle);
    const gallery::Scorer scorer(*m.model, index);
    std::vector<evaluation::RankingResult> rankings;
    for (auto q : evaluation::triplet_queries(bundle, vocab, m.ckpt.training.max_len)) {
      q.query_id = category + ":" + q.query_id;
      rankings.push_back(evaluation::rank_gallery(scorer, q, keep));
    }
    std::map<std::string, std::string> targets;
    for (const auto& [id, target] : evaluation::triplet_targets(bundle)) targets[category + ":" + id] = target;
    per[category] = {evaluation::recall_at_k(rankings, targets, 10), evaluation::recall_at_k(rankings, targets, 50),
                     rankings.size()};
    for (auto& r : rankings) {
      r.ids.resize(std::min(r.ids.size(), cfg.evaluation.dump_k));
      all.push_back(std::move(r));
    }
  }
  const fs::path out = o.out;
  write_run_config(out / "config.json", cfg);
  const evaluation::RecallReport rep = evaluation::make_report(per);
  evaluation::write_report(out, rep);
  evaluation::write_rankings(out / "rankings.jsonl", all);
  json summary = {{"report", (out / "report.json").string()}, {"overall", rep.overall}};
  for (const auto& [name, c] : per) summary["categories"][name] = {{"r10", c.r10}, {"r50", c.r50}};
  emit(summary);
  return 0;
}

int cmd_index(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  const fs::path root = require_data(o);
  if (o.out.empty()) throw UsageError("index needs --out (the index file to write)");
  if (o.category.empty()) throw UsageError("index needs --category");
  Loaded m = load_model(require_one(o.checkpoints, "--checkpoint"));
  const data::Split split = data::parse_split(o.split.empty() ? "val" : o.split);
  const data::DatasetBundle bundle = load_for(m.ckpt, cfg, root, o.category, split);
  const gallery::GalleryIndex index = gallery::build_index(*m.model, m.ckpt, bundle);
  gallery::save_index(o.out, index);
  emit({{"index", o.out},
        {"images", index.size()},
        {"index_fingerprint", gallery::index_fingerprint(index)},
        {"checkpoint_fingerprint", index.checkpoint_fingerprint}});
  return 0;
}

int cmd_serve(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  if (o.index.empty()) throw UsageError("serve needs --index");
  Checkpoint ckpt = load_checkpoint(require_one(o.checkpoints, "--checkpoint"));
  gallery::GalleryIndex index = gallery::load_index(o.index);
  service::SearchService svc(std::move(ckpt), std::move(index), {cfg.service.thumbnail_dir});
  const auto [host, port] = service::parse_bind(cfg.service.bind);

  // Signals are taken by a dedicated thread so stop() runs outside a handler.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  service::HttpServer server(svc);
  const int bound = server.bind(host, port);
  emit({{"listening", host + ":" + std::to_string(bound)}, {"index_fingerprint", svc.snapshot()->index_fingerprint}});
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
  });
  server.run();
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  return 0;
}

int cmd_ensemble(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  const fs::path root = require_data(o);
  if (o.out.empty()) throw UsageError("ensemble needs --out");
  if (o.checkpoints.size() < 2) throw UsageError("ensemble needs at least two --checkpoint");
  const data::Split split = data::parse_split(o.split.empty() ? "val" : o.split);
  const std::size_t keep = std::max<std::size_t>(50, cfg.evaluation.dump_k);

  std::vector<Loaded> members;
  for (const auto& p : o.checkpoints) members.push_back(load_model(p));

  std::map<std::string, evaluation::CategoryRecall> per;
  std::vector<evaluation::RankingResult> all;
  for (const auto& category : categories_for(root, o.category, split)) {
    std::vector<evaluation::ScoreTable> tables;
    std::map<std::string, std::string> targets;
    for (auto& m : members) {
      const data::DatasetBundle bundle = load_for(m.ckpt, cfg, root, category, split);
      const gallery::GalleryIndex index = gallery::build_index(*m.model, m.ckpt, bundle);
      const gallery::Scorer scorer(*m.model, index);
      tables.push_back(evaluation::score_table(
          scorer, evaluation::triplet_queries(bundle, checkpoint_vocab(m.ckpt), m.ckpt.training.max_len)));
      targets = evaluation::triplet_targets(bundle);
    }
    std::vector<evaluation::RankingResult> fused =
        evaluation::ensemble_scores(tables, cfg.evaluation.ensemble_weights, keep);
    per[category] = {evaluation::recall_at_k(fused, targets, 10), evaluation::recall_at_k(fused, targets, 50),
                     fused.size()};
    for (auto& r : fused) {
      r.query_id = category + ":" + r.query_id;
      r.ids.resize(std::min(r.ids.size(), cfg.evaluation.dump_k));
      all.push_back(std::move(r));
    }
  }
  const fs::path out = o.out;
  write_run_config(out / "config.json", cfg);
  const evaluation::RecallReport rep = evaluation::make_report(per);
  evaluation::write_report(out, rep);
  evaluation::write_rankings(out / "rankings.jsonl", all);
  emit({{"report", (out / "report.json").string()}, {"overall", rep.overall}, {"members", members.size()}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compositional image-text retrieval: import, train, evaluate, index and serve."};
  app.require_subcommand(1);
  Options o;
  if (const char* env = std::getenv("CURLING_DATA_ROOT")) o.data = env;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run config with data/model/training/loss/evaluation/service sections");
    sub->add_option("--seed", o.seed, "Seed for every random stream (training and initialization)");
  };
  auto data_opts = [&](CLI::App* sub) {
    sub->add_option("--data", o.data, "Canonical corpus root (default: $CURLING_DATA_ROOT)");
    sub->add_option("--category", o.category, "Garment category; eval/ensemble accept a comma list");
    sub->add_option("--split", o.split, "train, val or test");
  };

  CLI::App* imp = app.add_subcommand("import-fashioniq", "Convert the official release layout to the canonical one");
  imp->add_option("--src", o.src, "Official release directory")->required();
  imp->add_option("--dst", o.dst, "Canonical output directory")->required();

  synthetic::CorpusSpec spec;
  std::string synth_splits = "train";
  CLI::App* synth = app.add_subcommand("synth", "Write a seeded synthetic corpus in the canonical layout");
  synth->add_option("--out", o.out, "Output corpus root")->required();
  synth->add_option("--category", o.category, "Category name (default dress)");
  synth->add_option("--splits", synth_splits, "Comma list of splits to write")->capture_default_str();
  synth->add_option("--images", spec.images, "Images per split")->capture_default_str();
  synth->add_option("--triplets", spec.triplets, "Triplets per split")->capture_default_str();
  synth->add_option("--d-img", spec.d_img, "Backbone feature width")->capture_default_str();
  synth->add_option("--attributes", spec.n_attr, "Attribute categories")->capture_default_str();
  synth->add_option("--seed", o.seed, "Corpus seed");

  CLI::App* train = app.add_subcommand("train", "Train a model and write checkpoint.crck into --out");
  common(train);
  data_opts(train);
  train->add_option("--out", o.out, "Output directory");
  train->add_option("--steps", o.steps, "Optimizer step budget (overrides training.epochs)");
  train->add_option("--checkpoint", o.checkpoints, "Resume from this checkpoint");

  CLI::App* eval = app.add_subcommand("eval", "Recall@10/50 report and ranking dump");
  common(eval);
  data_opts(eval);
  eval->add_option("--checkpoint", o.checkpoints, "Checkpoint to evaluate");
  eval->add_option("--out", o.out, "Report directory");
  eval->add_option("--k", o.k, "Ids per query in the ranking dump");

  CLI::App* index = app.add_subcommand("index", "Build a gallery index file for serving");
  common(index);
  data_opts(index);
  index->add_option("--checkpoint", o.checkpoints, "Checkpoint to encode with");
  index->add_option("--out", o.out, "Index file to write");

  CLI::App* serve = app.add_subcommand("serve", "Serve search over HTTP");
  common(serve);
  serve->add_option("--checkpoint", o.checkpoints, "Checkpoint the index was built from");
  serve->add_option("--index", o.index, "Gallery index file");
  serve->add_option("--bind", o.bind, "host:port (port 0 picks a free one)");

  CLI::App* ens = app.add_subcommand("ensemble", "Z-score fusion of several checkpoints' rankings");
  common(ens);
  data_opts(ens);
  ens->add_option("--checkpoint", o.checkpoints, "Member checkpoint (repeat)");
  ens->add_option("--weights", o.weights, "One weight per member (default uniform)");
  ens->add_option("--out", o.out, "Report directory");
  ens->add_option("--k", o.k, "Ids per query in the ranking dump");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    diagnose(1, "usage", e.what());
    return 1;
  }

  try {
    if (*imp) return cmd_import(o);
    if (*synth) return cmd_synth(o, spec, synth_splits);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*index) return cmd_index(o);
    if (*serve) return cmd_serve(o);
    if (*ens) return cmd_ensemble(o);
  } catch (const Error& e) {
    const int code = exit_code_for(e.kind());
    diagnose(code, to_string(e.kind()), e.what());
    return code;
  } catch (const std::exception& e) {
    diagnose(2, "io", e.what());
    return 2;
  }
  return 1;
}
