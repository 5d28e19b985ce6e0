#include "curling/service.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>

#include "curling/errors.hpp"
#include "curling/evaluation.hpp"
#include "httplib.h"

namespace curling::service {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Response error(int status, const std::string& message) { return {status, json{{"error", message}}}; }

int status_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::kNotFound:
      return 404;
    case ErrorKind::kIntegrity:
      return 409;
    case ErrorKind::kNumerics:
      return 500;
    default:
      return 400;
  }
}

std::shared_ptr<Snapshot> make_snapshot(std::shared_ptr<Model<float>> model, std::shared_ptr<const Checkpoint> ckpt,
                                        std::string ckpt_fingerprint, gallery::GalleryIndex index) {
  if (index.checkpoint_fingerprint != ckpt_fingerprint)
    throw IntegrityError("index was built from checkpoint " + index.checkpoint_fingerprint +
                         ", serving checkpoint is " + ckpt_fingerprint);
  auto s = std::make_shared<Snapshot>();
  s->model = std::move(model);
  s->checkpoint = std::move(ckpt);
  s->checkpoint_fingerprint = std::move(ckpt_fingerprint);
  s->vocab = checkpoint_vocab(*s->checkpoint);
  s->index = std::move(index);
  s->index_fingerprint = gallery::index_fingerprint(s->index);
  s->scorer = std::make_unique<gallery::Scorer>(*s->model, s->index);
  return s;
}

std::size_t parse_count(const std::map<std::string, std::string>& q, const std::string& key, std::size_t fallback) {
  auto it = q.find(key);
  if (it == q.end() || it->second.empty()) return fallback;
  std::size_t v = 0;
  const auto* end = it->second.data() + it->second.size();
  auto [p, ec] = std::from_chars(it->second.data(), end, v);
  if (ec != std::errc() || p != end) throw UsageError("query parameter '" + key + "' must be a non-negative integer");
  return v;
}

json attributes_json(const std::map<std::string, std::vector<std::string>>& attrs) {
  json out = json::object();
  for (const auto& [cat, toks] : attrs) out[cat] = toks;
  return out;
}

}  // namespace

SearchService::SearchService(Checkpoint checkpoint, gallery::GalleryIndex index, ServiceOptions options)
    : options_(std::move(options)) {
  auto model = std::make_shared<Model<float>>(checkpoint.model);
  restore(checkpoint, *model);
  std::string fp = checkpoint.fingerprint_hex();
  // The model now owns the tensors; keep only the metadata.
  checkpoint.params.clear();
  checkpoint.buffers.clear();
  checkpoint.adam_m.clear();
  checkpoint.adam_v.clear();
  auto ckpt = std::make_shared<const Checkpoint>(std::move(checkpoint));
  current_ = make_snapshot(std::move(model), std::move(ckpt), std::move(fp), std::move(index));
}

std::shared_ptr<const Snapshot> SearchService::snapshot() const {
  std::lock_guard<std::mutex> lock(swap_);
  return current_;
}

void SearchService::reload(const fs::path& index_path) {
  std::lock_guard<std::mutex> serial(reload_);
  auto old = snapshot();
  gallery::GalleryIndex index = gallery::load_index(index_path);
  std::shared_ptr<const Snapshot> next = make_snapshot(old->model, old->checkpoint, old->checkpoint_fingerprint, std::move(index));
  std::lock_guard<std::mutex> lock(swap_);
  current_ = std::move(next);
}

Response SearchService::handle(const std::string& method, const std::string& path,
                               const std::map<std::string, std::string>& query, const std::string& body) {
  try {
    const std::shared_ptr<const Snapshot> s = snapshot();
    if (method == "GET" && path == "/health") {
      return {200, json{{"status", "ok"},
                        {"index_fingerprint", s->index_fingerprint},
                        {"checkpoint_fingerprint", s->checkpoint_fingerprint},
                        {"images", s->index.size()}}};
    }
    if (method == "GET" && path == "/categories") {
      return {200, json{{"categories", json::array({s->index.category})}, {"split", s->index.split}}};
    }
    if (method == "GET" && path == "/images") return images(*s, query);
    if (method == "GET" && path.rfind("/images/", 0) == 0) return image(*s, path.substr(8));
    if (method == "POST" && (path == "/search" || path == "/admin/reload")) {
      json req;
      try {
        req = json::parse(body);
      } catch (const json::parse_error& e) {
        return error(400, std::string("request body is not valid JSON: ") + e.what());
      }
      if (!req.is_object()) return error(400, "request body must be a JSON object");
      if (path == "/search") return search(*s, req);
      if (!req.contains("index_path") || !req.at("index_path").is_string())
        return error(400, "reload needs a string 'index_path'");
      const fs::path p = req.at("index_path").get<std::string>();
      if (!fs::exists(p)) return error(404, "index file not found: " + p.string());
      reload(p);
      return {200, json{{"status", "reloaded"}, {"index_fingerprint", snapshot()->index_fingerprint}}};
    }
    return error(404, "no route for " + method + " " + path);
  } catch (const Error& e) {
    return error(status_for(e), e.what());
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
}

Response SearchService::images(const Snapshot& s, const std::map<std::string, std::string>& query) const {
  const std::size_t offset = parse_count(query, "offset", 0);
  const std::size_t limit = std::min<std::size_t>(parse_count(query, "limit", 24), 1000);
  auto cat = query.find("category");
  auto split = query.find("split");
  const bool match = (cat == query.end() || cat->second.empty() || cat->second == s.index.category) &&
                     (split == query.end() || split->second.empty() || split->second == s.index.split);
  json list = json::array();
  const std::size_t total = match ? s.index.size() : 0;
  for (std::size_t i = offset; i < total && i < offset + limit; ++i)
    list.push_back({{"id", s.index.ids[i]}, {"attributes", attributes_json(s.index.attributes[i])}});
  return {200, json{{"category", s.index.category},
                    {"split", s.index.split},
                    {"total", total},
                    {"offset", offset},
                    {"limit", limit},
                    {"images", list}}};
}

Response SearchService::image(const Snapshot& s, const std::string& id) const {
  const auto row = s.index.find(id);
  if (!row) return error(404, "unknown image id '" + id + "'");
  json out = {{"id", id},
              {"category", s.index.category},
              {"split", s.index.split},
              {"attributes", attributes_json(s.index.attributes[*row])},
              {"available_experts", json::array()}};
  for (Index i = 0; i < s.index.availability.cols(); ++i)
    out["available_experts"].push_back(s.index.availability(static_cast<Index>(*row), i) != 0);
  if (!options_.thumbnail_dir.empty()) out["thumbnail"] = "/thumbs/" + id + ".jpg";
  return {200, out};
}

Response SearchService::search(const Snapshot& s, const json& req) const {
  const auto t0 = std::chrono::steady_clock::now();
  if (s.index.checkpoint_fingerprint != s.checkpoint_fingerprint)
    return error(409, "index fingerprint does not match the serving checkpoint");
  if (!req.contains("k") || !req.at("k").is_number_integer()) return error(400, "'k' must be an integer");
  const auto k = req.at("k").get<std::int64_t>();
  if (k < 1 || k > static_cast<std::int64_t>(kMaxK))
    return error(400, "'k' must lie in [1, " + std::to_string(kMaxK) + "]");
  if (!req.contains("text") || !req.at("text").is_string()) return error(400, "'text' must be a string");
  const std::string text = req.at("text").get<std::string>();
  if (data::tokenize(text).empty()) return error(400, "'text' has no words");
  const bool by_id = req.contains("source_id");
  const bool by_feature = req.contains("feature");
  if (by_id == by_feature) return error(400, "give exactly one of 'source_id' or 'feature'");

  const ModelConfig& c = s.model->config();
  ExpertBank<float> source;
  std::optional<std::size_t> exclude;
  if (by_id) {
    if (!req.at("source_id").is_string()) return error(400, "'source_id' must be a string");
    const std::string id = req.at("source_id").get<std::string>();
    exclude = s.index.find(id);
    if (!exclude) return error(404, "unknown source image '" + id + "'");
    source = s.index.bank(*exclude);
  } else {
    const json& f = req.at("feature");
    if (!f.is_array() || f.size() != c.d_img)
      return error(400, "'feature' must be an array of " + std::to_string(c.d_img) + " numbers");
    data::ImageRecord rec;
    rec.id = "query";
    for (const auto& v : f) {
      if (!v.is_number()) return error(400, "'feature' must hold numbers");
      rec.backbone_feature.push_back(v.get<float>());
    }
    if (req.contains("attributes")) {
      const json& a = req.at("attributes");
      if (!a.is_object()) return error(400, "'attributes' must be an object of token lists");
      const auto& cats = s.checkpoint->attribute_categories;
      for (auto it = a.begin(); it != a.end(); ++it) {
        if (std::find(cats.begin(), cats.end(), it.key()) == cats.end())
          return error(400, "unknown attribute category '" + it.key() + "'");
        if (!it.value().is_array()) return error(400, "attribute lists must be arrays of strings");
        for (const auto& tok : it.value()) {
          if (!tok.is_string()) return error(400, "attribute lists must be arrays of strings");
          rec.attributes[it.key()].push_back(tok.get<std::string>());
        }
      }
    }
    source = s.model->encode_image(to_image_input(rec, s.vocab, s.checkpoint->attribute_categories));
  }

  const data::TokenSequence seq = data::encode_query_text(text, s.vocab, s.checkpoint->training.max_len);
  const gallery::QueryEncoding q = s.scorer->encode(source, seq);
  const gallery::Ranked top = gallery::top_k(s.scorer->scores(q), s.index.ids, static_cast<std::size_t>(k), exclude);
  json ranked = json::array();
  for (std::size_t i = 0; i < top.rows.size(); ++i)
    ranked.push_back({{"id", s.index.ids[top.rows[i]]}, {"score", top.scores[i]}});
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return {200, json{{"ranked", ranked}, {"latency_ms", ms}, {"index_fingerprint", s.index_fingerprint}}};
}

struct HttpServer::Impl {
  SearchService* service;
  httplib::Server server;
};

HttpServer::HttpServer(SearchService& service) : impl_(std::make_unique<Impl>()) {
  impl_->service = &service;
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    const Response r = impl_->service->handle(req.method, req.path, query, req.body);
    res.status = r.status;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(r.body.dump(), "application/json");
  };
  impl_->server.Get("/health", route);
  impl_->server.Get("/categories", route);
  impl_->server.Get("/images", route);
  impl_->server.Get(R"(/images/([^/]+))", route);
  impl_->server.Post("/search", route);
  impl_->server.Post("/admin/reload", route);
  impl_->server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
  const auto& thumbs = service.options().thumbnail_dir;
  if (!thumbs.empty()) impl_->server.set_mount_point("/thumbs", thumbs.string());
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw LoadError("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::run() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

std::pair<std::string, int> parse_bind(const std::string& addr, int default_port) {
  std::string host = "127.0.0.1";
  int port = default_port;
  const auto colon = addr.rfind(':');
  const std::string h = colon == std::string::npos ? addr : addr.substr(0, colon);
  if (!h.empty()) host = h;
  if (colon != std::string::npos) {
    const std::string p = addr.substr(colon + 1);
    int v = 0;
    auto [end, ec] = std::from_chars(p.data(), p.data() + p.size(), v);
    if (ec != std::errc() || end != p.data() + p.size() || v < 0 || v > 65535)
      throw UsageError("bad port in bind address '" + addr + "'");
    port = v;
  }
  return {host, port};
}

}  // namespace curling::service
