#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "curling/checkpoint.hpp"
#include "curling/gallery.hpp"
#include "json.hpp"

namespace curling::service {

inline constexpr std::size_t kMaxK = 100;

struct Response {
  int status = 200;
  nlohmann::json body;
};

struct ServiceOptions {
  std::filesystem::path thumbnail_dir;  // served under /thumbs when set
};

// Everything one request needs, immutable once published.
struct Snapshot {
  std::shared_ptr<Model<float>> model;
  std::shared_ptr<const Checkpoint> checkpoint;
  std::string checkpoint_fingerprint;
  data::Vocab vocab;
  gallery::GalleryIndex index;
  std::string index_fingerprint;
  std::unique_ptr<gallery::Scorer> scorer;
};

class SearchService {
 public:
  // IntegrityError when the index was built from a different checkpoint.
  SearchService(Checkpoint checkpoint, gallery::GalleryIndex index, ServiceOptions options = {});

  // Routes one request. `query` holds URL parameters; `body` is the raw
  // request body. Never throws; safe to call from many threads.
  Response handle(const std::string& method, const std::string& path,
                  const std::map<std::string, std::string>& query, const std::string& body);

  // Swaps in a new index atomically: in-flight requests finish on the old one.
  void reload(const std::filesystem::path& index_path);

  std::shared_ptr<const Snapshot> snapshot() const;
  const ServiceOptions& options() const { return options_; }

 private:
  Response search(const Snapshot& s, const nlohmann::json& req) const;
  Response images(const Snapshot& s, const std::map<std::string, std::string>& query) const;
  Response image(const Snapshot& s, const std::string& id) const;

  std::shared_ptr<const Snapshot> current_;
  mutable std::mutex swap_;
  std::mutex reload_;
  ServiceOptions options_;
};

// HTTP front end over a SearchService; run() blocks until stop().
class HttpServer {
 public:
  explicit HttpServer(SearchService& service);
  ~HttpServer();
  // port 0 picks a free port; returns the bound port or throws LoadError.
  int bind(const std::string& host, int port);
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// host:port with either part optional ("0.0.0.0:8080", ":9000", "127.0.0.1").
std::pair<std::string, int> parse_bind(const std::string& addr, int default_port = 8080);

}  // namespace curling::service
