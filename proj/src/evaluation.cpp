#include "curling/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "curling/composition.hpp"
#include "curling/errors.hpp"
#include "json.hpp"

namespace curling::evaluation {

namespace fs = std::filesystem;
using nlohmann::json;

RankingResult rank_gallery(const gallery::Scorer& scorer, const Query& query, std::size_t keep) {
  const gallery::GalleryIndex& idx = scorer.index();
  const auto row = idx.find(query.source_id);
  if (!row) throw NotFoundError("source image '" + query.source_id + "' is not in the gallery");
  const gallery::QueryEncoding q = scorer.encode(idx.bank(*row), query.text);
  const gallery::Ranked top = gallery::top_k(scorer.scores(q), idx.ids, keep, row);
  RankingResult out;
  out.query_id = query.query_id;
  for (auto r : top.rows) out.ids.push_back(idx.ids[r]);
  out.scores = top.scores;
  return out;
}

double recall_at_k(const std::vector<RankingResult>& rankings, const std::map<std::string, std::string>& targets,
                   std::size_t k) {
  if (k == 0) throw UsageError("recall_at_k: k must be >= 1");
  if (rankings.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& r : rankings) {
    auto it = targets.find(r.query_id);
    if (it == targets.end()) throw IntegrityError("no target recorded for query '" + r.query_id + "'");
    const std::size_t n = std::min(k, r.ids.size());
    if (std::find(r.ids.begin(), r.ids.begin() + static_cast<std::ptrdiff_t>(n), it->second) !=
        r.ids.begin() + static_cast<std::ptrdiff_t>(n))
      ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

RecallReport make_report(const std::map<std::string, CategoryRecall>& categories) {
  RecallReport rep;
  rep.categories = categories;
  double total = 0.0;
  for (const auto& [name, c] : categories) total += 0.5 * (c.r10 + c.r50);
  rep.overall = categories.empty() ? 0.0 : total / static_cast<double>(categories.size());
  return rep;
}

double challenge_score(const std::map<std::string, CategoryRecall>& categories) {
  double total = 0.0;
  for (const auto& name : data::challenge_categories()) {
    auto it = categories.find(name);
    if (it == categories.end()) throw IntegrityError("challenge score needs category '" + name + "'");
    total += 0.5 * (it->second.r10 + it->second.r50);
  }
  return total / static_cast<double>(data::challenge_categories().size());
}

ScoreTable score_table(const gallery::Scorer& scorer, const std::vector<Query>& queries) {
  const gallery::GalleryIndex& idx = scorer.index();
  ScoreTable t;
  t.candidate_ids = idx.ids;
  t.scores.resize(static_cast<Index>(queries.size()), static_cast<Index>(idx.size()));
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto row = idx.find(queries[qi].source_id);
    if (!row) throw NotFoundError("source image '" + queries[qi].source_id + "' is not in the gallery");
    t.query_ids.push_back(queries[qi].query_id);
    const std::vector<float> s = scorer.scores(scorer.encode(idx.bank(*row), queries[qi].text));
    for (std::size_t c = 0; c < s.size(); ++c) t.scores(static_cast<Index>(qi), static_cast<Index>(c)) = s[c];
    t.scores(static_cast<Index>(qi), static_cast<Index>(*row)) = std::numeric_limits<double>::quiet_NaN();
  }
  return t;
}

RankingResult rank_row(const ScoreTable& table, std::size_t query, std::size_t keep) {
  const auto q = static_cast<Index>(query);
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < table.candidate_ids.size(); ++c)
    if (!std::isnan(table.scores(q, static_cast<Index>(c)))) cols.push_back(c);
  const std::size_t k = std::min(keep, cols.size());
  std::partial_sort(cols.begin(), cols.begin() + static_cast<std::ptrdiff_t>(k), cols.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double sa = table.scores(q, static_cast<Index>(a));
                      const double sb = table.scores(q, static_cast<Index>(b));
                      if (sa != sb) return sa > sb;
                      return table.candidate_ids[a] < table.candidate_ids[b];
                    });
  RankingResult r;
  r.query_id = table.query_ids.at(query);
  for (std::size_t i = 0; i < k; ++i) {
    r.ids.push_back(table.candidate_ids[cols[i]]);
    r.scores.push_back(static_cast<float>(table.scores(q, static_cast<Index>(cols[i]))));
  }
  return r;
}

std::vector<RankingResult> ensemble_scores(const std::vector<ScoreTable>& members, std::vector<double> weights,
                                           std::size_t keep) {
  if (members.empty()) throw UsageError("ensemble needs at least one member");
  if (weights.empty()) weights.assign(members.size(), 1.0 / static_cast<double>(members.size()));
  if (weights.size() != members.size()) throw UsageError("ensemble: one weight per member");
  const ScoreTable& first = members.front();
  for (const auto& m : members) {
    if (m.candidate_ids != first.candidate_ids) throw IntegrityError("ensemble members rank different candidate sets");
    if (m.query_ids != first.query_ids) throw IntegrityError("ensemble members score different queries");
  }
  ScoreTable fused = first;
  fused.scores.setZero();
  for (std::size_t mi = 0; mi < members.size(); ++mi) {
    const Eigen::MatrixXd& s = members[mi].scores;
    for (Index q = 0; q < s.rows(); ++q) {
      double sum = 0.0, sq = 0.0;
      std::size_t n = 0;
      for (Index c = 0; c < s.cols(); ++c) {
        if (std::isnan(s(q, c))) continue;
        sum += s(q, c);
        ++n;
      }
      const double mean = n ? sum / static_cast<double>(n) : 0.0;
      for (Index c = 0; c < s.cols(); ++c)
        if (!std::isnan(s(q, c))) sq += (s(q, c) - mean) * (s(q, c) - mean);
      const double sd = n ? std::sqrt(sq / static_cast<double>(n)) : 0.0;
      for (Index c = 0; c < s.cols(); ++c) {
        if (std::isnan(s(q, c))) {
          fused.scores(q, c) = std::numeric_limits<double>::quiet_NaN();
          continue;
        }
        const double z = sd > 0.0 ? (s(q, c) - mean) / sd : 0.0;
        fused.scores(q, c) += weights[mi] * z;
      }
    }
  }
  std::vector<RankingResult> out;
  for (std::size_t q = 0; q < fused.query_ids.size(); ++q) out.push_back(rank_row(fused, q, keep));
  return out;
}

float sum_baseline_similarity(Model<float>& model, const Vec<float>& source_base, const TextEncoding<float>& text,
                              const Vec<float>& candidate_base) {
  Tape<float> t(false);
  Var<float> composed = composition::sum_compose(t, t.constant(source_base.transpose()),
                                                 t.constant(text.concat.transpose()), model.sum_baseline);
  const float n = candidate_base.norm();
  if (!(n > std::numeric_limits<float>::min())) return 0.0f;
  return composed.value().row(0).dot(candidate_base.transpose() / n);
}

std::vector<Query> triplet_queries(const data::DatasetBundle& bundle, const data::Vocab& vocab, std::size_t max_len) {
  std::vector<Query> out;
  for (std::size_t i = 0; i < bundle.triplets.size(); ++i) {
    const auto& t = bundle.triplets[i];
    out.push_back({std::to_string(i), t.source_id, data::assemble_query_text(t, vocab, max_len)});
  }
  return out;
}

std::map<std::string, std::string> triplet_targets(const data::DatasetBundle& bundle) {
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < bundle.triplets.size(); ++i) out[std::to_string(i)] = bundle.triplets[i].target_id;
  return out;
}

void write_report(const fs::path& dir, const RecallReport& report) {
  fs::create_directories(dir);
  json cats = json::object();
  for (const auto& [name, c] : report.categories)
    cats[name] = {{"r10", c.r10}, {"r50", c.r50}, {"queries", c.queries}};
  json j = {{"categories", cats}, {"overall", report.overall}};
  bool complete = true;
  for (const auto& name : data::challenge_categories()) complete = complete && report.categories.count(name);
  if (complete) j["challenge_score"] = challenge_score(report.categories);
  {
    std::ofstream out(dir / "report.json");
    if (!out) throw LoadError("cannot write " + (dir / "report.json").string());
    out << j.dump(2) << "\n";
  }
  std::ofstream csv(dir / "report.csv");
  if (!csv) throw LoadError("cannot write " + (dir / "report.csv").string());
  csv << "category,r10,r50,mean,queries\n";
  for (const auto& [name, c] : report.categories)
    csv << name << "," << c.r10 << "," << c.r50 << "," << 0.5 * (c.r10 + c.r50) << "," << c.queries << "\n";
  csv << "overall,,," << report.overall << ",\n";
}

void write_rankings(const fs::path& path, const std::vector<RankingResult>& rankings) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  for (const auto& r : rankings) {
    const std::size_t n = std::min<std::size_t>(50, r.ids.size());
    json ids(std::vector<std::string>(r.ids.begin(), r.ids.begin() + static_cast<std::ptrdiff_t>(n)));
    out << json{{"query", r.query_id}, {"ranked_ids", ids}}.dump() << "\n";
  }
}

}  // namespace curling::evaluation
