#pragma once

#include <cstddef>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "curling/checkpoint.hpp"
#include "curling/data_model.hpp"
#include "curling/gallery.hpp"

namespace curling::evaluation {

struct RankingResult {
  std::string query_id;
  std::vector<std::string> ids;  // best first
  std::vector<float> scores;     // non-increasing, aligned with ids

  bool operator==(const RankingResult&) const = default;
};

struct Query {
  std::string query_id;
  std::string source_id;
  data::TokenSequence text;
};

inline constexpr std::size_t kAll = std::numeric_limits<std::size_t>::max();

// Scores every gallery candidate except the source and sorts by (score desc,
// id asc), keeping the first `keep`. NotFoundError for an unknown source.
RankingResult rank_gallery(const gallery::Scorer& scorer, const Query& query, std::size_t keep = kAll);

// Fraction of rankings whose target is among the first k ids. IntegrityError
// when a ranking's query has no target.
double recall_at_k(const std::vector<RankingResult>& rankings, const std::map<std::string, std::string>& targets,
                   std::size_t k);

struct CategoryRecall {
  double r10 = 0.0;
  double r50 = 0.0;
  std::size_t queries = 0;
};

struct RecallReport {
  std::map<std::string, CategoryRecall> categories;
  double overall = 0.0;  // mean over categories of mean(r10, r50)
};

RecallReport make_report(const std::map<std::string, CategoryRecall>& categories);

// Mean over dress, shirt and toptee of mean(R@10, R@50). IntegrityError if
// any of the three is missing.
double challenge_score(const std::map<std::string, CategoryRecall>& categories);

// Scores of every query against a shared candidate list; NaN marks an
// excluded pair (a query's own source).
struct ScoreTable {
  std::vector<std::string> query_ids;
  std::vector<std::string> candidate_ids;
  Eigen::MatrixXd scores;  // queries x candidates

  bool operator==(const ScoreTable&) const = default;
};

ScoreTable score_table(const gallery::Scorer& scorer, const std::vector<Query>& queries);

// Per query z-score of each member, weighted sum (uniform when weights is
// empty), then re-ranked with the usual tie-break. IntegrityError when the
// members' query or candidate lists differ.
std::vector<RankingResult> ensemble_scores(const std::vector<ScoreTable>& members, std::vector<double> weights = {},
                                           std::size_t keep = kAll);

RankingResult rank_row(const ScoreTable& table, std::size_t query, std::size_t keep = kAll);

// cosine(normalize(proj(e_source) + proj(text)), normalize(e_candidate)) on
// the base expert, with the model's SUM-baseline head.
float sum_baseline_similarity(Model<float>& model, const Vec<float>& source_base, const TextEncoding<float>& text,
                              const Vec<float>& candidate_base);

// Queries of a bundle's triplets, mapped through the checkpoint vocabulary.
// Query ids are the triplet positions.
std::vector<Query> triplet_queries(const data::DatasetBundle& bundle, const data::Vocab& vocab, std::size_t max_len);
std::map<std::string, std::string> triplet_targets(const data::DatasetBundle& bundle);

void write_report(const std::filesystem::path& dir, const RecallReport& report);
// One line per query: {"query": id, "ranked_ids": first 50 ids}.
void write_rankings(const std::filesystem::path& path, const std::vector<RankingResult>& rankings);

}  // namespace curling::evaluation
