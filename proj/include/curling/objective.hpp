#pragma once

#include <cmath>
#include <vector>

#include "curling/expert_bank.hpp"
#include "curling/layers.hpp"
#include "json.hpp"

namespace curling::objective {

struct LossConfig {
  double margin = 0.2;
  double scale = 20.0;
  bool bidirectional = false;

  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

template <class S>
struct ExpertSimilarities {
  Var<S> cosine;  // B x n_experts, zero where the joint mask is off
  Mask joint;     // AND of the two availability masks
};

// Row-aligned per-expert dot products of unit-norm experts.
template <class S>
ExpertSimilarities<S> expert_similarities(const ExpertBankVar<S>& q, const ExpertBankVar<S>& c) {
  if (q.size() != c.size() || q.batch() != c.batch()) throw ShapeError("expert_similarities: bank shape mismatch");
  ExpertSimilarities<S> out;
  out.joint = q.availability.cwiseProduct(c.availability);
  std::vector<Var<S>> cols;
  for (Index i = 0; i < q.size(); ++i) {
    Var<S> dot = ag::rowdot(q.experts[static_cast<std::size_t>(i)], c.experts[static_cast<std::size_t>(i)]);
    cols.push_back(ag::mul_rows_const(dot, mask_column<S>(out.joint, i)));
  }
  out.cosine = ag::concat_cols(cols);
  return out;
}

// Masked softmax over per-expert logits predicted from the text encoding.
template <class S>
Var<S> mixture_weights(Tape<S>& t, const Var<S>& text, const Mask& mask, Linear<S>& mix) {
  if (mask.rows() != text.rows() || mask.cols() != mix.out_dim())
    throw ShapeError("mixture_weights: mask shape does not match batch x experts");
  for (Index r = 0; r < mask.rows(); ++r)
    if (mask.row(r).maxCoeff() == 0) throw DataError("mixture_weights: no expert available for a row");
  return ag::masked_softmax_rows(mix(t, text), mask_matrix<S>(mask));
}

template <class S>
Var<S> total_similarity(Tape<S>& t, const ExpertBankVar<S>& q, const ExpertBankVar<S>& c, const Var<S>& text,
                        Linear<S>& mix) {
  ExpertSimilarities<S> sims = expert_similarities(q, c);
  Var<S> w = mixture_weights(t, text, sims.joint, mix);
  return ag::row_sum(ag::mul(w, sims.cosine));
}

// similarity: L x L, row j = query j, column k = candidate k, diagonal = positives.
// loss = -(1/L) sum_j log softmax_j(s * (sigma_jk - m * [k == j]))_j
template <class S>
Var<S> am_softmax_loss(const Var<S>& similarity, const LossConfig& config) {
  const Index l = similarity.rows();
  if (similarity.cols() != l || l < 2) throw ShapeError("am_softmax_loss: need a square similarity matrix, L >= 2");
  if (!similarity.value().allFinite()) throw NumericsError("am_softmax_loss: non-finite similarity");
  const S scale = static_cast<S>(config.scale);
  const Mat<S> margin = Mat<S>::Identity(l, l) * static_cast<S>(-config.scale * config.margin);
  std::vector<Index> diag(static_cast<std::size_t>(l));
  for (Index j = 0; j < l; ++j) diag[static_cast<std::size_t>(j)] = j;
  auto direction = [&](const Var<S>& sim) {
    Var<S> logits = ag::add_const(ag::affine(sim, scale, S(0)), margin);
    return ag::affine(ag::mean_all(ag::pick(ag::log_softmax_rows(logits), diag)), S(-1), S(0));
  };
  Var<S> loss = direction(similarity);
  if (config.bidirectional) loss = ag::affine(ag::add(loss, direction(ag::transpose(similarity))), S(0.5), S(0));
  if (!std::isfinite(static_cast<double>(loss.value()(0, 0)))) throw NumericsError("am_softmax_loss: non-finite loss");
  return loss;
}

// Hinge triplet loss over in-batch negatives, used by the SUM baseline.
template <class S>
Var<S> triplet_loss(const Var<S>& similarity, double margin) {
  const Index l = similarity.rows();
  if (similarity.cols() != l || l < 2) throw ShapeError("triplet_loss: need a square similarity matrix, L >= 2");
  Mat<S> offdiag = Mat<S>::Ones(l, l) - Mat<S>::Identity(l, l);
  std::vector<Index> diag(static_cast<std::size_t>(l));
  for (Index j = 0; j < l; ++j) diag[static_cast<std::size_t>(j)] = j;
  Var<S> pos = ag::pick(similarity, diag);                                    // L x 1
  Var<S> pos_wide = ag::matmul(pos, similarity.tape().constant(Mat<S>::Ones(1, l)));  // L x L
  Var<S> hinge = ag::relu(ag::affine(ag::sub(similarity, pos_wide), S(1), static_cast<S>(margin)));
  Var<S> masked = ag::mul_const(hinge, offdiag);
  return ag::affine(ag::sum_all(masked), S(1) / static_cast<S>(l * (l - 1)), S(0));
}

}  // namespace curling::objective
