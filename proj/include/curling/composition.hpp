#pragma once

// Composition filters.
//
// Delivery moves the source image's experts toward the region of valid
// targets: a fusion of expert and text feeds a gated-residual update
//   out = w_g * sigmoid(gateMLP(f)) * e + w_r * resMLP(f).
// Sweeping adjusts each candidate's experts by the query text through a
// low-rank bilinear fusion added back onto the candidate:
//   out = normalize(e + P * sum_r (U_r e) * (V_r t)).
// Both renormalize so downstream similarities are cosines.

#include <string>
#include <vector>

#include "curling/expert_bank.hpp"
#include "curling/layers.hpp"
#include "curling/model_config.hpp"

namespace curling::composition {

template <class S>
struct FusionParams {
  Linear<S> image;  // d_e -> d_f
  Linear<S> text;   // d_text -> d_f
  Linear<S> out;    // 3*d_f -> d_e

  void init(const ModelConfig& c, Rng& rng) {
    image.init(static_cast<Index>(c.d_e), static_cast<Index>(c.d_f), rng);
    text.init(static_cast<Index>(c.d_text()), static_cast<Index>(c.d_f), rng);
    out.init(static_cast<Index>(3 * c.d_f), static_cast<Index>(c.d_e), rng);
  }

  void register_to(ParamRegistry<S>& reg, const std::string& prefix) {
    image.register_to(reg, prefix + ".image");
    text.register_to(reg, prefix + ".text");
    out.register_to(reg, prefix + ".out");
  }
};

template <class S>
struct FusionVar {
  Var<S> blocks;     // [pA; pB; pA * pB], B x 3*d_f
  Var<S> projected;  // B x d_e
};

template <class S>
FusionVar<S> fusion_layer(Tape<S>& t, const Var<S>& a, const Var<S>& b, FusionParams<S>& p) {
  if (a.rows() != b.rows()) throw ShapeError("fusion_layer: batch mismatch");
  Var<S> pa = p.image(t, a);
  Var<S> pb = p.text(t, b);
  FusionVar<S> f;
  f.blocks = ag::concat_cols<S>({pa, pb, ag::mul(pa, pb)});
  f.projected = p.out(t, f.blocks);
  return f;
}

template <class S>
struct DeliveryParams {
  FusionParams<S> fusion;
  Linear<S> gate1, gate2, gate3;
  BatchNorm<S> bn1, bn2;
  Linear<S> res1, res2;
  Parameter<S> w_gate;      // 1x1
  Parameter<S> w_residual;  // 1x1

  void init(const ModelConfig& c, Rng& rng) {
    const auto d = static_cast<Index>(c.d_e);
    fusion.init(c, rng);
    gate1.init(d, d, rng);
    gate2.init(d, d, rng);
    gate3.init(d, d, rng);
    bn1.init(d);
    bn2.init(d);
    bn1.momentum = bn2.momentum = static_cast<S>(c.bn_momentum);
    res1.init(d, d, rng);
    res2.init(d, d, rng);
    init_constant(w_gate, 1, 1, S(1));
    init_constant(w_residual, 1, 1, S(0.1));
  }

  void register_to(ParamRegistry<S>& reg, const std::string& prefix) {
    fusion.register_to(reg, prefix + ".fusion");
    gate1.register_to(reg, prefix + ".gate1");
    bn1.register_to(reg, prefix + ".bn1");
    gate2.register_to(reg, prefix + ".gate2");
    bn2.register_to(reg, prefix + ".bn2");
    gate3.register_to(reg, prefix + ".gate3");
    res1.register_to(reg, prefix + ".res1");
    res2.register_to(reg, prefix + ".res2");
    reg.add(prefix + ".w_gate", w_gate);
    reg.add(prefix + ".w_residual", w_residual);
  }
};

// Delivery for one expert over rows that all hold that expert.
template <class S>
Var<S> deliver_rows(Tape<S>& t, const Var<S>& expert, const Var<S>& text, DeliveryParams<S>& p,
                    const ForwardMode& mode) {
  Var<S> f = fusion_layer(t, expert, text, p.fusion).projected;
  Var<S> g = dropout(ag::relu(p.bn1(t, p.gate1(t, f), mode)), mode);
  g = dropout(ag::relu(p.bn2(t, p.gate2(t, g), mode)), mode);
  g = ag::sigmoid(p.gate3(t, g));
  Var<S> r = p.res2(t, dropout(ag::relu(p.res1(t, f)), mode));
  Var<S> out = ag::add(ag::scale_by(ag::mul(g, expert), t.param(p.w_gate)), ag::scale_by(r, t.param(p.w_residual)));
  return ag::row_normalize(out);
}

template <class S>
DeliveryParams<S>& filter_for(std::vector<DeliveryParams<S>>& params, Index expert) {
  return params.size() == 1 ? params.front() : params.at(static_cast<std::size_t>(expert));
}

// text: B x d_text, row-aligned with the bank. Batch statistics for each
// expert are taken over the rows where that expert is available.
template <class S>
ExpertBankVar<S> delivery(Tape<S>& t, const ExpertBankVar<S>& source, const Var<S>& text,
                          std::vector<DeliveryParams<S>>& params, const ForwardMode& mode) {
  if (text.rows() != source.batch()) throw ShapeError("delivery: text rows != bank rows");
  ExpertBankVar<S> out;
  out.availability = source.availability;
  const Index b = source.batch();
  for (Index i = 0; i < source.size(); ++i) {
    std::vector<Index> rows;
    for (Index r = 0; r < b; ++r)
      if (source.availability(r, i)) rows.push_back(r);
    const Index d = source.experts[static_cast<std::size_t>(i)].cols();
    if (rows.empty()) {
      out.experts.push_back(t.constant(Mat<S>::Zero(b, d)));
      continue;
    }
    const bool dense = static_cast<Index>(rows.size()) == b;
    Var<S> e = dense ? source.experts[static_cast<std::size_t>(i)] : ag::gather_rows(source.experts[static_cast<std::size_t>(i)], rows);
    Var<S> tx = dense ? text : ag::gather_rows(text, rows);
    Var<S> moved = deliver_rows(t, e, tx, filter_for(params, i), mode);
    out.experts.push_back(dense ? moved : ag::scatter_rows(moved, rows, b));
  }
  return out;
}

template <class S>
struct SweepParams {
  Linear<S> u;     // d_e -> R*d', no bias
  Linear<S> v;     // d_text -> R*d', no bias
  Linear<S> proj;  // d' -> d_e, no bias
  Index rank = 1;

  void init(const ModelConfig& c, Rng& rng) {
    rank = static_cast<Index>(c.sweep_rank);
    const auto width = static_cast<Index>(c.sweep_rank * c.sweep_dim);
    u.init(static_cast<Index>(c.d_e), width, rng, false);
    v.init(static_cast<Index>(c.d_text()), width, rng, false);
    proj.init(static_cast<Index>(c.sweep_dim), static_cast<Index>(c.d_e), rng, false);
  }

  Index factor_dim() const { return proj.in_dim(); }

  void register_to(ParamRegistry<S>& reg, const std::string& prefix) {
    u.register_to(reg, prefix + ".u");
    v.register_to(reg, prefix + ".v");
    proj.register_to(reg, prefix + ".proj");
  }
};

// Given xu = x U and tv = t V (both B x R*d'), returns P * sum_r xu_r * tv_r.
template <class S>
Var<S> bilinear_from_factors(Tape<S>& t, const Var<S>& xu, const Var<S>& tv, SweepParams<S>& p) {
  Var<S> z = ag::mul(xu, tv);
  const Index dp = p.factor_dim();
  std::vector<Var<S>> blocks;
  for (Index r = 0; r < p.rank; ++r) blocks.push_back(ag::slice_cols(z, r * dp, dp));
  return p.proj(t, blocks.size() == 1 ? blocks.front() : ag::sum(blocks));
}

template <class S>
Var<S> bilinear_fuse(Tape<S>& t, const Var<S>& x, const Var<S>& text, SweepParams<S>& p) {
  if (x.rows() != text.rows()) throw ShapeError("bilinear_fuse: batch mismatch");
  return bilinear_from_factors(t, p.u(t, x), p.v(t, text), p);
}

template <class S>
SweepParams<S>& filter_for(std::vector<SweepParams<S>>& params, Index expert) {
  return params.size() == 1 ? params.front() : params.at(static_cast<std::size_t>(expert));
}

// Row-aligned sweep: text row b conditions candidate row b.
template <class S>
ExpertBankVar<S> sweep(Tape<S>& t, const ExpertBankVar<S>& candidate, const Var<S>& text,
                       std::vector<SweepParams<S>>& params) {
  if (text.rows() != candidate.batch()) throw ShapeError("sweep: text rows != bank rows");
  ExpertBankVar<S> out;
  out.availability = candidate.availability;
  for (Index i = 0; i < candidate.size(); ++i) {
    const Var<S>& e = candidate.experts[static_cast<std::size_t>(i)];
    Var<S> adjusted = ag::add(e, bilinear_fuse(t, e, text, filter_for(params, i)));
    out.experts.push_back(ag::mul_rows_const(ag::row_normalize(adjusted), mask_column<S>(candidate.availability, i)));
  }
  return out;
}

// Sweep of candidate row cand_rows[p] under text row text_rows[p], computing
// the U and V factors once per distinct row.
template <class S>
ExpertBankVar<S> sweep_pairs(Tape<S>& t, const ExpertBankVar<S>& candidate, const Var<S>& text,
                             const std::vector<Index>& cand_rows, const std::vector<Index>& text_rows,
                             std::vector<SweepParams<S>>& params) {
  ExpertBankVar<S> out;
  out.availability.resize(static_cast<Index>(cand_rows.size()), candidate.size());
  for (std::size_t k = 0; k < cand_rows.size(); ++k)
    out.availability.row(static_cast<Index>(k)) = candidate.availability.row(cand_rows[k]);
  for (Index i = 0; i < candidate.size(); ++i) {
    SweepParams<S>& p = filter_for(params, i);
    const Var<S>& e = candidate.experts[static_cast<std::size_t>(i)];
    Var<S> xu = ag::gather_rows(p.u(t, e), cand_rows);
    Var<S> tv = ag::gather_rows(p.v(t, text), text_rows);
    Var<S> e_pairs = ag::gather_rows(e, cand_rows);
    Var<S> adjusted = ag::add(e_pairs, bilinear_from_factors(t, xu, tv, p));
    out.experts.push_back(ag::mul_rows_const(ag::row_normalize(adjusted), mask_column<S>(out.availability, i)));
  }
  return out;
}

// SUM baseline: cosine(normalize(proj(e_source) + proj(text)), candidate),
// on the base expert only.
template <class S>
struct SumBaselineParams {
  Linear<S> image;  // d_e -> d_e
  Linear<S> text;   // d_text -> d_e

  void init(const ModelConfig& c, Rng& rng) {
    image.init(static_cast<Index>(c.d_e), static_cast<Index>(c.d_e), rng);
    text.init(static_cast<Index>(c.d_text()), static_cast<Index>(c.d_e), rng);
  }

  void register_to(ParamRegistry<S>& reg, const std::string& prefix) {
    image.register_to(reg, prefix + ".image");
    text.register_to(reg, prefix + ".text");
  }
};

template <class S>
Var<S> sum_compose(Tape<S>& t, const Var<S>& source_base, const Var<S>& text, SumBaselineParams<S>& p) {
  return ag::row_normalize(ag::add(p.image(t, source_base), p.text(t, text)));
}

}  // namespace curling::composition
