#pragma once

// Image and text encoders.
//
// An image becomes a bank of 1 + N_attr experts: expert 0 projects the
// precomputed backbone feature, expert c pools the embedded attribute tokens
// of category c with NetVLAD and gates them against the projected image
// feature. A collaborative gate then lets every expert be modulated by the
// others. Text is encoded at three levels (mean word vector, mean biGRU state,
// max-pooled convolutions over the biGRU states) and concatenated.

#include <span>
#include <string>
#include <vector>

#include "curling/data_model.hpp"
#include "curling/expert_bank.hpp"
#include "curling/layers.hpp"
#include "curling/model_config.hpp"

namespace curling::encoders {

template <class S>
struct NetVladParams {
  Parameter<S> centers;      // K x d_w
  Parameter<S> assign;       // d_w x K
  Parameter<S> assign_bias;  // 1 x K

  void init(Index clusters, Index dim, Rng& rng) {
    init_normal(centers, clusters, dim, 0.1, rng);
    init_uniform(assign, dim, clusters, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
    init_constant(assign_bias, 1, clusters, S(0));
  }

  Index clusters() const { return centers.value.rows(); }
  Index dim() const { return centers.value.cols(); }
  Index output_dim() const { return clusters() * dim(); }

  void register_to(ParamRegistry<S>& reg, const std::string& prefix) {
    reg.add(prefix + ".centers", centers);
    reg.add(prefix + ".assign", assign);
    reg.add(prefix + ".assign_bias", assign_bias);
  }
};

// descriptors: n x d_w. Returns 1 x (K * d_w): per-cluster residual sums,
// each block L2-normalized, then the whole vector L2-normalized.
template <class S>
Var<S> netvlad_pool(Tape<S>& t, const Var<S>& descriptors, NetVladParams<S>& p) {
  if (descriptors.cols() != p.dim())
    throw ShapeError("netvlad_pool: descriptor dim " + std::to_string(descriptors.cols()) + " != " +
                     std::to_string(p.dim()));
  if (descriptors.rows() == 0) return t.constant(Mat<S>::Zero(1, p.output_dim()));
  Var<S> logits = ag::add_row(ag::matmul(descriptors, t.param(p.assign)), t.param(p.assign_bias));
  Var<S> soft = ag::softmax_rows(logits);                              // n x K
  Var<S> weighted = ag::matmul(ag::transpose(soft), descriptors);      // K x d_w
  Var<S> mass = ag::transpose(ag::col_sum(soft));                      // K x 1
  Var<S> residual = ag::sub(weighted, ag::mul_col(t.param(p.centers), mass));
  Var<S> intra = ag::row_normalize(residual);
  return ag::row_normalize(ag::reshape(intra, 1, p.output_dim()));
}

// sigmoid([x; context] W + b) * x, row-wise.
template <class S>
Var<S> context_gate(Tape<S>& t, const Var<S>& x, const Var<S>& context, Linear<S>& gate) {
  if (x.rows() != context.rows() || gate.out_dim() != x.cols() || gate.in_dim() != x.cols() + context.cols())
    throw ShapeError("context_gate: x " + ag::detail::dims(x) + ", context " + ag::detail::dims(context));
  Var<S> g = ag::sigmoid(gate(t, ag::concat_cols<S>({x, context})));
  return ag::mul(g, x);
}

template <class S>
struct AttributeExpertParams {
  NetVladParams<S> vlad;
  Linear<S> pool_proj;  // K*d_w -> d_e
  Linear<S> gate;       // 2*d_e -> d_e

  void init(const ModelConfig& c, Rng& rng) {
    vlad.init(static_cast<Index>(c.vlad_clusters), static_cast<Index>(c.d_w), rng);
    pool_proj.init(static_cast<Index>(c.vlad_clusters * c.d_w), static_cast<Index>(c.d_e), rng);
    gate.init(static_cast<Index>(2 * c.d_e), static_cast<Index>(c.d_e), rng);
  }

  void register_to(ParamRegistry<S>& reg, const std::string& prefix) {
    vlad.register_to(reg, prefix + ".vlad");
    pool_proj.register_to(reg, prefix + ".pool_proj");
    gate.register_to(reg, prefix + ".gate");
  }
};

// Attribute expert for a batch of images of one attribute category.
// tokens[b] may be empty, in which case row b is exactly zero.
template <class S>
Var<S> attribute_expert(Tape<S>& t, const std::vector<std::vector<int>>& tokens, const Var<S>& image_context,
                        Parameter<S>& embedding, AttributeExpertParams<S>& p) {
  std::vector<Var<S>> pooled;
  Vec<S> available(static_cast<Index>(tokens.size()));
  for (std::size_t b = 0; b < tokens.size(); ++b) {
    if (tokens[b].empty()) {
      pooled.push_back(t.constant(Mat<S>::Zero(1, p.vlad.output_dim())));
      available[static_cast<Index>(b)] = S(0);
      continue;
    }
    std::vector<Index> ids(tokens[b].begin(), tokens[b].end());
    Var<S> desc = ag::gather_rows(t.param(embedding), std::move(ids));
    pooled.push_back(netvlad_pool(t, desc, p.vlad));
    available[static_cast<Index>(b)] = S(1);
  }
  Var<S> projected = p.pool_proj(t, ag::vstack(pooled));
  Var<S> gated = context_gate(t, projected, image_context, p.gate);
  return ag::mul_rows_const(gated, std::move(available));
}

template <class S>
struct CollabGateParams {
  std::vector<Linear<S>> proj;    // per expert, d_e -> d_ce
  std::vector<Linear<S>> hidden;  // per expert, d_ce -> d_ce
  std::vector<Linear<S>> out;     // per expert, d_ce -> d_e

  void init(const ModelConfig& c, Rng& rng) {
    const auto n = c.n_experts();
    proj.resize(n);
    hidden.resize(n);
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      proj[i].init(static_cast<Index>(c.d_e), static_cast<Index>(c.d_ce), rng);
      hidden[i].init(static_cast<Index>(c.d_ce), static_cast<Index>(c.d_ce), rng);
      out[i].init(static_cast<Index>(c.d_ce), static_cast<Index>(c.d_e), rng);
    }
  }

  void register_to(ParamRegistry<S>& reg, const std::string& prefix) {
    for (std::size_t i = 0; i < proj.size(); ++i) {
      const std::string p = prefix + "." + std::to_string(i);
      proj[i].register_to(reg, p + ".proj");
      hidden[i].register_to(reg, p + ".hidden");
      out[i].register_to(reg, p + ".out");
    }
  }
};

// For every available expert i: t_i = MLP_i(sum over available j != i of
// proj_j(e_j)); output = normalize(sigmoid(t_i) * e_i). Unavailable experts
// stay zero and the availability mask is passed through unchanged.
template <class S>
ExpertBankVar<S> collaborative_gate(Tape<S>& t, const ExpertBankVar<S>& bank, CollabGateParams<S>& p) {
  const Index n = bank.size();
  if (static_cast<std::size_t>(n) != p.proj.size())
    throw ShapeError("collaborative_gate: bank has " + std::to_string(n) + " experts, params expect " +
                     std::to_string(p.proj.size()));
  std::vector<Var<S>> projected;
  for (Index j = 0; j < n; ++j) {
    Var<S> pj = p.proj[static_cast<std::size_t>(j)](t, bank.experts[static_cast<std::size_t>(j)]);
    projected.push_back(ag::mul_rows_const(pj, mask_column<S>(bank.availability, j)));
  }
  Var<S> total = ag::sum(projected);
  ExpertBankVar<S> out;
  out.availability = bank.availability;
  for (Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    Var<S> others = ag::sub(total, projected[k]);
    Var<S> attn = p.out[k](t, ag::relu(p.hidden[k](t, others)));
    Var<S> gated = ag::mul(ag::sigmoid(attn), bank.experts[k]);
    out.experts.push_back(ag::mul_rows_const(ag::row_normalize(gated), mask_column<S>(bank.availability, i)));
  }
  return out;
}

// Model input for one image: backbone feature plus attribute token indices
// per attribute category.
struct ImageInput {
  std::vector<float> feature;
  std::vector<std::vector<int>> attribute_tokens;
};

template <class S>
struct ImageEncoderParams {
  Linear<S> base_proj;  // d_img -> d_e
  std::vector<AttributeExpertParams<S>> attributes;
  CollabGateParams<S> collab;

  void init(const ModelConfig& c, Rng& rng) {
    base_proj.init(static_cast<Index>(c.d_img), static_cast<Index>(c.d_e), rng);
    attributes.resize(c.n_attr);
    for (auto& a : attributes) a.init(c, rng);
    collab.init(c, rng);
  }

  void register_to(ParamRegistry<S>& reg, const std::string& prefix) {
    base_proj.register_to(reg, prefix + ".base_proj");
    for (std::size_t i = 0; i < attributes.size(); ++i)
      attributes[i].register_to(reg, prefix + ".attr." + std::to_string(i + 1));
    collab.register_to(reg, prefix + ".collab");
  }
};

// Bank before the collaborative gate: expert 0 = projected feature,
// experts 1..N_attr = gated attribute experts.
template <class S>
ExpertBankVar<S> encode_experts(Tape<S>& t, std::span<const ImageInput> images, Parameter<S>& embedding,
                                ImageEncoderParams<S>& p) {
  const Index b = static_cast<Index>(images.size());
  const Index d_img = p.base_proj.in_dim();
  const std::size_t n_attr = p.attributes.size();
  Mat<S> features(b, d_img);
  for (Index r = 0; r < b; ++r) {
    const auto& img = images[static_cast<std::size_t>(r)];
    if (static_cast<Index>(img.feature.size()) != d_img)
      throw ShapeError("image feature has dimension " + std::to_string(img.feature.size()) + ", expected " +
                       std::to_string(d_img));
    if (img.attribute_tokens.size() != n_attr)
      throw ShapeError("image carries " + std::to_string(img.attribute_tokens.size()) +
                       " attribute lists, expected " + std::to_string(n_attr));
    for (Index c = 0; c < d_img; ++c) features(r, c) = static_cast<S>(img.feature[static_cast<std::size_t>(c)]);
  }
  ExpertBankVar<S> bank;
  bank.availability = Mask::Zero(b, static_cast<Index>(n_attr + 1));
  bank.availability.col(0).setOnes();
  Var<S> base = p.base_proj(t, t.constant(std::move(features)));
  bank.experts.push_back(base);
  for (std::size_t c = 0; c < n_attr; ++c) {
    std::vector<std::vector<int>> tokens(images.size());
    for (std::size_t r = 0; r < images.size(); ++r) {
      tokens[r] = images[r].attribute_tokens[c];
      bank.availability(static_cast<Index>(r), static_cast<Index>(c + 1)) = tokens[r].empty() ? 0 : 1;
    }
    bank.experts.push_back(attribute_expert(t, tokens, base, embedding, p.attributes[c]));
  }
  return bank;
}

template <class S>
ExpertBankVar<S> encode_images(Tape<S>& t, std::span<const ImageInput> images, Parameter<S>& embedding,
                               ImageEncoderParams<S>& p) {
  return collaborative_gate(t, encode_experts(t, images, embedding, p), p.collab);
}

// ---------------------------------------------------------------------------
// Text

template <class S>
struct GruParams {
  Linear<S> input;   // d_w -> 3h, columns [reset, update, candidate]
  Linear<S> hidden;  // h -> 3h

  void init(Index in, Index h, Rng& rng) {
    input.init(in, 3 * h, rng);
    hidden.init(h, 3 * h, rng);
  }
  Index hidden_dim() const { return hidden.in_dim(); }

  void register_to(ParamRegistry<S>& reg, const std::string& prefix) {
    input.register_to(reg, prefix + ".input");
    hidden.register_to(reg, prefix + ".hidden");
  }
};

// One GRU step; rows whose live(r) == 0 keep their previous state.
template <class S>
Var<S> gru_step(Tape<S>& t, const Var<S>& x_proj, const Var<S>& h, GruParams<S>& p, const Vec<S>& live) {
  const Index hd = p.hidden_dim();
  Var<S> h_proj = p.hidden(t, h);
  Var<S> r = ag::sigmoid(ag::add(ag::slice_cols(x_proj, 0, hd), ag::slice_cols(h_proj, 0, hd)));
  Var<S> z = ag::sigmoid(ag::add(ag::slice_cols(x_proj, hd, hd), ag::slice_cols(h_proj, hd, hd)));
  Var<S> n = ag::tanh(ag::add(ag::slice_cols(x_proj, 2 * hd, hd), ag::mul(r, ag::slice_cols(h_proj, 2 * hd, hd))));
  Var<S> next = ag::add(n, ag::mul(z, ag::sub(h, n)));
  if (live.minCoeff() == S(1)) return next;
  return ag::add(h, ag::mul_rows_const(ag::sub(next, h), live));
}

inline constexpr int kConvWidths[3] = {2, 3, 4};

template <class S>
struct TextEncoderParams {
  GruParams<S> forward;
  GruParams<S> backward;
  std::vector<Linear<S>> convs;  // width k: k*2h -> d_l/3
  TemporalReduce temporal = TemporalReduce::kMean;

  void init(const ModelConfig& c, Rng& rng) {
    forward.init(static_cast<Index>(c.d_w), static_cast<Index>(c.gru_hidden), rng);
    backward.init(static_cast<Index>(c.d_w), static_cast<Index>(c.gru_hidden), rng);
    convs.resize(3);
    for (int i = 0; i < 3; ++i)
      convs[static_cast<std::size_t>(i)].init(static_cast<Index>(kConvWidths[i] * 2 * c.gru_hidden),
                                              static_cast<Index>(c.d_l / 3), rng);
    temporal = c.temporal;
  }

  void register_to(ParamRegistry<S>& reg, const std::string& prefix) {
    forward.register_to(reg, prefix + ".gru_fwd");
    backward.register_to(reg, prefix + ".gru_bwd");
    for (int i = 0; i < 3; ++i)
      convs[static_cast<std::size_t>(i)].register_to(reg, prefix + ".conv" + std::to_string(kConvWidths[i]));
  }
};

template <class S>
TextVar<S> encode_text(Tape<S>& t, std::span<const data::TokenSequence> seqs, Parameter<S>& embedding,
                       TextEncoderParams<S>& p) {
  const Index b = static_cast<Index>(seqs.size());
  if (b == 0) throw DataError("encode_text: empty batch");
  int steps = 0;
  Vec<S> inv_len(b);
  for (Index r = 0; r < b; ++r) {
    const auto& s = seqs[static_cast<std::size_t>(r)];
    if (s.length <= 0) throw DataError("encode_text: sequence of length 0");
    if (static_cast<std::size_t>(s.length) > s.ids.size())
      throw ShapeError("encode_text: true length exceeds padded sequence");
    steps = std::max(steps, s.length);
    inv_len[r] = S(1) / static_cast<S>(s.length);
  }
  const Index vocab = embedding.value.rows();
  std::vector<Var<S>> words;
  std::vector<Vec<S>> live;
  for (int step = 0; step < steps; ++step) {
    std::vector<Index> ids(static_cast<std::size_t>(b));
    Vec<S> m(b);
    for (Index r = 0; r < b; ++r) {
      const auto& s = seqs[static_cast<std::size_t>(r)];
      const bool on = step < s.length;
      const int id = on ? s.ids[static_cast<std::size_t>(step)] : data::Vocab::kPad;
      if (id < 0 || id >= vocab) throw ShapeError("token index " + std::to_string(id) + " outside vocabulary");
      ids[static_cast<std::size_t>(r)] = id;
      m[r] = on ? S(1) : S(0);
    }
    words.push_back(ag::gather_rows(t.param(embedding), std::move(ids)));
    live.push_back(std::move(m));
  }

  std::vector<Var<S>> masked_words;
  for (int step = 0; step < steps; ++step)
    masked_words.push_back(ag::mul_rows_const(words[static_cast<std::size_t>(step)], live[static_cast<std::size_t>(step)]));
  TextVar<S> out;
  out.global = ag::mul_rows_const(ag::sum(masked_words), inv_len);

  const Index hd = p.forward.hidden_dim();
  std::vector<Var<S>> fwd(static_cast<std::size_t>(steps)), bwd(static_cast<std::size_t>(steps));
  Var<S> h = t.constant(Mat<S>::Zero(b, hd));
  for (int step = 0; step < steps; ++step) {
    const auto k = static_cast<std::size_t>(step);
    h = gru_step(t, p.forward.input(t, words[k]), h, p.forward, live[k]);
    fwd[k] = h;
  }
  Var<S> h_last_fwd = h;
  h = t.constant(Mat<S>::Zero(b, hd));
  for (int step = steps - 1; step >= 0; --step) {
    const auto k = static_cast<std::size_t>(step);
    h = gru_step(t, p.backward.input(t, words[k]), h, p.backward, live[k]);
    bwd[k] = h;
  }

  std::vector<Var<S>> states;  // masked [fwd; bwd] per step, zero at padding
  for (int step = 0; step < steps; ++step) {
    const auto k = static_cast<std::size_t>(step);
    states.push_back(ag::mul_rows_const(ag::concat_cols<S>({fwd[k], bwd[k]}), live[k]));
  }
  if (p.temporal == TemporalReduce::kMean) {
    out.temporal = ag::mul_rows_const(ag::sum(states), inv_len);
  } else {
    out.temporal = ag::concat_cols<S>({h_last_fwd, bwd[0]});
  }

  std::vector<Var<S>> locals;
  for (int w = 0; w < 3; ++w) {
    const int width = kConvWidths[w];
    const int windows = std::max(steps - width + 1, 1);
    std::vector<Var<S>> slots;
    Mat<S> valid(b, windows);
    for (int start = 0; start < windows; ++start) {
      std::vector<Var<S>> cols;
      for (int o = 0; o < width; ++o) {
        const int pos = start + o;
        cols.push_back(pos < steps ? states[static_cast<std::size_t>(pos)]
                                   : t.constant(Mat<S>::Zero(b, 2 * hd)));
      }
      slots.push_back(ag::relu(p.convs[static_cast<std::size_t>(w)](t, ag::concat_cols(cols))));
      for (Index r = 0; r < b; ++r) {
        const int len = seqs[static_cast<std::size_t>(r)].length;
        valid(r, start) = start <= std::max(len - width, 0) ? S(1) : S(0);
      }
    }
    locals.push_back(ag::masked_max(slots, valid));
  }
  out.local = ag::concat_cols(locals);
  out.concat = ag::concat_cols<S>({out.global, out.temporal, out.local});
  return out;
}

}  // namespace curling::encoders
