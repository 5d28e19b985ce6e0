#include "curling/model.hpp"

#include <fstream>
#include <sstream>

namespace curling {

template <class S>
Model<S>::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  init_normal(embedding, static_cast<Index>(config_.vocab_size), static_cast<Index>(config_.d_w), 0.1, rng);
  embedding.value.row(0).setZero();
  image.init(config_, rng);
  text.init(config_, rng);
  const std::size_t filters = config_.share_filters ? 1 : config_.n_experts();
  delivery.resize(filters);
  for (auto& d : delivery) d.init(config_, rng);
  sweeps.resize(filters);
  for (auto& s : sweeps) s.init(config_, rng);
  mix.init(static_cast<Index>(config_.d_text()), static_cast<Index>(config_.n_experts()), rng);
  sum_baseline.init(config_, rng);

  registry_.add("embedding", embedding);
  image.register_to(registry_, "image");
  text.register_to(registry_, "text");
  for (std::size_t i = 0; i < delivery.size(); ++i) delivery[i].register_to(registry_, "delivery." + std::to_string(i));
  for (std::size_t i = 0; i < sweeps.size(); ++i) sweeps[i].register_to(registry_, "sweep." + std::to_string(i));
  mix.register_to(registry_, "mix");
  sum_baseline.register_to(registry_, "sum");
}

template <class S>
std::size_t Model<S>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : registry_.params) n += static_cast<std::size_t>(p->value.size());
  return n;
}

template <class S>
ExpertBankVar<S> Model<S>::encode_images(Tape<S>& t, std::span<const ImageInput> images) {
  return encoders::encode_images(t, images, embedding, image);
}

template <class S>
TextVar<S> Model<S>::encode_text(Tape<S>& t, std::span<const data::TokenSequence> seqs) {
  return encoders::encode_text(t, seqs, embedding, text);
}

template <class S>
ExpertBankVar<S> Model<S>::deliver(Tape<S>& t, const ExpertBankVar<S>& source, const TextVar<S>& txt,
                                   const ForwardMode& mode) {
  return composition::delivery(t, source, txt.concat, delivery, mode);
}

template <class S>
ExpertBankVar<S> Model<S>::sweep(Tape<S>& t, const ExpertBankVar<S>& candidate, const Var<S>& text_concat) {
  return composition::sweep(t, candidate, text_concat, sweeps);
}

template <class S>
ExpertBankVar<S> Model<S>::compose_query(Tape<S>& t, const ExpertBankVar<S>& source, const TextVar<S>& txt,
                                         const ForwardMode& mode) {
  if (config_.composition == CompositionMode::kCurling) return deliver(t, source, txt, mode);
  ExpertBankVar<S> out;
  out.availability = Mask::Zero(source.batch(), source.size());
  out.availability.col(0).setOnes();
  out.experts.push_back(composition::sum_compose(t, source.experts[0], txt.concat, sum_baseline));
  for (Index i = 1; i < source.size(); ++i)
    out.experts.push_back(t.constant(Mat<S>::Zero(source.batch(), static_cast<Index>(config_.d_e))));
  return out;
}

template <class S>
Var<S> Model<S>::score(Tape<S>& t, const ExpertBankVar<S>& query, const ExpertBankVar<S>& candidate,
                       const TextVar<S>& txt) {
  if (config_.composition == CompositionMode::kSum) return ag::rowdot(query.experts[0], candidate.experts[0]);
  ExpertBankVar<S> swept = sweep(t, candidate, txt.concat);
  return objective::total_similarity(t, query, swept, txt.concat, mix);
}

template <class S>
Var<S> Model<S>::batch_similarity(Tape<S>& t, std::span<const ImageInput> sources,
                                  std::span<const ImageInput> targets, std::span<const data::TokenSequence> texts,
                                  const ForwardMode& mode) {
  const auto l = static_cast<Index>(sources.size());
  if (targets.size() != sources.size() || texts.size() != sources.size())
    throw ShapeError("batch_similarity: sources, targets and texts differ in length");
  ExpertBankVar<S> src = encode_images(t, sources);
  ExpertBankVar<S> tgt = encode_images(t, targets);
  TextVar<S> txt = encode_text(t, texts);
  ExpertBankVar<S> query = compose_query(t, src, txt, mode);
  if (config_.composition == CompositionMode::kSum)
    return ag::matmul(query.experts[0], ag::transpose(tgt.experts[0]));

  std::vector<Index> text_rows, cand_rows;
  for (Index j = 0; j < l; ++j)
    for (Index k = 0; k < l; ++k) {
      text_rows.push_back(j);
      cand_rows.push_back(k);
    }
  ExpertBankVar<S> swept = composition::sweep_pairs(t, tgt, txt.concat, cand_rows, text_rows, sweeps);
  ExpertBankVar<S> q_pairs = gather_bank(query, text_rows);
  Var<S> sims = objective::total_similarity(t, q_pairs, swept, ag::gather_rows(txt.concat, text_rows), mix);
  return ag::reshape(sims, l, l);
}

template <class S>
Var<S> Model<S>::batch_loss(Tape<S>& t, std::span<const ImageInput> sources, std::span<const ImageInput> targets,
                            std::span<const data::TokenSequence> texts, const objective::LossConfig& loss,
                            const ForwardMode& mode) {
  Var<S> sim = batch_similarity(t, sources, targets, texts, mode);
  if (config_.composition == CompositionMode::kSum) return objective::triplet_loss(sim, loss.margin);
  return objective::am_softmax_loss(sim, loss);
}

namespace {

template <class S>
TextVar<S> text_to_tape(Tape<S>& t, const TextEncoding<S>& e) {
  return {t.constant(e.global.transpose()), t.constant(e.temporal.transpose()), t.constant(e.local.transpose()),
          t.constant(e.concat.transpose())};
}

}  // namespace

template <class S>
ExpertBank<S> Model<S>::encode_image(const ImageInput& img) {
  Tape<S> t(false);
  return bank_row(encode_images(t, std::span<const ImageInput>(&img, 1)), 0);
}

template <class S>
TextEncoding<S> Model<S>::encode_text(const data::TokenSequence& seq) {
  Tape<S> t(false);
  return text_row(encode_text(t, std::span<const data::TokenSequence>(&seq, 1)), 0);
}

template <class S>
ExpertBank<S> Model<S>::deliver(const ExpertBank<S>& source, const TextEncoding<S>& txt) {
  Tape<S> t(false);
  ExpertBankVar<S> bank = bank_to_tape(t, std::vector<ExpertBank<S>>{source});
  return bank_row(compose_query(t, bank, text_to_tape(t, txt), ForwardMode::eval()), 0);
}

template <class S>
ExpertBank<S> Model<S>::sweep(const ExpertBank<S>& candidate, const TextEncoding<S>& txt) {
  Tape<S> t(false);
  ExpertBankVar<S> bank = bank_to_tape(t, std::vector<ExpertBank<S>>{candidate});
  return bank_row(sweep(t, bank, t.constant(txt.concat.transpose())), 0);
}

template <class S>
S Model<S>::total_similarity(const ExpertBank<S>& query, const ExpertBank<S>& swept, const TextEncoding<S>& txt) {
  Tape<S> t(false);
  ExpertBankVar<S> q = bank_to_tape(t, std::vector<ExpertBank<S>>{query});
  ExpertBankVar<S> c = bank_to_tape(t, std::vector<ExpertBank<S>>{swept});
  return objective::total_similarity(t, q, c, t.constant(txt.concat.transpose()), mix).value()(0, 0);
}

template <class S>
std::size_t Model<S>::load_word_vectors(const std::filesystem::path& path, const data::Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open word vectors: " + path.string());
  if (vocab.size() != config_.vocab_size)
    throw SchemaError("vocabulary size " + std::to_string(vocab.size()) + " != model vocab_size " +
                      std::to_string(config_.vocab_size));
  std::size_t loaded = 0;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::istringstream ls(line);
    std::string token;
    if (!(ls >> token)) continue;
    std::vector<double> v;
    double x = 0;
    while (ls >> x) v.push_back(x);
    if (number == 1 && v.size() == 1) continue;  // "count dim" header
    if (v.size() != config_.d_w)
      throw SchemaError(path.string() + ":" + std::to_string(number) + ": vector has " + std::to_string(v.size()) +
                        " components, expected d_w = " + std::to_string(config_.d_w));
    if (!vocab.contains(token)) continue;
    const int row = vocab.index(token);
    if (row == data::Vocab::kPad) continue;
    for (std::size_t c = 0; c < v.size(); ++c) embedding.value(row, static_cast<Index>(c)) = static_cast<S>(v[c]);
    ++loaded;
  }
  return loaded;
}

ImageInput to_image_input(const data::ImageRecord& record, const data::Vocab& vocab,
                          const std::vector<std::string>& attribute_categories) {
  ImageInput in;
  in.feature = record.backbone_feature;
  in.attribute_tokens = data::attribute_indices(record, vocab, attribute_categories);
  return in;
}

template class Model<float>;
template class Model<double>;

}  // namespace curling
