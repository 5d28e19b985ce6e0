#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "curling/composition.hpp"
#include "curling/data_model.hpp"
#include "curling/encoders.hpp"
#include "curling/expert_bank.hpp"
#include "curling/model_config.hpp"
#include "curling/objective.hpp"

namespace curling {

using encoders::ImageInput;

// The full retrieval model: encoders, composition filters and the text
// conditioned expert mixture. Owns every parameter; the registry exposes them
// by canonical dotted name.
template <class S>
class Model {
 public:
  explicit Model(const ModelConfig& config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  ParamRegistry<S>& registry() { return registry_; }
  const ParamRegistry<S>& registry() const { return registry_; }
  std::size_t parameter_count() const;

  // Batched forward passes on a tape.
  ExpertBankVar<S> encode_images(Tape<S>& t, std::span<const ImageInput> images);
  TextVar<S> encode_text(Tape<S>& t, std::span<const data::TokenSequence> seqs);
  ExpertBankVar<S> deliver(Tape<S>& t, const ExpertBankVar<S>& source, const TextVar<S>& text,
                           const ForwardMode& mode);
  ExpertBankVar<S> sweep(Tape<S>& t, const ExpertBankVar<S>& candidate, const Var<S>& text_concat);

  // Row-aligned query/candidate scores (B x 1). In curling mode `query` is a
  // delivered bank and the candidate bank is swept under `text` here; in sum
  // mode only the base experts are used.
  Var<S> score(Tape<S>& t, const ExpertBankVar<S>& query, const ExpertBankVar<S>& candidate, const TextVar<S>& text);

  // The composed query for a batch of sources.
  ExpertBankVar<S> compose_query(Tape<S>& t, const ExpertBankVar<S>& source, const TextVar<S>& text,
                                 const ForwardMode& mode);

  // L x L similarity between the composed queries and every in-batch target,
  // each target swept under the query's own text.
  Var<S> batch_similarity(Tape<S>& t, std::span<const ImageInput> sources, std::span<const ImageInput> targets,
                          std::span<const data::TokenSequence> texts, const ForwardMode& mode);

  Var<S> batch_loss(Tape<S>& t, std::span<const ImageInput> sources, std::span<const ImageInput> targets,
                    std::span<const data::TokenSequence> texts, const objective::LossConfig& loss,
                    const ForwardMode& mode);

  // Evaluation-mode helpers on single items.
  ExpertBank<S> encode_image(const ImageInput& image);
  TextEncoding<S> encode_text(const data::TokenSequence& seq);
  ExpertBank<S> deliver(const ExpertBank<S>& source, const TextEncoding<S>& text);
  ExpertBank<S> sweep(const ExpertBank<S>& candidate, const TextEncoding<S>& text);
  S total_similarity(const ExpertBank<S>& query, const ExpertBank<S>& swept_candidate, const TextEncoding<S>& text);

  // Replaces embedding rows for tokens found in a "token v1 ... v_dw" file.
  std::size_t load_word_vectors(const std::filesystem::path& path, const data::Vocab& vocab);

  Parameter<S> embedding;  // vocab x d_w, row 0 (PAD) fixed at zero
  encoders::ImageEncoderParams<S> image;
  encoders::TextEncoderParams<S> text;
  std::vector<composition::DeliveryParams<S>> delivery;
  std::vector<composition::SweepParams<S>> sweeps;
  Linear<S> mix;  // d_text -> n_experts
  composition::SumBaselineParams<S> sum_baseline;

 private:
  ModelConfig config_;
  ParamRegistry<S> registry_;
};

// Turns a dataset record into model input using the vocabulary and the
// persisted attribute-category order.
ImageInput to_image_input(const data::ImageRecord& record, const data::Vocab& vocab,
                          const std::vector<std::string>& attribute_categories);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace curling
