#pragma once

#include <cstdint>
#include <vector>

#include "curling/layers.hpp"

namespace curling {

// availability(b, i) != 0 when expert i exists for batch row b.
using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
Vec<S> mask_column(const Mask& m, Index expert) {
  return m.col(expert).cast<S>();
}

template <class S>
Mat<S> mask_matrix(const Mask& m) {
  return m.cast<S>();
}

// A batch of expert banks living on a tape: experts[i] is B x d_e.
template <class S>
struct ExpertBankVar {
  std::vector<Var<S>> experts;
  Mask availability;

  Index batch() const { return availability.rows(); }
  Index size() const { return static_cast<Index>(experts.size()); }
};

template <class S>
struct TextVar {
  Var<S> global;
  Var<S> temporal;
  Var<S> local;
  Var<S> concat;
};

// Value-level expert bank of a single image.
template <class S>
struct ExpertBank {
  std::vector<Vec<S>> experts;
  std::vector<bool> availability;
};

template <class S>
struct TextEncoding {
  Vec<S> global;
  Vec<S> temporal;
  Vec<S> local;
  Vec<S> concat;
};

template <class S>
ExpertBankVar<S> bank_to_tape(Tape<S>& t, const std::vector<ExpertBank<S>>& banks) {
  ExpertBankVar<S> out;
  const Index b = static_cast<Index>(banks.size());
  const Index n = static_cast<Index>(banks.front().experts.size());
  out.availability.resize(b, n);
  for (Index i = 0; i < n; ++i) {
    Mat<S> m(b, banks.front().experts[static_cast<std::size_t>(i)].size());
    for (Index r = 0; r < b; ++r) {
      const auto& bank = banks[static_cast<std::size_t>(r)];
      m.row(r) = bank.experts[static_cast<std::size_t>(i)].transpose();
      out.availability(r, i) = bank.availability[static_cast<std::size_t>(i)] ? 1 : 0;
    }
    out.experts.push_back(t.constant(std::move(m)));
  }
  return out;
}

template <class S>
ExpertBank<S> bank_row(const ExpertBankVar<S>& bank, Index row) {
  ExpertBank<S> out;
  for (Index i = 0; i < bank.size(); ++i) {
    out.experts.push_back(bank.experts[static_cast<std::size_t>(i)].value().row(row).transpose());
    out.availability.push_back(bank.availability(row, i) != 0);
  }
  return out;
}

template <class S>
TextEncoding<S> text_row(const TextVar<S>& text, Index row) {
  return {text.global.value().row(row).transpose(), text.temporal.value().row(row).transpose(),
          text.local.value().row(row).transpose(), text.concat.value().row(row).transpose()};
}

template <class S>
ExpertBankVar<S> gather_bank(const ExpertBankVar<S>& bank, const std::vector<Index>& rows) {
  ExpertBankVar<S> out;
  out.availability.resize(static_cast<Index>(rows.size()), bank.size());
  for (std::size_t r = 0; r < rows.size(); ++r) out.availability.row(static_cast<Index>(r)) = bank.availability.row(rows[r]);
  for (const auto& e : bank.experts) out.experts.push_back(ag::gather_rows(e, rows));
  return out;
}

}  // namespace curling
