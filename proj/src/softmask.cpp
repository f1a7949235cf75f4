#include "fltlm/softmask.hpp"

namespace fltlm {

namespace {

void check_intensity(double v, size_t i) {
  if (v > 0.0) {
    throw std::invalid_argument("soft-mask intensity " + std::to_string(v) + " of document " + std::to_string(i + 1) +
                                " is positive");
  }
}

}  // namespace

DocumentBias DocumentBias::from_input(const SegmentedInput& input, std::span<const float> intensities) {
  if (intensities.size() != input.document_count()) {
    throw std::invalid_argument("DocumentBias: " + std::to_string(intensities.size()) + " intensities for " +
                                std::to_string(input.document_count()) + " documents");
  }
  DocumentBias bias;
  for (size_t i = 0; i < intensities.size(); ++i) {
    check_intensity(intensities[i], i);
    bias.columns.push_back(input.masked_columns(i));
    bias.first_row.push_back(input.doc_spans[i].end);
    bias.intensity.push_back(intensities[i]);
  }
  return bias;
}

void DocumentBias::add_to_row(Index row, std::span<float> scores) const {
  for (size_t i = 0; i < intensity.size(); ++i) {
    if (row < first_row[i]) continue;
    const Index end = std::min<Index>(columns[i].end, static_cast<Index>(scores.size()));
    for (Index c = columns[i].begin; c < end; ++c) scores[static_cast<size_t>(c)] += intensity[i];
  }
}

Matrix DocumentBias::dense(Index length) const {
  Matrix out = Matrix::Zero(length, length);
  for (Index r = 0; r < length; ++r) add_to_row(r, {out.row(r).data(), static_cast<size_t>(length)});
  return out;
}

template <typename Scalar>
Var<Scalar> build_bias(const SegmentedInput& input, Var<Scalar> intensities, Index length) {
  const size_t n = input.document_count();
  if (intensities.rows() != static_cast<Index>(n) || intensities.cols() != 1) {
    throw ShapeError("build_bias: intensities must be " + shape_string(static_cast<Index>(n), 1));
  }
  const auto& iv = intensities.value();
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(length, length);
  std::vector<Span> cols;
  std::vector<Index> rows;
  for (size_t i = 0; i < n; ++i) {
    check_intensity(static_cast<double>(iv(static_cast<Index>(i), 0)), i);
    cols.push_back(input.masked_columns(i));
    rows.push_back(input.doc_spans[i].end);
    const Index c0 = cols.back().begin;
    const Index c1 = std::min(cols.back().end, length);
    for (Index r = rows.back(); r < length; ++r) {
      for (Index c = c0; c < c1; ++c) out(r, c) += iv(static_cast<Index>(i), 0);
    }
  }
  const int ii = intensities.id();
  return intensities.graph().record(
      std::move(out), {ii}, [ii, cols = std::move(cols), rows = std::move(rows)](Graph<Scalar>& g, const MatrixX<Scalar>& dout) {
        MatrixX<Scalar> d = MatrixX<Scalar>::Zero(static_cast<Index>(cols.size()), 1);
        const Index length = dout.rows();
        for (size_t i = 0; i < cols.size(); ++i) {
          const Index c1 = std::min(cols[i].end, length);
          if (rows[i] >= length || cols[i].begin >= c1) continue;
          d(static_cast<Index>(i), 0) = dout.block(rows[i], cols[i].begin, length - rows[i], c1 - cols[i].begin).sum();
        }
        g.accumulate(ii, d);
      });
}

template Var<float> build_bias(const SegmentedInput&, Var<float>, Index);
template Var<double> build_bias(const SegmentedInput&, Var<double>, Index);

}  // namespace fltlm
