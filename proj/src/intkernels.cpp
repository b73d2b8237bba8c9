#include "seriex/intkernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "seriex/numeric.hpp"
#include "seriex/parallel.hpp"

namespace seriex {

IntGemmResult int_gemm(const Int32Matrix& w, const Int32Matrix& a) {
  require(w.cols == a.rows, ErrorKind::ShapeMismatch,
          "int_gemm: inner dimensions differ (" + std::to_string(w.cols) + " vs " + std::to_string(a.rows) + ")");
  // |w|,|a| <= 2^31 and inner <= 2^32 keeps the int64 sum exact; guard the
  // general case against what the lanes could actually hold.
  std::int64_t wmax = 0, amax = 0;
  for (auto v : w.data) wmax = std::max<std::int64_t>(wmax, std::abs(static_cast<std::int64_t>(v)));
  for (auto v : a.data) amax = std::max<std::int64_t>(amax, std::abs(static_cast<std::int64_t>(v)));
  const long double bound = static_cast<long double>(wmax) * static_cast<long double>(amax) * w.cols;
  require(bound < std::ldexp(1.0L, 63), ErrorKind::Overflow, "int_gemm: accumulator could overflow int64");

  IntGemmResult out{Int64Matrix(w.rows, a.cols, 0)};
  for (std::size_t r = 0; r < w.rows; ++r) {
    std::int64_t* dst = &out.acc(r, 0);
    for (std::size_t k = 0; k < w.cols; ++k) {
      const std::int64_t wv = w(r, k);
      if (wv == 0) continue;
      const std::int32_t* src = &a.data[k * a.cols];
      for (std::size_t c = 0; c < a.cols; ++c) dst[c] += wv * src[c];
    }
  }
  return out;
}

IntGemmResult int_gemm(const PackedIntMatrix& w, const PackedIntMatrix& a) {
  require(w.cols == a.rows, ErrorKind::ShapeMismatch,
          "int_gemm: inner dimensions differ (" + std::to_string(w.cols) + " vs " + std::to_string(a.rows) + ")");
  check_packed_bits(w.bits);
  check_packed_bits(a.bits);
  return int_gemm(w.to_matrix(), a.to_matrix());
}

Matrix ones_multiply(const Matrix& m, Side side, std::size_t extent, OpCounter* counter) {
  if (side == Side::Right) {
    const std::size_t width = extent ? extent : m.cols;
    Matrix out(m.rows, width);
    for (std::size_t r = 0; r < m.rows; ++r) {
      ExactSum s;
      for (std::size_t c = 0; c < m.cols; ++c) s.add(m(r, c));
      if (counter) counter->multiply_adds += m.cols;
      std::fill_n(&out.data[r * width], width, s.result());
    }
    return out;
  }
  const std::size_t height = extent ? extent : m.rows;
  std::vector<double> sums(m.cols);
  for (std::size_t c = 0; c < m.cols; ++c) {
    ExactSum s;
    for (std::size_t r = 0; r < m.rows; ++r) s.add(m(r, c));
    if (counter) counter->multiply_adds += m.rows;
    sums[c] = s.result();
  }
  Matrix out(height, m.cols);
  for (std::size_t r = 0; r < height; ++r) std::copy(sums.begin(), sums.end(), &out.data[r * m.cols]);
  return out;
}

Matrix ones_multiply(const IntGemmResult& m, Side side, std::size_t extent, OpCounter* counter) {
  Matrix f(m.acc.rows, m.acc.cols);
  for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = static_cast<double>(m.acc.data[i]);
  return ones_multiply(f, side, extent, counter);
}

Matrix sparse_correction_multiply(const SparseCorrection& s, const Matrix& other, Side side) {
  s.validate();
  require(!s.dense_shape.empty(), ErrorKind::ShapeMismatch, "sparse correction has no shape");
  const std::size_t srows = s.dense_shape[0];
  const std::size_t scols = srows == 0 ? 0 : element_count(s.dense_shape) / srows;
  if (side == Side::Left) {
    require(scols == other.rows, ErrorKind::ShapeMismatch, "sparse_correction_multiply: S * other shape mismatch");
    Matrix out(srows, other.cols);
    for (std::size_t n = 0; n < s.nnz(); ++n) {
      const std::size_t r = s.indices[n] / scols, k = s.indices[n] % scols;
      const double v = s.values[n];
      for (std::size_t c = 0; c < other.cols; ++c) out(r, c) += v * other(k, c);
    }
    return out;
  }
  require(other.cols == srows, ErrorKind::ShapeMismatch, "sparse_correction_multiply: other * S shape mismatch");
  Matrix out(other.rows, scols);
  for (std::size_t n = 0; n < s.nnz(); ++n) {
    const std::size_t k = s.indices[n] / scols, c = s.indices[n] % scols;
    const double v = s.values[n];
    for (std::size_t r = 0; r < other.rows; ++r) out(r, c) += other(r, k) * v;
  }
  return out;
}

// ---------------------------------------------------------------------------

LatticeAccumulator::LatticeAccumulator(std::size_t rows, std::size_t cols, std::vector<double> row_scale,
                                       std::vector<double> col_scale)
    : acc_(rows, cols, 0), row_scale_(std::move(row_scale)), col_scale_(std::move(col_scale)) {
  require(row_scale_.size() == rows && col_scale_.size() == cols, ErrorKind::ShapeMismatch,
          "lattice accumulator: scale vectors do not match extents");
}

void LatticeAccumulator::add(const Int64Matrix& partial, int shift) {
  require(partial.rows == acc_.rows && partial.cols == acc_.cols, ErrorKind::ShapeMismatch,
          "lattice accumulator: partial has wrong extents");
  require(shift >= 0 && shift < 63, ErrorKind::Overflow, "lattice accumulator: shift out of range");
  for (std::size_t i = 0; i < acc_.data.size(); ++i) {
    std::int64_t shifted = 0, sum = 0;
    if (__builtin_mul_overflow(partial.data[i], std::int64_t{1} << shift, &shifted) ||
        __builtin_add_overflow(acc_.data[i], shifted, &sum)) {
      fail(ErrorKind::Overflow, "lattice accumulator overflowed int64");
    }
    acc_.data[i] = sum;
  }
}

void LatticeAccumulator::merge(const LatticeAccumulator& other) {
  require(other.row_scale_ == row_scale_ && other.col_scale_ == col_scale_, ErrorKind::InvalidArgument,
          "lattice accumulator: merging accumulators on different lattices");
  add(other.acc_, 0);
}

Matrix LatticeAccumulator::to_float() const {
  Matrix out(acc_.rows, acc_.cols);
  for (std::size_t r = 0; r < acc_.rows; ++r)
    for (std::size_t c = 0; c < acc_.cols; ++c)
      out(r, c) = (row_scale_[r] * col_scale_[c]) * static_cast<double>(acc_(r, c));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct MatrixView {
  std::size_t rows = 0, cols = 0;
};

MatrixView matrix_view(const TensorExpansion& e) {
  require(!e.source_shape.empty(), ErrorKind::ShapeMismatch, "expansion of a scalar cannot be multiplied");
  const std::size_t rows = e.source_shape[0];
  return {rows, rows == 0 ? 0 : e.size() / rows};
}

/// Per-row (weights) or per-column (activations) value of a per-channel quantity.
std::vector<double> spread(const std::vector<double>& per_channel, std::size_t extent) {
  if (per_channel.size() == extent) return per_channel;
  return std::vector<double>(extent, per_channel.at(0));
}

void check_weight_layout(const TensorExpansion& we) {
  if (we.channels > 1)
    require(we.scheme.granularity.axis == 0, ErrorKind::Unsupported,
            "expanded_matmul: per-channel weights must use axis 0");
}

void check_activation_layout(const TensorExpansion& ae) {
  if (ae.channels > 1)
    require(ae.scheme.granularity.axis == 1 && ae.source_shape.size() == 2, ErrorKind::Unsupported,
            "expanded_matmul: per-channel activations must be rank 2 with axis 1");
}

Int32Matrix digit_matrix(const TensorExpansion& e, std::size_t term) {
  const auto v = matrix_view(e);
  return Int32Matrix(v.rows, v.cols, e.terms.at(term).digits);
}

Matrix to_double(const Int32Matrix& m) {
  Matrix out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] = m.data[i];
  return out;
}

/// Float matrix of weight slot i (rows x inner).
Matrix weight_component(const TensorExpansion& we, int slot) {
  const auto v = matrix_view(we);
  Matrix out(v.rows, v.cols);
  if (slot == -1) return Matrix(v.rows, v.cols, we.saturation->dense());
  for (std::size_t r = 0; r < v.rows; ++r) {
    const std::size_t ch = we.channels > 1 ? r : 0;
    for (std::size_t c = 0; c < v.cols; ++c) {
      out(r, c) = slot == 0 ? we.bias[ch]
                            : we.terms[slot - 1].scales[ch] * we.terms[slot - 1].digits[r * v.cols + c];
    }
  }
  return out;
}

/// Float matrix of activation slot j (inner x cols).
Matrix activation_component(const TensorExpansion& ae, int slot) {
  const auto v = matrix_view(ae);
  if (slot == -1) return Matrix(v.rows, v.cols, ae.saturation->dense());
  Matrix out(v.rows, v.cols);
  for (std::size_t r = 0; r < v.rows; ++r) {
    for (std::size_t c = 0; c < v.cols; ++c) {
      const std::size_t ch = ae.channels > 1 ? c : 0;
      out(r, c) = slot == 0 ? ae.bias[ch]
                            : ae.terms[slot - 1].scales[ch] * ae.terms[slot - 1].digits[r * v.cols + c];
    }
  }
  return out;
}

PairOutput evaluate_pair(const TensorExpansion& we, const TensorExpansion& ae, int i, int j, std::size_t rows,
                         std::size_t inner, std::size_t cols) {
  PairOutput p;
  p.weight_slot = i;
  p.act_slot = j;
  const auto k = static_cast<int>(we.term_count());
  const auto t = static_cast<int>(ae.term_count());
  if (i >= 1 && j >= 1) {
    p.on_lattice = true;
    p.product = int_gemm(digit_matrix(we, i - 1), digit_matrix(ae, j - 1)).acc;
    p.shift = we.scheme.bits * (k - i) + ae.scheme.bits * (t - j);
    return p;
  }

  p.on_lattice = false;
  const auto wb = spread(we.bias, rows);
  const auto ab = spread(ae.bias, cols);
  if (i == 0 && j == 0) {
    p.value = Matrix(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) p.value(r, c) = wb[r] * ab[c] * static_cast<double>(inner);
  } else if (i == 0) {
    // bias_W * ones * A_j: column sums of the activation component, broadcast down
    Matrix comp = j == -1 ? activation_component(ae, -1) : to_double(digit_matrix(ae, j - 1));
    p.value = ones_multiply(comp, Side::Left, rows);
    const auto as = j == -1 ? std::vector<double>(cols, 1.0) : spread(ae.terms[j - 1].scales, cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) p.value(r, c) *= wb[r] * as[c];
  } else if (j == 0) {
    // W_i * bias_A * ones: row sums of the weight component, broadcast across
    Matrix comp = i == -1 ? weight_component(we, -1) : to_double(digit_matrix(we, i - 1));
    p.value = ones_multiply(comp, Side::Right, cols);
    const auto ws = i == -1 ? std::vector<double>(rows, 1.0) : spread(we.terms[i - 1].scales, rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) p.value(r, c) *= ws[r] * ab[c];
  } else if (i == -1) {
    p.value = sparse_correction_multiply(*we.saturation, activation_component(ae, j), Side::Left);
  } else {
    p.value = sparse_correction_multiply(*ae.saturation, weight_component(we, i), Side::Right);
  }
  return p;
}

}  // namespace

std::vector<int> weight_slots(const TensorExpansion& we, const GridMask& mask) {
  std::vector<int> s;
  if (we.saturation && mask.weight_saturation) s.push_back(-1);
  if (we.nsy_present && mask.weight_bias) s.push_back(0);
  for (std::size_t i = 1; i <= we.term_count(); ++i) s.push_back(static_cast<int>(i));
  return s;
}

std::vector<int> activation_slots(const TensorExpansion& ae, const GridMask& mask) {
  std::vector<int> s;
  if (ae.saturation && mask.act_saturation) s.push_back(-1);
  if (ae.nsy_present && mask.act_bias) s.push_back(0);
  for (std::size_t j = 1; j <= ae.term_count(); ++j) s.push_back(static_cast<int>(j));
  return s;
}

std::vector<std::pair<int, int>> active_pairs(const TensorExpansion& we, const TensorExpansion& ae,
                                              const GridMask& mask) {
  std::vector<std::pair<int, int>> pairs;
  for (int i : weight_slots(we, mask))
    for (int j : activation_slots(ae, mask)) pairs.emplace_back(i, j);
  return pairs;
}

namespace {

/// log2 of the worst-case |digit product sum| of one pair before shifting.
long double pair_bound(const TensorExpansion& we, const TensorExpansion& ae, std::size_t inner) {
  return std::ldexp(static_cast<long double>(inner), (we.scheme.bits - 1) + (ae.scheme.bits - 1));
}

}  // namespace

void check_lattice_overflow(const TensorExpansion& we, const TensorExpansion& ae, std::size_t inner) {
  if (pair_bound(we, ae, inner) >= std::ldexp(1.0L, 63)) {
    fail(ErrorKind::Overflow, "lattice overflow guard: int" + std::to_string(we.scheme.bits) + " x int" +
                                  std::to_string(ae.scheme.bits) + " digits with inner dimension " +
                                  std::to_string(inner) + " exceed int64");
  }
}

void assign_lattice_groups(PairGrid& grid, long double bound) {
  std::vector<std::size_t> order;
  for (std::size_t p = 0; p < grid.pairs.size(); ++p)
    if (grid.pairs[p].on_lattice) order.push_back(p);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return grid.pairs[a].shift < grid.pairs[b].shift; });
  grid.group_base.clear();
  long double total = 0.0L;
  for (std::size_t p : order) {
    auto& pair = grid.pairs[p];
    if (grid.group_base.empty() ||
        total + std::ldexp(bound, pair.shift - grid.group_base.back()) >= std::ldexp(1.0L, 63)) {
      grid.group_base.push_back(pair.shift);
      total = 0.0L;
    }
    pair.shift -= grid.group_base.back();
    pair.group = grid.group_base.size() - 1;
    total += std::ldexp(bound, pair.shift);
  }
}

PairGrid evaluate_pair_grid(const TensorExpansion& we, const TensorExpansion& ae, const GridMask& mask) {
  check_weight_layout(we);
  check_activation_layout(ae);
  const auto wv = matrix_view(we);
  const auto av = matrix_view(ae);
  require(wv.cols == av.rows, ErrorKind::ShapeMismatch,
          "expanded_matmul: inner dimensions differ (" + std::to_string(wv.cols) + " vs " + std::to_string(av.rows) +
              ")");
  check_lattice_overflow(we, ae, wv.cols);

  PairGrid grid;
  grid.rows = wv.rows;
  grid.cols = av.cols;
  grid.row_scale = we.terms.empty() ? std::vector<double>(wv.rows, 0.0) : spread(we.terms.back().scales, wv.rows);
  grid.col_scale = ae.terms.empty() ? std::vector<double>(av.cols, 0.0) : spread(ae.terms.back().scales, av.cols);

  const auto pairs = active_pairs(we, ae, mask);
  grid.pairs.resize(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t p) {
    grid.pairs[p] = evaluate_pair(we, ae, pairs[p].first, pairs[p].second, wv.rows, wv.cols, av.cols);
  });
  assign_lattice_groups(grid, pair_bound(we, ae, wv.cols));
  return grid;
}

namespace {

LatticeAccumulator tree_merge(std::vector<LatticeAccumulator> level) {
  while (level.size() > 1) {
    std::vector<LatticeAccumulator> next((level.size() + 1) / 2);
    parallel_for(next.size(), [&](std::size_t i) {
      next[i] = std::move(level[2 * i]);
      if (2 * i + 1 < level.size()) next[i].merge(level[2 * i + 1]);
    });
    level = std::move(next);
  }
  return std::move(level.front());
}

}  // namespace

Matrix reduce_pair_grid(const PairGrid& grid, ReducePlan plan) {
  const std::size_t groups = std::max<std::size_t>(grid.group_base.size(), 1);
  std::vector<LatticeAccumulator> lattices;
  std::vector<std::vector<LatticeAccumulator>> leaves(groups);
  for (std::size_t g = 0; g < groups; ++g) lattices.emplace_back(grid.rows, grid.cols, grid.row_scale, grid.col_scale);
  std::vector<const Matrix*> floats;
  for (const auto& p : grid.pairs) {
    require(!p.on_lattice || p.group < groups, ErrorKind::InvalidArgument, "pair grid: lattice group out of range");
    if (!p.on_lattice) {
      floats.push_back(&p.value);
    } else if (plan == ReducePlan::Flat) {
      lattices[p.group].add(p.product, p.shift);
    } else {
      leaves[p.group].emplace_back(grid.rows, grid.cols, grid.row_scale, grid.col_scale);
      leaves[p.group].back().add(p.product, p.shift);
    }
  }
  for (std::size_t g = 0; g < groups; ++g)
    if (!leaves[g].empty()) lattices[g] = tree_merge(std::move(leaves[g]));

  std::vector<Matrix> parts;
  for (std::size_t g = 0; g < groups; ++g) {
    parts.push_back(lattices[g].to_float());
    const int base = grid.group_base.empty() ? 0 : grid.group_base[g];
    if (base != 0)
      for (double& v : parts.back().data) v = std::ldexp(v, base);
  }
  if (parts.size() == 1 && floats.empty()) return std::move(parts.front());
  Matrix out(grid.rows, grid.cols);
  ExactSum s;
  for (std::size_t e = 0; e < out.data.size(); ++e) {
    s.clear();
    for (const auto& part : parts) s.add(part.data[e]);
    for (const Matrix* f : floats) s.add(f->data[e]);
    out.data[e] = s.result();
  }
  return out;
}

ExpandedMatmulResult expanded_matmul(const TensorExpansion& we, const TensorExpansion& ae, const GridMask& mask,
                                     ReducePlan plan) {
  const auto grid = evaluate_pair_grid(we, ae, mask);
  return {reduce_pair_grid(grid, plan), grid.pairs.size()};
}

}  // namespace seriex
