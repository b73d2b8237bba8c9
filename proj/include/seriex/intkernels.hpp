#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "seriex/packed.hpp"
#include "seriex/quantcore.hpp"
#include "seriex/tensor.hpp"

namespace seriex {

struct IntGemmResult {
  Int64Matrix acc;
};

/// Exact integer product of two packed digit matrices (bit widths may differ).
IntGemmResult int_gemm(const PackedIntMatrix& w, const PackedIntMatrix& a);
/// Same kernel on already-widened int32 lanes.
IntGemmResult int_gemm(const Int32Matrix& w, const Int32Matrix& a);

enum class Side { Left, Right };

struct OpCounter {
  std::uint64_t multiply_adds = 0;
};

/// Product with an all-ones matrix without materializing it.
///   Right: m (r x n) * ones(n x extent)  -> every column is the row-sum vector
///   Left:  ones(extent x r) * m (r x c)  -> every row is the column-sum vector
/// extent == 0 means square (n for Right, r for Left).
Matrix ones_multiply(const Matrix& m, Side side, std::size_t extent = 0, OpCounter* counter = nullptr);
Matrix ones_multiply(const IntGemmResult& m, Side side, std::size_t extent = 0, OpCounter* counter = nullptr);

/// Left:  S * other, S viewed as (dense_shape[0] x rest)
/// Right: other * S
/// Cost is nnz(S) * other.cols (Left) or nnz(S) * other.rows (Right).
Matrix sparse_correction_multiply(const SparseCorrection& s, const Matrix& other, Side side);

/// int64 accumulator on the finest scale lattice of an expanded product. A
/// partial of term pair (i, j) lands shifted by X_W (k - i) + X_A (t - j), so
/// integer addition merges partials in any order with identical results.
class LatticeAccumulator {
 public:
  LatticeAccumulator() = default;
  LatticeAccumulator(std::size_t rows, std::size_t cols, std::vector<double> row_scale, std::vector<double> col_scale);

  void add(const Int64Matrix& partial, int shift);
  void merge(const LatticeAccumulator& other);

  const Int64Matrix& acc() const noexcept { return acc_; }
  const std::vector<double>& row_scale() const noexcept { return row_scale_; }
  const std::vector<double>& col_scale() const noexcept { return col_scale_; }
  /// base_scale(r, c) * acc(r, c), with base_scale = row_scale[r] * col_scale[c].
  Matrix to_float() const;

  bool operator==(const LatticeAccumulator&) const = default;

 private:
  Int64Matrix acc_;
  std::vector<double> row_scale_;
  std::vector<double> col_scale_;
};

/// Which optional rows/columns of the term-pair grid are evaluated. Slot -1
/// is the saturation correction, slot 0 the bias (all-ones) term.
struct GridMask {
  bool weight_saturation = true;
  bool weight_bias = true;
  bool act_bias = true;
  bool act_saturation = false;

  bool operator==(const GridMask&) const = default;
};

/// One cell of the grid. Digit x digit pairs stay on the lattice; pairs with a
/// bias or saturation slot are float matrices.
struct PairOutput {
  int weight_slot = 1;
  int act_slot = 1;
  bool on_lattice = true;
  Int64Matrix product;
  int shift = 0;          // relative to the base of its lattice group
  std::size_t group = 0;  // lattice group
  Matrix value;
};

struct PairGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> row_scale;  // finest weight scale per output row
  std::vector<double> col_scale;  // finest activation scale per output column
  std::vector<PairOutput> pairs;
  /// Absolute shift of every lattice group's base.
  std::vector<int> group_base;
};

/// Slots present in an expansion after masking, in grid order (-1, 0, 1..n).
std::vector<int> weight_slots(const TensorExpansion& we, const GridMask& mask);
std::vector<int> activation_slots(const TensorExpansion& ae, const GridMask& mask);
std::vector<std::pair<int, int>> active_pairs(const TensorExpansion& we, const TensorExpansion& ae,
                                              const GridMask& mask);

/// Worst-case |digit product| of a single pair, checked against int64 before
/// any arithmetic. Throws ErrorKind::Overflow.
void check_lattice_overflow(const TensorExpansion& we, const TensorExpansion& ae, std::size_t inner);

/// Splits the lattice pairs (given absolute shifts) into groups whose
/// worst-case sums fit int64: pairs are taken finest first and a new group
/// starts whenever the next one could overflow. Normally a single group.
/// `bound` is the worst-case |product| of one pair before shifting.
void assign_lattice_groups(PairGrid& grid, long double bound);

/// Evaluates every active pair (in parallel, one task per pair).
PairGrid evaluate_pair_grid(const TensorExpansion& we, const TensorExpansion& ae, const GridMask& mask = {});
enum class ReducePlan { Flat, Tree };

/// Lattice pairs summed as integers per group (one pass, or a pairwise tree),
/// each group converted once, then everything added with correctly rounded
/// summation. Both
/// plans give bit-identical results.
Matrix reduce_pair_grid(const PairGrid& grid, ReducePlan plan = ReducePlan::Flat);

struct ExpandedMatmulResult {
  Matrix value;
  std::size_t pair_count = 0;
};

/// W * A from the two series, W viewed as (shape[0] x rest) and A as
/// (shape[0] x rest). Per-channel weights must use axis 0; per-channel
/// activations axis 1.
ExpandedMatmulResult expanded_matmul(const TensorExpansion& we, const TensorExpansion& ae, const GridMask& mask = {},
                                     ReducePlan plan = ReducePlan::Flat);

}  // namespace seriex
