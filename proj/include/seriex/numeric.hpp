#pragma once

#include <span>
#include <vector>

namespace seriex {

/// Correctly rounded floating-point summation (Shewchuk partials, the same
/// scheme as Python's math.fsum). The result is independent of the order in
/// which values are added, which makes float reductions commutative and
/// associative bit-for-bit.
class ExactSum {
 public:
  void add(double x);
  /// Adds a*b exactly (the product's rounding error is carried as a partial).
  void add_product(double a, double b);
  double result() const;
  void clear() { partials_.clear(); }

 private:
  std::vector<double> partials_;
};

double exact_sum(std::span<const double> values);
double exact_dot(std::span<const double> a, std::span<const double> b);

/// Throws NonFinite if any element is NaN or infinite.
void check_finite(std::span<const double> values, const char* what);

}  // namespace seriex
