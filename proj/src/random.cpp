#include "anchorcir/random.hpp"

#include <cmath>

#include "anchorcir/errors.hpp"

namespace anchorcir {

std::vector<double> Rng::unit_vector(std::size_t dim) {
  std::vector<double> v(dim);
  double n = 0.0;
  while (n < 1e-12) {
    for (double& x : v) x = normal();
    n = norm(v);
  }
  for (double& x : v) x /= n;
  return v;
}

Tensor orthonormal_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  if (rows > cols) {
    throw DimensionError("orthonormal_rows: cannot fit " + std::to_string(rows) +
                         " orthonormal rows in dimension " + std::to_string(cols));
  }
  Tensor q(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (;;) {
      std::vector<double> v(cols);
      for (double& x : v) x = rng.normal();
      // Two Gram-Schmidt passes for numerical orthogonality.
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < i; ++j) {
          const double d = dot(v, q.row(j));
          for (std::size_t k = 0; k < cols; ++k) v[k] -= d * q(j, k);
        }
      }
      const double n = norm(v);
      if (n < 1e-8) continue;
      for (std::size_t k = 0; k < cols; ++k) q(i, k) = v[k] / n;
      break;
    }
  }
  return q;
}

}  // namespace anchorcir
