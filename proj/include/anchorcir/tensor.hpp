#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace anchorcir {

// Dense row-major 2-D array of doubles. Vectors are 1×d rows.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row_vector(std::span<const double> values);
  static Tensor identity(std::size_t n);
  static Tensor scalar(double v) { return Tensor(1, 1, v); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::array<std::size_t, 2> shape() const noexcept { return {rows_, cols_}; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  // Value of a 1×1 tensor.
  double item() const;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  void fill(double v);
  bool all_finite() const noexcept;
  bool same_shape(const Tensor& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  // Exact (bitwise for finite values) equality of shape and contents.
  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

std::string shape_string(const Tensor& t);

// Kernels on plain tensors. The tape operations in autodiff.hpp are built on these.
Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ
Tensor matmul_bt(const Tensor& a, const Tensor& b);
// aᵀ · b
Tensor matmul_at(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& x);
Tensor mean_rows(const Tensor& x);
double max_abs_diff(const Tensor& a, const Tensor& b);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> v);
std::vector<double> l2_normalize(std::span<const double> v);
double cosine_sim(std::span<const double> a, std::span<const double> b);
// Row-wise cosine similarities of A (n×d) against B (m×d).
Tensor cosine_sim_matrix(const Tensor& a, const Tensor& b);
Tensor l2_normalize_rows(const Tensor& x);

}  // namespace anchorcir
