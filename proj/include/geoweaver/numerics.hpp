// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geoweaver/errors.hpp"

namespace geoweaver {

// Dense row-major matrix of doubles. Carrier for token matrices, bank layers
// and parameter tensors.
class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  void fill(double v);
  bool same_shape(const Tensor2D& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }
  bool all_finite() const;
  double max_abs() const;
  double squared_norm() const;

  friend bool operator==(const Tensor2D& a, const Tensor2D& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.values_ == b.values_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

double max_abs_diff(const Tensor2D& a, const Tensor2D& b);

// Fills `t` with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) draws, the usual default
// for dense layers and their biases.
void fill_fan_in_uniform(Tensor2D& t, std::size_t fan_in, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Vector primitives

constexpr double kLayerNormEps = 1e-5;

// gamma * (x - mean) / sqrt(popvar + eps) + beta, population variance.
std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gamma,
                               std::span<const double> beta, double eps = kLayerNormEps);

// Cached statistics of one layer_norm evaluation, enough for the backward pass.
struct LayerNormCache {
  std::vector<double> x_hat;
  double inv_std = 0.0;
};

void layer_norm_forward(std::span<const double> x, std::span<const double> gamma,
                        std::span<const double> beta, double eps, std::span<double> out,
                        LayerNormCache& cache);

// Cache-free variant: writes x_hat (same length as x), returns 1/sqrt(var + eps).
double layer_norm_forward(std::span<const double> x, std::span<const double> gamma, std::span<const double> beta,
                          double eps, std::span<double> out, std::span<double> x_hat);

// Accumulates into grad_gamma/grad_beta and writes grad_x (if non-empty).
void layer_norm_backward(std::span<const double> grad_out, std::span<const double> gamma,
                         std::span<const double> x_hat, double inv_std, std::span<double> grad_x,
                         std::span<double> grad_gamma, std::span<double> grad_beta);

void layer_norm_backward(std::span<const double> grad_out, std::span<const double> gamma,
                         const LayerNormCache& cache, std::span<double> grad_x,
                         std::span<double> grad_gamma, std::span<double> grad_beta);

// Numerically stable (max-subtracted) softmax.
std::vector<double> softmax(std::span<const double> logits);

// grad_logits = p * (grad_p - <grad_p, p>)
std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> grad_probs);

// Exact (erf-based) GELU: x * Phi(x).
double normal_cdf(double x);
double gelu(double x);
double gelu_derivative(double x);
// Same derivative when Phi(x) is already known from the forward pass.
double gelu_derivative(double x, double cdf);

// ---------------------------------------------------------------------------
// Matrix helpers (row-major, Eigen-backed)

// out = in * W^T + b  for in: n x k, W: m x k, b: 1 x m (b may be empty).
void linear_forward(const Tensor2D& in, const Tensor2D& weight, const Tensor2D* bias, Tensor2D& out);

// Given grad_out (n x m): grad_W += grad_out^T in, grad_b += colsum(grad_out),
// grad_in = grad_out W (skipped when grad_in == nullptr).
void linear_backward(const Tensor2D& in, const Tensor2D& weight, const Tensor2D& grad_out,
                     Tensor2D* grad_in, Tensor2D* grad_weight, Tensor2D* grad_bias);

// ---------------------------------------------------------------------------
// Parameters and optimization

struct Param {
  std::string name;
  Tensor2D value;
  Tensor2D grad;
  Tensor2D first_moment;
  Tensor2D second_moment;
  bool grad_initialized = false;
};

// Named parameters with gradient slots and Adam state. Iteration order is the
// insertion order, which keeps training deterministic.
class ParamStore {
 public:
  Param& add(const std::string& name, Tensor2D value);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  Tensor2D& value(const std::string& name) { return at(name).value; }
  const Tensor2D& value(const std::string& name) const { return at(name).value; }
  // Gradient slot for accumulation; marks the slot as initialized.
  Tensor2D& grad(const std::string& name);
  const Tensor2D& grad(const std::string& name) const { return at(name).grad; }

  void zero_grad();

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t step) { step_ = step; }

 private:
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
  std::uint64_t step_ = 0;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam step over every parameter. Gradients are left as is.
void adam_update(ParamStore& store, const AdamOptions& options);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckTarget {
  // Scalar loss at the store's current parameter values.
  std::function<double(const ParamStore&)> loss;
  // Writes analytic gradients into the store's gradient slots (after zeroing).
  std::function<void(ParamStore&)> backward;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double perturbation = 0.0;
  double tolerance = 0.0;
  bool pass = false;

  double max_rel_error() const;
};

constexpr double kGradCheckFloor = 1e-8;

// Central differences (L(p+h) - L(p-h)) / 2h per coordinate against the
// analytic gradient; relative error uses max(|a|, |n|, 1e-8) as denominator.
// When `only` is non-empty, parameters not listed are skipped.
GradCheckReport check_gradients(ParamStore& store, const GradCheckTarget& target, double h, double tol,
                                const std::vector<std::string>& only = {});

}  // namespace geoweaver
