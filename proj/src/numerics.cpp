// SPDX-License-Identifier: Apache-2.0
#include "geoweaver/numerics.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace geoweaver {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

ConstMap as_matrix(const Tensor2D& t) {
  return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

MutMap as_matrix(Tensor2D& t) {
  return MutMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " +
                         std::to_string(b) + ")");
  }
}

}  // namespace

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows_ * cols_) {
    throw DimensionError("Tensor2D: " + std::to_string(values_.size()) + " values for shape " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

void Tensor2D::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool Tensor2D::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor2D::max_abs() const {
  double m = 0.0;
  for (double v : values_) m = std::max(m, std::abs(v));
  return m;
}

double Tensor2D::squared_norm() const {
  double s = 0.0;
  for (double v : values_) s += v * v;
  return s;
}

double max_abs_diff(const Tensor2D& a, const Tensor2D& b) {
  if (!a.same_shape(b)) throw DimensionError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

// ---------------------------------------------------------------------------

double layer_norm_forward(std::span<const double> x, std::span<const double> gamma, std::span<const double> beta,
                          double eps, std::span<double> out, std::span<double> x_hat) {
  const std::size_t n = x.size();
  if (n == 0) throw DimensionError("layer_norm: empty input");
  require_same_length(n, gamma.size(), "layer_norm gamma");
  require_same_length(n, beta.size(), "layer_norm beta");
  require_same_length(n, out.size(), "layer_norm output");
  require_same_length(n, x_hat.size(), "layer_norm cache");
  if (eps < 0.0) throw DimensionError("layer_norm: eps must be non-negative");

  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);

  // Constant input with eps == 0 has no defined scale; treat x_hat as zero so
  // the output collapses onto beta.
  const double denom = var + eps;
  const double inv_std = denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    x_hat[i] = (x[i] - mean) * inv_std;
    out[i] = gamma[i] * x_hat[i] + beta[i];
  }
  return inv_std;
}

void layer_norm_forward(std::span<const double> x, std::span<const double> gamma,
                        std::span<const double> beta, double eps, std::span<double> out,
                        LayerNormCache& cache) {
  cache.x_hat.resize(x.size());
  cache.inv_std = layer_norm_forward(x, gamma, beta, eps, out, cache.x_hat);
}

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gamma,
                               std::span<const double> beta, double eps) {
  std::vector<double> out(x.size());
  LayerNormCache cache;
  layer_norm_forward(x, gamma, beta, eps, out, cache);
  return out;
}

void layer_norm_backward(std::span<const double> grad_out, std::span<const double> gamma,
                         std::span<const double> x_hat, double inv_std, std::span<double> grad_x,
                         std::span<double> grad_gamma, std::span<double> grad_beta) {
  const std::size_t n = x_hat.size();
  require_same_length(n, grad_out.size(), "layer_norm_backward");
  double sum_g = 0.0;
  double sum_g_xhat = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad_out[i] * gamma[i];
    sum_g += g;
    sum_g_xhat += g * x_hat[i];
    if (!grad_gamma.empty()) grad_gamma[i] += grad_out[i] * x_hat[i];
    if (!grad_beta.empty()) grad_beta[i] += grad_out[i];
  }
  if (grad_x.empty()) return;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad_out[i] * gamma[i];
    grad_x[i] = inv_std * (g - inv_n * sum_g - x_hat[i] * inv_n * sum_g_xhat);
  }
}

void layer_norm_backward(std::span<const double> grad_out, std::span<const double> gamma,
                         const LayerNormCache& cache, std::span<double> grad_x,
                         std::span<double> grad_gamma, std::span<double> grad_beta) {
  layer_norm_backward(grad_out, gamma, cache.x_hat, cache.inv_std, grad_x, grad_gamma, grad_beta);
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("softmax: empty input");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> grad_probs) {
  require_same_length(probs.size(), grad_probs.size(), "softmax_backward");
  double dot = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) dot += probs[i] * grad_probs[i];
  std::vector<double> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] * (grad_probs[i] - dot);
  return out;
}

double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu(double x) { return x * normal_cdf(x); }

double gelu_derivative(double x, double cdf) {
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double gelu_derivative(double x) { return gelu_derivative(x, normal_cdf(x)); }

// ---------------------------------------------------------------------------

void linear_forward(const Tensor2D& in, const Tensor2D& weight, const Tensor2D* bias, Tensor2D& out) {
  if (in.cols() != weight.cols()) {
    throw DimensionError("linear: input dim " + std::to_string(in.cols()) + " != weight input dim " +
                         std::to_string(weight.cols()));
  }
  if (bias != nullptr && bias->size() != weight.rows()) throw DimensionError("linear: bias length mismatch");
  if (out.rows() != in.rows() || out.cols() != weight.rows()) out = Tensor2D(in.rows(), weight.rows());
  auto o = as_matrix(out);
  o.noalias() = as_matrix(in) * as_matrix(weight).transpose();
  if (bias != nullptr) {
    Eigen::Map<const Eigen::RowVectorXd> b(bias->data(), static_cast<Eigen::Index>(bias->size()));
    o.rowwise() += b;
  }
}

void linear_backward(const Tensor2D& in, const Tensor2D& weight, const Tensor2D& grad_out,
                     Tensor2D* grad_in, Tensor2D* grad_weight, Tensor2D* grad_bias) {
  if (grad_out.rows() != in.rows() || grad_out.cols() != weight.rows()) {
    throw DimensionError("linear_backward: grad_out shape mismatch");
  }
  const auto g = as_matrix(grad_out);
  if (grad_weight != nullptr) as_matrix(*grad_weight).noalias() += g.transpose() * as_matrix(in);
  if (grad_bias != nullptr) {
    Eigen::Map<Eigen::RowVectorXd> gb(grad_bias->data(), static_cast<Eigen::Index>(grad_bias->size()));
    gb += g.colwise().sum();
  }
  if (grad_in != nullptr) {
    if (grad_in->rows() != in.rows() || grad_in->cols() != in.cols()) *grad_in = Tensor2D(in.rows(), in.cols());
    as_matrix(*grad_in).noalias() = g * as_matrix(weight);
  }
}

// ---------------------------------------------------------------------------

Param& ParamStore::add(const std::string& name, Tensor2D value) {
  if (contains(name)) throw ConfigError("ParamStore: duplicate parameter '" + name + "'");
  Param p;
  p.name = name;
  p.grad = Tensor2D(value.rows(), value.cols());
  p.first_moment = Tensor2D(value.rows(), value.cols());
  p.second_moment = Tensor2D(value.rows(), value.cols());
  p.value = std::move(value);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return params_.back();
}

Param& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("ParamStore: unknown parameter '" + name + "'");
  return params_[it->second];
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("ParamStore: unknown parameter '" + name + "'");
  return params_[it->second];
}

Tensor2D& ParamStore::grad(const std::string& name) {
  Param& p = at(name);
  p.grad_initialized = true;
  return p.grad;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) {
    p.grad.fill(0.0);
    p.grad_initialized = true;
  }
}

void adam_update(ParamStore& store, const AdamOptions& options) {
  if (!(options.lr > 0.0)) throw ConfigError("adam_update: lr must be positive");
  if (options.beta1 < 0.0 || options.beta1 >= 1.0 || options.beta2 < 0.0 || options.beta2 >= 1.0) {
    throw ConfigError("adam_update: betas must lie in [0, 1)");
  }
  for (const auto& p : store.params()) {
    if (!p.grad_initialized) throw StateError("adam_update: gradient slot '" + p.name + "' is uninitialized");
  }
  const std::uint64_t t = store.step() + 1;
  const double bc1 = 1.0 - std::pow(options.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(options.beta2, static_cast<double>(t));
  for (auto& p : store.params()) {
    auto& w = p.value.values();
    const auto& g = p.grad.values();
    auto& m = p.first_moment.values();
    auto& v = p.second_moment.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = options.beta1 * m[i] + (1.0 - options.beta1) * g[i];
      v[i] = options.beta2 * v[i] + (1.0 - options.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] -= options.lr * m_hat / (std::sqrt(v_hat) + options.eps);
    }
  }
  store.set_step(t);
}

// ---------------------------------------------------------------------------

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

GradCheckReport check_gradients(ParamStore& store, const GradCheckTarget& target, double h, double tol,
                                const std::vector<std::string>& only) {
  if (!(h > 0.0)) throw ConfigError("check_gradients: h must be positive");
  store.zero_grad();
  target.backward(store);

  GradCheckReport report;
  report.perturbation = h;
  report.tolerance = tol;
  report.pass = true;
  for (auto& p : store.params()) {
    if (!only.empty() && std::find(only.begin(), only.end(), p.name) == only.end()) continue;
    GradCheckEntry entry;
    entry.name = p.name;
    auto& w = p.value.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + h;
      const double up = target.loss(store);
      w[i] = saved - h;
      const double down = target.loss(store);
      w[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("check_gradients: non-finite loss while perturbing '" + p.name + "'");
      }
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p.grad.values()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
        entry.worst_analytic = analytic;
        entry.worst_numeric = numeric;
      }
    }
    if (entry.max_rel_error > tol) report.pass = false;
    report.entries.push_back(entry);
  }
  return report;
}

void fill_fan_in_uniform(Tensor2D& t, std::size_t fan_in, std::mt19937_64& rng) {
  if (fan_in == 0) throw DimensionError("fill_fan_in_uniform: fan_in must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.values()) v = dist(rng);
}

}  // namespace geoweaver
