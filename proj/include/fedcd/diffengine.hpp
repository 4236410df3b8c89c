#pragma once

// Dense numerical core: a small multilayer perceptron with a multiplicative
// feature mask on one hidden activation, reverse-mode gradients for both the
// model parameters and the mask, and mask Hessian-vector products.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "fedcd/error.hpp"

namespace fedcd {

class Rng;

/// Weight matrix of one dense layer is `rows x cols` (out x in), followed by
/// a bias of length `rows`.
struct LayerShape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  bool operator==(const LayerShape&) const = default;
};

/// Flattened model parameters; the unit of federated exchange.
struct ParamVector {
  std::vector<double> values;
  std::vector<LayerShape> shapes;

  static std::size_t implied_size(std::span<const LayerShape> shapes);
  static ParamVector zeros(std::vector<LayerShape> shapes);

  std::size_t size() const { return values.size(); }
  bool consistent() const { return values.size() == implied_size(shapes); }
  bool all_finite() const;

  /// Offset of layer `layer`'s weight block; its bias follows rows*cols later.
  std::size_t weight_offset(std::size_t layer) const;
  std::size_t bias_offset(std::size_t layer) const;

  bool operator==(const ParamVector&) const = default;
};

/// Intervener parameters applied elementwise to the masked hidden layer.
struct MaskVector {
  std::vector<double> delta;

  static MaskVector ones(std::size_t width) { return {std::vector<double>(width, 1.0)}; }
  std::size_t size() const { return delta.size(); }

  bool operator==(const MaskVector&) const = default;
};

enum class Activation { relu, tanh };

struct MLPSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims;
  std::size_t output_dim = 2;
  Activation activation = Activation::relu;
  std::size_t mask_layer_index = 0;

  /// Spec whose mask sits on the last hidden layer.
  static MLPSpec make(std::size_t input_dim, std::vector<std::size_t> hidden_dims,
                      std::size_t output_dim, Activation activation = Activation::relu);

  /// Width of the masked hidden layer, 0 for a purely linear model.
  std::size_t mask_width() const;
  std::size_t num_layers() const { return hidden_dims.size() + 1; }
  std::vector<LayerShape> layer_shapes() const;

  /// Throws ConfigError when a dimension is zero or the mask index is out of range.
  void validate() const;

  bool operator==(const MLPSpec&) const = default;
};

/// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

struct Batch {
  Matrix inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  /// Copy of the rows listed in `indices`, in that order.
  Batch select(std::span<const std::size_t> indices) const;

  bool operator==(const Batch&) const = default;
};

struct LossAndGrads {
  double loss = 0.0;
  ParamVector grad_theta;
  MaskVector grad_delta;
};

/// Glorot-uniform weights (He-uniform for relu), zero biases.
ParamVector init_params(const MLPSpec& spec, Rng& rng);

/// Logits with the mask applied to the designated hidden activation.
Matrix forward(const MLPSpec& spec, const ParamVector& params, const MaskVector& mask,
               const Batch& batch);

/// Logits of the same network with no mask at all.
Matrix forward_unmasked(const MLPSpec& spec, const ParamVector& params, const Batch& batch);

/// Mean softmax cross-entropy and its exact gradients.
LossAndGrads loss_and_grads(const MLPSpec& spec, const ParamVector& params,
                            const MaskVector& mask, const Batch& batch);

/// Mean loss only (no backward pass).
double mean_loss(const MLPSpec& spec, const ParamVector& params, const MaskVector& mask,
                 const Batch& batch);

/// Gradient of the dataset-mean loss with respect to the mask.
std::vector<double> grad_wrt_mask(const MLPSpec& spec, const ParamVector& params,
                                  const MaskVector& mask, const Batch& dataset);

/// 1e-4 * (1 + max|delta|).
double default_hvp_eps(const MaskVector& mask);

/// Directional derivative of `grad` at `point` along `v`, by central
/// differences on the unit direction and rescaled by |v|:
///   (grad(x + eps*v/|v|) - grad(x - eps*v/|v|)) / (2 eps) * |v|
/// Returns zeros for v = 0.
template <typename GradFn>
std::vector<double> central_hvp(GradFn&& grad, std::span<const double> point,
                                std::span<const double> v, double eps) {
  if (!(eps > 0.0)) throw UsageError("hvp: eps must be positive");
  if (v.size() != point.size()) throw UsageError("hvp: direction length differs from point");
  double norm_sq = 0.0;
  for (double x : v) norm_sq += x * x;
  const double norm = std::sqrt(norm_sq);
  if (norm == 0.0) return std::vector<double>(point.size(), 0.0);

  std::vector<double> plus(point.begin(), point.end());
  std::vector<double> minus(point.begin(), point.end());
  for (std::size_t i = 0; i < point.size(); ++i) {
    plus[i] += eps * (v[i] / norm);
    minus[i] -= eps * (v[i] / norm);
  }
  const std::vector<double> g_plus = grad(std::span<const double>(plus));
  const std::vector<double> g_minus = grad(std::span<const double>(minus));
  std::vector<double> out(g_plus.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (g_plus[i] - g_minus[i]) / (2.0 * eps) * norm;
  return out;
}

/// Mask Hessian of the dataset-mean loss applied to `v`.
std::vector<double> hvp_mask(const MLPSpec& spec, const ParamVector& params, const MaskVector& mask,
                             const Batch& dataset, std::span<const double> v, double eps);

/// Mixed second derivative d/dt grad_theta L(theta, delta + t v) at t = 0,
/// i.e. the theta-gradient of <grad_delta L, v>.
ParamVector mixed_theta_mask_product(const MLPSpec& spec, const ParamVector& params,
                                     const MaskVector& mask, const Batch& dataset,
                                     std::span<const double> v, double eps);

/// Index of the largest logit per row; ties go to the lowest index.
std::vector<int> argmax_rows(const Matrix& logits);

}  // namespace fedcd
