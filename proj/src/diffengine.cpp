#include "fedcd/diffengine.hpp"

#include <algorithm>
#include <string>

#include "fedcd/rng.hpp"

namespace fedcd {

std::size_t ParamVector::implied_size(std::span<const LayerShape> shapes) {
  std::size_t total = 0;
  for (const auto& s : shapes) total += s.rows * s.cols + s.rows;
  return total;
}

ParamVector ParamVector::zeros(std::vector<LayerShape> shapes) {
  ParamVector p;
  p.values.assign(implied_size(shapes), 0.0);
  p.shapes = std::move(shapes);
  return p;
}

bool ParamVector::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
}

std::size_t ParamVector::weight_offset(std::size_t layer) const {
  std::size_t offset = 0;
  for (std::size_t l = 0; l < layer; ++l) offset += shapes[l].rows * shapes[l].cols + shapes[l].rows;
  return offset;
}

std::size_t ParamVector::bias_offset(std::size_t layer) const {
  return weight_offset(layer) + shapes[layer].rows * shapes[layer].cols;
}

MLPSpec MLPSpec::make(std::size_t input_dim, std::vector<std::size_t> hidden_dims,
                      std::size_t output_dim, Activation activation) {
  MLPSpec spec;
  spec.input_dim = input_dim;
  spec.mask_layer_index = hidden_dims.empty() ? 0 : hidden_dims.size() - 1;
  spec.hidden_dims = std::move(hidden_dims);
  spec.output_dim = output_dim;
  spec.activation = activation;
  return spec;
}

std::size_t MLPSpec::mask_width() const {
  return hidden_dims.empty() ? 0 : hidden_dims[mask_layer_index];
}

std::vector<LayerShape> MLPSpec::layer_shapes() const {
  std::vector<LayerShape> shapes;
  std::size_t in = input_dim;
  for (std::size_t h : hidden_dims) {
    shapes.push_back({h, in});
    in = h;
  }
  shapes.push_back({output_dim, in});
  return shapes;
}

void MLPSpec::validate() const {
  if (input_dim == 0) throw ConfigError("model: input_dim must be >= 1");
  if (output_dim == 0) throw ConfigError("model: output_dim must be >= 1");
  for (std::size_t i = 0; i < hidden_dims.size(); ++i) {
    if (hidden_dims[i] == 0) throw ConfigError("model: hidden layer " + std::to_string(i) + " has width 0");
  }
  if (!hidden_dims.empty() && mask_layer_index >= hidden_dims.size()) {
    throw ConfigError("model: mask_layer_index " + std::to_string(mask_layer_index) +
                      " is not a hidden layer");
  }
}

Batch Batch::select(std::span<const std::size_t> indices) const {
  Batch out;
  out.inputs = Matrix(indices.size(), inputs.cols);
  out.labels.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = inputs.row(indices[i]);
    std::copy(src.begin(), src.end(), out.inputs.data.begin() + static_cast<std::ptrdiff_t>(i * inputs.cols));
    out.labels[i] = labels[indices[i]];
  }
  return out;
}

ParamVector init_params(const MLPSpec& spec, Rng& rng) {
  spec.validate();
  ParamVector params = ParamVector::zeros(spec.layer_shapes());
  std::size_t offset = 0;
  for (const auto& s : params.shapes) {
    const double fan = spec.activation == Activation::relu ? static_cast<double>(s.cols)
                                                           : 0.5 * static_cast<double>(s.rows + s.cols);
    const double limit = std::sqrt(3.0 / fan);
    for (std::size_t k = 0; k < s.rows * s.cols; ++k) {
      params.values[offset + k] = (2.0 * rng.uniform() - 1.0) * limit;
    }
    offset += s.rows * s.cols + s.rows;
  }
  return params;
}

namespace {

void check_dims(const MLPSpec& spec, const ParamVector& params, const MaskVector* mask,
                const Batch& batch) {
  spec.validate();
  const auto expected = spec.layer_shapes();
  if (params.shapes.size() != expected.size()) {
    throw ConfigError("dimension mismatch: parameters describe " + std::to_string(params.shapes.size()) +
                      " layers, model has " + std::to_string(expected.size()));
  }
  for (std::size_t l = 0; l < expected.size(); ++l) {
    if (!(params.shapes[l] == expected[l])) {
      throw ConfigError("dimension mismatch at layer " + std::to_string(l));
    }
  }
  if (!params.consistent()) throw ConfigError("dimension mismatch: parameter length disagrees with shapes");
  if (batch.inputs.cols != spec.input_dim) {
    throw ConfigError("dimension mismatch at layer 0: input has " + std::to_string(batch.inputs.cols) +
                      " features, model expects " + std::to_string(spec.input_dim));
  }
  if (batch.inputs.rows != batch.labels.size()) {
    throw ConfigError("dimension mismatch: batch has " + std::to_string(batch.inputs.rows) + " rows but " +
                      std::to_string(batch.labels.size()) + " labels");
  }
  if (mask != nullptr && mask->size() != spec.mask_width()) {
    throw ConfigError("dimension mismatch at layer " + std::to_string(spec.mask_layer_index) + ": mask has " +
                      std::to_string(mask->size()) + " entries, layer width is " +
                      std::to_string(spec.mask_width()));
  }
}

// Activations kept for the backward pass. acts[l] is the input of layer l;
// for the masked layer, `unmasked` holds the activation before the mask.
struct Tape {
  std::vector<Matrix> acts;
  std::vector<Matrix> pre;
  Matrix unmasked;
  Matrix logits;
};

// out = in * W^T + b, W stored row-major (rows x cols) at `w`.
Matrix dense(const Matrix& in, const double* w, const double* b, const LayerShape& s) {
  Matrix out(in.rows, s.rows);
  for (std::size_t n = 0; n < in.rows; ++n) {
    const double* x = in.data.data() + n * in.cols;
    double* y = out.data.data() + n * s.rows;
    for (std::size_t r = 0; r < s.rows; ++r) {
      const double* wr = w + r * s.cols;
      double acc = b[r];
      for (std::size_t c = 0; c < s.cols; ++c) acc += wr[c] * x[c];
      y[r] = acc;
    }
  }
  return out;
}

double activate(Activation a, double z) { return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z); }

double activate_deriv(Activation a, double z, double out) {
  return a == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0 - out * out;
}

Tape run_forward(const MLPSpec& spec, const ParamVector& params, const MaskVector* mask,
                 const Batch& batch) {
  Tape tape;
  tape.acts.reserve(spec.num_layers());
  tape.acts.push_back(batch.inputs);
  for (std::size_t l = 0; l < spec.hidden_dims.size(); ++l) {
    const auto& s = params.shapes[l];
    Matrix z = dense(tape.acts.back(), params.values.data() + params.weight_offset(l),
                     params.values.data() + params.bias_offset(l), s);
    Matrix a(z.rows, z.cols);
    for (std::size_t k = 0; k < z.data.size(); ++k) a.data[k] = activate(spec.activation, z.data[k]);
    if (mask != nullptr && l == spec.mask_layer_index) {
      tape.unmasked = a;
      for (std::size_t n = 0; n < a.rows; ++n) {
        for (std::size_t j = 0; j < a.cols; ++j) a(n, j) *= mask->delta[j];
      }
    }
    tape.pre.push_back(std::move(z));
    tape.acts.push_back(std::move(a));
  }
  const std::size_t last = spec.num_layers() - 1;
  tape.logits = dense(tape.acts.back(), params.values.data() + params.weight_offset(last),
                      params.values.data() + params.bias_offset(last), params.shapes[last]);
  return tape;
}

// Mean cross-entropy; fills `dlogits` with d(mean loss)/d(logits) when non-null.
double softmax_xent(const Matrix& logits, std::span<const int> labels, std::size_t classes,
                    Matrix* dlogits) {
  const std::size_t n = logits.rows;
  if (dlogits != nullptr) *dlogits = Matrix(n, classes);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ConfigError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
    const auto row = logits.row(i);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    const double log_z = m + std::log(z);
    total += log_z - row[static_cast<std::size_t>(y)];
    if (dlogits != nullptr) {
      for (std::size_t k = 0; k < classes; ++k) {
        const double p = std::exp(row[k] - log_z);
        (*dlogits)(i, k) = (p - (static_cast<std::size_t>(y) == k ? 1.0 : 0.0)) / static_cast<double>(n);
      }
    }
  }
  return total / static_cast<double>(n);
}

LossAndGrads backward(const MLPSpec& spec, const ParamVector& params, const MaskVector& mask,
                      const Batch& batch) {
  const Tape tape = run_forward(spec, params, &mask, batch);
  LossAndGrads out;
  Matrix delta_out;
  out.loss = softmax_xent(tape.logits, batch.labels, spec.output_dim, &delta_out);
  out.grad_theta = ParamVector::zeros(params.shapes);
  out.grad_delta.delta.assign(mask.size(), 0.0);

  const std::size_t n = batch.size();
  for (std::size_t l = spec.num_layers(); l-- > 0;) {
    const auto& s = params.shapes[l];
    const Matrix& in = tape.acts[l];
    double* gw = out.grad_theta.values.data() + out.grad_theta.weight_offset(l);
    double* gb = out.grad_theta.values.data() + out.grad_theta.bias_offset(l);
    for (std::size_t i = 0; i < n; ++i) {
      const double* d = delta_out.data.data() + i * s.rows;
      const double* x = in.data.data() + i * s.cols;
      for (std::size_t r = 0; r < s.rows; ++r) {
        gb[r] += d[r];
        for (std::size_t c = 0; c < s.cols; ++c) gw[r * s.cols + c] += d[r] * x[c];
      }
    }
    if (l == 0) break;

    // Propagate to the input of layer l (the output of hidden layer l - 1).
    const double* w = params.values.data() + params.weight_offset(l);
    Matrix d_act(n, s.cols);
    for (std::size_t i = 0; i < n; ++i) {
      const double* d = delta_out.data.data() + i * s.rows;
      double* da = d_act.data.data() + i * s.cols;
      for (std::size_t r = 0; r < s.rows; ++r) {
        for (std::size_t c = 0; c < s.cols; ++c) da[c] += d[r] * w[r * s.cols + c];
      }
    }
    const std::size_t hidden = l - 1;
    const bool masked = hidden == spec.mask_layer_index && !spec.hidden_dims.empty();
    const Matrix& post = masked ? tape.unmasked : tape.acts[l];
    if (masked) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < s.cols; ++j) {
          out.grad_delta.delta[j] += d_act(i, j) * tape.unmasked(i, j);
          d_act(i, j) *= mask.delta[j];
        }
      }
    }
    const Matrix& z = tape.pre[hidden];
    for (std::size_t k = 0; k < d_act.data.size(); ++k) {
      d_act.data[k] *= activate_deriv(spec.activation, z.data[k], post.data[k]);
    }
    delta_out = std::move(d_act);
  }
  return out;
}

}  // namespace

Matrix forward(const MLPSpec& spec, const ParamVector& params, const MaskVector& mask,
               const Batch& batch) {
  check_dims(spec, params, &mask, batch);
  return run_forward(spec, params, &mask, batch).logits;
}

Matrix forward_unmasked(const MLPSpec& spec, const ParamVector& params, const Batch& batch) {
  check_dims(spec, params, nullptr, batch);
  return run_forward(spec, params, nullptr, batch).logits;
}

LossAndGrads loss_and_grads(const MLPSpec& spec, const ParamVector& params, const MaskVector& mask,
                            const Batch& batch) {
  if (batch.size() == 0) throw UsageError("loss_and_grads: empty batch");
  check_dims(spec, params, &mask, batch);
  return backward(spec, params, mask, batch);
}

double mean_loss(const MLPSpec& spec, const ParamVector& params, const MaskVector& mask,
                 const Batch& batch) {
  if (batch.size() == 0) throw UsageError("mean_loss: empty batch");
  check_dims(spec, params, &mask, batch);
  const Tape tape = run_forward(spec, params, &mask, batch);
  return softmax_xent(tape.logits, batch.labels, spec.output_dim, nullptr);
}

std::vector<double> grad_wrt_mask(const MLPSpec& spec, const ParamVector& params,
                                  const MaskVector& mask, const Batch& dataset) {
  return loss_and_grads(spec, params, mask, dataset).grad_delta.delta;
}

double default_hvp_eps(const MaskVector& mask) {
  double inf_norm = 0.0;
  for (double d : mask.delta) inf_norm = std::max(inf_norm, std::abs(d));
  return 1e-4 * (1.0 + inf_norm);
}

std::vector<double> hvp_mask(const MLPSpec& spec, const ParamVector& params, const MaskVector& mask,
                             const Batch& dataset, std::span<const double> v, double eps) {
  if (dataset.size() == 0) throw UsageError("hvp_mask: empty dataset");
  if (v.size() != mask.size()) throw UsageError("hvp_mask: direction length differs from mask width");
  check_dims(spec, params, &mask, dataset);
  auto grad = [&](std::span<const double> delta) {
    MaskVector m{std::vector<double>(delta.begin(), delta.end())};
    return backward(spec, params, m, dataset).grad_delta.delta;
  };
  return central_hvp(grad, mask.delta, v, eps);
}

ParamVector mixed_theta_mask_product(const MLPSpec& spec, const ParamVector& params,
                                     const MaskVector& mask, const Batch& dataset,
                                     std::span<const double> v, double eps) {
  if (dataset.size() == 0) throw UsageError("mixed_theta_mask_product: empty dataset");
  if (v.size() != mask.size()) throw UsageError("mixed_theta_mask_product: direction length differs");
  check_dims(spec, params, &mask, dataset);
  auto grad = [&](std::span<const double> delta) {
    MaskVector m{std::vector<double>(delta.begin(), delta.end())};
    return backward(spec, params, m, dataset).grad_theta.values;
  };
  ParamVector out;
  out.shapes = params.shapes;
  out.values = central_hvp(grad, mask.delta, v, eps);
  if (out.values.size() != params.size()) out.values.assign(params.size(), 0.0);
  return out;
}

std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(logits.rows, 0);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.cols; ++k) {
      if (logits(i, k) > logits(i, best)) best = k;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace fedcd
