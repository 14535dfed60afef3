#pragma once

// GRU cells and stacks, linear layers, and the four model assemblies:
//   AE        e = LN(f(X)); z = theta(e) + e; o = psi(z) + z; X_hat = g(o) per step
//   AR        e = LN(f(X)); z = psi(e) + e; x_hat(t+1) = g(z_last)
//   MSPA      AR backbone; g(z_last) -> q * n_g values
//   FineTune  z from an AE (f, theta) or AR (f, psi) backbone; RUL = g~(phi(z)_last)
//
// Sequences are time-major 2-D tensors: row t * batch + b holds step t of
// sample b.

#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "sslrul/error.hpp"
#include "sslrul/rng.hpp"
#include "sslrul/tensor.hpp"

namespace sslrul {

struct GruLayerParams {
  Tensor W_z, W_r, W_h;  // in_dim x hidden
  Tensor U_z, U_r, U_h;  // hidden x hidden
  Tensor b_iz, b_ir, b_ih, b_hz, b_hr, b_hh;  // 1 x hidden

  std::size_t in_dim() const { return W_z.rows(); }
  std::size_t hidden() const { return W_z.cols(); }
};

inline std::size_t gru_parameter_count(std::size_t in_dim, std::size_t hidden) {
  return 3 * (in_dim * hidden + hidden * hidden + 2 * hidden);
}

inline std::size_t linear_parameter_count(std::size_t in_dim, std::size_t out_dim) { return in_dim * out_dim + out_dim; }

// One step of the gated recurrence with input- and hidden-path biases:
//   z = sigmoid(x W_z + b_iz + h U_z + b_hz)
//   r = sigmoid(x W_r + b_ir + h U_r + b_hr)
//   c = tanh(x W_h + b_ih + (r * h) U_h + b_hh)
//   h' = z * c + (1 - z) * h
inline Tensor gru_cell_forward(const Tensor& x, const Tensor& h_prev, const GruLayerParams& p) {
  if (x.cols() != p.in_dim() || h_prev.cols() != p.hidden() || x.rows() != h_prev.rows())
    throw ShapeError("gru_cell: shape mismatch x " + x.shape().str() + ", h " + h_prev.shape().str() +
                     " for layer (" + std::to_string(p.in_dim()) + " -> " + std::to_string(p.hidden()) + ")");
  const Tensor z = sigmoid(add(add_bias(matmul(x, p.W_z), p.b_iz), add_bias(matmul(h_prev, p.U_z), p.b_hz)));
  const Tensor r = sigmoid(add(add_bias(matmul(x, p.W_r), p.b_ir), add_bias(matmul(h_prev, p.U_r), p.b_hr)));
  const Tensor c = tanh(add(add_bias(matmul(x, p.W_h), p.b_ih), add_bias(matmul(mul(r, h_prev), p.U_h), p.b_hh)));
  return add(h_prev, mul(z, sub(c, h_prev)));
}

// Runs one layer over a time-major sequence (steps * batch x in_dim).
// Input projections for all steps are computed in one product.
inline Tensor gru_layer_forward(const Tensor& seq, std::size_t batch, const GruLayerParams& p) {
  if (batch == 0 || seq.rows() % batch != 0)
    throw ShapeError("gru_layer: " + seq.shape().str() + " is not a whole number of steps of batch " +
                     std::to_string(batch));
  if (seq.cols() != p.in_dim())
    throw ShapeError("gru_layer: shape mismatch input " + seq.shape().str() + " for in_dim " +
                     std::to_string(p.in_dim()));
  const std::size_t steps = seq.rows() / batch;
  const std::size_t H = p.hidden();
  const Tensor xw = add_bias(matmul(seq, concat({p.W_z, p.W_r, p.W_h}, 1)), concat({p.b_iz, p.b_ir, p.b_ih}, 1));
  const Tensor u_zr = concat({p.U_z, p.U_r}, 1);
  const Tensor b_zr = concat({p.b_hz, p.b_hr}, 1);
  Tensor h = Tensor::zeros({batch, H});
  std::vector<Tensor> outputs;
  outputs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor xw_t = slice(xw, 0, t * batch, batch);
    const Tensor gates = sigmoid(add(slice(xw_t, 1, 0, 2 * H), add_bias(matmul(h, u_zr), b_zr)));
    const Tensor z = slice(gates, 1, 0, H);
    const Tensor r = slice(gates, 1, H, H);
    const Tensor c = tanh(add(slice(xw_t, 1, 2 * H, H), add_bias(matmul(mul(r, h), p.U_h), p.b_hh)));
    h = add(h, mul(z, sub(c, h)));
    outputs.push_back(h);
  }
  return concat(outputs, 0);
}

// Stacked layers; dropout only between consecutive layers.
inline Tensor deep_gru_forward(const Tensor& seq, std::size_t batch, const std::vector<GruLayerParams>& layers,
                               double dropout_p, bool training, Rng& rng) {
  if (layers.empty()) throw ShapeError("deep_gru: at least one layer is required");
  Tensor x = seq;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    x = gru_layer_forward(x, batch, layers[k]);
    if (k + 1 < layers.size()) x = dropout(x, dropout_p, rng, training);
  }
  return x;
}

struct LinearParams {
  Tensor W;  // in x out
  Tensor b;  // 1 x out
};

inline Tensor linear_forward(const Tensor& x, const LinearParams& p) { return add_bias(matmul(x, p.W), p.b); }

enum class ModelKind { AE, AR, MSPA, FineTune };
// Backbone architecture reused by a FineTune model.
enum class BackboneArch { AE, AR };

struct ModelSpec {
  ModelKind kind = ModelKind::AR;
  BackboneArch backbone = BackboneArch::AR;  // meaningful for FineTune
  std::size_t n_g = 3;
  std::size_t h = 30;
  std::size_t embed_dim = 64;
  std::size_t encoder_layers = 2;   // theta (AE)
  std::size_t backbone_layers = 4;  // psi
  std::size_t hidden = 64;
  double dropout = 0.1;
  std::size_t q = 1;
  std::size_t finetune_hidden = 64;
  std::size_t finetune_layers = 1;
  double finetune_dropout = 0.1;

  static ModelSpec pretext(ModelKind kind, std::size_t q = 1) {
    ModelSpec s;
    s.kind = kind;
    s.backbone = kind == ModelKind::AE ? BackboneArch::AE : BackboneArch::AR;
    s.backbone_layers = kind == ModelKind::AE ? 2 : 4;
    s.q = kind == ModelKind::MSPA ? q : 1;
    return s;
  }
  static ModelSpec finetune(BackboneArch arch) {
    ModelSpec s = pretext(arch == BackboneArch::AE ? ModelKind::AE : ModelKind::AR);
    s.kind = ModelKind::FineTune;
    s.backbone = arch;
    return s;
  }

  void validate() const {
    if (embed_dim != hidden)
      throw ConfigError("model spec: skip connections need embed_dim == hidden (" + std::to_string(embed_dim) +
                        " vs " + std::to_string(hidden) + ")");
    if (n_g == 0 || h == 0 || hidden == 0) throw ConfigError("model spec: n_g, h and hidden must be >= 1");
    if (backbone_layers == 0) throw ConfigError("model spec: backbone_layers must be >= 1");
    if (uses_encoder() && encoder_layers == 0) throw ConfigError("model spec: encoder_layers must be >= 1");
    if (kind == ModelKind::MSPA && q == 0) throw ConfigError("model spec: q must be >= 1");
    if (kind == ModelKind::FineTune && (finetune_layers == 0 || finetune_hidden == 0))
      throw ConfigError("model spec: fine-tune head needs >= 1 layer and hidden >= 1");
    if (!(dropout >= 0 && dropout < 1) || !(finetune_dropout >= 0 && finetune_dropout < 1))
      throw ConfigError("model spec: dropout must lie in [0, 1)");
  }

  // theta is present in AE pretext models and in AE-backbone fine-tuning.
  bool uses_encoder() const { return backbone == BackboneArch::AE; }
  // psi is present in AE/AR/MSPA pretext models and AR-backbone fine-tuning.
  bool uses_psi() const { return kind != ModelKind::FineTune || backbone == BackboneArch::AR; }
};

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::AE: return "AE";
    case ModelKind::AR: return "AR";
    case ModelKind::MSPA: return "MSPA";
    case ModelKind::FineTune: return "FineTune";
  }
  return "?";
}

inline const char* to_string(BackboneArch a) { return a == BackboneArch::AE ? "AE" : "AR"; }

using FreezeMask = std::set<std::string>;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class Model {
 public:
  Model(const ModelSpec& spec, Rng& init_rng) : spec_(spec) {
    spec_.validate();
    build(init_rng);
  }
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelSpec& spec() const { return spec_; }
  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }

  Tensor& parameter(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p.tensor;
    throw ConfigError("model has no parameter '" + name + "'");
  }
  bool has_parameter(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return true;
    return false;
  }

  // Names of the backbone tensors (f and theta or psi) that a FineTune model
  // can inherit and freeze.
  FreezeMask backbone_names() const {
    FreezeMask out;
    for (const auto& p : params_)
      if (p.name.rfind("f.", 0) == 0 || p.name.rfind("theta.", 0) == 0 ||
          (p.name.rfind("psi.", 0) == 0 && spec_.kind != ModelKind::AE))
        out.insert(p.name);
    return out;
  }

  void apply_freeze(const FreezeMask& mask) {
    for (const auto& name : mask)
      if (!has_parameter(name)) throw ConfigError("freeze mask names unknown tensor '" + name + "'");
    for (auto& p : params_) p.tensor.set_requires_grad(!mask.count(p.name));
  }

  std::size_t count_parameters() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }
  std::size_t count_trainable() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.tensor.requires_grad()) n += p.tensor.size();
    return n;
  }

  // Representation z for an input sequence (steps * batch x n_g).
  Tensor embed(const Tensor& input, std::size_t batch, bool training, Rng& rng) const {
    check_input(input, batch);
    const Tensor e = layer_norm(linear_forward(input, embed_));
    const auto& stack = spec_.backbone == BackboneArch::AE ? theta_ : psi_;
    return add(deep_gru_forward(e, batch, stack, spec_.dropout, training, rng), e);
  }

  // Task output computed from z. Shapes: AE (steps*batch x n_g),
  // AR (batch x n_g), MSPA (batch x q*n_g), FineTune (batch x 1).
  Tensor head(const Tensor& z, std::size_t batch, bool training, Rng& rng) const {
    switch (spec_.kind) {
      case ModelKind::AE: {
        const Tensor o = add(deep_gru_forward(z, batch, psi_, spec_.dropout, training, rng), z);
        return linear_forward(o, out_);
      }
      case ModelKind::AR:
      case ModelKind::MSPA:
        return linear_forward(last_step(z, batch), out_);
      case ModelKind::FineTune: {
        const Tensor y = deep_gru_forward(z, batch, phi_, spec_.finetune_dropout, training, rng);
        return linear_forward(last_step(y, batch), out_);
      }
    }
    throw ConfigError("unknown model kind");
  }

  Tensor forward(const Tensor& input, std::size_t batch, bool training, Rng& rng) const {
    return head(embed(input, batch, training, rng), batch, training, rng);
  }

  // Copies every same-named, same-shaped tensor from `source`; returns the names copied.
  FreezeMask load_matching(const Model& source, const FreezeMask& names) {
    FreezeMask copied;
    for (const auto& name : names) {
      Tensor& dst = parameter(name);
      const Tensor* src = nullptr;
      for (const auto& p : source.params_)
        if (p.name == name) src = &p.tensor;
      if (!src) throw ConfigError("backbone has no tensor '" + name + "'");
      if (!(src->shape() == dst.shape()))
        throw ShapeError("backbone tensor '" + name + "' shape mismatch " + src->shape().str() + " vs " +
                         dst.shape().str());
      dst.mutable_values() = src->values();
      copied.insert(name);
    }
    return copied;
  }

 private:
  static Tensor last_step(const Tensor& seq, std::size_t batch) { return slice(seq, 0, seq.rows() - batch, batch); }

  void check_input(const Tensor& input, std::size_t batch) const {
    if (batch == 0 || input.cols() != spec_.n_g || input.rows() != spec_.h * batch)
      throw ShapeError("model input: shape mismatch " + input.shape().str() + ", expected (" +
                       std::to_string(spec_.h * batch) + ", " + std::to_string(spec_.n_g) + ")");
  }

  Tensor weight(const std::string& name, std::size_t fan_in, std::size_t rows, std::size_t cols, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> v(rows * cols);
    for (double& x : v) x = u(rng);
    Tensor t = Tensor::from({rows, cols}, std::move(v), true);
    params_.push_back({name, t});
    return t;
  }
  Tensor bias(const std::string& name, std::size_t cols) {
    Tensor t = Tensor::zeros({1, cols}, true);
    params_.push_back({name, t});
    return t;
  }
  LinearParams linear(const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
    LinearParams p;
    p.W = weight(prefix + ".W", in, in, out, rng);
    p.b = bias(prefix + ".b", out);
    return p;
  }
  GruLayerParams gru(const std::string& prefix, std::size_t in, std::size_t H, Rng& rng) {
    GruLayerParams p;
    p.W_z = weight(prefix + ".W_z", in, in, H, rng);
    p.W_r = weight(prefix + ".W_r", in, in, H, rng);
    p.W_h = weight(prefix + ".W_h", in, in, H, rng);
    p.U_z = weight(prefix + ".U_z", H, H, H, rng);
    p.U_r = weight(prefix + ".U_r", H, H, H, rng);
    p.U_h = weight(prefix + ".U_h", H, H, H, rng);
    p.b_iz = bias(prefix + ".b_iz", H);
    p.b_ir = bias(prefix + ".b_ir", H);
    p.b_ih = bias(prefix + ".b_ih", H);
    p.b_hz = bias(prefix + ".b_hz", H);
    p.b_hr = bias(prefix + ".b_hr", H);
    p.b_hh = bias(prefix + ".b_hh", H);
    return p;
  }
  std::vector<GruLayerParams> stack(const std::string& prefix, std::size_t layers, std::size_t in, std::size_t H,
                                    Rng& rng) {
    std::vector<GruLayerParams> out;
    for (std::size_t k = 0; k < layers; ++k)
      out.push_back(gru(prefix + "." + std::to_string(k), k == 0 ? in : H, H, rng));
    return out;
  }

  void build(Rng& rng) {
    const std::size_t E = spec_.embed_dim;
    embed_ = linear("f", spec_.n_g, E, rng);
    if (spec_.uses_encoder()) theta_ = stack("theta", spec_.encoder_layers, E, spec_.hidden, rng);
    if (spec_.uses_psi()) psi_ = stack("psi", spec_.backbone_layers, E, spec_.hidden, rng);
    switch (spec_.kind) {
      case ModelKind::AE:
        out_ = linear("g", spec_.hidden, spec_.n_g, rng);
        break;
      case ModelKind::AR:
        out_ = linear("g", spec_.hidden, spec_.n_g, rng);
        break;
      case ModelKind::MSPA:
        out_ = linear("g", spec_.hidden, spec_.q * spec_.n_g, rng);
        break;
      case ModelKind::FineTune:
        phi_ = stack("phi", spec_.finetune_layers, spec_.hidden, spec_.finetune_hidden, rng);
        out_ = linear("head", spec_.finetune_hidden, 1, rng);
        break;
    }
  }

  ModelSpec spec_;
  std::vector<NamedTensor> params_;
  LinearParams embed_;
  std::vector<GruLayerParams> theta_;
  std::vector<GruLayerParams> psi_;
  std::vector<GruLayerParams> phi_;
  LinearParams out_;
};

inline Model init_params(const ModelSpec& spec, std::uint64_t seed) {
  Rng rng = substream({seed, salt::kInit});
  return Model(spec, rng);
}

inline std::size_t count_trainable(Model& model, const FreezeMask& mask) {
  std::size_t n = 0;
  for (const auto& p : model.parameters())
    if (!mask.count(p.name)) n += p.tensor.size();
  return n;
}

}  // namespace sslrul
