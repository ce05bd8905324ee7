#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dtrak/errors.hpp"
#include "dtrak/loss.hpp"
#include "dtrak/rng.hpp"

namespace dtrak {

enum class Activation { kSiLU, kTanh };

inline std::string activation_name(Activation a) { return a == Activation::kSiLU ? "silu" : "tanh"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "silu") return Activation::kSiLU;
  if (s == "tanh") return Activation::kTanh;
  throw ParameterError("unknown activation '" + s + "'");
}

/// MLP noise predictor: [x_t, sin/cos embedding of t / T] -> hidden layers -> R^input_dim.
struct DenoiserArch {
  int input_dim = 8;
  int time_embed_dim = 16;
  std::vector<int> hidden_dims = {64, 64};
  Activation activation = Activation::kSiLU;
  /// Largest timestep; the embedding sees t / timesteps.
  int timesteps = 1000;

  /// Layer widths including input and output.
  std::vector<int> widths() const {
    std::vector<int> w;
    w.push_back(input_dim + time_embed_dim);
    for (int h : hidden_dims) w.push_back(h);
    w.push_back(input_dim);
    return w;
  }

  /// sum over layers of (fan_in + 1) * fan_out.
  Eigen::Index param_count() const {
    const auto w = widths();
    Eigen::Index d = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) d += Eigen::Index{w[l] + 1} * w[l + 1];
    return d;
  }

  void validate() const {
    if (input_dim < 1) throw ParameterError("input_dim must be >= 1");
    if (time_embed_dim < 0 || time_embed_dim % 2 != 0) {
      throw ParameterError("time_embed_dim must be even and non-negative");
    }
    for (int h : hidden_dims) {
      if (h < 1) throw ParameterError("hidden widths must be positive");
    }
    if (timesteps < 1) throw ParameterError("timesteps must be >= 1");
  }

  friend bool operator==(const DenoiserArch&, const DenoiserArch&) = default;
};

/// Sinusoidal features of s = t / T with frequencies geometric between 1 and T.
inline Vec time_embedding(int t, int timesteps, int embed_dim) {
  Vec e(embed_dim);
  const int half = embed_dim / 2;
  const double s = static_cast<double>(t) / static_cast<double>(timesteps);
  for (int i = 0; i < half; ++i) {
    const double expo = half == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(half - 1);
    const double freq = std::pow(static_cast<double>(timesteps), expo);
    e[i] = std::sin(freq * s);
    e[half + i] = std::cos(freq * s);
  }
  return e;
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline double act(Activation a, double z) {
  if (a == Activation::kTanh) return std::tanh(z);
  return z / (1.0 + std::exp(-z));
}

inline double act_grad(Activation a, double z) {
  if (a == Activation::kTanh) {
    const double th = std::tanh(z);
    return 1.0 - th * th;
  }
  const double sig = 1.0 / (1.0 + std::exp(-z));
  return sig * (1.0 + z * (1.0 - sig));
}

}  // namespace detail

/// Flat parameters in layer-major order; within a layer the row-major
/// weight block (fan_out x fan_in) precedes the bias.
struct ModelParams {
  DenoiserArch arch;
  Vec theta;

  ModelParams() = default;
  ModelParams(DenoiserArch a, Vec t) : arch(std::move(a)), theta(std::move(t)) {
    arch.validate();
    if (theta.size() != arch.param_count()) {
      throw ShapeError("theta has " + std::to_string(theta.size()) + " entries, arch needs " +
                       std::to_string(arch.param_count()));
    }
  }

  Eigen::Index dim() const { return theta.size(); }

  /// Noise prediction eps_theta(x_t, t).
  Vec predict(const Vec& x_t, int t) const;
};

struct LayerWeights {
  Eigen::Map<const detail::RowMat> W;
  Eigen::Map<const Vec> b;
};

inline std::vector<LayerWeights> layer_views(const ModelParams& p) {
  const auto w = p.arch.widths();
  std::vector<LayerWeights> out;
  Eigen::Index off = 0;
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    const Eigen::Index in = w[l], o = w[l + 1];
    out.push_back({Eigen::Map<const detail::RowMat>(p.theta.data() + off, o, in),
                   Eigen::Map<const Vec>(p.theta.data() + off + o * in, o)});
    off += o * in + o;
  }
  return out;
}

/// Owned per-layer copy of the parameters.
struct LayerParams {
  detail::RowMat W;
  Vec b;
};

inline std::vector<LayerParams> unflatten(const ModelParams& p) {
  std::vector<LayerParams> out;
  for (const auto& v : layer_views(p)) out.push_back({v.W, v.b});
  return out;
}

inline ModelParams flatten(const DenoiserArch& arch, const std::vector<LayerParams>& layers) {
  Vec theta(arch.param_count());
  Eigen::Index off = 0;
  for (const auto& l : layers) {
    if (off + l.W.size() + l.b.size() > theta.size()) throw ShapeError("flatten: layers exceed arch");
    std::copy(l.W.data(), l.W.data() + l.W.size(), theta.data() + off);
    off += l.W.size();
    theta.segment(off, l.b.size()) = l.b;
    off += l.b.size();
  }
  if (off != theta.size()) throw ShapeError("flatten: layers do not match arch");
  return ModelParams(arch, std::move(theta));
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
inline ModelParams init_params(const DenoiserArch& arch, std::uint64_t seed) {
  arch.validate();
  Vec theta = Vec::Zero(arch.param_count());
  auto rng = SeededStream::keyed(seed, Purpose::kInit);
  const auto w = arch.widths();
  Eigen::Index off = 0;
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    const Eigen::Index in = w[l], o = w[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index i = 0; i < o * in; ++i) theta[off + i] = rng.next_uniform(-bound, bound);
    off += o * in + o;
  }
  return ModelParams(arch, std::move(theta));
}

namespace detail {

struct ForwardCache {
  std::vector<Vec> inputs;  // input of each layer
  std::vector<Vec> pre;     // pre-activation of each hidden layer
  Vec output;
};

inline ForwardCache run_forward(const ModelParams& p, const Vec& x_t, int t) {
  if (x_t.size() != p.arch.input_dim) {
    throw ShapeError("denoiser input has dim " + std::to_string(x_t.size()) + ", expected " +
                     std::to_string(p.arch.input_dim));
  }
  const auto layers = layer_views(p);
  ForwardCache c;
  Vec a(p.arch.input_dim + p.arch.time_embed_dim);
  a << x_t, time_embedding(t, p.arch.timesteps, p.arch.time_embed_dim);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    c.inputs.push_back(a);
    Vec z = layers[l].W * a + layers[l].b;
    if (l + 1 == layers.size()) {
      c.output = std::move(z);
    } else {
      a = z.unaryExpr([&](double v) { return act(p.arch.activation, v); });
      c.pre.push_back(std::move(z));
    }
  }
  return c;
}

}  // namespace detail

inline Vec forward(const ModelParams& params, const Vec& x_t, int t) {
  return detail::run_forward(params, x_t, t).output;
}

inline Vec ModelParams::predict(const Vec& x_t, int t) const { return forward(*this, x_t, t); }

namespace detail {

inline void backprop_from(const ModelParams& p, const ForwardCache& cache, const Vec& cotangent,
                          double scale, Eigen::Ref<Vec> grad) {
  const auto layers = layer_views(p);
  const auto w = p.arch.widths();
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    offsets.push_back(off);
    off += Eigen::Index{w[l + 1]} * w[l] + w[l + 1];
  }
  Vec delta = scale * cotangent;
  for (std::size_t l = layers.size(); l-- > 0;) {
    const Eigen::Index in = w[l], o = w[l + 1];
    Eigen::Map<RowMat> gW(grad.data() + offsets[l], o, in);
    gW.noalias() += delta * cache.inputs[l].transpose();
    grad.segment(offsets[l] + o * in, o) += delta;
    if (l == 0) break;
    Vec back = layers[l].W.transpose() * delta;
    const Vec& z = cache.pre[l - 1];
    for (Eigen::Index i = 0; i < back.size(); ++i) back[i] *= act_grad(p.arch.activation, z[i]);
    delta = std::move(back);
  }
}

}  // namespace detail

/// Adds scale * d<cotangent, eps_theta(x_t, t)>/d theta into grad.
inline void backprop_into(const ModelParams& p, const Vec& x_t, int t, const Vec& cotangent,
                          double scale, Eigen::Ref<Vec> grad) {
  detail::backprop_from(p, detail::run_forward(p, x_t, t), cotangent, scale, grad);
}

/// Exact gradient of eval_loss(params, x, spec, sched, noise) with respect to theta,
/// using the same (t, eps) draws.
inline Vec per_sample_grad(const ModelParams& params, const Vec& x, const LossSpec& spec,
                           const VarianceSchedule& sched, const NoiseKey& noise) {
  Vec grad = Vec::Zero(params.dim());
  const int count = for_each_draw(spec, sched, noise, x.size(), [&](int t, int, const Vec& eps) {
    const Vec xt = forward_diffuse(x, t, eps, sched);
    const auto cache = detail::run_forward(params, xt, t);
    detail::backprop_from(params, cache, loss_cotangent(spec, cache.output, eps, t, sched), 1.0,
                          grad);
  });
  grad /= static_cast<double>(count);
  return grad;
}

/// Gradient of the single-timestep Simple loss at a given noisy state.
inline Vec simple_grad_at_state(const ModelParams& params, const Vec& x_t, int t, const Vec& eps) {
  Vec grad = Vec::Zero(params.dim());
  const auto cache = detail::run_forward(params, x_t, t);
  detail::backprop_from(params, cache, 2.0 * (cache.output - eps), 1.0, grad);
  return grad;
}

}  // namespace dtrak
