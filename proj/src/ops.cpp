#include "milsurv/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "milsurv/error.hpp"
#include "milsurv/kernels.hpp"

namespace milsurv::ops {

using kernels::Trans;

namespace {

template <class T>
void require_matrix(const Tensor<T>& x, const char* op) {
  if (!(x.defined() && x.rank() == 2)) fail(ErrorKind::dimension, std::string(op) + ": expected a matrix, got " +
              (x.defined() ? shape_string(x.shape()) : std::string("undefined")));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!(a.shape() == b.shape())) fail(ErrorKind::dimension, std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
              shape_string(b.shape()));
}

template <class T>
void require_finite(const Tensor<T>& x, const char* op) {
  for (T v : x.values()) {
    if (!(std::isfinite(v))) fail(ErrorKind::non_finite, std::string(op) + ": non-finite input");
  }
}

template <class T, class Forward, class Derivative>
Tensor<T> unary(Tape<T>& tape, const Tensor<T>& x, Forward forward, Derivative derivative) {
  Tensor<T> out(x.shape());
  auto in = x.values();
  auto y = out.values();
  for (std::size_t i = 0; i < in.size(); ++i) y[i] = forward(in[i]);
  if (tape.wants_grad({&x})) {
    // derivative(x, y) -> dy/dx
    tape.record(out, {x}, [x, out, derivative](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      auto in = x.values();
      auto y = out.values();
      auto& gx = *gin[0];
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * derivative(in[i], y[i]);
    });
  }
  return out;
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "softmax") return Activation::softmax;
  fail(ErrorKind::configuration, "unknown activation '" + std::string(name) + "'");
}

Reduce parse_reduce(std::string_view name) {
  if (name == "mean") return Reduce::mean;
  if (name == "max") return Reduce::max;
  fail(ErrorKind::configuration, "unknown reduction '" + std::string(name) + "'");
}

template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t n = a.rows(), p = a.cols(), q = b.cols();
  if (!(b.rows() == p)) fail(ErrorKind::dimension, "matmul: inner dimensions differ, " + shape_string(a.shape()) + " · " + shape_string(b.shape()));
  Tensor<T> out({n, q});
  kernels::gemm<T>(Trans::no, Trans::no, n, q, p, a.values(), b.values(), out.values());
  if (tape.wants_grad({&a, &b})) {
    tape.record(out, {a, b}, [a, b, n, p, q](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      if (gin[0]) kernels::gemm<T>(Trans::no, Trans::yes, n, p, q, g, b.values(), *gin[0]);
      if (gin[1]) kernels::gemm<T>(Trans::yes, Trans::no, p, q, n, a.values(), g, *gin[1]);
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x) {
  require_matrix(x, "transpose");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> out({c, r});
  auto in = x.values();
  auto y = out.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = in[i * c + j];
  if (tape.wants_grad({&x})) {
    tape.record(out, {x}, [r, c](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      auto& gx = *gin[0];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

template <class T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_matrix(x, "linear");
  require_matrix(weight, "linear");
  const std::size_t n = x.rows(), p = x.cols(), q = weight.cols();
  if (!(weight.rows() == p)) fail(ErrorKind::dimension, "linear: input " + shape_string(x.shape()) + " incompatible with weight " +
              shape_string(weight.shape()));
  if (bias.defined()) {
    if (!(bias.size() == q)) fail(ErrorKind::dimension, "linear: bias " + shape_string(bias.shape()) + " incompatible with weight " +
                shape_string(weight.shape()));
  }
  require_finite(x, "linear");

  Tensor<T> out({n, q});
  auto y = out.values();
  if (bias.defined()) {
    auto b = bias.values();
    for (std::size_t i = 0; i < n; ++i) std::copy(b.begin(), b.end(), y.begin() + i * q);
  }
  kernels::gemm<T>(Trans::no, Trans::no, n, q, p, x.values(), weight.values(), y);

  if (tape.wants_grad({&x, &weight, &bias})) {
    std::vector<Tensor<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    tape.record(out, std::move(inputs),
                [x, weight, n, p, q](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                  if (gin[0]) kernels::gemm<T>(Trans::no, Trans::yes, n, p, q, g, weight.values(), *gin[0]);
                  if (gin[1]) kernels::gemm<T>(Trans::yes, Trans::no, p, q, n, x.values(), g, *gin[1]);
                  if (gin.size() > 2 && gin[2]) {
                    auto& gb = *gin[2];
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < q; ++j) gb[j] += g[i * q + j];
                  }
                });
  }
  return out;
}

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto y = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  if (tape.wants_grad({&a, &b})) {
    tape.record(out, {a, b}, [](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      for (auto* gx : gin) {
        if (!gx) continue;
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  auto y = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  if (tape.wants_grad({&a, &b})) {
    tape.record(out, {a, b}, [](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (gin[0]) (*gin[0])[i] += g[i];
        if (gin[1]) (*gin[1])[i] -= g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  auto y = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  if (tape.wants_grad({&a, &b})) {
    tape.record(out, {a, b}, [a, b](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      auto av = a.values();
      auto bv = b.values();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (gin[0]) (*gin[0])[i] += g[i] * bv[i];
        if (gin[1]) (*gin[1])[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& x, T scale, T shift) {
  return unary(
      tape, x, [scale, shift](T v) { return scale * v + shift; }, [scale](T, T) { return scale; });
}

template <class T>
Tensor<T> scaled_identity_minus(Tape<T>& tape, T c, const Tensor<T>& x) {
  require_matrix(x, "scaled_identity_minus");
  const std::size_t n = x.rows();
  if (!(x.cols() == n)) fail(ErrorKind::dimension, "scaled_identity_minus: expected a square matrix, got " + shape_string(x.shape()));
  Tensor<T> out(x.shape());
  auto y = out.values();
  auto in = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = -in[i];
  for (std::size_t i = 0; i < n; ++i) y[i * n + i] += c;
  if (tape.wants_grad({&x})) {
    tape.record(out, {x}, [](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      auto& gx = *gin[0];
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  return unary(
      tape, x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <class T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& x) {
  return unary(
      tape, x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
  return unary(
      tape, x,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, int axis) {
  require_matrix(x, "softmax");
  if (!(axis == 0 || axis == 1 || axis == -1)) fail(ErrorKind::configuration, "softmax: axis must be 0 or 1, got " + std::to_string(axis));
  const std::size_t r = x.rows(), c = x.cols();
  // Walk "lines" along the normalized axis: count lines of length len with stride.
  const bool over_cols = axis != 0;
  const std::size_t lines = over_cols ? r : c;
  const std::size_t len = over_cols ? c : r;
  const std::size_t stride = over_cols ? 1 : c;
  auto index = [=](std::size_t line, std::size_t k) {
    return over_cols ? line * c + k * stride : k * stride + line;
  };

  Tensor<T> out(x.shape());
  auto in = x.values();
  auto y = out.values();
  for (std::size_t line = 0; line < lines; ++line) {
    T peak = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < len; ++k) peak = std::max(peak, in[index(line, k)]);
    T total{0};
    for (std::size_t k = 0; k < len; ++k) {
      const T e = std::exp(in[index(line, k)] - peak);
      y[index(line, k)] = e;
      total += e;
    }
    for (std::size_t k = 0; k < len; ++k) y[index(line, k)] /= total;
  }
  if (tape.wants_grad({&x})) {
    tape.record(out, {x}, [out, lines, len, index](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      auto y = out.values();
      auto& gx = *gin[0];
      for (std::size_t line = 0; line < lines; ++line) {
        T dot{0};
        for (std::size_t k = 0; k < len; ++k) dot += g[index(line, k)] * y[index(line, k)];
        for (std::size_t k = 0; k < len; ++k) {
          const auto at = index(line, k);
          gx[at] += y[at] * (g[at] - dot);
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> activation(Tape<T>& tape, const Tensor<T>& x, Activation kind, int axis) {
  switch (kind) {
    case Activation::relu: return relu(tape, x);
    case Activation::tanh: return tanh(tape, x);
    case Activation::sigmoid: return sigmoid(tape, x);
    case Activation::softmax: return softmax(tape, x, axis);
  }
  fail(ErrorKind::configuration, "unknown activation kind");
}

template <class T>
Tensor<T> log(Tape<T>& tape, const Tensor<T>& x) {
  return unary(
      tape, x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <class T>
Tensor<T> clamp(Tape<T>& tape, const Tensor<T>& x, T lo, T hi) {
  return unary(
      tape, x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v < lo || v > hi) ? T{0} : T{1}; });
}

template <class T>
Tensor<T> reduce(Tape<T>& tape, const Tensor<T>& x, Reduce kind) {
  require(x.defined(), ErrorKind::contract, "reduce: undefined tensor");
  if (!(x.rank() == 2)) fail(ErrorKind::dimension, "reduce: expected [n x q], got " + shape_string(x.shape()));
  const std::size_t n = x.rows(), q = x.cols();
  require(n >= 1, ErrorKind::empty_bag, "reduce: empty instance axis");
  Tensor<T> out({1, q});
  auto in = x.values();
  auto y = out.values();

  if (kind == Reduce::mean) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < q; ++j) y[j] += in[i * q + j];
    for (auto& v : y) v /= static_cast<T>(n);
    if (tape.wants_grad({&x})) {
      tape.record(out, {x}, [n, q](std::span<const T> g, std::span<std::vector<T>* const> gin) {
        auto& gx = *gin[0];
        const T inv = T{1} / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < q; ++j) gx[i * q + j] += g[j] * inv;
      });
    }
    return out;
  }

  std::vector<std::size_t> argmax(q, 0);
  for (std::size_t j = 0; j < q; ++j) y[j] = in[j];
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t j = 0; j < q; ++j) {
      if (in[i * q + j] > y[j]) {
        y[j] = in[i * q + j];
        argmax[j] = i;
      }
    }
  }
  if (tape.wants_grad({&x})) {
    tape.record(out, {x}, [argmax = std::move(argmax), q](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      auto& gx = *gin[0];
      for (std::size_t j = 0; j < q; ++j) gx[argmax[j] * q + j] += g[j];
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T total{0};
  for (T v : x.values()) total += v;
  auto out = Tensor<T>::scalar(total);
  if (tape.wants_grad({&x})) {
    tape.record(out, {x}, [](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      for (auto& v : *gin[0]) v += g[0];
    });
  }
  return out;
}

template <class T>
Tensor<T> abs_sum(Tape<T>& tape, const Tensor<T>& x) {
  T total{0};
  for (T v : x.values()) total += std::abs(v);
  auto out = Tensor<T>::scalar(total);
  if (tape.wants_grad({&x})) {
    tape.record(out, {x}, [x](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      auto in = x.values();
      auto& gx = *gin[0];
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (in[i] > T{0}) gx[i] += g[0];
        else if (in[i] < T{0}) gx[i] -= g[0];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, T eps) {
  require_matrix(x, "layer_norm");
  const std::size_t n = x.rows(), q = x.cols();
  if (!(gain.size() == q && shift.size() == q)) fail(ErrorKind::dimension, "layer_norm: affine parameters " + shape_string(gain.shape()) + "/" + shape_string(shift.shape()) +
              " do not match input " + shape_string(x.shape()));
  require(eps > T{0}, ErrorKind::configuration, "layer_norm: eps must be positive");

  Tensor<T> out(x.shape());
  std::vector<T> normalized(n * q);
  std::vector<T> inv_std(n);
  auto in = x.values();
  auto y = out.values();
  auto a = gain.values();
  auto b = shift.values();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = in.data() + i * q;
    T mean{0};
    for (std::size_t j = 0; j < q; ++j) mean += row[j];
    mean /= static_cast<T>(q);
    T var{0};
    for (std::size_t j = 0; j < q; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(q);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < q; ++j) {
      const T z = (row[j] - mean) * inv_std[i];
      normalized[i * q + j] = z;
      y[i * q + j] = z * a[j] + b[j];
    }
  }
  if (tape.wants_grad({&x, &gain, &shift})) {
    tape.record(out, {x, gain, shift},
                [gain, normalized = std::move(normalized), inv_std = std::move(inv_std), n, q](
                    std::span<const T> g, std::span<std::vector<T>* const> gin) {
                  auto a = gain.values();
                  for (std::size_t i = 0; i < n; ++i) {
                    const T* gi = g.data() + i * q;
                    const T* zi = normalized.data() + i * q;
                    if (gin[1] || gin[2]) {
                      for (std::size_t j = 0; j < q; ++j) {
                        if (gin[1]) (*gin[1])[j] += gi[j] * zi[j];
                        if (gin[2]) (*gin[2])[j] += gi[j];
                      }
                    }
                    if (gin[0]) {
                      T mean_g{0}, mean_gz{0};
                      for (std::size_t j = 0; j < q; ++j) {
                        const T gz = gi[j] * a[j];
                        mean_g += gz;
                        mean_gz += gz * zi[j];
                      }
                      mean_g /= static_cast<T>(q);
                      mean_gz /= static_cast<T>(q);
                      auto& gx = *gin[0];
                      for (std::size_t j = 0; j < q; ++j) {
                        gx[i * q + j] += inv_std[i] * (gi[j] * a[j] - mean_g - zi[j] * mean_gz);
                      }
                    }
                  }
                });
  }
  return out;
}

template <class T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) fail(ErrorKind::configuration, "dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;

  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  // Compare raw 64-bit draws against rate · 2^64 instead of converting to double.
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(rate, 64));
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = rng.next_u64() < threshold ? T{0} : keep_scale;

  Tensor<T> out(x.shape());
  auto in = x.values();
  auto y = out.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = in[i] * mask[i];
  if (tape.wants_grad({&x})) {
    tape.record(out, {x}, [mask = std::move(mask)](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      auto& gx = *gin[0];
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_rows(Tape<T>& tape, std::span<const Tensor<T>> parts) {
  require(!parts.empty(), ErrorKind::contract, "concat_rows: no parts");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (!(p.cols() == c)) fail(ErrorKind::dimension, "concat_rows: column mismatch " + shape_string(parts.front().shape()) + " vs " + shape_string(p.shape()));
    total += p.rows();
  }
  Tensor<T> out({total, c});
  auto y = out.values();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    std::copy(p.values().begin(), p.values().end(), y.begin() + offset);
    offset += p.size();
  }
  std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape.recording() && any) {
    tape.record(out, std::move(inputs), [offsets = std::move(offsets)](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      for (std::size_t k = 0; k < gin.size(); ++k) {
        if (!gin[k]) continue;
        auto& gx = *gin[k];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[offsets[k] + i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_cols(Tape<T>& tape, std::span<const Tensor<T>> parts) {
  require(!parts.empty(), ErrorKind::contract, "concat_cols: no parts");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  std::vector<std::size_t> offsets, widths;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (!(p.rows() == r)) fail(ErrorKind::dimension, "concat_cols: row mismatch " + shape_string(parts.front().shape()) + " vs " + shape_string(p.shape()));
    offsets.push_back(total);
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor<T> out({r, total});
  auto y = out.values();
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto in = parts[k].values();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(in.begin() + i * widths[k], widths[k], y.begin() + i * total + offsets[k]);
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape.recording() && any) {
    std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
    tape.record(out, std::move(inputs),
                [offsets = std::move(offsets), widths = std::move(widths), r, total](
                    std::span<const T> g, std::span<std::vector<T>* const> gin) {
                  for (std::size_t k = 0; k < gin.size(); ++k) {
                    if (!gin[k]) continue;
                    auto& gx = *gin[k];
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < widths[k]; ++j)
                        gx[i * widths[k] + j] += g[i * total + offsets[k] + j];
                  }
                });
  }
  return out;
}

template <class T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& x, std::vector<std::size_t> index) {
  require_matrix(x, "gather_rows");
  require(!index.empty(), ErrorKind::dimension, "gather_rows: empty index");
  const std::size_t c = x.cols();
  for (auto i : index) {
    if (!(i < x.rows())) fail(ErrorKind::dimension, "gather_rows: row " + std::to_string(i) + " out of range for " + shape_string(x.shape()));
  }
  Tensor<T> out({index.size(), c});
  auto in = x.values();
  auto y = out.values();
  for (std::size_t k = 0; k < index.size(); ++k)
    std::copy_n(in.begin() + index[k] * c, c, y.begin() + k * c);
  if (tape.wants_grad({&x})) {
    tape.record(out, {x}, [index = std::move(index), c](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      auto& gx = *gin[0];
      for (std::size_t k = 0; k < index.size(); ++k)
        for (std::size_t j = 0; j < c; ++j) gx[index[k] * c + j] += g[k * c + j];
    });
  }
  return out;
}

template <class T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& x, std::size_t start, std::size_t count) {
  require_matrix(x, "slice_rows");
  if (!(count >= 1 && start + count <= x.rows())) fail(ErrorKind::dimension, "slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) + ") out of range for " +
              shape_string(x.shape()));
  std::vector<std::size_t> index(count);
  for (std::size_t k = 0; k < count; ++k) index[k] = start + k;
  return gather_rows(tape, x, std::move(index));
}

template <class T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& x, std::size_t start, std::size_t count) {
  require_matrix(x, "slice_cols");
  const std::size_t r = x.rows(), c = x.cols();
  if (!(count >= 1 && start + count <= c)) fail(ErrorKind::dimension, "slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) + ") out of range for " +
              shape_string(x.shape()));
  Tensor<T> out({r, count});
  auto in = x.values();
  auto y = out.values();
  for (std::size_t i = 0; i < r; ++i) std::copy_n(in.begin() + i * c + start, count, y.begin() + i * count);
  if (tape.wants_grad({&x})) {
    tape.record(out, {x}, [r, c, start, count](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      auto& gx = *gin[0];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) gx[i * c + start + j] += g[i * count + j];
    });
  }
  return out;
}

template <class T>
Tensor<T> element(Tape<T>& tape, const Tensor<T>& x, std::size_t index) {
  if (!(index < x.size())) fail(ErrorKind::contract, "element: index " + std::to_string(index) + " out of range for " + shape_string(x.shape()));
  auto out = Tensor<T>::scalar(x.values()[index]);
  if (tape.wants_grad({&x})) {
    tape.record(out, {x}, [index](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      (*gin[0])[index] += g[0];
    });
  }
  return out;
}

template <class T>
Tensor<T> cumprod(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t c = x.cols();
  const std::size_t r = x.size() / c;
  Tensor<T> out(x.shape());
  auto in = x.values();
  auto y = out.values();
  for (std::size_t i = 0; i < r; ++i) {
    T running{1};
    for (std::size_t j = 0; j < c; ++j) {
      running *= in[i * c + j];
      y[i * c + j] = running;
    }
  }
  if (tape.wants_grad({&x})) {
    tape.record(out, {x}, [x, r, c](std::span<const T> g, std::span<std::vector<T>* const> gin) {
      // d y_j / d x_k = Π_{l ≤ j, l ≠ k} x_l for k ≤ j; evaluated directly so
      // zeros in x need no special casing.
      auto in = x.values();
      auto& gx = *gin[0];
      for (std::size_t i = 0; i < r; ++i) {
        const T* xi = in.data() + i * c;
        for (std::size_t k = 0; k < c; ++k) {
          T prefix{1};
          for (std::size_t l = 0; l < k; ++l) prefix *= xi[l];
          T acc{0};
          T suffix{1};
          for (std::size_t j = k; j < c; ++j) {
            if (j > k) suffix *= xi[j];
            acc += g[i * c + j] * prefix * suffix;
          }
          gx[i * c + k] += acc;
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> pinv_init(Tape<T>& tape, const Tensor<T>& x) {
  require_matrix(x, "pinv_init");
  const std::size_t n = x.rows();
  if (!(x.cols() == n)) fail(ErrorKind::dimension, "pinv_init: expected a square matrix, got " + shape_string(x.shape()));
  auto in = x.values();
  std::size_t best_row = 0, best_col = 0;
  T row_max{-1}, col_max{-1};
  for (std::size_t i = 0; i < n; ++i) {
    T s{0};
    for (std::size_t j = 0; j < n; ++j) s += std::abs(in[i * n + j]);
    if (s > row_max) {
      row_max = s;
      best_row = i;
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    T s{0};
    for (std::size_t i = 0; i < n; ++i) s += std::abs(in[i * n + j]);
    if (s > col_max) {
      col_max = s;
      best_col = j;
    }
  }
  const T denom = row_max * col_max;
  require(denom > T{0}, ErrorKind::non_finite, "pinv_init: zero matrix");
  Tensor<T> out(x.shape());
  auto y = out.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * n + i] = in[i * n + j] / denom;

  if (tape.wants_grad({&x})) {
    tape.record(out, {x}, [x, n, best_row, best_col, row_max, col_max, denom](
                              std::span<const T> g, std::span<std::vector<T>* const> gin) {
      auto in = x.values();
      auto& gx = *gin[0];
      // out = xᵀ / (R·C): direct term plus the dependence of R and C on x.
      T s{0};
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          gx[i * n + j] += g[j * n + i] / denom;
          s += g[j * n + i] * in[i * n + j];
        }
      const T d_denom = -s / (denom * denom);
      const T d_row = d_denom * col_max;
      const T d_col = d_denom * row_max;
      auto sign = [](T v) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); };
      for (std::size_t j = 0; j < n; ++j) gx[best_row * n + j] += d_row * sign(in[best_row * n + j]);
      for (std::size_t i = 0; i < n; ++i) gx[i * n + best_col] += d_col * sign(in[i * n + best_col]);
    });
  }
  return out;
}

template <class T>
Tensor<T> depthwise_conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, std::size_t group_width) {
  require_matrix(x, "depthwise_conv1d");
  require_matrix(weight, "depthwise_conv1d");
  const std::size_t n = x.rows(), c = x.cols();
  const std::size_t groups = weight.rows(), kernel = weight.cols();
  if (!(group_width >= 1 && groups * group_width == c)) fail(ErrorKind::dimension, "depthwise_conv1d: weight " + shape_string(weight.shape()) + " with group width " +
              std::to_string(group_width) + " does not cover input " + shape_string(x.shape()));
  require(kernel % 2 == 1, ErrorKind::configuration, "depthwise_conv1d: kernel must be odd");
  const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
  const auto rows = static_cast<std::ptrdiff_t>(n);

  Tensor<T> out(x.shape());
  auto in = x.values();
  auto w = weight.values();
  auto y = out.values();
  for (std::ptrdiff_t t = 0; t < rows; ++t) {
    for (std::size_t tap = 0; tap < kernel; ++tap) {
      const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(tap) - half;
      if (src < 0 || src >= rows) continue;
      for (std::size_t ch = 0; ch < c; ++ch) y[t * c + ch] += w[(ch / group_width) * kernel + tap] * in[src * c + ch];
    }
  }
  if (tape.wants_grad({&x, &weight})) {
    tape.record(out, {x, weight},
                [x, weight, rows, c, kernel, half, group_width](std::span<const T> g,
                                                                std::span<std::vector<T>* const> gin) {
                  auto in = x.values();
                  auto w = weight.values();
                  for (std::ptrdiff_t t = 0; t < rows; ++t) {
                    for (std::size_t tap = 0; tap < kernel; ++tap) {
                      const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(tap) - half;
                      if (src < 0 || src >= rows) continue;
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        const std::size_t wi = (ch / group_width) * kernel + tap;
                        if (gin[0]) (*gin[0])[src * c + ch] += g[t * c + ch] * w[wi];
                        if (gin[1]) (*gin[1])[wi] += g[t * c + ch] * in[src * c + ch];
                      }
                    }
                  }
                });
  }
  return out;
}

template <class T>
Tensor<T> depthwise_conv2d(Tape<T>& tape, const Tensor<T>& x, std::size_t side, const Tensor<T>& weight,
                           std::size_t kernel, const Tensor<T>& bias) {
  require_matrix(x, "depthwise_conv2d");
  const std::size_t c = x.cols();
  if (!(x.rows() == side * side)) fail(ErrorKind::dimension, "depthwise_conv2d: " + shape_string(x.shape()) + " is not a " + std::to_string(side) + "x" +
              std::to_string(side) + " grid");
  require(kernel % 2 == 1, ErrorKind::configuration, "depthwise_conv2d: kernel must be odd");
  if (!(weight.size() == c * kernel * kernel && bias.size() == c)) fail(ErrorKind::dimension, "depthwise_conv2d: weight " + shape_string(weight.shape()) + " / bias " + shape_string(bias.shape()) +
              " do not match " + std::to_string(c) + " channels with kernel " + std::to_string(kernel));
  const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
  const auto s = static_cast<std::ptrdiff_t>(side);
  const std::size_t kk = kernel * kernel;

  Tensor<T> out(x.shape());
  auto in = x.values();
  auto w = weight.values();
  auto b = bias.values();
  auto y = out.values();
  for (std::ptrdiff_t r = 0; r < s; ++r) {
    for (std::ptrdiff_t col = 0; col < s; ++col) {
      T* yo = y.data() + (r * s + col) * c;
      for (std::size_t ch = 0; ch < c; ++ch) yo[ch] = b[ch];
      for (std::ptrdiff_t dr = -half; dr <= half; ++dr) {
        const std::ptrdiff_t rr = r + dr;
        if (rr < 0 || rr >= s) continue;
        for (std::ptrdiff_t dc = -half; dc <= half; ++dc) {
          const std::ptrdiff_t cc = col + dc;
          if (cc < 0 || cc >= s) continue;
          const std::size_t tap = static_cast<std::size_t>((dr + half) * static_cast<std::ptrdiff_t>(kernel) + dc + half);
          const T* xi = in.data() + (rr * s + cc) * c;
          for (std::size_t ch = 0; ch < c; ++ch) yo[ch] += w[ch * kk + tap] * xi[ch];
        }
      }
    }
  }
  if (tape.wants_grad({&x, &weight, &bias})) {
    tape.record(out, {x, weight, bias},
                [x, weight, s, c, kernel, kk, half](std::span<const T> g, std::span<std::vector<T>* const> gin) {
                  auto in = x.values();
                  auto w = weight.values();
                  for (std::ptrdiff_t r = 0; r < s; ++r) {
                    for (std::ptrdiff_t col = 0; col < s; ++col) {
                      const T* go = g.data() + (r * s + col) * c;
                      if (gin[2])
                        for (std::size_t ch = 0; ch < c; ++ch) (*gin[2])[ch] += go[ch];
                      for (std::ptrdiff_t dr = -half; dr <= half; ++dr) {
                        const std::ptrdiff_t rr = r + dr;
                        if (rr < 0 || rr >= s) continue;
                        for (std::ptrdiff_t dc = -half; dc <= half; ++dc) {
                          const std::ptrdiff_t cc = col + dc;
                          if (cc < 0 || cc >= s) continue;
                          const std::size_t tap =
                              static_cast<std::size_t>((dr + half) * static_cast<std::ptrdiff_t>(kernel) + dc + half);
                          const std::size_t src = static_cast<std::size_t>(rr * s + cc) * c;
                          for (std::size_t ch = 0; ch < c; ++ch) {
                            if (gin[0]) (*gin[0])[src + ch] += go[ch] * w[ch * kk + tap];
                            if (gin[1]) (*gin[1])[ch * kk + tap] += go[ch] * in[src + ch];
                          }
                        }
                      }
                    }
                  }
                });
  }
  return out;
}

#define MILSURV_INSTANTIATE_OPS(T)                                                                       \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> transpose(Tape<T>&, const Tensor<T>&);                                             \
  template Tensor<T> linear(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> affine(Tape<T>&, const Tensor<T>&, T, T);                                          \
  template Tensor<T> scaled_identity_minus(Tape<T>&, T, const Tensor<T>&);                              \
  template Tensor<T> activation(Tape<T>&, const Tensor<T>&, Activation, int);                           \
  template Tensor<T> relu(Tape<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> tanh(Tape<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> sigmoid(Tape<T>&, const Tensor<T>&);                                               \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&, int);                                          \
  template Tensor<T> log(Tape<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> clamp(Tape<T>&, const Tensor<T>&, T, T);                                           \
  template Tensor<T> reduce(Tape<T>&, const Tensor<T>&, Reduce);                                        \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> abs_sum(Tape<T>&, const Tensor<T>&);                                               \
  template Tensor<T> layer_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
  template Tensor<T> dropout(Tape<T>&, const Tensor<T>&, double, Rng&, bool);                           \
  template Tensor<T> concat_rows(Tape<T>&, std::span<const Tensor<T>>);                                 \
  template Tensor<T> concat_cols(Tape<T>&, std::span<const Tensor<T>>);                                 \
  template Tensor<T> gather_rows(Tape<T>&, const Tensor<T>&, std::vector<std::size_t>);                 \
  template Tensor<T> slice_rows(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> slice_cols(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> element(Tape<T>&, const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> cumprod(Tape<T>&, const Tensor<T>&);                                               \
  template Tensor<T> pinv_init(Tape<T>&, const Tensor<T>&);                                             \
  template Tensor<T> depthwise_conv1d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);       \
  template Tensor<T> depthwise_conv2d(Tape<T>&, const Tensor<T>&, std::size_t, const Tensor<T>&,        \
                                      std::size_t, const Tensor<T>&);

MILSURV_INSTANTIATE_OPS(float)
MILSURV_INSTANTIATE_OPS(double)

#undef MILSURV_INSTANTIATE_OPS

}  // namespace milsurv::ops
