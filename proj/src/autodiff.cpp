#include "mixmo/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mixmo {

namespace {

// Rows are short; library memcpy/memset calls cost more than the copies.
#if defined(__GNUC__) && !defined(__clang__)
#define MIXMO_INLINE_LOOPS __attribute__((optimize("no-tree-loop-distribute-patterns")))
#else
#define MIXMO_INLINE_LOOPS
#endif

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// Output columns [lo, hi) of a kernel tap whose input column ox * stride + kx - pad is in range.
inline void valid_columns(const ConvGeometry& g, std::size_t kx, std::size_t& lo, std::size_t& hi) {
  lo = kx >= g.pad ? 0 : (g.pad - kx + g.stride - 1) / g.stride;
  if (kx >= g.w + g.pad) {
    lo = hi = 0;
    return;
  }
  const std::size_t limit = g.w + g.pad - kx;  // ix < w  <=>  ox * stride < limit
  hi = std::min(g.wo, (limit + g.stride - 1) / g.stride);
  if (hi < lo) hi = lo;
}

// Column matrix [cin*k*k, (oy1-oy0)*wo] of output rows [oy0, oy1).
template <typename T>
MIXMO_INLINE_LOOPS void im2col(const T* in, const ConvGeometry& g, std::size_t oy0, std::size_t oy1, T* col) {
  const std::size_t hw = (oy1 - oy0) * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    const T* plane = in + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        std::size_t lo, hi;
        valid_columns(g, kx, lo, hi);
        for (std::size_t oy = oy0; oy < oy1; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + (oy - oy0) * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            for (std::size_t ox = 0; ox < g.wo; ++ox) dst[ox] = T(0);
            continue;
          }
          for (std::size_t ox = 0; ox < lo; ++ox) dst[ox] = T(0);
          for (std::size_t ox = hi; ox < g.wo; ++ox) dst[ox] = T(0);
          const T* src = plane + static_cast<std::size_t>(iy) * g.w + (lo * g.stride + kx - g.pad);
          if (g.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox - lo];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox, src += g.stride) dst[ox] = *src;
          }
        }
      }
    }
  }
}

template <typename T>
MIXMO_INLINE_LOOPS void col2im(const T* col, const ConvGeometry& g, std::size_t oy0, std::size_t oy1, T* out) {
  const std::size_t hw = (oy1 - oy0) * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    T* plane = out + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * hw;
        std::size_t lo, hi;
        valid_columns(g, kx, lo, hi);
        for (std::size_t oy = oy0; oy < oy1; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.w + (lo * g.stride + kx - g.pad);
          const T* src = row + (oy - oy0) * g.wo;
          if (g.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox - lo] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox, dst += g.stride) *dst += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
ConvGeometry conv_geometry(const Shape& input, const Tensor<T>& weight, std::size_t stride,
                           std::size_t pad) {
  if (input.size() != 4) {
    throw ShapeError("conv2d input: expected rank 4, got shape " + shape_str(input));
  }
  require_rank(weight, 4, "conv2d weight");
  if (weight.dim(1) != input[1]) {
    throw ShapeError("conv2d: input channels (dim 1) " + std::to_string(input[1]) +
                     " != weight in-channels (dim 1) " + std::to_string(weight.dim(1)));
  }
  if (weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square with odd extent, got " +
                     shape_str(weight.shape()));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t k = weight.dim(2);
  const std::size_t h = input[2], w = input[3];
  if (h + 2 * pad < k) {
    throw ShapeError("conv2d: height (dim 2) " + std::to_string(h) + " + 2*pad < kernel " +
                     std::to_string(k));
  }
  if (w + 2 * pad < k) {
    throw ShapeError("conv2d: width (dim 3) " + std::to_string(w) + " + 2*pad < kernel " +
                     std::to_string(k));
  }
  return {input[1], h, w, k, stride, pad, (h + 2 * pad - k) / stride + 1,
          (w + 2 * pad - k) / stride + 1};
}

// Output rows per block so that a column block stays around 256 KiB.
template <typename T>
std::size_t rows_per_block(const ConvGeometry& g) {
  const std::size_t budget = (std::size_t{256} << 10) / sizeof(T);
  const std::size_t per_row = g.cin * g.k * g.k * g.wo;
  return std::clamp<std::size_t>(budget / std::max<std::size_t>(per_row, 1), 1, g.ho);
}

// Sum of f(0..n-1) over fixed lanes. The order depends only on n, never on
// pointer alignment, so repeated calls are bit-identical.
template <typename T, typename F>
T lane_sum(std::size_t n, F f) {
  constexpr std::size_t kLanes = 16;
  T acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t k = 0; k < kLanes; ++k) acc[k] += f(i + k);
  T total = T(0);
  for (; i < n; ++i) total += f(i);
  for (std::size_t k = 0; k < kLanes; ++k) total += acc[k];
  return total;
}

template <typename T>
using BlockMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstBlockMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

}  // namespace

template <std::floating_point T>
void Layer<T>::require_forward() const {
  if (!has_forward_) throw std::logic_error("backward called before a matching forward");
}

// --- conv2d ---------------------------------------------------------------

namespace {

// Shared forward. When `cache` is given it receives every sample's column
// blocks back to back (sample s at s * kdim * hw, block at kdim * oy0 * wo).
template <typename T>
Tensor<T> conv_forward_impl(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride,
                            std::size_t pad, const Tensor<T>* bias, std::vector<T>* cache) {
  const ConvGeometry g = conv_geometry(input.shape(), weight, stride, pad);
  const std::size_t n = input.dim(0), cout = weight.dim(0);
  const std::size_t kdim = g.cin * g.k * g.k, hw = g.ho * g.wo;
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
    throw ShapeError("conv2d: bias (dim 0) must equal out-channels " + std::to_string(cout));
  }
  Tensor<T> out({n, cout, g.ho, g.wo});
  ConstMatMap<T> wmat(weight.ptr(), cout, kdim);
  const std::size_t rows = rows_per_block<T>(g);
  std::vector<T> scratch;
  if (!g.pointwise()) {
    if (cache) {
      cache->resize(n * kdim * hw);
    } else {
      scratch.resize(kdim * rows * g.wo);
    }
  }
  for (std::size_t s = 0; s < n; ++s) {
    T* dst = out.slice(s).data();
    if (g.pointwise()) {
      MatMap<T>(dst, cout, hw).noalias() = wmat * ConstMatMap<T>(input.slice(s).data(), kdim, hw);
    } else {
      for (std::size_t oy0 = 0; oy0 < g.ho; oy0 += rows) {
        const std::size_t oy1 = std::min(g.ho, oy0 + rows), cols = (oy1 - oy0) * g.wo;
        T* col = cache ? cache->data() + s * kdim * hw + kdim * oy0 * g.wo : scratch.data();
        im2col(input.slice(s).data(), g, oy0, oy1, col);
        BlockMap<T>(dst + oy0 * g.wo, cout, cols, Eigen::OuterStride<>(hw)).noalias() =
            wmat * ConstMatMap<T>(col, kdim, cols);
      }
    }
    if (bias) {
      MatMap<T> y(dst, cout, hw);
      for (std::size_t c = 0; c < cout; ++c) y.row(c).array() += (*bias)[c];
    }
  }
  return out;
}

}  // namespace

template <std::floating_point T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride,
                         std::size_t pad, const Tensor<T>* bias) {
  return conv_forward_impl(input, weight, stride, pad, bias, static_cast<std::vector<T>*>(nullptr));
}

template <std::floating_point T>
Conv2d<T>::Conv2d(std::string name, const Conv2dOptions& opt)
    : opt_(opt),
      weight_(name + ".weight", Tensor<T>({opt.out_channels, opt.in_channels, opt.kernel, opt.kernel}),
              true) {
  if (opt.bias) bias_.emplace(name + ".bias", Tensor<T>({opt.out_channels}), false);
}

template <std::floating_point T>
void Conv2d<T>::init(Rng& rng) {
  const double fan_in = static_cast<double>(opt_.in_channels * opt_.kernel * opt_.kernel);
  const double stddev = std::sqrt(2.0 / fan_in);
  for (auto& v : weight_.value.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  if (bias_) bias_->value.fill(T(0));
}

template <std::floating_point T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, Mode) {
  const bool pointwise = opt_.kernel == 1 && opt_.stride == 1 && opt_.pad == 0;
  Tensor<T> y = conv_forward_impl(x, weight_.value, opt_.stride, opt_.pad, bias_ ? &bias_->value : nullptr,
                                  pointwise ? nullptr : &cols_);
  in_shape_ = x.shape();
  input_ = pointwise ? x : Tensor<T>();
  this->has_forward_ = true;
  return y;
}

template <std::floating_point T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& grad_out) {
  this->require_forward();
  const ConvGeometry g = conv_geometry(in_shape_, weight_.value, opt_.stride, opt_.pad);
  const std::size_t n = in_shape_[0], cout = opt_.out_channels;
  const std::size_t kdim = g.cin * g.k * g.k, hw = g.ho * g.wo;
  if (grad_out.shape() != Shape{n, cout, g.ho, g.wo}) {
    throw ShapeError("conv2d backward: grad shape " + shape_str(grad_out.shape()));
  }
  Tensor<T> grad_in(in_shape_);
  ConstMatMap<T> wmat(weight_.value.ptr(), cout, kdim);
  MatMap<T> dw(weight_.grad.ptr(), cout, kdim);
  const std::size_t rows = rows_per_block<T>(g);
  std::vector<T> dcol(g.pointwise() ? 0 : kdim * rows * g.wo);
  for (std::size_t s = 0; s < n; ++s) {
    const T* dys = grad_out.slice(s).data();
    if (g.pointwise()) {
      ConstMatMap<T> dy(dys, cout, hw);
      ConstMatMap<T> xin(input_.slice(s).data(), kdim, hw);
      dw.noalias() += dy * xin.transpose();
      MatMap<T>(grad_in.slice(s).data(), kdim, hw).noalias() = wmat.transpose() * dy;
    } else {
      for (std::size_t oy0 = 0; oy0 < g.ho; oy0 += rows) {
        const std::size_t oy1 = std::min(g.ho, oy0 + rows), cols = (oy1 - oy0) * g.wo;
        ConstBlockMap<T> dy(dys + oy0 * g.wo, cout, cols, Eigen::OuterStride<>(hw));
        const T* col = cols_.data() + s * kdim * hw + kdim * oy0 * g.wo;
        dw.noalias() += dy * ConstMatMap<T>(col, kdim, cols).transpose();
        MatMap<T>(dcol.data(), kdim, cols).noalias() = wmat.transpose() * dy;
        col2im(dcol.data(), g, oy0, oy1, grad_in.slice(s).data());
      }
    }
    if (bias_) {
      for (std::size_t c = 0; c < cout; ++c) {
        const T* row = dys + c * hw;
        bias_->grad[c] += lane_sum<T>(hw, [row](std::size_t i) { return row[i]; });
      }
    }
  }
  return grad_in;
}

template <std::floating_point T>
std::vector<Param<T>*> Conv2d<T>::params() {
  std::vector<Param<T>*> out{&weight_};
  if (bias_) out.push_back(&*bias_);
  return out;
}

// --- batchnorm2d ------------------------------------------------------------

template <std::floating_point T>
BatchNorm2d<T>::BatchNorm2d(std::string name, std::size_t channels)
    : name_(name),
      gamma_(name + ".gamma", Tensor<T>({channels}, T(1)), false),
      beta_(name + ".beta", Tensor<T>({channels}, T(0)), false),
      running_mean_({channels}, T(0)),
      running_var_({channels}, T(1)) {}

template <std::floating_point T>
std::vector<Buffer<T>> BatchNorm2d<T>::buffers() {
  return {{name_ + ".running_mean", &running_mean_}, {name_ + ".running_var", &running_var_}};
}

template <std::floating_point T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, Mode mode) {
  require_rank(x, 4, "batchnorm2d input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c != gamma_.value.size()) {
    throw ShapeError("batchnorm2d: channels (dim 1) " + std::to_string(c) + " != " +
                     std::to_string(gamma_.value.size()));
  }
  const std::size_t count = n * hw;
  if (mode == Mode::Train && count < 2) {
    throw std::invalid_argument("batchnorm2d: train mode needs N*H*W >= 2, got " +
                                std::to_string(count));
  }
  Tensor<T> out(x.shape());
  xhat_ = Tensor<T>(x.shape());
  inv_std_.assign(c, T(0));
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (mode == Mode::Train) {
      // Per-plane vectorized partial sums, combined in double in sample order.
      double sum = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* xp = x.ptr() + (s * c + ch) * hw;
        sum += lane_sum<T>(hw, [xp](std::size_t i) { return xp[i]; });
      }
      mean = sum / static_cast<double>(count);
      const T mt = static_cast<T>(mean);
      double sq = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* xp = x.ptr() + (s * c + ch) * hw;
        sq += lane_sum<T>(hw, [xp, mt](std::size_t i) { return (xp[i] - mt) * (xp[i] - mt); });
      }
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      running_mean_[ch] = static_cast<T>(kMomentum * running_mean_[ch] + (1.0 - kMomentum) * mean);
      running_var_[ch] = static_cast<T>(kMomentum * running_var_[ch] + (1.0 - kMomentum) * unbiased);
    } else {
      mean = running_mean_[ch];
      var = running_var_[ch];
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(var + kEps));
    const T m = static_cast<T>(mean);
    inv_std_[ch] = inv;
    const T gm = gamma_.value[ch], bt = beta_.value[ch];
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t off = (s * c + ch) * hw;
      const T* xp = x.ptr() + off;
      T* xh = xhat_.ptr() + off;
      T* o = out.ptr() + off;
      for (std::size_t i = 0; i < hw; ++i) {
        xh[i] = (xp[i] - m) * inv;
        o[i] = gm * xh[i] + bt;
      }
    }
  }
  last_mode_ = mode;
  this->has_forward_ = true;
  return out;
}

template <std::floating_point T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& grad_out) {
  this->require_forward();
  xhat_.require_same_shape(grad_out, "batchnorm2d backward");
  const std::size_t n = grad_out.dim(0), c = grad_out.dim(1), hw = grad_out.dim(2) * grad_out.dim(3);
  const double count = static_cast<double>(n * hw);
  Tensor<T> grad_in(grad_out.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t off = (s * c + ch) * hw;
      const T* dy = grad_out.ptr() + off;
      const T* xh = xhat_.ptr() + off;
      sum_dy += lane_sum<T>(hw, [dy](std::size_t i) { return dy[i]; });
      sum_dy_xhat += lane_sum<T>(hw, [dy, xh](std::size_t i) { return dy[i] * xh[i]; });
    }
    gamma_.grad[ch] += static_cast<T>(sum_dy_xhat);
    beta_.grad[ch] += static_cast<T>(sum_dy);
    const T scale = gamma_.value[ch] * inv_std_[ch];
    const bool train = last_mode_ == Mode::Train;
    const T mean_dy = train ? static_cast<T>(sum_dy / count) : T(0);
    const T mean_dy_xhat = train ? static_cast<T>(sum_dy_xhat / count) : T(0);
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t off = (s * c + ch) * hw;
      const T* dy = grad_out.ptr() + off;
      const T* xh = xhat_.ptr() + off;
      T* gi = grad_in.ptr() + off;
      for (std::size_t i = 0; i < hw; ++i) gi[i] = scale * (dy[i] - mean_dy - xh[i] * mean_dy_xhat);
    }
  }
  return grad_in;
}

// --- relu -----------------------------------------------------------------

template <std::floating_point T>
Tensor<T> Relu<T>::forward(const Tensor<T>& x, Mode) {
  input_ = x;
  this->has_forward_ = true;
  Tensor<T> out(x.shape());
  const T* in = x.ptr();
  T* o = out.ptr();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = std::max(in[i], T(0));
  return out;
}

template <std::floating_point T>
Tensor<T> Relu<T>::backward(const Tensor<T>& grad_out) {
  this->require_forward();
  input_.require_same_shape(grad_out, "relu backward");
  Tensor<T> g(grad_out.shape());
  const T* in = input_.ptr();
  const T* go = grad_out.ptr();
  T* o = g.ptr();
  for (std::size_t i = 0; i < g.size(); ++i) o[i] = in[i] > T(0) ? go[i] : T(0);
  return g;
}

// --- dense ----------------------------------------------------------------

template <std::floating_point T>
Dense<T>::Dense(std::string name, std::size_t in, std::size_t out)
    : weight_(name + ".weight", Tensor<T>({out, in}), true),
      bias_(name + ".bias", Tensor<T>({out}), false) {}

template <std::floating_point T>
void Dense<T>::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(weight_.value.dim(1)));
  for (auto& v : weight_.value.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  for (auto& v : bias_.value.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <std::floating_point T>
Tensor<T> Dense<T>::forward(const Tensor<T>& x, Mode) {
  require_rank(x, 2, "dense input");
  const std::size_t n = x.dim(0), in = weight_.value.dim(1), out = weight_.value.dim(0);
  if (x.dim(1) != in) {
    throw ShapeError("dense: input features (dim 1) " + std::to_string(x.dim(1)) + " != " +
                     std::to_string(in));
  }
  input_ = x;
  this->has_forward_ = true;
  Tensor<T> y({n, out});
  MatMap<T> ym(y.ptr(), n, out);
  ym.noalias() = ConstMatMap<T>(x.ptr(), n, in) * ConstMatMap<T>(weight_.value.ptr(), out, in).transpose();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < out; ++c) ym(r, c) += bias_.value[c];
  }
  return y;
}

template <std::floating_point T>
Tensor<T> Dense<T>::backward(const Tensor<T>& grad_out) {
  this->require_forward();
  const std::size_t n = input_.dim(0), in = weight_.value.dim(1), out = weight_.value.dim(0);
  if (grad_out.shape() != Shape{n, out}) {
    throw ShapeError("dense backward: grad shape " + shape_str(grad_out.shape()));
  }
  ConstMatMap<T> dy(grad_out.ptr(), n, out);
  MatMap<T>(weight_.grad.ptr(), out, in).noalias() += dy.transpose() * ConstMatMap<T>(input_.ptr(), n, in);
  for (std::size_t c = 0; c < out; ++c) bias_.grad[c] += dy.col(c).sum();
  Tensor<T> dx({n, in});
  MatMap<T>(dx.ptr(), n, in).noalias() = dy * ConstMatMap<T>(weight_.value.ptr(), out, in);
  return dx;
}

// --- global average pool ---------------------------------------------------

template <std::floating_point T>
Tensor<T> GlobalAvgPool<T>::forward(const Tensor<T>& x, Mode) {
  require_rank(x, 4, "global-avg-pool input");
  in_shape_ = x.shape();
  this->has_forward_ = true;
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += x[i * hw + j];
    out[i] = static_cast<T>(s / static_cast<double>(hw));
  }
  return out;
}

template <std::floating_point T>
Tensor<T> GlobalAvgPool<T>::backward(const Tensor<T>& grad_out) {
  this->require_forward();
  const std::size_t n = in_shape_[0], c = in_shape_[1], hw = in_shape_[2] * in_shape_[3];
  if (grad_out.shape() != Shape{n, c}) {
    throw ShapeError("global-avg-pool backward: grad shape " + shape_str(grad_out.shape()));
  }
  Tensor<T> g(in_shape_);
  const T inv = T(1) / static_cast<T>(hw);
  for (std::size_t i = 0; i < n * c; ++i) {
    const T v = grad_out[i] * inv;
    std::fill(g.ptr() + i * hw, g.ptr() + (i + 1) * hw, v);
  }
  return g;
}

// --- scale / mask-mul / add ------------------------------------------------

template <std::floating_point T>
Tensor<T> Scale<T>::forward(const Tensor<T>& x, Mode) {
  this->has_forward_ = true;
  Tensor<T> out = x;
  out *= factor_;
  return out;
}

template <std::floating_point T>
Tensor<T> Scale<T>::backward(const Tensor<T>& grad_out) {
  this->require_forward();
  Tensor<T> g = grad_out;
  g *= factor_;
  return g;
}

namespace {
template <typename T>
void check_mask(const Tensor<T>& x, const Tensor<T>& mask) {
  require_rank(x, 4, "mask-mul input");
  require_rank(mask, 4, "mask-mul mask");
  if (mask.dim(0) != x.dim(0)) throw ShapeError("mask-mul: batch (dim 0) mismatch");
  if (mask.dim(1) != 1) throw ShapeError("mask-mul: mask channels (dim 1) must be 1");
  if (mask.dim(2) != x.dim(2)) throw ShapeError("mask-mul: height (dim 2) mismatch");
  if (mask.dim(3) != x.dim(3)) throw ShapeError("mask-mul: width (dim 3) mismatch");
}

template <typename T>
Tensor<T> broadcast_mul(const Tensor<T>& x, const Tensor<T>& mask) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  for (std::size_t s = 0; s < n; ++s) {
    const T* m = mask.ptr() + s * hw;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) out[off + i] = x[off + i] * m[i];
    }
  }
  return out;
}
}  // namespace

template <std::floating_point T>
Tensor<T> MaskMul<T>::forward(const Tensor<T>& x, Mode) {
  check_mask(x, mask_);
  this->has_forward_ = true;
  return broadcast_mul(x, mask_);
}

template <std::floating_point T>
Tensor<T> MaskMul<T>::backward(const Tensor<T>& grad_out) {
  this->require_forward();
  check_mask(grad_out, mask_);
  return broadcast_mul(grad_out, mask_);
}

template <std::floating_point T>
Tensor<T> Add<T>::forward(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  out += b;
  return out;
}

// --- softmax / cross-entropy ---------------------------------------------------

template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_rank(logits, 2, "softmax logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const T* z = logits.ptr() + r * k;
    const T mx = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(z[j] - mx));
    for (std::size_t j = 0; j < k; ++j) {
      p[r * k + j] = static_cast<T>(std::exp(static_cast<double>(z[j] - mx)) / sum);
    }
  }
  return p;
}

namespace {
template <typename T>
void check_targets(const Tensor<T>& logits, const Tensor<T>& targets) {
  require_rank(logits, 2, "cross-entropy logits");
  logits.require_same_shape(targets, "cross-entropy targets");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (std::size_t r = 0; r < n; ++r) {
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const T t = targets[r * k + j];
      if (!(t >= T(0))) {
        throw std::invalid_argument("cross-entropy: target row " + std::to_string(r) +
                                    " has a negative entry");
      }
      sum += t;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw std::invalid_argument("cross-entropy: target row " + std::to_string(r) +
                                  " sums to " + std::to_string(sum) + ", not 1");
    }
  }
}
}  // namespace

template <std::floating_point T>
std::vector<double> cross_entropy_rows(const Tensor<T>& logits, const Tensor<T>& targets) {
  check_targets(logits, targets);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const T* z = logits.ptr() + r * k;
    const double mx = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - mx);
    const double lse = mx + std::log(sum);
    double ce = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double t = targets[r * k + j];
      if (t != 0.0) ce -= t * (z[j] - lse);
    }
    out[r] = ce;
  }
  return out;
}

template <std::floating_point T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets) {
  const std::vector<double> rows = cross_entropy_rows(logits, targets);
  const std::size_t n = logits.dim(0);
  CrossEntropyResult<T> res;
  double total = 0.0;
  for (double v : rows) total += v;
  res.loss = total / static_cast<double>(n);
  res.grad = softmax(logits);
  const T inv_n = T(1) / static_cast<T>(n);
  for (std::size_t i = 0; i < res.grad.size(); ++i) {
    res.grad[i] = (res.grad[i] - targets[i]) * inv_n;
  }
  return res;
}

#define MIXMO_INSTANTIATE(T)                                                                  \
  template class Layer<T>;                                                                    \
  template class Conv2d<T>;                                                                   \
  template class BatchNorm2d<T>;                                                              \
  template class Relu<T>;                                                                     \
  template class Dense<T>;                                                                    \
  template class GlobalAvgPool<T>;                                                            \
  template class Scale<T>;                                                                    \
  template class MaskMul<T>;                                                                  \
  template struct Add<T>;                                                                     \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, std::size_t,          \
                                    std::size_t, const Tensor<T>*);                           \
  template Tensor<T> softmax(const Tensor<T>&);                                               \
  template std::vector<double> cross_entropy_rows(const Tensor<T>&, const Tensor<T>&);        \
  template CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>&, const Tensor<T>&);

MIXMO_INSTANTIATE(float)
MIXMO_INSTANTIATE(double)

#undef MIXMO_INSTANTIATE

}  // namespace mixmo
