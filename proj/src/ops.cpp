#include "lamp/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace lamp {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// Upper bound on im2col buffer elements per chunk of samples.
constexpr std::size_t kIm2colBudget = std::size_t(1) << 21;

template <class T>
Node<T>& input_node(Node<T>& self, std::size_t i) {
  return *self.inputs[i];
}

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    std::ostringstream os;
    os << op << ": " << what << " must have rank " << rank << ", got " << to_string(s);
    throw ShapeError(os.str());
  }
}

[[noreturn]] void dim_mismatch(const char* op, const char* dim, std::size_t expected,
                               std::size_t actual) {
  std::ostringstream os;
  os << op << ": dimension " << dim << " mismatch (expected " << expected << ", got " << actual
     << ")";
  throw ShapeError(os.str());
}

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
  std::size_t ckk() const { return cin * kh * kw; }
  std::size_t hw_out() const { return oh * ow; }
};

// Output columns [lo, hi) whose input column ox*stride + k - pad is in range.
std::pair<std::size_t, std::size_t> valid_span(std::size_t out, std::size_t in, std::size_t stride,
                                               std::size_t k, std::size_t pad) {
  std::size_t lo = 0;
  if (k < pad) lo = (pad - k + stride - 1) / stride;
  // largest ox with ox*stride + k - pad <= in - 1
  const long top = long(in) - 1 + long(pad) - long(k);
  const std::size_t hi = top < 0 ? 0 : std::min(out, std::size_t(top) / stride + 1);
  return {std::min(lo, hi), hi};
}

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols, std::size_t ld, std::size_t col0) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    const T* xc = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      const auto [ylo, yhi] = valid_span(g.oh, g.h, g.stride, ki, g.pad);
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const auto [xlo, xhi] = valid_span(g.ow, g.w, g.stride, kj, g.pad);
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld + col0;
        std::fill(row, row + ylo * g.ow, T(0));
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          T* dst = row + oy * g.ow;
          const T* src = xc + (oy * g.stride + ki - g.pad) * g.w + kj - g.pad;  // wraps harmlessly for ox < xlo
          std::fill(dst, dst + xlo, T(0));
          if (g.stride == 1) {
            std::copy(src + xlo, src + xhi, dst + xlo);
          } else {
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + xhi, dst + g.ow, T(0));
        }
        std::fill(row + yhi * g.ow, row + g.oh * g.ow, T(0));
      }
    }
  }
}

template <class T>
void col2im(const T* cols, const ConvGeometry& g, std::size_t ld, std::size_t col0, T* gx) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    T* gc = gx + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      const auto [ylo, yhi] = valid_span(g.oh, g.h, g.stride, ki, g.pad);
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const auto [xlo, xhi] = valid_span(g.ow, g.w, g.stride, kj, g.pad);
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld + col0;
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          T* dst = gc + (oy * g.stride + ki - g.pad) * g.w + kj - g.pad;
          const T* src = row + oy * g.ow;
          if (g.stride == 1) {
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox] += src[ox];
          } else {
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

std::size_t samples_per_chunk(const ConvGeometry& g) {
  const std::size_t per_sample = g.ckk() * g.hw_out();
  return std::max<std::size_t>(1, std::min(g.n, kIm2colBudget / std::max<std::size_t>(1, per_sample)));
}

enum class Broadcast { Same, LeftScalar, RightScalar };

template <class T>
Broadcast check_binary(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (a.rank() == 0) return Broadcast::LeftScalar;
  if (b.rank() == 0) return Broadcast::RightScalar;
  std::ostringstream os;
  os << op << ": shapes " << to_string(a.shape()) << " and " << to_string(b.shape())
     << " are incompatible (only identical shapes or a rank-0 operand are allowed)";
  throw ShapeError(os.str());
}

// Elementwise binary op; df_da/df_db return the partial derivatives at (x, y).
template <class T, class F, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f, DA df_da, DB df_db) {
  const Broadcast mode = check_binary(a, b, op);
  const Shape shape = mode == Broadcast::LeftScalar ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  auto ad = a.data();
  auto bd = b.data();
  auto at = [&](std::size_t i) { return mode == Broadcast::LeftScalar ? ad[0] : ad[i]; };
  auto bt = [&](std::size_t i) { return mode == Broadcast::RightScalar ? bd[0] : bd[i]; };
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(at(i), bt(i));
  return make_result<T>(
      shape, std::move(out), {a, b},
      [mode, df_da, df_db](Node<T>& self) {
        Node<T>& na = input_node(self, 0);
        Node<T>& nb = input_node(self, 1);
        const auto& g = *self.grad;
        const std::size_t n = g.size();
        auto xa = [&](std::size_t i) { return mode == Broadcast::LeftScalar ? na.data[0] : na.data[i]; };
        auto xb = [&](std::size_t i) { return mode == Broadcast::RightScalar ? nb.data[0] : nb.data[i]; };
        if (na.requires_grad) {
          auto ga = na.grad_buffer();
          for (std::size_t i = 0; i < n; ++i) {
            ga[mode == Broadcast::LeftScalar ? 0 : i] += g[i] * df_da(xa(i), xb(i));
          }
        }
        if (nb.requires_grad) {
          auto gb = nb.grad_buffer();
          for (std::size_t i = 0; i < n; ++i) {
            gb[mode == Broadcast::RightScalar ? 0 : i] += g[i] * df_db(xa(i), xb(i));
          }
        }
      },
      op);
}

// Elementwise unary op with derivative expressed through input x and output y.
template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& a, const char* op, F f, D df) {
  auto ad = a.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i]);
  return make_result<T>(
      a.shape(), std::move(out), {a},
      [df](Node<T>& self) {
        Node<T>& na = input_node(self, 0);
        if (!na.requires_grad) return;
        auto ga = na.grad_buffer();
        const auto& g = *self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(na.data[i], self.data[i]);
      },
      op);
}

struct AxisPlan {
  Shape out_shape;
  std::vector<std::size_t> out_index;  // input flat index -> output flat index
  std::size_t group = 1;               // elements folded into each output
};

AxisPlan plan_axes(const Shape& in, std::span<const std::size_t> axes) {
  if (axes.empty()) throw ShapeError("reduce: empty axis list");
  std::vector<bool> reduced(in.size(), false);
  for (auto ax : axes) {
    if (ax >= in.size()) {
      throw ShapeError("reduce: axis " + std::to_string(ax) + " invalid for shape " + to_string(in));
    }
    if (reduced[ax]) throw ShapeError("reduce: axis " + std::to_string(ax) + " listed twice");
    reduced[ax] = true;
  }
  AxisPlan plan;
  std::vector<std::size_t> out_stride(in.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    if (reduced[i]) {
      plan.group *= in[i];
    } else {
      out_stride[i] = stride;
      stride *= in[i];
    }
  }
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!reduced[i]) plan.out_shape.push_back(in[i]);
  }
  const std::size_t n = numel(in);
  plan.out_index.resize(n);
  std::vector<std::size_t> idx(in.size(), 0);
  std::size_t o = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    plan.out_index[flat] = o;
    for (std::size_t d = in.size(); d-- > 0;) {
      ++idx[d];
      o += out_stride[d];
      if (idx[d] < in[d]) break;
      o -= out_stride[d] * in[d];
      idx[d] = 0;
    }
  }
  return plan;
}

template <class T>
Tensor<T> reduce_axes(const Tensor<T>& a, std::span<const std::size_t> axes, bool average,
                      const char* op) {
  auto plan = std::make_shared<AxisPlan>(plan_axes(a.shape(), axes));
  const std::size_t out_n = numel(plan->out_shape);
  std::vector<double> acc(out_n, 0.0);
  auto ad = a.data();
  for (std::size_t i = 0; i < ad.size(); ++i) acc[plan->out_index[i]] += ad[i];
  const double scale = average ? 1.0 / double(plan->group) : 1.0;
  std::vector<T> out(out_n);
  for (std::size_t i = 0; i < out_n; ++i) out[i] = T(acc[i] * scale);
  return make_result<T>(
      plan->out_shape, std::move(out), {a},
      [plan, scale](Node<T>& self) {
        Node<T>& na = input_node(self, 0);
        if (!na.requires_grad) return;
        auto ga = na.grad_buffer();
        const auto& g = *self.grad;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T(double(g[plan->out_index[i]]) * scale);
      },
      op);
}

}  // namespace

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t padding) {
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (kernel > in + 2 * padding) {
    throw ShapeError("conv2d: kernel extent " + std::to_string(kernel) +
                     " exceeds padded input extent " + std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  require_rank(input.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  require_rank(bias.shape(), 1, "conv2d", "bias");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (weight.dim(1) != g.cin) dim_mismatch("conv2d", "Cin (weight axis 1)", g.cin, weight.dim(1));
  if (bias.dim(0) != g.cout) dim_mismatch("conv2d", "Cout (bias axis 0)", g.cout, bias.dim(0));
  g.oh = conv_output_size(g.h, g.kh, stride, padding);
  g.ow = conv_output_size(g.w, g.kw, stride, padding);

  const std::size_t hwo = g.hw_out();
  const std::size_t ckk = g.ckk();
  const std::size_t chunk = samples_per_chunk(g);
  const std::size_t in_stride = g.cin * g.h * g.w;
  const std::size_t out_stride = g.cout * hwo;

  std::vector<T> out(g.n * out_stride);
  {
    auto xd = input.data();
    auto bd = bias.data();
    ConstMapMat<T> wmat(weight.data().data(), g.cout, ckk);
    RowMat<T> cols(ckk, chunk * hwo);
    RowMat<T> res(g.cout, chunk * hwo);
    for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
      const std::size_t nb = std::min(chunk, g.n - n0);
      const std::size_t ld = nb * hwo;
      if (std::size_t(cols.cols()) != ld) {
        cols.resize(ckk, ld);
        res.resize(g.cout, ld);
      }
      for (std::size_t s = 0; s < nb; ++s) {
        im2col(xd.data() + (n0 + s) * in_stride, g, cols.data(), ld, s * hwo);
      }
      res.noalias() = wmat * cols;
      for (std::size_t s = 0; s < nb; ++s) {
        T* dst = out.data() + (n0 + s) * out_stride;
        for (std::size_t co = 0; co < g.cout; ++co) {
          const T* src = res.data() + co * ld + s * hwo;
          const T b = bd[co];
          for (std::size_t p = 0; p < hwo; ++p) dst[co * hwo + p] = src[p] + b;
        }
      }
    }
  }

  return make_result<T>(
      {g.n, g.cout, g.oh, g.ow}, std::move(out), {input, weight, bias},
      [g, chunk](Node<T>& self) {
        Node<T>& nx = input_node(self, 0);
        Node<T>& nw = input_node(self, 1);
        Node<T>& nbias = input_node(self, 2);
        const std::size_t hwo = g.hw_out();
        const std::size_t ckk = g.ckk();
        const std::size_t in_stride = g.cin * g.h * g.w;
        const std::size_t out_stride = g.cout * hwo;
        const auto& gy = *self.grad;

        if (nbias.requires_grad) {
          auto gb = nbias.grad_buffer();
          for (std::size_t n = 0; n < g.n; ++n) {
            for (std::size_t co = 0; co < g.cout; ++co) {
              const T* src = gy.data() + n * out_stride + co * hwo;
              T acc = 0;
              for (std::size_t p = 0; p < hwo; ++p) acc += src[p];
              gb[co] += acc;
            }
          }
        }
        if (!nx.requires_grad && !nw.requires_grad) return;

        ConstMapMat<T> wmat(nw.data.data(), g.cout, ckk);
        RowMat<T> gw_acc;
        if (nw.requires_grad) gw_acc = RowMat<T>::Zero(g.cout, ckk);
        RowMat<T> cols(ckk, chunk * hwo);
        RowMat<T> gmat(g.cout, chunk * hwo);
        RowMat<T> gcols;
        for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
          const std::size_t nb = std::min(chunk, g.n - n0);
          const std::size_t ld = nb * hwo;
          if (std::size_t(gmat.cols()) != ld) {
            cols.resize(ckk, ld);
            gmat.resize(g.cout, ld);
          }
          for (std::size_t s = 0; s < nb; ++s) {
            const T* src = gy.data() + (n0 + s) * out_stride;
            for (std::size_t co = 0; co < g.cout; ++co) {
              std::copy(src + co * hwo, src + (co + 1) * hwo, gmat.data() + co * ld + s * hwo);
            }
          }
          if (nw.requires_grad) {
            for (std::size_t s = 0; s < nb; ++s) {
              im2col(nx.data.data() + (n0 + s) * in_stride, g, cols.data(), ld, s * hwo);
            }
            gw_acc.noalias() += gmat * cols.transpose();
          }
          if (nx.requires_grad) {
            gcols.noalias() = wmat.transpose() * gmat;
            auto gx = nx.grad_buffer();
            for (std::size_t s = 0; s < nb; ++s) {
              col2im(gcols.data(), g, ld, s * hwo, gx.data() + (n0 + s) * in_stride);
            }
          }
        }
        if (nw.requires_grad) {
          auto gw = nw.grad_buffer();
          for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += gw_acc.data()[i];
        }
      },
      "conv2d");
}

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode, double eps, double momentum) {
  require_rank(input.shape(), 4, "batchnorm2d", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (gamma.numel() != c) dim_mismatch("batchnorm2d", "C (gamma)", c, gamma.numel());
  if (beta.numel() != c) dim_mismatch("batchnorm2d", "C (beta)", c, beta.numel());
  if (state.running_mean.size() != c || state.running_var.size() != c) {
    dim_mismatch("batchnorm2d", "C (running stats)", c, state.running_mean.size());
  }
  if (mode == Mode::Eval && !state.initialized()) {
    throw Error("batchnorm2d: eval mode requires initialized running statistics");
  }
  const std::size_t m = n * hw;
  auto xd = input.data();
  auto gd = gamma.data();
  auto bd = beta.data();

  std::vector<T> xhat(xd.size());
  std::vector<T> invstd(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (mode == Mode::Train) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = xd.data() + (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) s += p[k];
      }
      mu = s / double(m);
      double ss = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = xd.data() + (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) {
          const double d = double(p[k]) - mu;
          ss += d * d;
        }
      }
      var = ss / double(m);
      const double unbiased = m > 1 ? var * double(m) / double(m - 1) : var;
      state.running_mean[ch] = T((1.0 - momentum) * state.running_mean[ch] + momentum * mu);
      state.running_var[ch] = T((1.0 - momentum) * state.running_var[ch] + momentum * unbiased);
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    invstd[ch] = T(is);
    for (std::size_t i = 0; i < n; ++i) {
      const T* p = xd.data() + (i * c + ch) * hw;
      T* q = xhat.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) q[k] = T((double(p[k]) - mu) * is);
    }
  }
  if (mode == Mode::Train) ++state.num_batches_tracked;

  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) out[off + k] = gd[ch] * xhat[off + k] + bd[ch];
    }
  }

  auto saved = std::make_shared<std::vector<T>>(std::move(xhat));
  return make_result<T>(
      input.shape(), std::move(out), {input, gamma, beta},
      [saved, invstd = std::move(invstd), n, c, hw, mode](Node<T>& self) {
        Node<T>& nx = input_node(self, 0);
        Node<T>& ng = input_node(self, 1);
        Node<T>& nb = input_node(self, 2);
        const auto& gy = *self.grad;
        const auto& xhat = *saved;
        const double m = double(n * hw);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0, sum_gx = 0;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * hw;
            for (std::size_t k = 0; k < hw; ++k) {
              sum_g += gy[off + k];
              sum_gx += double(gy[off + k]) * xhat[off + k];
            }
          }
          if (ng.requires_grad) ng.grad_buffer()[ch] += T(sum_gx);
          if (nb.requires_grad) nb.grad_buffer()[ch] += T(sum_g);
          if (!nx.requires_grad) continue;
          auto gx = nx.grad_buffer();
          const double gam = ng.data[ch];
          const double is = invstd[ch];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * hw;
            for (std::size_t k = 0; k < hw; ++k) {
              if (mode == Mode::Train) {
                // d/dx of gamma * (x - mean) / std with batch statistics.
                gx[off + k] += T(gam * is / m *
                                 (m * gy[off + k] - sum_g - double(xhat[off + k]) * sum_gx));
              } else {
                gx[off + k] += T(gam * is * gy[off + k]);
              }
            }
          }
        }
      },
      "batchnorm2d");
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& input, double slope) {
  if (!(slope >= 0.0 && slope < 1.0)) {
    throw DomainError("leaky_relu: slope must lie in [0,1), got " + std::to_string(slope));
  }
  const T s = T(slope);
  return unary(
      input, "leaky_relu", [s](T x) { return x >= T(0) ? x : s * x; },
      [s](T x, T) { return x >= T(0) ? T(1) : s; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  return unary(
      input, "sigmoid", [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& input) {
  require_rank(input.shape(), 4, "upsample_nearest2x", "input");
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t w2 = 2 * w;
  auto xd = input.data();
  std::vector<T> out(planes * 4 * h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xd.data() + p * h * w;
    T* dst = out.data() + p * 4 * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      T* r0 = dst + (2 * y) * w2;
      for (std::size_t x = 0; x < w; ++x) r0[2 * x] = r0[2 * x + 1] = src[y * w + x];
      std::copy(r0, r0 + w2, r0 + w2);
    }
  }
  return make_result<T>(
      {input.dim(0), input.dim(1), 2 * h, w2}, std::move(out), {input},
      [planes, h, w](Node<T>& self) {
        Node<T>& nx = input_node(self, 0);
        if (!nx.requires_grad) return;
        auto gx = nx.grad_buffer();
        const auto& gy = *self.grad;
        const std::size_t w2 = 2 * w;
        for (std::size_t p = 0; p < planes; ++p) {
          const T* src = gy.data() + p * 4 * h * w;
          T* dst = gx.data() + p * h * w;
          for (std::size_t y = 0; y < h; ++y) {
            const T* r0 = src + 2 * y * w2;
            const T* r1 = r0 + w2;
            for (std::size_t x = 0; x < w; ++x) {
              dst[y * w + x] += r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1];
            }
          }
        }
      },
      "upsample_nearest2x");
}

template <class T>
Tensor<T> pad2d(const Tensor<T>& input, std::size_t top, std::size_t bottom, std::size_t left,
                std::size_t right) {
  require_rank(input.shape(), 4, "pad2d", "input");
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = h + top + bottom, ow = w + left + right;
  auto xd = input.data();
  std::vector<T> out(planes * oh * ow, T(0));
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(xd.data() + (p * h + y) * w, w, out.data() + (p * oh + y + top) * ow + left);
    }
  }
  return make_result<T>(
      {input.dim(0), input.dim(1), oh, ow}, std::move(out), {input},
      [planes, h, w, oh, ow, top, left](Node<T>& self) {
        Node<T>& nx = input_node(self, 0);
        if (!nx.requires_grad) return;
        auto gx = nx.grad_buffer();
        const auto& gy = *self.grad;
        for (std::size_t p = 0; p < planes; ++p) {
          for (std::size_t y = 0; y < h; ++y) {
            const T* src = gy.data() + (p * oh + y + top) * ow + left;
            T* dst = gx.data() + (p * h + y) * w;
            for (std::size_t x = 0; x < w; ++x) dst[x] += src[x];
          }
        }
      },
      "pad2d");
}

template <class T>
Tensor<T> crop2d(const Tensor<T>& input, std::size_t top, std::size_t left, std::size_t height,
                 std::size_t width) {
  require_rank(input.shape(), 4, "crop2d", "input");
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  if (top + height > h) dim_mismatch("crop2d", "H (window end)", h, top + height);
  if (left + width > w) dim_mismatch("crop2d", "W (window end)", w, left + width);
  auto xd = input.data();
  std::vector<T> out(planes * height * width);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < height; ++y) {
      std::copy_n(xd.data() + (p * h + y + top) * w + left, width,
                  out.data() + (p * height + y) * width);
    }
  }
  return make_result<T>(
      {input.dim(0), input.dim(1), height, width}, std::move(out), {input},
      [planes, h, w, top, left, height, width](Node<T>& self) {
        Node<T>& nx = input_node(self, 0);
        if (!nx.requires_grad) return;
        auto gx = nx.grad_buffer();
        const auto& gy = *self.grad;
        for (std::size_t p = 0; p < planes; ++p) {
          for (std::size_t y = 0; y < height; ++y) {
            const T* src = gy.data() + (p * height + y) * width;
            T* dst = gx.data() + (p * h + y + top) * w + left;
            for (std::size_t x = 0; x < width; ++x) dst[x] += src[x];
          }
        }
      },
      "crop2d");
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary(
      a, "neg", [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  auto ad = a.data();
  const T lo = *std::min_element(ad.begin(), ad.end());
  if (!(lo > T(0))) {
    std::ostringstream os;
    os.precision(17);
    os << "log: inputs must be strictly positive; minimum offending value " << lo;
    throw DomainError(os.str());
  }
  return unary(
      a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return unary(
      a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary(
      a, "abs", [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> scalar_mul(const Tensor<T>& a, T c) {
  return unary(
      a, "scalar_mul", [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> scalar_div(const Tensor<T>& a, T c) {
  if (c == T(0)) throw DomainError("scalar_div: division by zero");
  return unary(
      a, "scalar_div", [c](T x) { return x / c; }, [c](T, T) { return T(1) / c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary(
      a, "add_scalar", [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  if (lo > hi) throw DomainError("clamp: lower bound exceeds upper bound");
  return unary(
      a, "clamp", [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0;
  for (T v : a.data()) acc += v;
  return make_result<T>(
      {}, {T(acc)}, {a},
      [](Node<T>& self) {
        Node<T>& na = input_node(self, 0);
        if (!na.requires_grad) return;
        auto ga = na.grad_buffer();
        const T g = (*self.grad)[0];
        for (auto& v : ga) v += g;
      },
      "sum");
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  double acc = 0;
  for (T v : a.data()) acc += v;
  const double n = double(a.numel());
  return make_result<T>(
      {}, {T(acc / n)}, {a},
      [n](Node<T>& self) {
        Node<T>& na = input_node(self, 0);
        if (!na.requires_grad) return;
        auto ga = na.grad_buffer();
        const T g = T(double((*self.grad)[0]) / n);
        for (auto& v : ga) v += g;
      },
      "mean");
}

template <class T>
Tensor<T> sum(const Tensor<T>& a, std::span<const std::size_t> axes) {
  return reduce_axes(a, axes, false, "sum_axes");
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, std::span<const std::size_t> axes) {
  return reduce_axes(a, axes, true, "mean_axes");
}

template <class T>
T max_value(const Tensor<T>& a) {
  auto d = a.data();
  return *std::max_element(d.begin(), d.end());
}

template <class T>
Tensor<T> max(const Tensor<T>& a, std::span<const std::size_t> axes) {
  const AxisPlan plan = plan_axes(a.shape(), axes);
  std::vector<T> out(numel(plan.out_shape), -std::numeric_limits<T>::infinity());
  auto ad = a.data();
  for (std::size_t i = 0; i < ad.size(); ++i) {
    T& slot = out[plan.out_index[i]];
    slot = std::max(slot, ad[i]);
  }
  return Tensor<T>::from(plan.out_shape, std::move(out));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>(
      std::move(shape), std::move(out), {a},
      [](Node<T>& self) {
        Node<T>& na = input_node(self, 0);
        if (!na.requires_grad) return;
        auto ga = na.grad_buffer();
        const auto& g = *self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      },
      "reshape");
}

template <class T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(input.shape(), 2, "linear", "input");
  require_rank(weight.shape(), 2, "linear", "weight");
  require_rank(bias.shape(), 1, "linear", "bias");
  const std::size_t n = input.dim(0), d = input.dim(1), k = weight.dim(0);
  if (weight.dim(1) != d) dim_mismatch("linear", "D (weight axis 1)", d, weight.dim(1));
  if (bias.dim(0) != k) dim_mismatch("linear", "K (bias axis 0)", k, bias.dim(0));
  std::vector<T> out(n * k);
  MapMat<T> y(out.data(), n, k);
  ConstMapMat<T> x(input.data().data(), n, d);
  ConstMapMat<T> w(weight.data().data(), k, d);
  y.noalias() = x * w.transpose();
  auto bd = bias.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) y(i, j) += bd[j];
  }
  return make_result<T>(
      {n, k}, std::move(out), {input, weight, bias},
      [n, d, k](Node<T>& self) {
        Node<T>& nx = input_node(self, 0);
        Node<T>& nw = input_node(self, 1);
        Node<T>& nb = input_node(self, 2);
        ConstMapMat<T> gy(self.grad->data(), n, k);
        if (nx.requires_grad) {
          MapMat<T> gx(nx.grad_buffer().data(), n, d);
          gx.noalias() += gy * ConstMapMat<T>(nw.data.data(), k, d);
        }
        if (nw.requires_grad) {
          MapMat<T> gw(nw.grad_buffer().data(), k, d);
          gw.noalias() += gy.transpose() * ConstMapMat<T>(nx.data.data(), n, d);
        }
        if (nb.requires_grad) {
          auto gb = nb.grad_buffer();
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < k; ++j) gb[j] += gy(i, j);
          }
        }
      },
      "linear");
}

template <class T>
Tensor<T> filter1d_reflect(const Tensor<T>& input, std::span<const T> kernel, std::size_t axis) {
  require_rank(input.shape(), 4, "filter1d_reflect", "input");
  if (axis != 2 && axis != 3) throw ShapeError("filter1d_reflect: axis must be 2 or 3");
  if (kernel.size() % 2 == 0) throw ShapeError("filter1d_reflect: kernel length must be odd");
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t len = axis == 2 ? h : w;
  const long r = long(kernel.size() / 2);
  if (long(len) <= r) {
    throw ShapeError("filter1d_reflect: extent " + std::to_string(len) +
                     " too small for reflect padding of radius " + std::to_string(r));
  }
  // Source index for each (output position, tap); reflect without edge repeat.
  auto taps = std::make_shared<std::vector<std::size_t>>(len * kernel.size());
  for (long i = 0; i < long(len); ++i) {
    for (long t = -r; t <= r; ++t) {
      long j = i + t;
      if (j < 0) j = -j;
      if (j >= long(len)) j = 2 * (long(len) - 1) - j;
      (*taps)[std::size_t(i) * kernel.size() + std::size_t(t + r)] = std::size_t(j);
    }
  }
  auto kern = std::make_shared<std::vector<T>>(kernel.begin(), kernel.end());
  const std::size_t step = axis == 2 ? w : 1;    // stride between consecutive samples on the axis
  const std::size_t lines = axis == 2 ? w : h;   // independent 1-D lines per plane
  const std::size_t line_step = axis == 2 ? 1 : w;
  const std::size_t ks = kernel.size();

  auto xd = input.data();
  std::vector<T> out(xd.size());
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t l = 0; l < lines; ++l) {
      const std::size_t base = p * h * w + l * line_step;
      for (std::size_t i = 0; i < len; ++i) {
        T acc = 0;
        for (std::size_t t = 0; t < ks; ++t) acc += (*kern)[t] * xd[base + (*taps)[i * ks + t] * step];
        out[base + i * step] = acc;
      }
    }
  }
  return make_result<T>(
      input.shape(), std::move(out), {input},
      [taps, kern, planes, lines, len, step, line_step, h, w, ks](Node<T>& self) {
        Node<T>& nx = input_node(self, 0);
        if (!nx.requires_grad) return;
        auto gx = nx.grad_buffer();
        const auto& gy = *self.grad;
        for (std::size_t p = 0; p < planes; ++p) {
          for (std::size_t l = 0; l < lines; ++l) {
            const std::size_t base = p * h * w + l * line_step;
            for (std::size_t i = 0; i < len; ++i) {
              const T g = gy[base + i * step];
              for (std::size_t t = 0; t < ks; ++t) gx[base + (*taps)[i * ks + t] * step] += (*kern)[t] * g;
            }
          }
        }
      },
      "filter1d_reflect");
}

template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy", "logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) dim_mismatch("softmax_cross_entropy", "N (labels)", n, labels.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || std::size_t(labels[i]) >= k) {
      throw DomainError("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                        " at index " + std::to_string(i) + " outside [0," + std::to_string(k) + ")");
    }
  }
  auto z = logits.data();
  auto probs = std::make_shared<std::vector<T>>(n * k);
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z.data() + i * k;
    const double zmax = *std::max_element(row, row + k);
    double denom = 0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(double(row[j]) - zmax);
    const double lse = zmax + std::log(denom);
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = T(std::exp(double(row[j]) - lse));
    loss += lse - double(row[labels[i]]);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result<T>(
      {}, {T(loss / double(n))}, {logits},
      [probs, lab = std::move(lab), n, k](Node<T>& self) {
        Node<T>& nz = input_node(self, 0);
        if (!nz.requires_grad) return;
        auto gz = nz.grad_buffer();
        const double g = double((*self.grad)[0]) / double(n);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const double onehot = std::size_t(lab[i]) == j ? 1.0 : 0.0;
            gz[i * k + j] += T(g * (double((*probs)[i * k + j]) - onehot));
          }
        }
      },
      "softmax_cross_entropy");
}

#define LAMP_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,  \
                            std::size_t);                                                        \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                 BatchNormState<T>&, Mode, double, double);                      \
  template Tensor<T> leaky_relu(const Tensor<T>&, double);                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                  \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                       \
  template Tensor<T> pad2d(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t); \
  template Tensor<T> crop2d(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t); \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> neg(const Tensor<T>&);                                                      \
  template Tensor<T> log(const Tensor<T>&);                                                      \
  template Tensor<T> square(const Tensor<T>&);                                                   \
  template Tensor<T> abs(const Tensor<T>&);                                                      \
  template Tensor<T> scalar_mul(const Tensor<T>&, T);                                            \
  template Tensor<T> scalar_div(const Tensor<T>&, T);                                            \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                            \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                              \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> sum(const Tensor<T>&, std::span<const std::size_t>);                        \
  template Tensor<T> mean(const Tensor<T>&, std::span<const std::size_t>);                       \
  template T max_value(const Tensor<T>&);                                                        \
  template Tensor<T> max(const Tensor<T>&, std::span<const std::size_t>);                        \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> filter1d_reflect(const Tensor<T>&, std::span<const T>, std::size_t);        \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);

LAMP_INSTANTIATE_OPS(float)
LAMP_INSTANTIATE_OPS(double)

}  // namespace lamp
