#include "voxadapt/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace voxadapt {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Detach: return "detach";
    case OpKind::Conv: return "conv";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::L1Loss: return "l1_loss";
    case OpKind::Dense: return "dense";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Sum: return "sum";
    case OpKind::Scale: return "scale";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Reshape: return "reshape";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::leaf(Tensor value) { return push(OpKind::Leaf, {}, std::move(value), nullptr); }

const Tape::Node& Tape::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw Error("variable does not belong to this tape");
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }
OpKind Tape::kind(Var v) const { return node(v).kind; }
std::span<const int> Tape::inputs(Var v) const { return node(v).inputs; }

Var Tape::push(OpKind kind, std::vector<Var> inputs, Tensor value, BackwardFn backward) {
  Node n;
  n.kind = kind;
  n.inputs.reserve(inputs.size());
  for (auto v : inputs) {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw Error("operation input not on tape");
    n.inputs.push_back(v.id);
  }
  if (kind != OpKind::Leaf) require_finite(value, std::string(op_name(kind)));
  n.value = std::move(value);
  if (record_) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

std::vector<Tensor> Tape::gradients(Var loss, std::span<const Var> wrt) const {
  if (!record_) throw Error("gradients requested from a tape that did not record");
  const Node& loss_node = node(loss);
  if (loss_node.value.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_to_string(loss_node.value.shape()));
  }
  const std::size_t n = static_cast<std::size_t>(loss.id) + 1;
  std::vector<char> needs(nodes_.size(), 0);
  std::vector<char> target(nodes_.size(), 0);
  for (auto v : wrt) {
    (void)node(v);
    needs[static_cast<std::size_t>(v.id)] = 1;
    target[static_cast<std::size_t>(v.id)] = 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (needs[i] || !nodes_[i].backward) continue;
    for (int in : nodes_[i].inputs) {
      if (needs[static_cast<std::size_t>(in)]) {
        needs[i] = 1;
        break;
      }
    }
  }

  std::vector<Tensor> grads(n);
  if (needs[n - 1]) grads[n - 1] = Tensor(loss_node.value.shape(), 1.0);
  for (std::size_t ii = n; ii-- > 0;) {
    const Node& nd = nodes_[ii];
    if (grads[ii].empty() || !nd.backward) continue;
    std::vector<const Tensor*> ins;
    std::vector<Tensor*> gins;
    ins.reserve(nd.inputs.size());
    gins.reserve(nd.inputs.size());
    bool any = false;
    for (int in : nd.inputs) {
      const auto u = static_cast<std::size_t>(in);
      ins.push_back(&nodes_[u].value);
      if (needs[u]) {
        if (grads[u].empty()) grads[u] = Tensor(nodes_[u].value.shape(), 0.0);
        gins.push_back(&grads[u]);
        any = true;
      } else {
        gins.push_back(nullptr);
      }
    }
    if (any) nd.backward(BackwardArgs{ins, nd.value, grads[ii], gins});
    if (!target[ii]) grads[ii] = Tensor();
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (auto v : wrt) {
    const auto u = static_cast<std::size_t>(v.id);
    if (u < n && !grads[u].empty()) {
      out.push_back(grads[u]);
    } else {
      out.emplace_back(nodes_[u].value.shape(), 0.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

/// Geometry of a strided convolution between a high-resolution side ("big")
/// and a low-resolution side ("small"). Rank-2 problems use a unit leading
/// axis so one code path serves both ranks.
struct ConvGeometry {
  std::size_t big[3]{1, 1, 1};
  std::size_t small[3]{1, 1, 1};
  std::size_t k[3]{1, 1, 1};
  std::ptrdiff_t pad[3]{0, 0, 0};
  std::size_t stride = 1;

  [[nodiscard]] std::size_t big_count() const { return big[0] * big[1] * big[2]; }
  [[nodiscard]] std::size_t small_count() const { return small[0] * small[1] * small[2]; }
  [[nodiscard]] std::size_t k_count() const { return k[0] * k[1] * k[2]; }
};

ConvGeometry make_geometry(std::span<const std::size_t> big_extent, std::size_t ksize, std::size_t stride) {
  ConvGeometry g;
  g.stride = stride;
  const std::size_t off = 3 - big_extent.size();
  for (std::size_t a = 0; a < big_extent.size(); ++a) {
    const std::size_t in = big_extent[a];
    const std::size_t out = (in + stride - 1) / stride;
    const std::ptrdiff_t total = std::max<std::ptrdiff_t>(
        static_cast<std::ptrdiff_t>((out - 1) * stride + ksize) - static_cast<std::ptrdiff_t>(in), 0);
    g.big[off + a] = in;
    g.small[off + a] = out;
    g.k[off + a] = ksize;
    g.pad[off + a] = total / 2;
  }
  return g;
}

/// Output positions o along one axis with 0 <= o*s + k - p < extent.
struct AxisRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

AxisRange valid_range(std::size_t out, std::size_t extent, std::size_t stride, std::size_t k, std::ptrdiff_t pad) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - pad;
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(extent) - off + s - 1) / s;
  hi = std::clamp<std::ptrdiff_t>(hi, 0, static_cast<std::ptrdiff_t>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

/// Walks every (channel, tap, output position) of one sample, calling
/// `line(c, row, o_base, src_offset, lo, hi)` per output line with the valid
/// range [lo, hi) of the innermost axis (empty where the line is padding).
template <class Line>
void for_each_line(std::size_t channels, const ConvGeometry& g, Line&& line) {
  const std::size_t s = g.stride;
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t kd = 0; kd < g.k[0]; ++kd) {
      const AxisRange rd = valid_range(g.small[0], g.big[0], s, kd, g.pad[0]);
      for (std::size_t kh = 0; kh < g.k[1]; ++kh) {
        const AxisRange rh = valid_range(g.small[1], g.big[1], s, kh, g.pad[1]);
        for (std::size_t kw = 0; kw < g.k[2]; ++kw, ++row) {
          const AxisRange rw = valid_range(g.small[2], g.big[2], s, kw, g.pad[2]);
          for (std::size_t od = 0; od < g.small[0]; ++od) {
            for (std::size_t oh = 0; oh < g.small[1]; ++oh) {
              const std::size_t o_base = (od * g.small[1] + oh) * g.small[2];
              const bool ok = od >= rd.lo && od < rd.hi && oh >= rh.lo && oh < rh.hi;
              if (!ok) {
                line(c, row, o_base, std::size_t{0}, std::size_t{0}, std::size_t{0});
                continue;
              }
              const std::size_t id = od * s + kd - static_cast<std::size_t>(g.pad[0]);
              const std::size_t ih = oh * s + kh - static_cast<std::size_t>(g.pad[1]);
              // iw = ow*s + kw - pad; base is the input offset of ow = 0 (may wrap, only used with ow >= lo).
              const std::size_t base = (id * g.big[1] + ih) * g.big[2] + kw - static_cast<std::size_t>(g.pad[2]);
              line(c, row, o_base, base, rw.lo, rw.hi);
            }
          }
        }
      }
    }
  }
}

/// cols[(c,kd,kh,kw), (od,oh,ow)] = x[c, od*s+kd-p, ...] (zero outside), one sample.
void im2col(const double* x, std::size_t channels, const ConvGeometry& g, double* cols) {
  const std::size_t bc = g.big_count();
  const std::size_t sc = g.small_count();
  const std::size_t w = g.small[2];
  const std::size_t s = g.stride;
  for_each_line(channels, g, [&](std::size_t c, std::size_t row, std::size_t o_base, std::size_t base, std::size_t lo,
                                 std::size_t hi) {
    double* dst = cols + row * sc + o_base;
    const double* src = x + c * bc + base;
    std::fill_n(dst, lo, 0.0);
    for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow * s];
    std::fill(dst + hi, dst + w, 0.0);
  });
}

/// Adjoint of im2col: scatters-and-adds cols back into x, one sample.
void col2im(const double* cols, std::size_t channels, const ConvGeometry& g, double* x) {
  const std::size_t bc = g.big_count();
  const std::size_t sc = g.small_count();
  const std::size_t s = g.stride;
  for_each_line(channels, g, [&](std::size_t c, std::size_t row, std::size_t o_base, std::size_t base, std::size_t lo,
                                 std::size_t hi) {
    const double* src = cols + row * sc + o_base;
    double* dst = x + c * bc + base;
    for (std::size_t ow = lo; ow < hi; ++ow) dst[ow * s] += src[ow];
  });
}

struct ConvPlan {
  ConvGeometry geom;
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  Shape out_shape;
};

ConvPlan plan_conv(const Shape& in, const Shape& kshape, const Shape& bshape, const ConvOptions& opt) {
  const std::size_t r = static_cast<std::size_t>(opt.rank);
  if (opt.rank != ConvRank::Two && opt.rank != ConvRank::Three) throw ShapeError("convolution rank must be 2 or 3");
  if (opt.stride < 1) throw ShapeError("convolution stride must be >= 1");
  if (in.size() != r + 2) {
    throw ShapeError("rank-" + std::to_string(r) + " convolution expects input [N,C,...] of rank " +
                     std::to_string(r + 2) + ", got " + shape_to_string(in));
  }
  if (kshape.size() != r + 2) throw ShapeError("kernel rank mismatch: " + shape_to_string(kshape));
  const std::size_t ks = kshape[2];
  for (std::size_t a = 2; a < kshape.size(); ++a) {
    if (kshape[a] != ks) throw ShapeError("kernels must be cubic/square: " + shape_to_string(kshape));
  }
  ConvPlan p;
  p.batch = in[0];
  p.in_channels = in[1];
  const std::size_t kin = opt.transposed ? kshape[0] : kshape[1];
  p.out_channels = opt.transposed ? kshape[1] : kshape[0];
  if (kin != p.in_channels) {
    throw ShapeError("input has " + std::to_string(p.in_channels) + " channels but kernels expect " +
                     std::to_string(kin));
  }
  if (bshape.size() != 1 || bshape[0] != p.out_channels) {
    throw ShapeError("bias must have " + std::to_string(p.out_channels) + " entries");
  }
  std::vector<std::size_t> big(in.begin() + 2, in.end());
  if (opt.transposed) {
    for (auto& b : big) b *= opt.stride;
  }
  p.geom = make_geometry(big, ks, opt.stride);
  p.out_shape = {p.batch, p.out_channels};
  const std::size_t off = 3 - r;
  for (std::size_t a = 0; a < r; ++a) p.out_shape.push_back(opt.transposed ? p.geom.big[off + a] : p.geom.small[off + a]);
  return p;
}

}  // namespace

Tensor conv_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias, const ConvOptions& options) {
  Tape tape(false);
  const Var out = conv(tape, tape.leaf(input), tape.leaf(kernels), tape.leaf(bias), options);
  return tape.value(out);
}

Var conv(Tape& tape, Var input, Var kernels, Var bias, const ConvOptions& options) {
  const Tensor& x = tape.value(input);
  const Tensor& w = tape.value(kernels);
  const Tensor& b = tape.value(bias);
  const ConvPlan plan = plan_conv(x.shape(), w.shape(), b.shape(), options);
  const ConvGeometry& g = plan.geom;
  const std::size_t n = plan.batch;
  const std::size_t cin = plan.in_channels;
  const std::size_t cout = plan.out_channels;
  const std::size_t kc = g.k_count();
  const std::size_t sc = g.small_count();
  const std::size_t bc = g.big_count();
  const bool transposed = options.transposed;
  // Rows of the per-sample column buffer: channels on the high-resolution side times taps.
  const std::size_t krows = (transposed ? cout : cin) * kc;
  const auto S = static_cast<Eigen::Index>(sc);
  const auto K = static_cast<Eigen::Index>(krows);
  const auto Ci = static_cast<Eigen::Index>(cin);
  const auto Co = static_cast<Eigen::Index>(cout);
  const std::size_t in_stride = cin * (transposed ? sc : bc);
  const std::size_t out_stride = cout * (transposed ? bc : sc);

  Tensor out(plan.out_shape, 0.0);
  std::vector<double> cols(krows * sc);
  const double* xp = x.data().data();
  double* op = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    if (!transposed) {
      im2col(xp + i * in_stride, cin, g, cols.data());
      MatMap(op + i * out_stride, Co, S).noalias() =
          ConstMatMap(w.data().data(), Co, K) * ConstMatMap(cols.data(), K, S);
    } else {
      MatMap(cols.data(), K, S).noalias() =
          ConstMatMap(w.data().data(), Ci, K).transpose() * ConstMatMap(xp + i * in_stride, Ci, S);
      col2im(cols.data(), cout, g, op + i * out_stride);
    }
  }
  const std::size_t plane = transposed ? bc : sc;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < cout; ++c) {
      double* row = op + (i * cout + c) * plane;
      for (std::size_t q = 0; q < plane; ++q) row[q] += b[c];
    }

  BackwardFn fn;
  if (tape.recording()) {
    fn = [g, n, cin, cout, krows, sc, plane, in_stride, out_stride, transposed, S, K, Ci, Co](const BackwardArgs& a) {
      const double* xs = a.inputs[0]->data().data();
      const double* ws = a.inputs[1]->data().data();
      const double* gy = a.grad_output.data().data();
      std::vector<double> buf(krows * sc);
      if (a.input_grads[2]) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < cout; ++c) {
            const double* row = gy + (i * cout + c) * plane;
            double acc = 0.0;
            for (std::size_t q = 0; q < plane; ++q) acc += row[q];
            (*a.input_grads[2])[c] += acc;
          }
      }
      double* gw = a.input_grads[1] ? a.input_grads[1]->data().data() : nullptr;
      double* gx = a.input_grads[0] ? a.input_grads[0]->data().data() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        if (!transposed) {
          ConstMatMap dy(gy + i * out_stride, Co, S);
          if (gw) {
            im2col(xs + i * in_stride, cin, g, buf.data());
            MatMap(gw, Co, K).noalias() += dy * ConstMatMap(buf.data(), K, S).transpose();
          }
          if (gx) {
            MatMap(buf.data(), K, S).noalias() = ConstMatMap(ws, Co, K).transpose() * dy;
            col2im(buf.data(), cin, g, gx + i * in_stride);
          }
        } else {
          im2col(gy + i * out_stride, cout, g, buf.data());
          ConstMatMap dc(buf.data(), K, S);
          if (gw) MatMap(gw, Ci, K).noalias() += ConstMatMap(xs + i * in_stride, Ci, S) * dc.transpose();
          if (gx) MatMap(gx + i * in_stride, Ci, S).noalias() += ConstMatMap(ws, Ci, K) * dc;
        }
      }
    };
  }
  return tape.push(OpKind::Conv, {input, kernels, bias}, std::move(out), std::move(fn));
}

// ---------------------------------------------------------------------------
// Elementwise and reductions

Var leaky_relu(Tape& tape, Var input, double slope) {
  if (!(slope > 0.0 && slope < 1.0)) throw Error("leaky_relu slope must lie in (0,1)");
  const Tensor& x = tape.value(input);
  Tensor y = x;
  for (auto& v : y.data()) v = v >= 0.0 ? v : slope * v;
  BackwardFn fn;
  if (tape.recording()) {
    fn = [slope](const BackwardArgs& a) {
      const auto xs = a.inputs[0]->data();
      const auto gy = a.grad_output.data();
      auto gx = a.input_grads[0]->data();
      for (std::size_t i = 0; i < xs.size(); ++i) gx[i] += xs[i] >= 0.0 ? gy[i] : slope * gy[i];
    };
  }
  return tape.push(OpKind::LeakyRelu, {input}, std::move(y), std::move(fn));
}

Var sigmoid(Tape& tape, Var input) {
  Tensor y = tape.value(input);
  for (auto& v : y.data()) v = 1.0 / (1.0 + std::exp(-v));
  BackwardFn fn;
  if (tape.recording()) {
    fn = [](const BackwardArgs& a) {
      const auto ys = a.output.data();
      const auto gy = a.grad_output.data();
      auto gx = a.input_grads[0]->data();
      for (std::size_t i = 0; i < ys.size(); ++i) gx[i] += gy[i] * ys[i] * (1.0 - ys[i]);
    };
  }
  return tape.push(OpKind::Sigmoid, {input}, std::move(y), std::move(fn));
}

Var batch_norm(Tape& tape, Var input, Var scale, Var shift, Mode mode, const RunningStats& stats, bool update) {
  const Tensor& x = tape.value(input);
  const Tensor& gamma = tape.value(scale);
  const Tensor& beta = tape.value(shift);
  if (x.rank() < 2) throw ShapeError("batch_norm expects [N, C, ...]");
  const std::size_t n = x.dim(0);
  const std::size_t c = x.dim(1);
  const std::size_t inner = x.size() / (n * c);
  if (gamma.size() != c || beta.size() != c) {
    throw ShapeError("batch_norm scale/shift need " + std::to_string(c) + " entries");
  }
  if (!stats.mean || !stats.var || stats.mean->size() != c || stats.var->size() != c) {
    throw ShapeError("batch_norm running statistics missing or mis-sized");
  }
  const double eps = stats.eps;
  std::vector<double> mean(c, 0.0);
  std::vector<double> var(c, 0.0);
  if (mode == Mode::Train) {
    if (n < 2) throw ShapeError("batch_norm in train mode needs a batch of at least 2");
    const double m = static_cast<double>(n * inner);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = x.data().data() + (i * c + ch) * inner;
        for (std::size_t q = 0; q < inner; ++q) mean[ch] += p[q];
      }
    for (auto& v : mean) v /= m;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = x.data().data() + (i * c + ch) * inner;
        for (std::size_t q = 0; q < inner; ++q) var[ch] += (p[q] - mean[ch]) * (p[q] - mean[ch]);
      }
    for (auto& v : var) v /= m;
    if (update) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        (*stats.mean)[ch] = stats.momentum * (*stats.mean)[ch] + (1.0 - stats.momentum) * mean[ch];
        (*stats.var)[ch] = stats.momentum * (*stats.var)[ch] + (1.0 - stats.momentum) * var[ch];
      }
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = (*stats.mean)[ch];
      var[ch] = (*stats.var)[ch];
    }
  }
  std::vector<double> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);

  Tensor xhat(x.shape());
  Tensor y(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * inner;
      for (std::size_t q = 0; q < inner; ++q) {
        const double h = (x[base + q] - mean[ch]) * inv_std[ch];
        xhat[base + q] = h;
        y[base + q] = gamma[ch] * h + beta[ch];
      }
    }

  BackwardFn fn;
  if (tape.recording()) {
    fn = [n, c, inner, mode, inv_std, xhat = std::move(xhat)](const BackwardArgs& a) {
      const Tensor& gy = a.grad_output;
      const Tensor& g = *a.inputs[1];
      std::vector<double> sum_dy(c, 0.0);
      std::vector<double> sum_dy_xhat(c, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t base = (i * c + ch) * inner;
          for (std::size_t q = 0; q < inner; ++q) {
            sum_dy[ch] += gy[base + q];
            sum_dy_xhat[ch] += gy[base + q] * xhat[base + q];
          }
        }
      if (a.input_grads[1])
        for (std::size_t ch = 0; ch < c; ++ch) (*a.input_grads[1])[ch] += sum_dy_xhat[ch];
      if (a.input_grads[2])
        for (std::size_t ch = 0; ch < c; ++ch) (*a.input_grads[2])[ch] += sum_dy[ch];
      if (a.input_grads[0]) {
        Tensor& gx = *a.input_grads[0];
        const double m = static_cast<double>(n * inner);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * inner;
            const double k = g[ch] * inv_std[ch];
            for (std::size_t q = 0; q < inner; ++q) {
              if (mode == Mode::Train) {
                gx[base + q] += k * (gy[base + q] - sum_dy[ch] / m - xhat[base + q] * sum_dy_xhat[ch] / m);
              } else {
                gx[base + q] += k * gy[base + q];
              }
            }
          }
      }
    };
  }
  return tape.push(OpKind::BatchNorm, {input, scale, shift}, std::move(y), std::move(fn));
}

Var l1_loss(Tape& tape, Var a, Var b) {
  const Tensor& x = tape.value(a);
  const Tensor& y = tape.value(b);
  if (x.shape() != y.shape()) {
    throw ShapeError("l1_loss shape mismatch " + shape_to_string(x.shape()) + " vs " + shape_to_string(y.shape()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::abs(x[i] - y[i]);
  const double count = static_cast<double>(x.size());
  BackwardFn fn;
  if (tape.recording()) {
    fn = [count](const BackwardArgs& args) {
      const Tensor& p = *args.inputs[0];
      const Tensor& q = *args.inputs[1];
      const double g = args.grad_output[0] / count;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = p[i] - q[i];
        const double s = d > 0.0 ? g : (d < 0.0 ? -g : 0.0);
        if (args.input_grads[0]) (*args.input_grads[0])[i] += s;
        if (args.input_grads[1]) (*args.input_grads[1])[i] -= s;
      }
    };
  }
  return tape.push(OpKind::L1Loss, {a, b}, Tensor::scalar(acc / count), std::move(fn));
}

Var dense(Tape& tape, Var input, Var weights, Var bias) {
  const Tensor& x = tape.value(input);
  const Tensor& w = tape.value(weights);
  const Tensor& b = tape.value(bias);
  if (w.rank() != 2) throw ShapeError("dense weights must be [out, in]");
  const std::size_t n = x.dim(0);
  const std::size_t in = x.size() / n;
  const std::size_t out = w.dim(0);
  if (w.dim(1) != in) {
    throw ShapeError("dense layer expects input width " + std::to_string(w.dim(1)) + " but was fed " +
                     std::to_string(in));
  }
  if (b.size() != out) throw ShapeError("dense bias must have " + std::to_string(out) + " entries");
  const auto N = static_cast<Eigen::Index>(n);
  const auto I = static_cast<Eigen::Index>(in);
  const auto O = static_cast<Eigen::Index>(out);
  Tensor y({n, out});
  MatMap ym(y.data().data(), N, O);
  ym.noalias() = ConstMatMap(x.data().data(), N, I) * ConstMatMap(w.data().data(), O, I).transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out; ++j) y[i * out + j] += b[j];
  BackwardFn fn;
  if (tape.recording()) {
    fn = [N, I, O](const BackwardArgs& a) {
      ConstMatMap gy(a.grad_output.data().data(), N, O);
      if (a.input_grads[0]) {
        MatMap gx(a.input_grads[0]->data().data(), N, I);
        gx.noalias() += gy * ConstMatMap(a.inputs[1]->data().data(), O, I);
      }
      if (a.input_grads[1]) {
        MatMap gw(a.input_grads[1]->data().data(), O, I);
        gw.noalias() += gy.transpose() * ConstMatMap(a.inputs[0]->data().data(), N, I);
      }
      if (a.input_grads[2]) {
        for (Eigen::Index j = 0; j < O; ++j) (*a.input_grads[2])[static_cast<std::size_t>(j)] += gy.col(j).sum();
      }
    };
  }
  return tape.push(OpKind::Dense, {input, weights, bias}, std::move(y), std::move(fn));
}

Var sum(Tape& tape, Var input) {
  double acc = 0.0;
  for (double v : tape.value(input).data()) acc += v;
  BackwardFn fn;
  if (tape.recording()) {
    fn = [](const BackwardArgs& a) {
      const double g = a.grad_output[0];
      for (auto& v : a.input_grads[0]->data()) v += g;
    };
  }
  return tape.push(OpKind::Sum, {input}, Tensor::scalar(acc), std::move(fn));
}

Var scale(Tape& tape, Var input, double factor) {
  Tensor y = tape.value(input);
  for (auto& v : y.data()) v *= factor;
  BackwardFn fn;
  if (tape.recording()) {
    fn = [factor](const BackwardArgs& a) {
      auto gx = a.input_grads[0]->data();
      const auto gy = a.grad_output.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * gy[i];
    };
  }
  return tape.push(OpKind::Scale, {input}, std::move(y), std::move(fn));
}

namespace {

Var add_scaled(Tape& tape, Var a, Var b, double sign, OpKind kind) {
  const Tensor& x = tape.value(a);
  const Tensor& y = tape.value(b);
  if (x.shape() != y.shape()) {
    throw ShapeError(std::string(op_name(kind)) + " shape mismatch " + shape_to_string(x.shape()) + " vs " +
                     shape_to_string(y.shape()));
  }
  Tensor z = x;
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += sign * y[i];
  BackwardFn fn;
  if (tape.recording()) {
    fn = [sign](const BackwardArgs& args) {
      const auto gy = args.grad_output.data();
      if (args.input_grads[0]) {
        auto g = args.input_grads[0]->data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
      if (args.input_grads[1]) {
        auto g = args.input_grads[1]->data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * gy[i];
      }
    };
  }
  return tape.push(kind, {a, b}, std::move(z), std::move(fn));
}

}  // namespace

Var add(Tape& tape, Var a, Var b) { return add_scaled(tape, a, b, 1.0, OpKind::Add); }
Var sub(Tape& tape, Var a, Var b) { return add_scaled(tape, a, b, -1.0, OpKind::Sub); }

Var concat_batch(Tape& tape, std::span<const Var> parts) {
  std::vector<Tensor> values;
  std::vector<std::size_t> sizes;
  for (auto p : parts) {
    values.push_back(tape.value(p));
    sizes.push_back(values.back().size());
  }
  Tensor out = concat_batch(std::span<const Tensor>(values));
  BackwardFn fn;
  if (tape.recording()) {
    fn = [sizes](const BackwardArgs& a) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < sizes.size(); ++k) {
        if (a.input_grads[k]) {
          auto g = a.input_grads[k]->data();
          for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += a.grad_output[off + i];
        }
        off += sizes[k];
      }
    };
  }
  return tape.push(OpKind::Concat, std::vector<Var>(parts.begin(), parts.end()), std::move(out), std::move(fn));
}

Var slice_batch(Tape& tape, Var input, std::size_t begin, std::size_t end) {
  const Tensor& x = tape.value(input);
  Tensor y = x.slice_batch(begin, end);
  const std::size_t offset = begin * (x.size() / x.dim(0));
  BackwardFn fn;
  if (tape.recording()) {
    fn = [offset](const BackwardArgs& a) {
      auto g = a.input_grads[0]->data();
      const auto gy = a.grad_output.data();
      for (std::size_t i = 0; i < gy.size(); ++i) g[offset + i] += gy[i];
    };
  }
  return tape.push(OpKind::Slice, {input}, std::move(y), std::move(fn));
}

Var reshape(Tape& tape, Var input, Shape shape) {
  Tensor y = tape.value(input).reshaped(std::move(shape));
  BackwardFn fn;
  if (tape.recording()) {
    fn = [](const BackwardArgs& a) {
      auto g = a.input_grads[0]->data();
      const auto gy = a.grad_output.data();
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    };
  }
  return tape.push(OpKind::Reshape, {input}, std::move(y), std::move(fn));
}

Var detach(Tape& tape, Var input) { return tape.push(OpKind::Detach, {input}, tape.value(input), nullptr); }

}  // namespace voxadapt
