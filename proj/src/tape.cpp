#include "oeseg/tape.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "oeseg/error.hpp"

namespace oeseg {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

void require(bool cond, const char* msg) {
  if (!cond) throw DimensionError(msg);
}

// Output spatial extent of a strided correlation; throws when the kernel
// does not fit the padded input.
std::size_t conv_out_extent(std::size_t in, std::size_t k, int stride, int padding) {
  long padded = static_cast<long>(in) + 2L * padding;
  long span = padded - static_cast<long>(k);
  if (span < 0) throw DimensionError("conv2d: kernel larger than padded input");
  return static_cast<std::size_t>(span / stride + 1);
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_at_axis(const std::vector<std::size_t>& shape, int axis) {
  if (axis < 0 || static_cast<std::size_t>(axis) >= shape.size()) {
    throw DimensionError("axis out of range");
  }
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) {
    s.inner *= shape[i];
  }
  return s;
}

}  // namespace

ValueId Tape::record(Op op, OpAttrs attrs, std::initializer_list<ValueId> inputs) {
  Node n;
  n.op = op;
  n.attrs = std::move(attrs);
  for (ValueId id : inputs) {
    if (id >= nodes_.size()) throw ContractError("Tape: input id from a different tape");
    n.in[n.nin++] = id;
  }
  std::vector<const Tensor*> in_values;
  in_values.reserve(n.nin);
  for (std::uint8_t i = 0; i < n.nin; ++i) in_values.push_back(&nodes_[n.in[i]].value);
  n.value = eval(op, n.attrs, in_values);
  nodes_.push_back(std::move(n));
  return static_cast<ValueId>(nodes_.size() - 1);
}

ValueId Tape::constant(Tensor t) {
  if (t.empty()) throw ContractError("Tape: empty tensor");
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  return static_cast<ValueId>(nodes_.size() - 1);
}

ValueId Tape::parameter(Tensor t) {
  if (t.empty()) throw ContractError("Tape: empty tensor");
  Node n;
  n.op = Op::kParameter;
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  return static_cast<ValueId>(nodes_.size() - 1);
}

ValueId Tape::add(ValueId a, ValueId b) { return record(Op::kAdd, {}, {a, b}); }
ValueId Tape::sub(ValueId a, ValueId b) { return record(Op::kSub, {}, {a, b}); }
ValueId Tape::mul(ValueId a, ValueId b) { return record(Op::kMul, {}, {a, b}); }
ValueId Tape::div(ValueId a, ValueId b) { return record(Op::kDiv, {}, {a, b}); }

ValueId Tape::scale(ValueId x, double factor) {
  OpAttrs a;
  a.f0 = factor;
  return record(Op::kScale, std::move(a), {x});
}

ValueId Tape::add_bias(ValueId x, ValueId bias) { return record(Op::kAddBias, {}, {x, bias}); }
ValueId Tape::matmul(ValueId a, ValueId b) { return record(Op::kMatmul, {}, {a, b}); }
ValueId Tape::transpose(ValueId x) { return record(Op::kTranspose, {}, {x}); }

ValueId Tape::layer_norm(ValueId x, ValueId gamma, ValueId beta, double eps) {
  OpAttrs a;
  a.f0 = eps;
  return record(Op::kLayerNorm, std::move(a), {x, gamma, beta});
}

ValueId Tape::softmax(ValueId x, int axis) {
  OpAttrs a;
  a.i0 = axis;
  return record(Op::kSoftmax, std::move(a), {x});
}

ValueId Tape::gelu(ValueId x) { return record(Op::kGelu, {}, {x}); }
ValueId Tape::relu(ValueId x) { return record(Op::kRelu, {}, {x}); }
ValueId Tape::sigmoid(ValueId x) { return record(Op::kSigmoid, {}, {x}); }
ValueId Tape::log(ValueId x) { return record(Op::kLog, {}, {x}); }

ValueId Tape::clamp(ValueId x, double lo, double hi) {
  OpAttrs a;
  a.f0 = lo;
  a.f1 = hi;
  return record(Op::kClamp, std::move(a), {x});
}

ValueId Tape::conv2d(ValueId x, ValueId w, ValueId b, int stride, int padding) {
  if (stride < 1 || padding < 0) throw ContractError("conv2d: bad stride/padding");
  OpAttrs a;
  a.i0 = stride;
  a.i1 = padding;
  return record(Op::kConv2d, std::move(a), {x, w, b});
}

ValueId Tape::transposed_conv2d(ValueId x, ValueId w, ValueId b, int stride) {
  if (stride < 1) throw ContractError("transposed_conv2d: bad stride");
  OpAttrs a;
  a.i0 = stride;
  return record(Op::kTransposedConv2d, std::move(a), {x, w, b});
}

ValueId Tape::batch_norm_train(ValueId x, ValueId gamma, ValueId beta, double eps) {
  OpAttrs a;
  a.f0 = eps;
  a.training = true;
  return record(Op::kBatchNorm, std::move(a), {x, gamma, beta});
}

ValueId Tape::batch_norm_infer(ValueId x, ValueId gamma, ValueId beta, ValueId running_mean,
                               ValueId running_var, double eps) {
  OpAttrs a;
  a.f0 = eps;
  a.training = false;
  return record(Op::kBatchNorm, std::move(a), {x, gamma, beta, running_mean, running_var});
}

ValueId Tape::concat(ValueId a, ValueId b, int axis) {
  OpAttrs at;
  at.i0 = axis;
  return record(Op::kConcat, std::move(at), {a, b});
}

ValueId Tape::slice(ValueId x, int axis, std::size_t start, std::size_t len) {
  OpAttrs a;
  a.i0 = axis;
  a.i1 = static_cast<int>(start);
  a.i2 = static_cast<int>(len);
  return record(Op::kSlice, std::move(a), {x});
}

ValueId Tape::reshape(ValueId x, std::vector<std::size_t> dims) {
  OpAttrs a;
  a.dims = std::move(dims);
  return record(Op::kReshape, std::move(a), {x});
}

ValueId Tape::mean(ValueId x) { return record(Op::kMean, {}, {x}); }
ValueId Tape::sum(ValueId x) { return record(Op::kSum, {}, {x}); }

ValueId Tape::gather_rows(ValueId x, std::vector<std::uint32_t> rows) {
  OpAttrs a;
  a.rows = std::move(rows);
  return record(Op::kGatherRows, std::move(a), {x});
}

ValueId Tape::scatter_rows(ValueId src, std::vector<std::uint32_t> rows, std::size_t n_rows) {
  OpAttrs a;
  a.rows = std::move(rows);
  a.i0 = static_cast<int>(n_rows);
  return record(Op::kScatterRows, std::move(a), {src});
}

ValueId Tape::repeat_row(ValueId v, std::size_t count) {
  OpAttrs a;
  a.i0 = static_cast<int>(count);
  return record(Op::kRepeatRow, std::move(a), {v});
}

Tensor Tape::eval(Op op, const OpAttrs& attrs, const std::vector<const Tensor*>& in) {
  switch (op) {
    case Op::kConstant:
    case Op::kParameter:
      throw ContractError("eval called on a leaf");

    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      require(a.same_shape(b), "elementwise op: shape mismatch");
      std::vector<double> out(a.size());
      auto pa = a.data(), pb = b.data();
      switch (op) {
        case Op::kAdd:
          for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
          break;
        case Op::kSub:
          for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
          break;
        case Op::kMul:
          for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
          break;
        default:
          for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] / pb[i];
          break;
      }
      return Tensor(a.shape(), std::move(out));
    }

    case Op::kScale: {
      const Tensor& x = *in[0];
      std::vector<double> out(x.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * attrs.f0;
      return Tensor(x.shape(), std::move(out));
    }

    case Op::kAddBias: {
      const Tensor& x = *in[0];
      const Tensor& b = *in[1];
      require(x.rank() >= 1 && b.rank() == 1, "add_bias: rank");
      std::size_t d = x.shape().back();
      require(b.size() == d, "add_bias: bias width mismatch");
      std::vector<double> out(x.size());
      std::size_t rows = x.size() / d;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] = x[r * d + c] + b[c];
      }
      return Tensor(x.shape(), std::move(out));
    }

    case Op::kMatmul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be 2-D");
      std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
      require(b.dim(0) == k, "matmul: inner dimensions disagree");
      std::vector<double> out(m * n, 0.0);
      // ikj order: each output accumulates sequentially over k.
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double av = a[i * k + p];
          const double* brow = b.data().data() + p * n;
          double* orow = out.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
      }
      return Tensor({m, n}, std::move(out));
    }

    case Op::kTranspose: {
      const Tensor& x = *in[0];
      require(x.rank() == 2, "transpose: 2-D only");
      std::size_t r = x.dim(0), c = x.dim(1);
      std::vector<double> out(x.size());
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
      }
      return Tensor({c, r}, std::move(out));
    }

    case Op::kLayerNorm: {
      const Tensor& x = *in[0];
      const Tensor& g = *in[1];
      const Tensor& b = *in[2];
      require(x.rank() >= 1, "layer_norm: rank");
      std::size_t d = x.shape().back();
      require(g.rank() == 1 && g.size() == d, "layer_norm: gamma width mismatch");
      require(b.rank() == 1 && b.size() == d, "layer_norm: beta width mismatch");
      std::size_t rows = x.size() / d;
      std::vector<double> out(x.size());
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double mu = 0.0;
        for (std::size_t c = 0; c < d; ++c) mu += xr[c];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + attrs.f0);
        for (std::size_t c = 0; c < d; ++c) {
          out[r * d + c] = (xr[c] - mu) * inv * g[c] + b[c];
        }
      }
      return Tensor(x.shape(), std::move(out));
    }

    case Op::kSoftmax: {
      const Tensor& x = *in[0];
      AxisSplit s = split_at_axis(x.shape(), attrs.i0);
      std::vector<double> out(x.size());
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t q = 0; q < s.inner; ++q) {
          std::size_t base = o * s.n * s.inner + q;
          double mx = x[base];
          for (std::size_t i = 1; i < s.n; ++i) mx = std::max(mx, x[base + i * s.inner]);
          double z = 0.0;
          for (std::size_t i = 0; i < s.n; ++i) {
            double e = std::exp(x[base + i * s.inner] - mx);
            out[base + i * s.inner] = e;
            z += e;
          }
          for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] /= z;
        }
      }
      return Tensor(x.shape(), std::move(out));
    }

    case Op::kGelu: {
      const Tensor& x = *in[0];
      std::vector<double> out(x.size());
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
      }
      return Tensor(x.shape(), std::move(out));
    }

    case Op::kRelu: {
      const Tensor& x = *in[0];
      std::vector<double> out(x.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
      return Tensor(x.shape(), std::move(out));
    }

    case Op::kSigmoid: {
      const Tensor& x = *in[0];
      std::vector<double> out(x.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x[i]);
      return Tensor(x.shape(), std::move(out));
    }

    case Op::kLog: {
      const Tensor& x = *in[0];
      std::vector<double> out(x.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(x[i]);
      return Tensor(x.shape(), std::move(out));
    }

    case Op::kClamp: {
      const Tensor& x = *in[0];
      std::vector<double> out(x.size());
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::min(std::max(x[i], attrs.f0), attrs.f1);
      }
      return Tensor(x.shape(), std::move(out));
    }

    case Op::kConv2d: {
      const Tensor& x = *in[0];
      const Tensor& w = *in[1];
      const Tensor& b = *in[2];
      require(x.rank() == 3 && w.rank() == 4 && b.rank() == 1, "conv2d: ranks");
      std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
      std::size_t co = w.dim(0), k = w.dim(2);
      require(w.dim(1) == ci, "conv2d: channel mismatch");
      require(w.dim(3) == k, "conv2d: kernel must be square");
      require(b.size() == co, "conv2d: bias width mismatch");
      int s = attrs.i0, p = attrs.i1;
      std::size_t ho = conv_out_extent(h, k, s, p);
      std::size_t wo = conv_out_extent(wd, k, s, p);
      std::vector<double> out(co * ho * wo);
      for (std::size_t oc = 0; oc < co; ++oc) {
        double* oplane = out.data() + oc * ho * wo;
        for (std::size_t i = 0; i < ho * wo; ++i) oplane[i] = b[oc];
        for (std::size_t ic = 0; ic < ci; ++ic) {
          const double* xplane = x.data().data() + ic * h * wd;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              double wv = w[((oc * ci + ic) * k + ky) * k + kx];
              for (std::size_t oh = 0; oh < ho; ++oh) {
                long ih = static_cast<long>(oh) * s + static_cast<long>(ky) - p;
                if (ih < 0 || ih >= static_cast<long>(h)) continue;
                const double* xrow = xplane + static_cast<std::size_t>(ih) * wd;
                double* orow = oplane + oh * wo;
                for (std::size_t ow = 0; ow < wo; ++ow) {
                  long iw = static_cast<long>(ow) * s + static_cast<long>(kx) - p;
                  if (iw < 0 || iw >= static_cast<long>(wd)) continue;
                  orow[ow] += wv * xrow[static_cast<std::size_t>(iw)];
                }
              }
            }
          }
        }
      }
      return Tensor({co, ho, wo}, std::move(out));
    }

    case Op::kTransposedConv2d: {
      const Tensor& x = *in[0];
      const Tensor& w = *in[1];
      const Tensor& b = *in[2];
      require(x.rank() == 3 && w.rank() == 4 && b.rank() == 1, "transposed_conv2d: ranks");
      std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
      require(w.dim(0) == ci, "transposed_conv2d: channel mismatch");
      std::size_t co = w.dim(1), k = w.dim(2);
      require(w.dim(3) == k, "transposed_conv2d: kernel must be square");
      require(b.size() == co, "transposed_conv2d: bias width mismatch");
      std::size_t s = static_cast<std::size_t>(attrs.i0);
      std::size_t ho = (h - 1) * s + k;
      std::size_t wo = (wd - 1) * s + k;
      std::vector<double> out(co * ho * wo);
      for (std::size_t oc = 0; oc < co; ++oc) {
        double* oplane = out.data() + oc * ho * wo;
        for (std::size_t i = 0; i < ho * wo; ++i) oplane[i] = b[oc];
      }
      for (std::size_t ic = 0; ic < ci; ++ic) {
        const double* xplane = x.data().data() + ic * h * wd;
        for (std::size_t oc = 0; oc < co; ++oc) {
          double* oplane = out.data() + oc * ho * wo;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              double wv = w[((ic * co + oc) * k + ky) * k + kx];
              for (std::size_t ih = 0; ih < h; ++ih) {
                const double* xrow = xplane + ih * wd;
                double* orow = oplane + (ih * s + ky) * wo + kx;
                for (std::size_t iw = 0; iw < wd; ++iw) {
                  orow[iw * s] += wv * xrow[iw];
                }
              }
            }
          }
        }
      }
      return Tensor({co, ho, wo}, std::move(out));
    }

    case Op::kBatchNorm: {
      const Tensor& x = *in[0];
      const Tensor& g = *in[1];
      const Tensor& bt = *in[2];
      require(x.rank() == 3, "batch_norm: input must be CxHxW");
      std::size_t c = x.dim(0), m = x.dim(1) * x.dim(2);
      require(g.size() == c && bt.size() == c, "batch_norm: scale/shift width mismatch");
      std::vector<double> out(x.size());
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* xp = x.data().data() + ch * m;
        double mu, var;
        if (attrs.training) {
          mu = 0.0;
          for (std::size_t i = 0; i < m; ++i) mu += xp[i];
          mu /= static_cast<double>(m);
          var = 0.0;
          for (std::size_t i = 0; i < m; ++i) var += (xp[i] - mu) * (xp[i] - mu);
          var /= static_cast<double>(m);
        } else {
          const Tensor& rm = *in[3];
          const Tensor& rv = *in[4];
          require(rm.size() == c && rv.size() == c, "batch_norm: running stats width mismatch");
          mu = rm[ch];
          var = rv[ch];
        }
        double inv = 1.0 / std::sqrt(var + attrs.f0);
        double* op = out.data() + ch * m;
        for (std::size_t i = 0; i < m; ++i) op[i] = (xp[i] - mu) * inv * g[ch] + bt[ch];
      }
      return Tensor(x.shape(), std::move(out));
    }

    case Op::kConcat: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      require(a.rank() == b.rank(), "concat: rank mismatch");
      AxisSplit sa = split_at_axis(a.shape(), attrs.i0);
      AxisSplit sb = split_at_axis(b.shape(), attrs.i0);
      require(sa.outer == sb.outer && sa.inner == sb.inner, "concat: off-axis shape mismatch");
      std::vector<std::size_t> shape = a.shape();
      shape[static_cast<std::size_t>(attrs.i0)] = sa.n + sb.n;
      std::vector<double> out(a.size() + b.size());
      std::size_t an = sa.n * sa.inner, bn = sb.n * sb.inner;
      for (std::size_t o = 0; o < sa.outer; ++o) {
        std::memcpy(out.data() + o * (an + bn), a.data().data() + o * an, an * sizeof(double));
        std::memcpy(out.data() + o * (an + bn) + an, b.data().data() + o * bn,
                    bn * sizeof(double));
      }
      return Tensor(std::move(shape), std::move(out));
    }

    case Op::kSlice: {
      const Tensor& x = *in[0];
      AxisSplit s = split_at_axis(x.shape(), attrs.i0);
      std::size_t start = static_cast<std::size_t>(attrs.i1);
      std::size_t len = static_cast<std::size_t>(attrs.i2);
      require(len > 0 && start + len <= s.n, "slice: range out of bounds");
      std::vector<std::size_t> shape = x.shape();
      shape[static_cast<std::size_t>(attrs.i0)] = len;
      std::vector<double> out(s.outer * len * s.inner);
      for (std::size_t o = 0; o < s.outer; ++o) {
        std::memcpy(out.data() + o * len * s.inner,
                    x.data().data() + (o * s.n + start) * s.inner,
                    len * s.inner * sizeof(double));
      }
      return Tensor(std::move(shape), std::move(out));
    }

    case Op::kReshape: {
      const Tensor& x = *in[0];
      require(Tensor::shape_product(attrs.dims) == x.size(), "reshape: element count mismatch");
      return Tensor(attrs.dims, std::vector<double>(x.data().begin(), x.data().end()));
    }

    case Op::kMean:
    case Op::kSum: {
      const Tensor& x = *in[0];
      double acc = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
      if (op == Op::kMean) acc /= static_cast<double>(x.size());
      return Tensor::scalar(acc);
    }

    case Op::kGatherRows: {
      const Tensor& x = *in[0];
      require(x.rank() == 2, "gather_rows: 2-D only");
      if (attrs.rows.empty()) throw ContractError("gather_rows: empty index list");
      std::size_t d = x.dim(1);
      std::vector<double> out(attrs.rows.size() * d);
      for (std::size_t r = 0; r < attrs.rows.size(); ++r) {
        require(attrs.rows[r] < x.dim(0), "gather_rows: index out of range");
        std::memcpy(out.data() + r * d, x.data().data() + attrs.rows[r] * d,
                    d * sizeof(double));
      }
      return Tensor({attrs.rows.size(), d}, std::move(out));
    }

    case Op::kScatterRows: {
      const Tensor& src = *in[0];
      require(src.rank() == 2, "scatter_rows: 2-D only");
      require(src.dim(0) == attrs.rows.size(), "scatter_rows: index count mismatch");
      std::size_t n = static_cast<std::size_t>(attrs.i0), d = src.dim(1);
      std::vector<double> out(n * d, 0.0);
      for (std::size_t r = 0; r < attrs.rows.size(); ++r) {
        require(attrs.rows[r] < n, "scatter_rows: index out of range");
        double* dst = out.data() + attrs.rows[r] * d;
        const double* sp = src.data().data() + r * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += sp[c];
      }
      return Tensor({n, d}, std::move(out));
    }

    case Op::kRepeatRow: {
      const Tensor& v = *in[0];
      require(v.rank() == 1, "repeat_row: 1-D only");
      std::size_t count = static_cast<std::size_t>(attrs.i0), d = v.size();
      require(count > 0, "repeat_row: count must be positive");
      std::vector<double> out(count * d);
      for (std::size_t r = 0; r < count; ++r) {
        std::memcpy(out.data() + r * d, v.data().data(), d * sizeof(double));
      }
      return Tensor({count, d}, std::move(out));
    }
  }
  throw ContractError("eval: unknown operator");
}

void Tape::batch_norm_stats(ValueId bn_node, Tensor& mean_out, Tensor& var_out) const {
  const Node& n = nodes_[bn_node];
  if (n.op != Op::kBatchNorm || !n.attrs.training) {
    throw ContractError("batch_norm_stats: not a training-mode batch-norm node");
  }
  const Tensor& x = nodes_[n.in[0]].value;
  std::size_t c = x.dim(0), m = x.dim(1) * x.dim(2);
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* xp = x.data().data() + ch * m;
    for (std::size_t i = 0; i < m; ++i) mu[ch] += xp[i];
    mu[ch] /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) var[ch] += (xp[i] - mu[ch]) * (xp[i] - mu[ch]);
    var[ch] /= static_cast<double>(m);
  }
  mean_out = Tensor({c}, std::move(mu));
  var_out = Tensor({c}, std::move(var));
}

std::vector<Tensor> Tape::replay_forward() const {
  std::vector<Tensor> values;
  values.reserve(nodes_.size());
  for (const Node& n : nodes_) {
    if (n.op == Op::kConstant || n.op == Op::kParameter) {
      values.push_back(n.value);
      continue;
    }
    std::vector<const Tensor*> in;
    in.reserve(n.nin);
    for (std::uint8_t i = 0; i < n.nin; ++i) in.push_back(&values[n.in[i]]);
    values.push_back(eval(n.op, n.attrs, in));
  }
  return values;
}

namespace {

// Accumulation buffers for the backward pass; kept as raw vectors so the
// finiteness check runs once, on the final gradients.
struct Adjoints {
  std::vector<std::vector<double>> buf;
  explicit Adjoints(std::size_t n) : buf(n) {}
  std::vector<double>& at(ValueId id, std::size_t size) {
    if (buf[id].empty()) buf[id].assign(size, 0.0);
    return buf[id];
  }
  bool touched(ValueId id) const { return !buf[id].empty(); }
};

}  // namespace

std::unordered_map<ValueId, Tensor> Tape::backward(ValueId loss) const {
  if (loss >= nodes_.size()) throw ContractError("backward: unknown loss id");
  if (nodes_[loss].value.size() != 1) {
    throw ContractError("backward: loss must be a scalar");
  }

  Adjoints adj(nodes_.size());
  adj.at(loss, 1)[0] = 1.0;

  for (ValueId id = loss + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!adj.touched(id)) continue;
    if (n.op == Op::kConstant || n.op == Op::kParameter) continue;
    const std::vector<double>& g = adj.buf[id];
    const Tensor& y = n.value;

    auto input = [&](int i) -> const Tensor& { return nodes_[n.in[static_cast<std::size_t>(i)]].value; };
    auto gbuf = [&](int i) -> std::vector<double>& {
      return adj.at(n.in[static_cast<std::size_t>(i)], input(i).size());
    };

    switch (n.op) {
      case Op::kAdd: {
        auto& ga = gbuf(0);
        auto& gb = gbuf(1);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        break;
      }
      case Op::kSub: {
        auto& ga = gbuf(0);
        auto& gb = gbuf(1);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        break;
      }
      case Op::kMul: {
        const Tensor& a = input(0);
        const Tensor& b = input(1);
        auto& ga = gbuf(0);
        auto& gb = gbuf(1);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
        break;
      }
      case Op::kDiv: {
        const Tensor& a = input(0);
        const Tensor& b = input(1);
        auto& ga = gbuf(0);
        auto& gb = gbuf(1);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / b[i];
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * a[i] / (b[i] * b[i]);
        break;
      }
      case Op::kScale: {
        auto& gx = gbuf(0);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * n.attrs.f0;
        break;
      }
      case Op::kAddBias: {
        const Tensor& x = input(0);
        std::size_t d = x.shape().back();
        std::size_t rows = x.size() / d;
        auto& gx = gbuf(0);
        auto& gb = gbuf(1);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
        }
        break;
      }
      case Op::kMatmul: {
        const Tensor& a = input(0);
        const Tensor& b = input(1);
        std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
        auto& ga = gbuf(0);
        auto& gb = gbuf(1);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* brow = b.data().data() + p * nn;
            const double* grow = g.data() + i * nn;
            for (std::size_t j = 0; j < nn; ++j) acc += grow[j] * brow[j];
            ga[i * k + p] += acc;
          }
        }
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double av = a[i * k + p];
            const double* grow = g.data() + i * nn;
            double* gbrow = gb.data() + p * nn;
            for (std::size_t j = 0; j < nn; ++j) gbrow[j] += av * grow[j];
          }
        }
        break;
      }
      case Op::kTranspose: {
        const Tensor& x = input(0);
        std::size_t r = x.dim(0), c = x.dim(1);
        auto& gx = gbuf(0);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
        }
        break;
      }
      case Op::kLayerNorm: {
        const Tensor& x = input(0);
        const Tensor& gm = input(1);
        std::size_t d = x.shape().back();
        std::size_t rows = x.size() / d;
        auto& gx = gbuf(0);
        auto& gg = gbuf(1);
        auto& gbta = gbuf(2);
        std::vector<double> xhat(d), dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = x.data().data() + r * d;
          const double* gr = g.data() + r * d;
          double mu = 0.0;
          for (std::size_t c = 0; c < d; ++c) mu += xr[c];
          mu /= static_cast<double>(d);
          double var = 0.0;
          for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
          var /= static_cast<double>(d);
          double inv = 1.0 / std::sqrt(var + n.attrs.f0);
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            xhat[c] = (xr[c] - mu) * inv;
            dxhat[c] = gr[c] * gm[c];
            gg[c] += gr[c] * xhat[c];
            gbta[c] += gr[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xhat[c];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c) {
            gx[r * d + c] += (dxhat[c] - m1 - xhat[c] * m2) * inv;
          }
        }
        break;
      }
      case Op::kSoftmax: {
        AxisSplit s = split_at_axis(y.shape(), n.attrs.i0);
        auto& gx = gbuf(0);
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t q = 0; q < s.inner; ++q) {
            std::size_t base = o * s.n * s.inner + q;
            double dot = 0.0;
            for (std::size_t i = 0; i < s.n; ++i) {
              dot += g[base + i * s.inner] * y[base + i * s.inner];
            }
            for (std::size_t i = 0; i < s.n; ++i) {
              std::size_t idx = base + i * s.inner;
              gx[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
        break;
      }
      case Op::kGelu: {
        const Tensor& x = input(0);
        auto& gx = gbuf(0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double phi = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
          double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
          gx[i] += g[i] * (phi + x[i] * pdf);
        }
        break;
      }
      case Op::kRelu: {
        const Tensor& x = input(0);
        auto& gx = gbuf(0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] > 0.0) gx[i] += g[i];
        }
        break;
      }
      case Op::kSigmoid: {
        auto& gx = gbuf(0);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
        break;
      }
      case Op::kLog: {
        const Tensor& x = input(0);
        auto& gx = gbuf(0);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / x[i];
        break;
      }
      case Op::kClamp: {
        const Tensor& x = input(0);
        auto& gx = gbuf(0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] >= n.attrs.f0 && x[i] <= n.attrs.f1) gx[i] += g[i];
        }
        break;
      }
      case Op::kConv2d: {
        const Tensor& x = input(0);
        const Tensor& w = input(1);
        std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
        std::size_t co = w.dim(0), k = w.dim(2);
        int s = n.attrs.i0, p = n.attrs.i1;
        std::size_t ho = y.dim(1), wo = y.dim(2);
        auto& gx = gbuf(0);
        auto& gw = gbuf(1);
        auto& gb = gbuf(2);
        for (std::size_t oc = 0; oc < co; ++oc) {
          const double* gplane = g.data() + oc * ho * wo;
          for (std::size_t i = 0; i < ho * wo; ++i) gb[oc] += gplane[i];
          for (std::size_t ic = 0; ic < ci; ++ic) {
            const double* xplane = x.data().data() + ic * h * wd;
            double* gxplane = gx.data() + ic * h * wd;
            for (std::size_t ky = 0; ky < k; ++ky) {
              for (std::size_t kx = 0; kx < k; ++kx) {
                std::size_t widx = ((oc * ci + ic) * k + ky) * k + kx;
                double wv = w[widx];
                double wacc = 0.0;
                for (std::size_t oh = 0; oh < ho; ++oh) {
                  long ih = static_cast<long>(oh) * s + static_cast<long>(ky) - p;
                  if (ih < 0 || ih >= static_cast<long>(h)) continue;
                  const double* xrow = xplane + static_cast<std::size_t>(ih) * wd;
                  double* gxrow = gxplane + static_cast<std::size_t>(ih) * wd;
                  const double* grow = gplane + oh * wo;
                  for (std::size_t ow = 0; ow < wo; ++ow) {
                    long iw = static_cast<long>(ow) * s + static_cast<long>(kx) - p;
                    if (iw < 0 || iw >= static_cast<long>(wd)) continue;
                    gxrow[static_cast<std::size_t>(iw)] += wv * grow[ow];
                    wacc += xrow[static_cast<std::size_t>(iw)] * grow[ow];
                  }
                }
                gw[widx] += wacc;
              }
            }
          }
        }
        break;
      }
      case Op::kTransposedConv2d: {
        const Tensor& x = input(0);
        const Tensor& w = input(1);
        std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
        std::size_t co = w.dim(1), k = w.dim(2);
        std::size_t s = static_cast<std::size_t>(n.attrs.i0);
        std::size_t ho = y.dim(1), wo = y.dim(2);
        auto& gx = gbuf(0);
        auto& gw = gbuf(1);
        auto& gb = gbuf(2);
        for (std::size_t oc = 0; oc < co; ++oc) {
          const double* gplane = g.data() + oc * ho * wo;
          for (std::size_t i = 0; i < ho * wo; ++i) gb[oc] += gplane[i];
        }
        for (std::size_t ic = 0; ic < ci; ++ic) {
          const double* xplane = x.data().data() + ic * h * wd;
          double* gxplane = gx.data() + ic * h * wd;
          for (std::size_t oc = 0; oc < co; ++oc) {
            const double* gplane = g.data() + oc * ho * wo;
            for (std::size_t ky = 0; ky < k; ++ky) {
              for (std::size_t kx = 0; kx < k; ++kx) {
                std::size_t widx = ((ic * co + oc) * k + ky) * k + kx;
                double wv = w[widx];
                double wacc = 0.0;
                for (std::size_t ih = 0; ih < h; ++ih) {
                  const double* xrow = xplane + ih * wd;
                  double* gxrow = gxplane + ih * wd;
                  const double* grow = gplane + (ih * s + ky) * wo + kx;
                  for (std::size_t iw = 0; iw < wd; ++iw) {
                    gxrow[iw] += wv * grow[iw * s];
                    wacc += xrow[iw] * grow[iw * s];
                  }
                }
                gw[widx] += wacc;
              }
            }
          }
        }
        break;
      }
      case Op::kBatchNorm: {
        const Tensor& x = input(0);
        const Tensor& gm = input(1);
        std::size_t c = x.dim(0), m = x.dim(1) * x.dim(2);
        auto& gx = gbuf(0);
        auto& gg = gbuf(1);
        auto& gbta = gbuf(2);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* xp = x.data().data() + ch * m;
          const double* gp = g.data() + ch * m;
          double mu, var;
          if (n.attrs.training) {
            mu = 0.0;
            for (std::size_t i = 0; i < m; ++i) mu += xp[i];
            mu /= static_cast<double>(m);
            var = 0.0;
            for (std::size_t i = 0; i < m; ++i) var += (xp[i] - mu) * (xp[i] - mu);
            var /= static_cast<double>(m);
          } else {
            mu = input(3)[ch];
            var = input(4)[ch];
          }
          double inv = 1.0 / std::sqrt(var + n.attrs.f0);
          double* gxp = gx.data() + ch * m;
          if (n.attrs.training) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
              double xhat = (xp[i] - mu) * inv;
              gg[ch] += gp[i] * xhat;
              gbta[ch] += gp[i];
              m1 += gp[i] * gm[ch];
              m2 += gp[i] * gm[ch] * xhat;
            }
            m1 /= static_cast<double>(m);
            m2 /= static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i) {
              double xhat = (xp[i] - mu) * inv;
              gxp[i] += (gp[i] * gm[ch] - m1 - xhat * m2) * inv;
            }
          } else {
            // Running statistics are state, not differentiable inputs.
            for (std::size_t i = 0; i < m; ++i) {
              gg[ch] += gp[i] * (xp[i] - mu) * inv;
              gbta[ch] += gp[i];
              gxp[i] += gp[i] * gm[ch] * inv;
            }
          }
        }
        break;
      }
      case Op::kConcat: {
        const Tensor& a = input(0);
        AxisSplit sa = split_at_axis(a.shape(), n.attrs.i0);
        AxisSplit sb = split_at_axis(input(1).shape(), n.attrs.i0);
        auto& ga = gbuf(0);
        auto& gb = gbuf(1);
        std::size_t an = sa.n * sa.inner, bn = sb.n * sb.inner;
        for (std::size_t o = 0; o < sa.outer; ++o) {
          const double* gp = g.data() + o * (an + bn);
          for (std::size_t i = 0; i < an; ++i) ga[o * an + i] += gp[i];
          for (std::size_t i = 0; i < bn; ++i) gb[o * bn + i] += gp[an + i];
        }
        break;
      }
      case Op::kSlice: {
        const Tensor& x = input(0);
        AxisSplit s = split_at_axis(x.shape(), n.attrs.i0);
        std::size_t start = static_cast<std::size_t>(n.attrs.i1);
        std::size_t len = static_cast<std::size_t>(n.attrs.i2);
        auto& gx = gbuf(0);
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* gp = g.data() + o * len * s.inner;
          double* gxp = gx.data() + (o * s.n + start) * s.inner;
          for (std::size_t i = 0; i < len * s.inner; ++i) gxp[i] += gp[i];
        }
        break;
      }
      case Op::kReshape: {
        auto& gx = gbuf(0);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        break;
      }
      case Op::kMean: {
        const Tensor& x = input(0);
        auto& gx = gbuf(0);
        double gv = g[0] / static_cast<double>(x.size());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gv;
        break;
      }
      case Op::kSum: {
        auto& gx = gbuf(0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
        break;
      }
      case Op::kGatherRows: {
        const Tensor& x = input(0);
        std::size_t d = x.dim(1);
        auto& gx = gbuf(0);
        for (std::size_t r = 0; r < n.attrs.rows.size(); ++r) {
          double* dst = gx.data() + n.attrs.rows[r] * d;
          const double* gp = g.data() + r * d;
          for (std::size_t c = 0; c < d; ++c) dst[c] += gp[c];
        }
        break;
      }
      case Op::kScatterRows: {
        const Tensor& src = input(0);
        std::size_t d = src.dim(1);
        auto& gs = gbuf(0);
        for (std::size_t r = 0; r < n.attrs.rows.size(); ++r) {
          const double* gp = g.data() + n.attrs.rows[r] * d;
          double* dst = gs.data() + r * d;
          for (std::size_t c = 0; c < d; ++c) dst[c] += gp[c];
        }
        break;
      }
      case Op::kRepeatRow: {
        const Tensor& v = input(0);
        std::size_t d = v.size();
        std::size_t count = static_cast<std::size_t>(n.attrs.i0);
        auto& gv = gbuf(0);
        for (std::size_t r = 0; r < count; ++r) {
          const double* gp = g.data() + r * d;
          for (std::size_t c = 0; c < d; ++c) gv[c] += gp[c];
        }
        break;
      }
      case Op::kConstant:
      case Op::kParameter:
        break;
    }
  }

  std::unordered_map<ValueId, Tensor> grads;
  for (ValueId id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].op != Op::kParameter) continue;
    if (adj.touched(id)) {
      grads.emplace(id, Tensor(nodes_[id].value.shape(), std::move(adj.buf[id])));
    } else {
      grads.emplace(id, Tensor::zeros(nodes_[id].value.shape()));
    }
  }
  return grads;
}

}  // namespace oeseg
