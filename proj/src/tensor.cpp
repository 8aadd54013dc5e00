#include "refrec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "refrec/rng.hpp"

namespace refrec {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  }
}

std::vector<double>& parent_scratch(TensorNode& node, std::size_t i) {
  TensorNode& p = *node.parents[i];
  p.ensure_scratch();
  return p.scratch;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
}

void TensorNode::ensure_scratch() {
  if (scratch.empty()) scratch.assign(value.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_data(shape, std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), 0.0),
                   requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  return from_data(shape, std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), fill),
                   requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) fail("tensor: non-positive dim in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    fail("tensor: shape " + shape_str(shape) + " wants " +
         std::to_string(shape_numel(shape)) + " values, got " + std::to_string(data.size()));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  node->is_leaf = true;
  if (requires_grad) node->ensure_grad();
  return Tensor(std::move(node));
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::uint64_t seed,
                       bool requires_grad) {
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  Rng rng(seed);
  for (double& v : data) v = rng.uniform(lo, hi);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

std::span<double> Tensor::mutable_value() {
  if (!node_->is_leaf) fail("tensor: only leaf values may be mutated");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) fail("tensor: item() on non-scalar shape " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::zero_grad() {
  node_->ensure_grad();
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                       std::function<void(TensorNode&)> backward) {
  if (shape_numel(shape) != static_cast<std::int64_t>(value.size())) {
    fail("make_op: shape/value size mismatch");
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->is_leaf = false;
  node->parents.reserve(parents.size());
  for (const Tensor& p : parents) {
    if (!p.defined()) fail("make_op: undefined parent tensor");
    node->requires_grad = node->requires_grad || p.requires_grad();
    node->parents.push_back(p.node());
  }
  if (node->requires_grad) node->backward_fn = std::move(backward);
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<double> out(a.value().begin(), a.value().end());
  auto bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!n.parents[p]->requires_grad) continue;
      auto& ps = parent_scratch(n, p);
      for (std::size_t i = 0; i < ps.size(); ++i) ps[i] += n.scratch[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  std::vector<double> out(a.value().begin(), a.value().end());
  auto bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    if (n.parents[0]->requires_grad) {
      auto& ps = parent_scratch(n, 0);
      for (std::size_t i = 0; i < ps.size(); ++i) ps[i] += n.scratch[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& ps = parent_scratch(n, 1);
      for (std::size_t i = 0; i < ps.size(); ++i) ps[i] -= n.scratch[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  auto av = a.value();
  auto bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor::make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      auto& ps = parent_scratch(n, 0);
      for (std::size_t i = 0; i < ps.size(); ++i) ps[i] += n.scratch[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& ps = parent_scratch(n, 1);
      for (std::size_t i = 0; i < ps.size(); ++i) ps[i] += n.scratch[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.value().begin(), a.value().end());
  for (double& v : out) v *= factor;
  return Tensor::make_op(a.shape(), std::move(out), {a}, [factor](TensorNode& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& ps = parent_scratch(n, 0);
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i] += factor * n.scratch[i];
  });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(av[i]);
  return Tensor::make_op(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& ps = parent_scratch(n, 0);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      double y = n.value[i];
      ps[i] += n.scratch[i] * y * (1.0 - y);
    }
  });
}

Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
  return Tensor::make_op(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& ps = parent_scratch(n, 0);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      double y = n.value[i];
      ps[i] += n.scratch[i] * (1.0 - y * y);
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return Tensor::make_op(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    if (!n.parents[0]->requires_grad) return;
    const auto& av = n.parents[0]->value;
    auto& ps = parent_scratch(n, 0);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (av[i] > 0.0) ps[i] += n.scratch[i];
    }
  });
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvDims {
  int cin, h, w;
  int cout, kh, kw;
  int stride, padding;
  int oh, ow;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                   int stride, int padding) {
  if (input.shape().size() != 3) fail("conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
  if (kernel.shape().size() != 4) {
    fail("conv2d: kernel must be [C_out,C_in,kH,kW], got " + shape_str(kernel.shape()));
  }
  if (bias.shape().size() != 1) fail("conv2d: bias must be [C_out], got " + shape_str(bias.shape()));
  ConvDims d{};
  d.cin = input.shape()[0];
  d.h = input.shape()[1];
  d.w = input.shape()[2];
  d.cout = kernel.shape()[0];
  d.kh = kernel.shape()[2];
  d.kw = kernel.shape()[3];
  d.stride = stride;
  d.padding = padding;
  if (kernel.shape()[1] != d.cin) {
    fail("conv2d: kernel expects " + std::to_string(kernel.shape()[1]) + " input channels, input has " +
         std::to_string(d.cin));
  }
  if (bias.shape()[0] != d.cout) fail("conv2d: bias size does not match output channels");
  if (stride < 1) fail("conv2d: stride must be >= 1");
  if (padding < 0) fail("conv2d: padding must be >= 0");
  if (d.kh > d.h + 2 * padding || d.kw > d.w + 2 * padding) {
    fail("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
         shape_str(input.shape()) + " (padding " + std::to_string(padding) + ")");
  }
  d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
  d.ow = (d.w + 2 * padding - d.kw) / stride + 1;
  return d;
}

// Output rows/cols for which the kernel tap (kh,kw) lands inside the input.
inline void tap_range(int k, int pad, int stride, int in_dim, int out_dim, int& lo, int& hi) {
  int shift = pad - k;  // in = out*stride - shift
  lo = shift <= 0 ? 0 : (shift + stride - 1) / stride;
  int last = (in_dim - 1 + shift) / stride;
  hi = std::min(out_dim - 1, last);
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding) {
  const ConvDims d = conv_dims(input, kernel, bias, stride, padding);
  std::vector<double> out(static_cast<std::size_t>(d.cout) * d.oh * d.ow);
  const double* in = input.value().data();
  const double* ker = kernel.value().data();
  const double* b = bias.value().data();

  for (int co = 0; co < d.cout; ++co) {
    double* oc = out.data() + static_cast<std::size_t>(co) * d.oh * d.ow;
    std::fill(oc, oc + static_cast<std::size_t>(d.oh) * d.ow, b[co]);
    for (int ci = 0; ci < d.cin; ++ci) {
      const double* ic = in + static_cast<std::size_t>(ci) * d.h * d.w;
      const double* kc = ker + (static_cast<std::size_t>(co) * d.cin + ci) * d.kh * d.kw;
      for (int kh = 0; kh < d.kh; ++kh) {
        int oh_lo, oh_hi;
        tap_range(kh, d.padding, d.stride, d.h, d.oh, oh_lo, oh_hi);
        for (int kw = 0; kw < d.kw; ++kw) {
          int ow_lo, ow_hi;
          tap_range(kw, d.padding, d.stride, d.w, d.ow, ow_lo, ow_hi);
          const double wgt = kc[kh * d.kw + kw];
          for (int oh = oh_lo; oh <= oh_hi; ++oh) {
            const double* irow = ic + static_cast<std::size_t>(oh * d.stride + kh - d.padding) * d.w;
            double* orow = oc + static_cast<std::size_t>(oh) * d.ow;
            for (int ow = ow_lo; ow <= ow_hi; ++ow) {
              orow[ow] += wgt * irow[ow * d.stride + kw - d.padding];
            }
          }
        }
      }
    }
  }

  auto bwd = [d](TensorNode& n) {
    const auto& in = n.parents[0]->value;
    const auto& ker = n.parents[1]->value;
    const std::vector<double>& gout = n.scratch;

    if (n.parents[0]->requires_grad) {
      auto& gin = parent_scratch(n, 0);
      for (int co = 0; co < d.cout; ++co) {
        const double* goc = gout.data() + static_cast<std::size_t>(co) * d.oh * d.ow;
        for (int ci = 0; ci < d.cin; ++ci) {
          double* gic = gin.data() + static_cast<std::size_t>(ci) * d.h * d.w;
          const double* kc = ker.data() + (static_cast<std::size_t>(co) * d.cin + ci) * d.kh * d.kw;
          for (int kh = 0; kh < d.kh; ++kh) {
            int oh_lo, oh_hi;
            tap_range(kh, d.padding, d.stride, d.h, d.oh, oh_lo, oh_hi);
            for (int kw = 0; kw < d.kw; ++kw) {
              int ow_lo, ow_hi;
              tap_range(kw, d.padding, d.stride, d.w, d.ow, ow_lo, ow_hi);
              const double wgt = kc[kh * d.kw + kw];
              for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                double* girow = gic + static_cast<std::size_t>(oh * d.stride + kh - d.padding) * d.w;
                const double* gorow = goc + static_cast<std::size_t>(oh) * d.ow;
                for (int ow = ow_lo; ow <= ow_hi; ++ow) {
                  girow[ow * d.stride + kw - d.padding] += wgt * gorow[ow];
                }
              }
            }
          }
        }
      }
    }

    if (n.parents[1]->requires_grad) {
      auto& gker = parent_scratch(n, 1);
      for (int co = 0; co < d.cout; ++co) {
        const double* goc = gout.data() + static_cast<std::size_t>(co) * d.oh * d.ow;
        for (int ci = 0; ci < d.cin; ++ci) {
          const double* ic = in.data() + static_cast<std::size_t>(ci) * d.h * d.w;
          double* gkc = gker.data() + (static_cast<std::size_t>(co) * d.cin + ci) * d.kh * d.kw;
          for (int kh = 0; kh < d.kh; ++kh) {
            int oh_lo, oh_hi;
            tap_range(kh, d.padding, d.stride, d.h, d.oh, oh_lo, oh_hi);
            for (int kw = 0; kw < d.kw; ++kw) {
              int ow_lo, ow_hi;
              tap_range(kw, d.padding, d.stride, d.w, d.ow, ow_lo, ow_hi);
              double acc = 0.0;
              for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                const double* irow = ic + static_cast<std::size_t>(oh * d.stride + kh - d.padding) * d.w;
                const double* gorow = goc + static_cast<std::size_t>(oh) * d.ow;
                for (int ow = ow_lo; ow <= ow_hi; ++ow) {
                  acc += gorow[ow] * irow[ow * d.stride + kw - d.padding];
                }
              }
              gkc[kh * d.kw + kw] += acc;
            }
          }
        }
      }
    }

    if (n.parents[2]->requires_grad) {
      auto& gbias = parent_scratch(n, 2);
      for (int co = 0; co < d.cout; ++co) {
        const double* goc = gout.data() + static_cast<std::size_t>(co) * d.oh * d.ow;
        double acc = 0.0;
        for (int i = 0; i < d.oh * d.ow; ++i) acc += goc[i];
        gbias[co] += acc;
      }
    }
  };

  return Tensor::make_op({d.cout, d.oh, d.ow}, std::move(out), {input, kernel, bias}, bwd);
}

// ---------------------------------------------------------------------------
// pool / upsample / concat / slice / broadcast / reduce

Tensor pool2d(const Tensor& input, int window, PoolMode mode) {
  if (input.shape().size() != 3) fail("pool2d: input must be [C,H,W], got " + shape_str(input.shape()));
  if (window < 1) fail("pool2d: window must be >= 1");
  const int c = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  if (h % window != 0 || w % window != 0) {
    fail("pool2d: window " + std::to_string(window) + " does not divide spatial dims of " +
         shape_str(input.shape()));
  }
  const int oh = h / window, ow = w / window;
  std::vector<double> out(static_cast<std::size_t>(c) * oh * ow);
  const double* in = input.value().data();

  if (mode == PoolMode::kMax) {
    std::vector<std::int32_t> argmax(out.size());
    for (int ch = 0; ch < c; ++ch) {
      const double* ic = in + static_cast<std::size_t>(ch) * h * w;
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
          int best = (i * window) * w + j * window;
          double bestv = ic[best];
          for (int di = 0; di < window; ++di) {
            for (int dj = 0; dj < window; ++dj) {
              int idx = (i * window + di) * w + (j * window + dj);
              if (ic[idx] > bestv) {
                bestv = ic[idx];
                best = idx;
              }
            }
          }
          std::size_t o = (static_cast<std::size_t>(ch) * oh + i) * ow + j;
          out[o] = bestv;
          argmax[o] = static_cast<std::int32_t>(static_cast<std::size_t>(ch) * h * w + best);
        }
      }
    }
    return Tensor::make_op({c, oh, ow}, std::move(out), {input},
                           [argmax = std::move(argmax)](TensorNode& n) {
                             if (!n.parents[0]->requires_grad) return;
                             auto& ps = parent_scratch(n, 0);
                             for (std::size_t i = 0; i < n.scratch.size(); ++i) {
                               ps[static_cast<std::size_t>(argmax[i])] += n.scratch[i];
                             }
                           });
  }

  const double inv = 1.0 / (static_cast<double>(window) * window);
  for (int ch = 0; ch < c; ++ch) {
    const double* ic = in + static_cast<std::size_t>(ch) * h * w;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (int di = 0; di < window; ++di) {
          for (int dj = 0; dj < window; ++dj) acc += ic[(i * window + di) * w + (j * window + dj)];
        }
        out[(static_cast<std::size_t>(ch) * oh + i) * ow + j] = acc * inv;
      }
    }
  }
  return Tensor::make_op({c, oh, ow}, std::move(out), {input},
                         [c, h, w, oh, ow, window, inv](TensorNode& n) {
                           if (!n.parents[0]->requires_grad) return;
                           auto& ps = parent_scratch(n, 0);
                           for (int ch = 0; ch < c; ++ch) {
                             for (int i = 0; i < oh; ++i) {
                               for (int j = 0; j < ow; ++j) {
                                 double g = n.scratch[(static_cast<std::size_t>(ch) * oh + i) * ow + j] * inv;
                                 double* pc = ps.data() + static_cast<std::size_t>(ch) * h * w;
                                 for (int di = 0; di < window; ++di) {
                                   for (int dj = 0; dj < window; ++dj) {
                                     pc[(i * window + di) * w + (j * window + dj)] += g;
                                   }
                                 }
                               }
                             }
                           }
                         });
}

Tensor upsample_nearest(const Tensor& input, int factor) {
  if (input.shape().size() != 3) {
    fail("upsample_nearest: input must be [C,H,W], got " + shape_str(input.shape()));
  }
  if (factor < 1) fail("upsample_nearest: factor must be >= 1");
  const int c = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  const int oh = h * factor, ow = w * factor;
  std::vector<double> out(static_cast<std::size_t>(c) * oh * ow);
  const double* in = input.value().data();
  for (int ch = 0; ch < c; ++ch) {
    const double* ic = in + static_cast<std::size_t>(ch) * h * w;
    double* oc = out.data() + static_cast<std::size_t>(ch) * oh * ow;
    for (int i = 0; i < oh; ++i) {
      const double* irow = ic + static_cast<std::size_t>(i / factor) * w;
      double* orow = oc + static_cast<std::size_t>(i) * ow;
      for (int j = 0; j < ow; ++j) orow[j] = irow[j / factor];
    }
  }
  return Tensor::make_op({c, oh, ow}, std::move(out), {input}, [c, h, w, factor, oh, ow](TensorNode& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& ps = parent_scratch(n, 0);
    for (int ch = 0; ch < c; ++ch) {
      double* pc = ps.data() + static_cast<std::size_t>(ch) * h * w;
      const double* gc = n.scratch.data() + static_cast<std::size_t>(ch) * oh * ow;
      for (int i = 0; i < oh; ++i) {
        double* prow = pc + static_cast<std::size_t>(i / factor) * w;
        const double* grow = gc + static_cast<std::size_t>(i) * ow;
        for (int j = 0; j < ow; ++j) prow[j / factor] += grow[j];
      }
    }
  });
}

Tensor concat_channels(const std::vector<Tensor>& tensors) {
  if (tensors.empty()) fail("concat_channels: no inputs");
  int h = 0, w = 0, total_c = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const Shape& s = tensors[i].shape();
    if (s.size() != 3) fail("concat_channels: inputs must be [C,H,W], got " + shape_str(s));
    if (i == 0) {
      h = s[1];
      w = s[2];
    } else if (s[1] != h || s[2] != w) {
      fail("concat_channels: spatial mismatch " + shape_str(tensors[0].shape()) + " vs " + shape_str(s));
    }
    total_c += s[0];
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(total_c) * h * w);
  std::vector<int> channels(tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    channels[i] = tensors[i].shape()[0];
    auto v = tensors[i].value();
    out.insert(out.end(), v.begin(), v.end());
  }
  return Tensor::make_op({total_c, h, w}, std::move(out), tensors,
                         [channels = std::move(channels), h, w](TensorNode& n) {
                           std::size_t offset = 0;
                           for (std::size_t p = 0; p < n.parents.size(); ++p) {
                             std::size_t len = static_cast<std::size_t>(channels[p]) * h * w;
                             if (n.parents[p]->requires_grad) {
                               auto& ps = parent_scratch(n, p);
                               for (std::size_t i = 0; i < len; ++i) ps[i] += n.scratch[offset + i];
                             }
                             offset += len;
                           }
                         });
}

Tensor slice_channels(const Tensor& input, int begin, int end) {
  if (input.shape().size() != 3) {
    fail("slice_channels: input must be [C,H,W], got " + shape_str(input.shape()));
  }
  const int c = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  if (begin < 0 || end > c || begin >= end) {
    fail("slice_channels: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
         ") for " + std::to_string(c) + " channels");
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  auto v = input.value();
  std::vector<double> out(v.begin() + begin * plane, v.begin() + end * plane);
  return Tensor::make_op({end - begin, h, w}, std::move(out), {input}, [begin, plane](TensorNode& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& ps = parent_scratch(n, 0);
    const std::size_t offset = static_cast<std::size_t>(begin) * plane;
    for (std::size_t i = 0; i < n.scratch.size(); ++i) ps[offset + i] += n.scratch[i];
  });
}

Tensor broadcast_spatial(const Tensor& v, int height, int width) {
  if (v.shape().size() != 1) {
    fail("broadcast_spatial: input must be 1-D, got " + shape_str(v.shape()));
  }
  if (height < 1 || width < 1) fail("broadcast_spatial: non-positive spatial dims");
  const int dim = v.shape()[0];
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  std::vector<double> out(static_cast<std::size_t>(dim) * plane);
  for (int d = 0; d < dim; ++d) {
    std::fill_n(out.begin() + d * plane, plane, v.at(d));
  }
  return Tensor::make_op({dim, height, width}, std::move(out), {v}, [dim, plane](TensorNode& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& ps = parent_scratch(n, 0);
    for (int d = 0; d < dim; ++d) {
      double acc = 0.0;
      const double* g = n.scratch.data() + d * plane;
      for (std::size_t i = 0; i < plane; ++i) acc += g[i];
      ps[d] += acc;
    }
  });
}

Tensor reduce(const Tensor& input, ReduceMode mode) {
  double acc = 0.0;
  for (double x : input.value()) acc += x;
  const double n_elems = static_cast<double>(input.numel());
  if (mode == ReduceMode::kMean) acc /= n_elems;
  const double w = mode == ReduceMode::kMean ? 1.0 / n_elems : 1.0;
  return Tensor::make_op({1}, {acc}, {input}, [w](TensorNode& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& ps = parent_scratch(n, 0);
    const double g = n.scratch[0] * w;
    for (double& x : ps) x += g;
  });
}

// ---------------------------------------------------------------------------
// backward

void backward(const Tensor& loss) {
  if (!loss.defined()) fail("backward: undefined tensor");
  if (loss.numel() != 1) fail("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;  // nothing trainable feeds the loss

  // Reverse topological order over requires_grad ancestors, iterative DFS.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  TensorNode* root = loss.node().get();
  root->scratch.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    node->ensure_scratch();  // zero flow for dead branches
    if (node->backward_fn) node->backward_fn(*node);
    node->ensure_grad();
    for (std::size_t i = 0; i < node->grad.size(); ++i) node->grad[i] += node->scratch[i];
    node->scratch.clear();
    node->scratch.shrink_to_fit();
  }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  if (eps <= 0.0) fail("grad_check: eps must be positive");
  std::vector<double> base(x.value().begin(), x.value().end());

  Tensor leaf = Tensor::from_data(x.shape(), base, /*requires_grad=*/true);
  Tensor y = f(leaf);
  if (y.numel() != 1) fail("grad_check: f must return a scalar, got " + shape_str(y.shape()));
  backward(y);
  std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
  if (analytic.empty()) analytic.assign(base.size(), 0.0);

  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> bumped = base;
    bumped[i] = base[i] + eps;
    double up = f(Tensor::from_data(x.shape(), bumped)).item();
    bumped[i] = base[i] - eps;
    double down = f(Tensor::from_data(x.shape(), bumped)).item();
    double fd = (up - down) / (2.0 * eps);
    double rel = std::abs(analytic[i] - fd) / std::max(1e-8, std::abs(fd));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace refrec
