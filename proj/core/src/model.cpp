#include "aatr/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <random>

namespace aatr {

namespace fault {
namespace {
std::atomic<bool> flip_flag{false};
}
void set_flip_loss_gradient(bool on) { flip_flag.store(on); }
bool flip_loss_gradient() { return flip_flag.load(); }
}  // namespace fault

namespace {

// ---------------------------------------------------------------------------
// Kernels. Activations are T (float or double); parameters are always float.

struct ConvGeometry {
  std::size_t cin, h, w, cout, k, stride, pad, ho, wo;
  std::size_t rows() const { return cin * k * k; }
  std::size_t cols() const { return ho * wo; }
};

ConvGeometry conv_geometry(const Layer& layer) {
  return {layer.input_shape[0],  layer.input_shape[1], layer.input_shape[2],
          layer.spec.out_channels, layer.spec.kernel_size, layer.spec.stride,
          layer.spec.padding,    layer.output_shape[1], layer.output_shape[2]};
}

// Fixed 16-lane partial sums: vectorizable without reassociation flags and
// deterministic for a given length.
template <typename T, typename U>
T dot(const U* a, const T* b, std::size_t n) {
  constexpr std::size_t kLanes = 16;
  T lanes[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t j = 0; j < kLanes; ++j) lanes[j] += static_cast<T>(a[i + j]) * b[i + j];
  }
  T tail = 0;
  for (; i < n; ++i) tail += static_cast<T>(a[i]) * b[i];
  for (std::size_t w = kLanes / 2; w > 0; w /= 2) {
    for (std::size_t j = 0; j < w; ++j) lanes[j] += lanes[j + w];
  }
  return lanes[0] + tail;
}

// Output columns [lo, hi) whose input column ow*stride + kj - pad is in range.
struct ColumnRange {
  std::size_t lo, hi;
};

ColumnRange valid_columns(const ConvGeometry& g, std::size_t kj) {
  const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.pad);
  const auto stride = static_cast<std::ptrdiff_t>(g.stride);
  std::ptrdiff_t lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(g.w) - shift + stride - 1) / stride;
  hi = std::clamp<std::ptrdiff_t>(hi, 0, static_cast<std::ptrdiff_t>(g.wo));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

template <typename T>
void im2col(const ConvGeometry& g, const T* in, T* cols) {
  const std::size_t p_count = g.cols();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = cols + ((c * g.k + ki) * g.k + kj) * p_count;
        const ColumnRange cr = valid_columns(g, kj);
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          T* out = row + oh * g.wo;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(out, out + g.wo, T{0});
            continue;
          }
          const std::ptrdiff_t base =
              static_cast<std::ptrdiff_t>((c * g.h + static_cast<std::size_t>(ih)) * g.w + kj) -
              static_cast<std::ptrdiff_t>(g.pad);
          std::fill(out, out + cr.lo, T{0});
          if (g.stride == 1) {
            std::copy(in + base + static_cast<std::ptrdiff_t>(cr.lo),
                      in + base + static_cast<std::ptrdiff_t>(cr.hi), out + cr.lo);
          } else {
            for (std::size_t ow = cr.lo; ow < cr.hi; ++ow) {
              out[ow] = in[base + static_cast<std::ptrdiff_t>(ow * g.stride)];
            }
          }
          std::fill(out + cr.hi, out + g.wo, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* cols, T* in_grad) {
  const std::size_t p_count = g.cols();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = cols + ((c * g.k + ki) * g.k + kj) * p_count;
        const ColumnRange cr = valid_columns(g, kj);
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
          const std::ptrdiff_t base =
              static_cast<std::ptrdiff_t>((c * g.h + static_cast<std::size_t>(ih)) * g.w + kj) -
              static_cast<std::ptrdiff_t>(g.pad);
          const T* src = row + oh * g.wo;
          if (g.stride == 1) {
            T* dst = in_grad + (base + static_cast<std::ptrdiff_t>(cr.lo));
            for (std::size_t ow = cr.lo; ow < cr.hi; ++ow) dst[ow - cr.lo] += src[ow];
          } else {
            for (std::size_t ow = cr.lo; ow < cr.hi; ++ow) {
              in_grad[base + static_cast<std::ptrdiff_t>(ow * g.stride)] += src[ow];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_forward(const Layer& layer, const BasicTensor<T>& in, BasicTensor<T>& out) {
  const ConvGeometry g = conv_geometry(layer);
  const std::size_t n = in.dim(0);
  const std::size_t r_count = g.rows();
  const std::size_t p_count = g.cols();
  const float* weight = layer.params[0].data().data();
  const float* bias = layer.params[1].data().data();
  std::vector<T> cols(r_count * p_count);
  for (std::size_t s = 0; s < n; ++s) {
    im2col(g, in.sample(s).data(), cols.data());
    T* dst = out.sample(s).data();
    for (std::size_t co = 0; co < g.cout; ++co) {
      std::fill(dst + co * p_count, dst + (co + 1) * p_count, static_cast<T>(bias[co]));
    }
    // Four output channels per pass share each column load.
    std::size_t co = 0;
    for (; co + 4 <= g.cout; co += 4) {
      T* r0 = dst + co * p_count;
      T* r1 = r0 + p_count;
      T* r2 = r1 + p_count;
      T* r3 = r2 + p_count;
      for (std::size_t r = 0; r < r_count; ++r) {
        const T w0 = static_cast<T>(weight[co * r_count + r]);
        const T w1 = static_cast<T>(weight[(co + 1) * r_count + r]);
        const T w2 = static_cast<T>(weight[(co + 2) * r_count + r]);
        const T w3 = static_cast<T>(weight[(co + 3) * r_count + r]);
        const T* crow = cols.data() + r * p_count;
        for (std::size_t p = 0; p < p_count; ++p) {
          const T c = crow[p];
          r0[p] += w0 * c;
          r1[p] += w1 * c;
          r2[p] += w2 * c;
          r3[p] += w3 * c;
        }
      }
    }
    for (; co < g.cout; ++co) {
      T* row = dst + co * p_count;
      for (std::size_t r = 0; r < r_count; ++r) {
        const T wv = static_cast<T>(weight[co * r_count + r]);
        const T* crow = cols.data() + r * p_count;
        for (std::size_t p = 0; p < p_count; ++p) row[p] += wv * crow[p];
      }
    }
  }
}

template <typename T>
void conv_backward(const Layer& layer, const BasicTensor<T>& in, const BasicTensor<T>& grad_out,
                   BasicTensor<T>& grad_in, BasicTensor<T>* grad_w, BasicTensor<T>* grad_b) {
  const ConvGeometry g = conv_geometry(layer);
  const std::size_t n = in.dim(0);
  const std::size_t r_count = g.rows();
  const std::size_t p_count = g.cols();
  const float* weight = layer.params[0].data().data();
  std::vector<T> cols(r_count * p_count);
  std::vector<T> dcols(r_count * p_count);
  for (std::size_t s = 0; s < n; ++s) {
    const T* gout = grad_out.sample(s).data();
    if (grad_w != nullptr) {
      im2col(g, in.sample(s).data(), cols.data());
      T* gw = grad_w->data().data();
      for (std::size_t co = 0; co < g.cout; ++co) {
        const T* grow = gout + co * p_count;
        T bsum = 0;
        for (std::size_t p = 0; p < p_count; ++p) bsum += grow[p];
        (*grad_b)[co] += bsum;
        for (std::size_t r = 0; r < r_count; ++r) {
          gw[co * r_count + r] += dot(grow, cols.data() + r * p_count, p_count);
        }
      }
    }
    for (std::size_t r = 0; r < r_count; ++r) {
      T* drow = dcols.data() + r * p_count;
      std::fill(drow, drow + p_count, T{0});
      std::size_t co = 0;
      for (; co + 4 <= g.cout; co += 4) {
        const T w0 = static_cast<T>(weight[co * r_count + r]);
        const T w1 = static_cast<T>(weight[(co + 1) * r_count + r]);
        const T w2 = static_cast<T>(weight[(co + 2) * r_count + r]);
        const T w3 = static_cast<T>(weight[(co + 3) * r_count + r]);
        const T* g0 = gout + co * p_count;
        const T* g1 = g0 + p_count;
        const T* g2 = g1 + p_count;
        const T* g3 = g2 + p_count;
        for (std::size_t p = 0; p < p_count; ++p) {
          drow[p] += (w0 * g0[p] + w1 * g1[p]) + (w2 * g2[p] + w3 * g3[p]);
        }
      }
      for (; co < g.cout; ++co) {
        const T wv = static_cast<T>(weight[co * r_count + r]);
        const T* grow = gout + co * p_count;
        for (std::size_t p = 0; p < p_count; ++p) drow[p] += wv * grow[p];
      }
    }
    col2im_add(g, dcols.data(), grad_in.sample(s).data());
  }
}

template <typename T>
void dense_forward(const Layer& layer, const BasicTensor<T>& in, BasicTensor<T>& out) {
  const std::size_t n = in.dim(0);
  const std::size_t fin = layer.input_shape[0];
  const std::size_t fout = layer.output_shape[0];
  const float* weight = layer.params[0].data().data();
  const float* bias = layer.params[1].data().data();
  for (std::size_t s = 0; s < n; ++s) {
    const T* x = in.sample(s).data();
    T* y = out.sample(s).data();
    for (std::size_t o = 0; o < fout; ++o) {
      y[o] = dot(weight + o * fin, x, fin) + static_cast<T>(bias[o]);
    }
  }
}

template <typename T>
void dense_backward(const Layer& layer, const BasicTensor<T>& in, const BasicTensor<T>& grad_out,
                    BasicTensor<T>& grad_in, BasicTensor<T>* grad_w, BasicTensor<T>* grad_b) {
  const std::size_t n = in.dim(0);
  const std::size_t fin = layer.input_shape[0];
  const std::size_t fout = layer.output_shape[0];
  const float* weight = layer.params[0].data().data();
  for (std::size_t s = 0; s < n; ++s) {
    const T* x = in.sample(s).data();
    const T* gy = grad_out.sample(s).data();
    T* gx = grad_in.sample(s).data();
    for (std::size_t o = 0; o < fout; ++o) {
      const T go = gy[o];
      if (go == T{0}) continue;
      const float* wrow = weight + o * fin;
      for (std::size_t i = 0; i < fin; ++i) gx[i] += go * static_cast<T>(wrow[i]);
      if (grad_w != nullptr) {
        T* gw = grad_w->data().data() + o * fin;
        for (std::size_t i = 0; i < fin; ++i) gw[i] += go * x[i];
        (*grad_b)[o] += go;
      }
    }
  }
}

template <typename T>
void maxpool_forward(const Layer& layer, const BasicTensor<T>& in, BasicTensor<T>& out,
                     std::vector<std::uint32_t>& argmax) {
  const std::size_t n = in.dim(0);
  const std::size_t c = layer.input_shape[0];
  const std::size_t h = layer.input_shape[1];
  const std::size_t w = layer.input_shape[2];
  const std::size_t ho = layer.output_shape[1];
  const std::size_t wo = layer.output_shape[2];
  argmax.resize(out.size());
  std::size_t o = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const T* x = in.sample(s).data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < ho; ++i) {
        for (std::size_t j = 0; j < wo; ++j, ++o) {
          std::size_t best = (ch * h + 2 * i) * w + 2 * j;
          for (std::size_t di = 0; di < 2; ++di) {
            for (std::size_t dj = 0; dj < 2; ++dj) {
              const std::size_t idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
              if (x[idx] > x[best]) best = idx;
            }
          }
          out[o] = x[best];
          argmax[o] = static_cast<std::uint32_t>(s * (c * h * w) + best);
        }
      }
    }
  }
}

std::size_t own_param_count(const Layer& layer) { return layer.params.size(); }

std::size_t chain_param_tensors(const std::vector<Layer>& layers) {
  std::size_t count = 0;
  for (const Layer& l : layers) {
    count += own_param_count(l) + chain_param_tensors(l.branch);
  }
  return count;
}

template <typename T>
BasicTensor<T> run_chain(const std::vector<Layer>& layers, const BasicTensor<T>& batch,
                         ForwardTrace<T>* trace);

template <typename T>
BasicTensor<T> run_layer(const Layer& layer, const BasicTensor<T>& in, LayerTrace<T>* trace) {
  const std::size_t n = in.dim(0);
  Shape out_shape = layer.output_shape;
  out_shape.insert(out_shape.begin(), n);
  BasicTensor<T> out(out_shape);
  switch (layer.spec.kind) {
    case LayerKind::Conv2D:
      conv_forward(layer, in, out);
      break;
    case LayerKind::Dense:
      dense_forward(layer, in, out);
      break;
    case LayerKind::ReLU:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T{0} ? in[i] : T{0};
      break;
    case LayerKind::MaxPool2: {
      std::vector<std::uint32_t> argmax;
      maxpool_forward(layer, in, out, argmax);
      if (trace) trace->argmax = std::move(argmax);
      break;
    }
    case LayerKind::Flatten:
      out = BasicTensor<T>(out_shape, in.storage());
      break;
    case LayerKind::Residual: {
      ForwardTrace<T>* branch_trace = nullptr;
      if (trace) {
        trace->branch.resize(1);
        branch_trace = &trace->branch[0];
      }
      BasicTensor<T> branch_out = run_chain(layer.branch, in, branch_trace);
      for (std::size_t i = 0; i < in.size(); ++i) {
        const T sum = in[i] + branch_out[i];
        out[i] = sum > T{0} ? sum : T{0};
      }
      break;
    }
  }
  if (trace) {
    trace->input = in;
    trace->output = out;
  }
  return out;
}

template <typename T>
BasicTensor<T> run_chain(const std::vector<Layer>& layers, const BasicTensor<T>& batch,
                         ForwardTrace<T>* trace) {
  if (trace) trace->layers.resize(layers.size());
  BasicTensor<T> current = batch;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    current = run_layer(layers[i], current, trace ? &trace->layers[i] : nullptr);
  }
  if (trace) trace->output = current;
  return current;
}

template <typename T>
BasicTensor<T> backward_chain(const std::vector<Layer>& layers, const ForwardTrace<T>& trace,
                              BasicTensor<T> grad, std::vector<BasicTensor<T>>* param_grads,
                              std::size_t param_base) {
  std::vector<std::size_t> offsets(layers.size());
  std::size_t offset = param_base;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    offsets[i] = offset;
    offset += own_param_count(layers[i]) + chain_param_tensors(layers[i].branch);
  }
  for (std::size_t li = layers.size(); li-- > 0;) {
    const Layer& layer = layers[li];
    const LayerTrace<T>& lt = trace.layers[li];
    BasicTensor<T> grad_in(lt.input.shape());
    switch (layer.spec.kind) {
      case LayerKind::Conv2D:
      case LayerKind::Dense: {
        BasicTensor<T>* gw = param_grads ? &(*param_grads)[offsets[li]] : nullptr;
        BasicTensor<T>* gb = param_grads ? &(*param_grads)[offsets[li] + 1] : nullptr;
        if (layer.spec.kind == LayerKind::Conv2D) {
          conv_backward(layer, lt.input, grad, grad_in, gw, gb);
        } else {
          dense_backward(layer, lt.input, grad, grad_in, gw, gb);
        }
        break;
      }
      case LayerKind::ReLU:
        for (std::size_t i = 0; i < grad.size(); ++i) {
          grad_in[i] = lt.input[i] > T{0} ? grad[i] : T{0};
        }
        break;
      case LayerKind::MaxPool2:
        for (std::size_t o = 0; o < grad.size(); ++o) grad_in[lt.argmax[o]] += grad[o];
        break;
      case LayerKind::Flatten:
        grad_in = BasicTensor<T>(lt.input.shape(), grad.storage());
        break;
      case LayerKind::Residual: {
        BasicTensor<T> g_sum(grad.shape());
        for (std::size_t i = 0; i < grad.size(); ++i) {
          g_sum[i] = lt.output[i] > T{0} ? grad[i] : T{0};
        }
        BasicTensor<T> g_branch =
            backward_chain(layer.branch, lt.branch[0], g_sum, param_grads, offsets[li]);
        for (std::size_t i = 0; i < grad_in.size(); ++i) grad_in[i] = g_sum[i] + g_branch[i];
        break;
      }
    }
    grad = std::move(grad_in);
  }
  return grad;
}

void collect_parameters(std::vector<Layer>& layers, std::vector<Tensor*>& out) {
  for (Layer& l : layers) {
    for (Tensor& p : l.params) out.push_back(&p);
    collect_parameters(l.branch, out);
  }
}

void collect_parameters(const std::vector<Layer>& layers, std::vector<const Tensor*>& out) {
  for (const Layer& l : layers) {
    for (const Tensor& p : l.params) out.push_back(&p);
    collect_parameters(l.branch, out);
  }
}

std::vector<Layer> instantiate(const std::vector<LayerSpec>& specs, const Shape& input) {
  std::vector<Layer> layers;
  Shape shape = input;
  for (const LayerSpec& spec : specs) {
    Layer layer;
    layer.spec = spec;
    layer.input_shape = shape;
    layer.output_shape = output_shape(spec, shape);
    for (const Shape& ps : parameter_shapes(spec, shape)) layer.params.emplace_back(ps);
    if (spec.kind == LayerKind::Residual) layer.branch = instantiate(spec.branch, shape);
    shape = layer.output_shape;
    layers.push_back(std::move(layer));
  }
  return layers;
}

void he_init(std::vector<Layer>& layers, std::mt19937_64& rng) {
  for (Layer& l : layers) {
    if (!l.params.empty()) {
      const Shape& ws = l.params[0].shape();
      const std::size_t fan_in = element_count(ws) / ws[0];
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (float& v : l.params[0].data()) v = static_cast<float>(normal(rng));
    }
    he_init(l.branch, rng);
  }
}

void collect_specs(const std::vector<Layer>& layers, std::vector<LayerSpec>& out) {
  for (const Layer& l : layers) out.push_back(l.spec);
}

std::size_t count_kind(const std::vector<Layer>& layers, LayerKind kind) {
  std::size_t count = 0;
  for (const Layer& l : layers) {
    if (l.spec.kind == kind) ++count;
    count += count_kind(l.branch, kind);
  }
  return count;
}

template <typename T>
void pattern_of(const ForwardTrace<T>& trace, const std::vector<Layer>& layers,
                std::vector<std::uint32_t>& out) {
  for (std::size_t i = 0; i < trace.layers.size(); ++i) {
    const LayerTrace<T>& lt = trace.layers[i];
    switch (layers[i].spec.kind) {
      case LayerKind::ReLU:
        for (T v : lt.input.storage()) out.push_back(v > T{0});
        break;
      case LayerKind::MaxPool2:
        out.insert(out.end(), lt.argmax.begin(), lt.argmax.end());
        break;
      case LayerKind::Residual:
        pattern_of(lt.branch[0], layers[i].branch, out);
        for (T v : lt.output.storage()) out.push_back(v > T{0});
        break;
      default:
        break;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

Model::Model(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed)
    : input_shape_(std::move(input_shape)) {
  layers_ = instantiate(layers, input_shape_);
  output_shape_ = layers_.empty() ? input_shape_ : layers_.back().output_shape;
  if (output_shape_.size() != 1) {
    throw ShapeError("model output must be a logit vector, got " + to_string(output_shape_));
  }
  std::mt19937_64 rng(seed);
  he_init(layers_, rng);
}

Model Model::zeros(Shape input_shape, std::vector<LayerSpec> layers) {
  Model m(std::move(input_shape), std::move(layers), 0);
  for (Tensor* p : m.parameters()) std::fill(p->data().begin(), p->data().end(), 0.0f);
  return m;
}

std::vector<LayerSpec> Model::layer_specs() const {
  std::vector<LayerSpec> out;
  collect_specs(layers_, out);
  return out;
}

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out;
  collect_parameters(layers_, out);
  return out;
}

std::vector<const Tensor*> Model::parameters() const {
  std::vector<const Tensor*> out;
  collect_parameters(layers_, out);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t count = 0;
  for (const Tensor* p : parameters()) count += p->size();
  return count;
}

void Model::check_batch(const Shape& batch_shape) const {
  if (batch_shape.size() != input_shape_.size() + 1 ||
      !std::equal(input_shape_.begin(), input_shape_.end(), batch_shape.begin() + 1)) {
    throw ShapeError("batch shape " + to_string(batch_shape) + " does not match model input " +
                     to_string(input_shape_));
  }
}

Tensor Model::forward(const Tensor& batch) const { return forward_as<float>(batch); }

template <typename T>
BasicTensor<T> Model::forward_as(const BasicTensor<T>& batch) const {
  check_batch(batch.shape());
  require_finite(batch, "model input");
  BasicTensor<T> out = run_chain<T>(layers_, batch, nullptr);
  require_finite(out, "model logits");
  return out;
}

template <typename T>
ForwardTrace<T> Model::forward_traced(const BasicTensor<T>& batch) const {
  check_batch(batch.shape());
  require_finite(batch, "model input");
  ForwardTrace<T> trace;
  run_chain<T>(layers_, batch, &trace);
  require_finite(trace.output, "model logits");
  return trace;
}

template <typename T>
BackwardResult<T> Model::backward(const ForwardTrace<T>& trace, const BasicTensor<T>& grad_logits,
                                  bool want_param_grads) const {
  if (grad_logits.shape() != trace.output.shape()) {
    throw ShapeError("logit gradient shape " + to_string(grad_logits.shape()) +
                     " does not match logits " + to_string(trace.output.shape()));
  }
  require_finite(grad_logits, "logit gradient");
  BackwardResult<T> result;
  std::vector<BasicTensor<T>>* grads = nullptr;
  if (want_param_grads) {
    for (const Tensor* p : parameters()) result.param_grads.emplace_back(p->shape());
    grads = &result.param_grads;
  }
  result.input_grad = backward_chain<T>(layers_, trace, grad_logits, grads, 0);
  require_finite(result.input_grad, "input gradient");
  return result;
}

Tensor Model::probabilities(const Tensor& batch) const { return softmax(forward(batch)); }

Tensor Model::embed(const Tensor& batch) const {
  check_batch(batch.shape());
  std::size_t last_dense = layers_.size();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].spec.kind == LayerKind::Dense) last_dense = i;
  }
  if (last_dense == layers_.size()) throw ConfigError("model has no Dense layer to embed before");
  Tensor current = batch;
  for (std::size_t i = 0; i < last_dense; ++i) current = run_layer<float>(layers_[i], current, nullptr);
  require_finite(current, "embedding");
  return current;
}

std::size_t Model::embedding_width() const {
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (layers_[i].spec.kind == LayerKind::Dense) return layers_[i].input_shape[0];
  }
  throw ConfigError("model has no Dense layer");
}

namespace {
bool layers_equal(const std::vector<Layer>& a, const std::vector<Layer>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i].spec == b[i].spec) || a[i].input_shape != b[i].input_shape ||
        a[i].params.size() != b[i].params.size() || !layers_equal(a[i].branch, b[i].branch)) {
      return false;
    }
    for (std::size_t p = 0; p < a[i].params.size(); ++p) {
      if (!bit_identical(a[i].params[p], b[i].params[p])) return false;
    }
  }
  return true;
}
}  // namespace

bool operator==(const Model& a, const Model& b) {
  return a.input_shape_ == b.input_shape_ && layers_equal(a.layers_, b.layers_);
}

std::size_t count_layers(const Model& model, LayerKind kind) {
  return count_kind(model.layers(), kind);
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  BasicTensor<T> out(logits.shape());
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.sample_size();
  for (std::size_t s = 0; s < n; ++s) {
    auto z = logits.sample(s);
    auto p = out.sample(s);
    const T zmax = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) total += std::exp(static_cast<double>(z[i] - zmax));
    for (std::size_t i = 0; i < k; ++i) {
      p[i] = static_cast<T>(std::exp(static_cast<double>(z[i] - zmax)) / total);
    }
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.dim(0));
  for (std::size_t s = 0; s < out.size(); ++s) {
    auto z = logits.sample(s);
    out[s] = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
  }
  return out;
}

std::vector<int> predict(const Model& model, const Tensor& batch, std::size_t chunk) {
  std::vector<int> out;
  const std::size_t n = batch.dim(0);
  out.reserve(n);
  for (std::size_t first = 0; first < n; first += chunk) {
    const std::size_t count = std::min(chunk, n - first);
    std::vector<int> part = argmax_rows(model.forward(batch.rows(first, count)));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

template <typename T>
double cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.sample_size();
  if (labels.size() != n) throw ConfigError("label count does not match batch");
  double total = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    if (labels[s] < 0 || static_cast<std::size_t>(labels[s]) >= k) {
      throw ConfigError("label " + std::to_string(labels[s]) + " out of range [0," +
                        std::to_string(k) + ")");
    }
    auto z = logits.sample(s);
    const double zmax = static_cast<double>(*std::max_element(z.begin(), z.end()));
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) sum += std::exp(static_cast<double>(z[i]) - zmax);
    total += zmax + std::log(sum) - static_cast<double>(z[static_cast<std::size_t>(labels[s])]);
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

template <typename T>
LossAndGrads<T> loss_and_grads(const Model& model, const BasicTensor<T>& batch,
                               std::span<const int> labels, bool want_param_grads) {
  if (batch.rank() == 0 || batch.dim(0) == 0) throw ConfigError("loss_and_grads: empty batch");
  ForwardTrace<T> trace = model.forward_traced(batch);
  LossAndGrads<T> result;
  result.loss = cross_entropy(trace.output, labels);
  if (!std::isfinite(result.loss)) throw NonFiniteError("non-finite cross-entropy loss");
  const std::size_t n = batch.dim(0);
  BasicTensor<T> grad = softmax(trace.output);
  const T scale = T{1} / static_cast<T>(n);
  const std::size_t k = grad.sample_size();
  for (std::size_t s = 0; s < n; ++s) {
    auto g = grad.sample(s);
    g[static_cast<std::size_t>(labels[s])] -= T{1};
    for (std::size_t i = 0; i < k; ++i) g[i] *= fault::flip_loss_gradient() ? -scale : scale;
  }
  BackwardResult<T> back = model.backward(trace, grad, want_param_grads);
  result.param_grads = std::move(back.param_grads);
  result.input_grad = std::move(back.input_grad);
  result.logit_grad = std::move(grad);
  result.logits = std::move(trace.output);
  return result;
}

template <typename T>
std::vector<std::uint32_t> activation_pattern(const Model& model, const ForwardTrace<T>& trace) {
  std::vector<std::uint32_t> out;
  pattern_of(trace, model.layers(), out);
  return out;
}

#define AATR_INSTANTIATE_MODEL(T)                                                              \
  template BasicTensor<T> Model::forward_as(const BasicTensor<T>&) const;                      \
  template ForwardTrace<T> Model::forward_traced(const BasicTensor<T>&) const;                 \
  template BackwardResult<T> Model::backward(const ForwardTrace<T>&, const BasicTensor<T>&,    \
                                             bool) const;                                      \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                      \
  template double cross_entropy(const BasicTensor<T>&, std::span<const int>);                  \
  template LossAndGrads<T> loss_and_grads(const Model&, const BasicTensor<T>&,                 \
                                          std::span<const int>, bool);                        \
  template std::vector<std::uint32_t> activation_pattern(const Model&, const ForwardTrace<T>&);

AATR_INSTANTIATE_MODEL(float)
AATR_INSTANTIATE_MODEL(double)

#undef AATR_INSTANTIATE_MODEL

}  // namespace aatr
