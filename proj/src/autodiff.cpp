#include "ecgadv/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace ecgadv::ad {

namespace {

std::atomic<std::size_t> g_log_floor_hits{0};

void require_same_shape(const Tape& t, Var a, Var b, const char* op) {
  if (!(t.shape(a) == t.shape(b))) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(t.shape(a)) + " vs " +
                     to_string(t.shape(b)));
  }
}

bool all_finite(const Array1D& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << "(" << s.channels << "x" << s.length << ")";
  return os.str();
}

Var Tape::constant(Array1D values, Shape shape) {
  return push("constant", shape, std::move(values), {}, nullptr);
}

Var Tape::constant(Array1D values) {
  const Shape shape{1, values.size()};
  return constant(std::move(values), shape);
}

Var Tape::variable(Array1D values, Shape shape) {
  Var v = push("variable", shape, std::move(values), {}, nullptr);
  nodes_.back().requires_grad = true;
  return v;
}

Var Tape::variable(Array1D values) {
  const Shape shape{1, values.size()};
  return variable(std::move(values), shape);
}

Var Tape::push(const char* op, Shape shape, Array1D value, std::vector<std::size_t> inputs,
               BackwardFn backward) {
  if (value.size() != shape.size()) {
    throw ShapeError(std::string(op) + ": value size " + std::to_string(value.size()) +
                     " does not match shape " + to_string(shape));
  }
  if (value.empty()) {
    throw ShapeError(std::string(op) + ": empty array");
  }
  if (!all_finite(value)) {
    throw NumericalError("non-finite value produced by node #" + std::to_string(nodes_.size()) +
                         " (" + op + ")");
  }
  Node n;
  n.op = op;
  n.shape = shape;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

double Tape::scalar(Var v) const {
  const auto& val = value(v);
  if (val.size() != 1) {
    throw ShapeError("scalar(): node has " + std::to_string(val.size()) + " elements");
  }
  return val[0];
}

Array1D& Tape::grad_ref(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

Array1D Tape::grad(Var v) const {
  const auto& n = nodes_.at(v.id);
  if (n.grad.empty()) return Array1D(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(Var out, double seed) {
  if (nodes_.at(out.id).value.size() != 1) {
    throw ShapeError("backward(): output must be a single element");
  }
  for (auto& n : nodes_) n.grad.clear();
  if (!nodes_[out.id].requires_grad) return;
  grad_ref(out.id)[0] = seed;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (!all_finite(n.grad)) {
      throw NumericalError("non-finite gradient at node #" + std::to_string(i) + " (" + n.op +
                           ")");
    }
    if (n.backward) n.backward(*this, i);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Tape& t, Var a, Var b) {
  require_same_shape(t, a, b, "add");
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  Array1D out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return t.push("add", t.shape(a), std::move(out), {a.id, b.id},
                [a, b](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_of(self);
                  for (std::size_t in : {a.id, b.id}) {
                    if (!tp.tracks(in)) continue;
                    auto& gi = tp.grad_ref(in);
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                  }
                });
}

Var sub(Tape& t, Var a, Var b) {
  require_same_shape(t, a, b, "sub");
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  Array1D out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return t.push("sub", t.shape(a), std::move(out), {a.id, b.id},
                [a, b](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_of(self);
                  if (tp.tracks(a.id)) {
                    auto& ga = tp.grad_ref(a.id);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                  }
                  if (tp.tracks(b.id)) {
                    auto& gb = tp.grad_ref(b.id);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                  }
                });
}

Var mul(Tape& t, Var a, Var b) {
  require_same_shape(t, a, b, "mul");
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  Array1D out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return t.push("mul", t.shape(a), std::move(out), {a.id, b.id},
                [a, b](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_of(self);
                  const auto& av = tp.value_of(a.id);
                  const auto& bv = tp.value_of(b.id);
                  if (tp.tracks(a.id)) {
                    auto& ga = tp.grad_ref(a.id);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                  }
                  if (tp.tracks(b.id)) {
                    auto& gb = tp.grad_ref(b.id);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                  }
                });
}

Var div(Tape& t, Var a, Var b) {
  require_same_shape(t, a, b, "div");
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  Array1D out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return t.push("div", t.shape(a), std::move(out), {a.id, b.id},
                [a, b](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_of(self);
                  const auto& av = tp.value_of(a.id);
                  const auto& bv = tp.value_of(b.id);
                  if (tp.tracks(a.id)) {
                    auto& ga = tp.grad_ref(a.id);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
                  }
                  if (tp.tracks(b.id)) {
                    auto& gb = tp.grad_ref(b.id);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                  }
                });
}

Var scale(Tape& t, Var a, double factor) {
  const auto& av = t.value(a);
  Array1D out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return t.push("scale", t.shape(a), std::move(out), {a.id},
                [a, factor](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_of(self);
                  auto& ga = tp.grad_ref(a.id);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
                });
}

Var square(Tape& t, Var a) {
  const auto& av = t.value(a);
  Array1D out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * av[i];
  return t.push("square", t.shape(a), std::move(out), {a.id},
                [a](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_of(self);
                  const auto& av = tp.value_of(a.id);
                  auto& ga = tp.grad_ref(a.id);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * av[i] * g[i];
                });
}

Var abs(Tape& t, Var a) {
  const auto& av = t.value(a);
  Array1D out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(av[i]);
  return t.push("abs", t.shape(a), std::move(out), {a.id}, [a](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    const auto& av = tp.value_of(a.id);
    auto& ga = tp.grad_ref(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > 0.0) ga[i] += g[i];
      else if (av[i] < 0.0) ga[i] -= g[i];
    }
  });
}

Var clamp_min(Tape& t, Var a, double floor) {
  const auto& av = t.value(a);
  Array1D out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(av[i], floor);
  return t.push("clamp_min", t.shape(a), std::move(out), {a.id},
                [a, floor](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_of(self);
                  const auto& av = tp.value_of(a.id);
                  auto& ga = tp.grad_ref(a.id);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    if (av[i] > floor) ga[i] += g[i];
                  }
                });
}

Var log(Tape& t, Var a, double floor) {
  const auto& av = t.value(a);
  Array1D out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(av[i], floor));
  return t.push("log", t.shape(a), std::move(out), {a.id},
                [a, floor](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_of(self);
                  const auto& av = tp.value_of(a.id);
                  auto& ga = tp.grad_ref(a.id);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    if (av[i] > floor) ga[i] += g[i] / av[i];
                  }
                });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Tape& t, Var a) {
  const auto& av = t.value(a);
  const double s = std::accumulate(av.begin(), av.end(), 0.0);
  return t.push("sum", Shape{1, 1}, Array1D{s}, {a.id}, [a](Tape& tp, std::size_t self) {
    const double g = tp.grad_of(self)[0];
    auto& ga = tp.grad_ref(a.id);
    for (double& v : ga) v += g;
  });
}

Var mean(Tape& t, Var a) {
  const auto& av = t.value(a);
  const double n = static_cast<double>(av.size());
  const double s = std::accumulate(av.begin(), av.end(), 0.0) / n;
  return t.push("mean", Shape{1, 1}, Array1D{s}, {a.id}, [a, n](Tape& tp, std::size_t self) {
    const double g = tp.grad_of(self)[0] / n;
    auto& ga = tp.grad_ref(a.id);
    for (double& v : ga) v += g;
  });
}

Var select(Tape& t, Var a, std::size_t index) {
  const auto& av = t.value(a);
  if (index >= av.size()) {
    throw ShapeError("select: index " + std::to_string(index) + " out of range " +
                     std::to_string(av.size()));
  }
  return t.push("select", Shape{1, 1}, Array1D{av[index]}, {a.id},
                [a, index](Tape& tp, std::size_t self) {
                  tp.grad_ref(a.id)[index] += tp.grad_of(self)[0];
                });
}

// ---------------------------------------------------------------------------
// Layers

Var conv1d(Tape& t, Var x, Var weight, Var bias, const Conv1dConfig& cfg) {
  const Shape in = t.shape(x);
  const std::size_t cin = in.channels;
  const std::size_t lin = in.length;
  const std::size_t cout = cfg.out_channels;
  const std::size_t k = cfg.kernel;
  const std::size_t s = cfg.stride;
  const std::size_t p = cfg.padding;
  if (k == 0 || s == 0 || cout == 0) throw ShapeError("conv1d: zero-sized configuration");
  if (t.value(weight).size() != cout * cin * k) {
    throw ShapeError("conv1d: weight has " + std::to_string(t.value(weight).size()) +
                     " values, expected " + std::to_string(cout * cin * k));
  }
  if (t.value(bias).size() != cout) throw ShapeError("conv1d: bias size mismatch");
  if (lin + 2 * p < k) throw ShapeError("conv1d: input shorter than kernel");
  const std::size_t lout = (lin + 2 * p - k) / s + 1;

  const auto& xv = t.value(x);
  const auto& wv = t.value(weight);
  const auto& bv = t.value(bias);
  Array1D out(cout * lout);
  // Output position j reads input index j*s + q - p.
  for (std::size_t o = 0; o < cout; ++o) {
    double* yo = out.data() + o * lout;
    std::fill(yo, yo + lout, bv[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const double* xc = xv.data() + c * lin;
      const double* w = wv.data() + (o * cin + c) * k;
      for (std::size_t q = 0; q < k; ++q) {
        const double wq = w[q];
        // valid j: 0 <= j*s + q - p < lin
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(q) - static_cast<std::ptrdiff_t>(p);
        std::size_t j0 = 0;
        if (off < 0) j0 = (static_cast<std::size_t>(-off) + s - 1) / s;
        std::ptrdiff_t jmax = (static_cast<std::ptrdiff_t>(lin) - 1 - off);
        if (jmax < 0) continue;
        std::size_t j1 = std::min(lout, static_cast<std::size_t>(jmax) / s + 1);
        if (s == 1) {
          for (std::size_t j = j0; j < j1; ++j) {
            yo[j] += wq * xc[static_cast<std::ptrdiff_t>(j) + off];
          }
        } else {
          for (std::size_t j = j0; j < j1; ++j) {
            yo[j] += wq * xc[static_cast<std::ptrdiff_t>(j * s) + off];
          }
        }
      }
    }
  }

  return t.push(
      "conv1d", Shape{cout, lout}, std::move(out), {x.id, weight.id, bias.id},
      [x, weight, bias, cin, lin, cout, lout, k, s, p](Tape& tp, std::size_t self) {
        const auto& g = tp.grad_of(self);
        const auto& xv = tp.value_of(x.id);
        const auto& wv = tp.value_of(weight.id);
        const bool gx = tp.tracks(x.id);
        const bool gw = tp.tracks(weight.id);
        const bool gb = tp.tracks(bias.id);
        double* dx = gx ? tp.grad_ref(x.id).data() : nullptr;
        double* dw = gw ? tp.grad_ref(weight.id).data() : nullptr;
        double* db = gb ? tp.grad_ref(bias.id).data() : nullptr;
        for (std::size_t o = 0; o < cout; ++o) {
          const double* go = g.data() + o * lout;
          if (db) {
            double acc = 0.0;
            for (std::size_t j = 0; j < lout; ++j) acc += go[j];
            db[o] += acc;
          }
          for (std::size_t c = 0; c < cin; ++c) {
            const double* xc = xv.data() + c * lin;
            double* dxc = dx ? dx + c * lin : nullptr;
            const std::size_t widx = (o * cin + c) * k;
            for (std::size_t q = 0; q < k; ++q) {
              const std::ptrdiff_t off =
                  static_cast<std::ptrdiff_t>(q) - static_cast<std::ptrdiff_t>(p);
              std::size_t j0 = 0;
              if (off < 0) j0 = (static_cast<std::size_t>(-off) + s - 1) / s;
              std::ptrdiff_t jmax = (static_cast<std::ptrdiff_t>(lin) - 1 - off);
              if (jmax < 0) continue;
              std::size_t j1 = std::min(lout, static_cast<std::size_t>(jmax) / s + 1);
              const double wq = wv[widx + q];
              double acc = 0.0;
              for (std::size_t j = j0; j < j1; ++j) {
                const auto xi = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(j * s) + off);
                if (dxc) dxc[xi] += go[j] * wq;
                acc += go[j] * xc[xi];
              }
              if (dw) dw[widx + q] += acc;
            }
          }
        }
      });
}

Var relu(Tape& t, Var x) {
  const auto& xv = t.value(x);
  Array1D out(xv.size());
  std::vector<std::uint8_t> mask(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = xv[i] > 0.0 ? 1 : 0;
    out[i] = mask[i] ? xv[i] : 0.0;
  }
  t.record_kinks(mask);
  return t.push("relu", t.shape(x), std::move(out), {x.id}, [x](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    const auto& xv = tp.value_of(x.id);
    auto& gx = tp.grad_ref(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var maxpool1d(Tape& t, Var x, std::size_t size) {
  const Shape in = t.shape(x);
  if (size == 0) throw ShapeError("maxpool1d: zero window");
  const std::size_t lout = in.length / size;
  if (lout == 0) throw ShapeError("maxpool1d: input shorter than window");
  const auto& xv = t.value(x);
  Array1D out(in.channels * lout);
  std::vector<std::size_t> argmax(out.size());
  std::vector<std::uint8_t> offsets(out.size());
  for (std::size_t c = 0; c < in.channels; ++c) {
    for (std::size_t j = 0; j < lout; ++j) {
      const std::size_t base = c * in.length + j * size;
      std::size_t best = base;
      for (std::size_t q = 1; q < size; ++q) {
        if (xv[base + q] > xv[best]) best = base + q;
      }
      out[c * lout + j] = xv[best];
      argmax[c * lout + j] = best;
      offsets[c * lout + j] = static_cast<std::uint8_t>(best - base);
    }
  }
  t.record_kinks(offsets);
  return t.push("maxpool1d", Shape{in.channels, lout}, std::move(out), {x.id},
                [x, argmax = std::move(argmax)](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_of(self);
                  auto& gx = tp.grad_ref(x.id);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                });
}

Var global_avg_pool(Tape& t, Var x) {
  const Shape in = t.shape(x);
  const auto& xv = t.value(x);
  Array1D out(in.channels, 0.0);
  for (std::size_t c = 0; c < in.channels; ++c) {
    double acc = 0.0;
    for (std::size_t j = 0; j < in.length; ++j) acc += xv[c * in.length + j];
    out[c] = acc / static_cast<double>(in.length);
  }
  return t.push("global_avg_pool", Shape{in.channels, 1}, std::move(out), {x.id},
                [x, in](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_of(self);
                  auto& gx = tp.grad_ref(x.id);
                  const double inv = 1.0 / static_cast<double>(in.length);
                  for (std::size_t c = 0; c < in.channels; ++c) {
                    for (std::size_t j = 0; j < in.length; ++j) gx[c * in.length + j] += g[c] * inv;
                  }
                });
}

Var dense(Tape& t, Var x, Var weight, Var bias, std::size_t out_size) {
  const auto& xv = t.value(x);
  const auto& wv = t.value(weight);
  const auto& bv = t.value(bias);
  const std::size_t in = xv.size();
  if (wv.size() != out_size * in) {
    throw ShapeError("dense: weight has " + std::to_string(wv.size()) + " values, expected " +
                     std::to_string(out_size * in));
  }
  if (bv.size() != out_size) throw ShapeError("dense: bias size mismatch");
  Array1D out(out_size);
  for (std::size_t o = 0; o < out_size; ++o) {
    double acc = bv[o];
    const double* w = wv.data() + o * in;
    for (std::size_t i = 0; i < in; ++i) acc += w[i] * xv[i];
    out[o] = acc;
  }
  return t.push("dense", Shape{1, out_size}, std::move(out), {x.id, weight.id, bias.id},
                [x, weight, bias, in, out_size](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_of(self);
                  const auto& xv = tp.value_of(x.id);
                  const auto& wv = tp.value_of(weight.id);
                  if (tp.tracks(bias.id)) {
                    auto& gb = tp.grad_ref(bias.id);
                    for (std::size_t o = 0; o < out_size; ++o) gb[o] += g[o];
                  }
                  if (tp.tracks(weight.id)) {
                    auto& gw = tp.grad_ref(weight.id);
                    for (std::size_t o = 0; o < out_size; ++o) {
                      double* w = gw.data() + o * in;
                      for (std::size_t i = 0; i < in; ++i) w[i] += g[o] * xv[i];
                    }
                  }
                  if (tp.tracks(x.id)) {
                    auto& gx = tp.grad_ref(x.id);
                    for (std::size_t o = 0; o < out_size; ++o) {
                      const double* w = wv.data() + o * in;
                      for (std::size_t i = 0; i < in; ++i) gx[i] += g[o] * w[i];
                    }
                  }
                });
}

Var softmax(Tape& t, Var logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax: temperature must be > 0");
  const auto& z = t.value(logits);
  const double zmax = *std::max_element(z.begin(), z.end());
  Array1D out(z.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp((z[i] - zmax) / temperature);
    denom += out[i];
  }
  for (double& v : out) v /= denom;
  return t.push("softmax", Shape{1, z.size()}, std::move(out), {logits.id},
                [logits, temperature](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_of(self);
                  const auto& pv = tp.value_of(self);
                  double dot = 0.0;
                  for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * pv[i];
                  auto& gz = tp.grad_ref(logits.id);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    gz[i] += pv[i] * (g[i] - dot) / temperature;
                  }
                });
}

Var cross_entropy(Tape& t, Var probs, std::span<const double> target, double floor) {
  const auto& pv = t.value(probs);
  if (pv.size() != target.size()) {
    throw ShapeError("cross_entropy: " + std::to_string(pv.size()) + " probabilities vs " +
                     std::to_string(target.size()) + " targets");
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (target[i] == 0.0) continue;
    if (pv[i] < floor) g_log_floor_hits.fetch_add(1, std::memory_order_relaxed);
    loss -= target[i] * std::log(std::max(pv[i], floor));
  }
  Array1D tgt(target.begin(), target.end());
  return t.push("cross_entropy", Shape{1, 1}, Array1D{loss}, {probs.id},
                [probs, tgt = std::move(tgt), floor](Tape& tp, std::size_t self) {
                  const double g = tp.grad_of(self)[0];
                  const auto& pv = tp.value_of(probs.id);
                  auto& gp = tp.grad_ref(probs.id);
                  for (std::size_t i = 0; i < pv.size(); ++i) {
                    if (tgt[i] == 0.0 || pv[i] < floor) continue;
                    gp[i] -= g * tgt[i] / pv[i];
                  }
                });
}

std::size_t log_floor_hits() { return g_log_floor_hits.load(); }
void reset_log_floor_hits() { g_log_floor_hits.store(0); }

// ---------------------------------------------------------------------------
// Graph evaluation

namespace {

struct Recorded {
  Tape tape;
  Bindings params;
  Bindings inputs;
  Var loss;
};

void record(Recorded& r, const ComputeGraph& graph, const std::map<std::string, Array1D>& inputs,
            bool track) {
  for (const auto& [name, shape] : graph.input_slots) {
    auto it = inputs.find(name);
    if (it == inputs.end()) throw ShapeError("input slot '" + name + "' is not bound");
    if (it->second.size() != shape.size()) {
      throw ShapeError("input slot '" + name + "' expects " + std::to_string(shape.size()) +
                       " values, got " + std::to_string(it->second.size()));
    }
    r.inputs[name] = track ? r.tape.variable(it->second, shape) : r.tape.constant(it->second, shape);
  }
  for (const auto& [name, arr] : graph.parameters) {
    r.params[name] = track ? r.tape.variable(arr.values, arr.shape) : r.tape.constant(arr.values, arr.shape);
  }
  r.loss = graph.build(r.tape, r.params, r.inputs);
  if (r.tape.value(r.loss).size() != 1) throw ShapeError("graph output must be a scalar loss");
}

}  // namespace

double evaluate(const ComputeGraph& graph, const std::map<std::string, Array1D>& inputs) {
  Recorded r;
  record(r, graph, inputs, false);
  return r.tape.scalar(r.loss);
}

GradientBundle evaluate_with_gradients(const ComputeGraph& graph,
                                       const std::map<std::string, Array1D>& inputs) {
  Recorded r;
  record(r, graph, inputs, true);
  r.tape.backward(r.loss);
  GradientBundle out;
  out.loss = r.tape.scalar(r.loss);
  for (const auto& [name, v] : r.params) out.parameter_gradients[name] = r.tape.grad(v);
  for (const auto& [name, v] : r.inputs) out.input_gradients[name] = r.tape.grad(v);
  return out;
}

FiniteDifferenceReport finite_difference_check(const ComputeGraph& graph,
                                               const std::map<std::string, Array1D>& inputs,
                                               const FiniteDifferenceOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be > 0");
  const GradientBundle analytic = evaluate_with_gradients(graph, inputs);

  auto forward = [&](const ComputeGraph& g, const std::map<std::string, Array1D>& in,
                     std::vector<std::uint8_t>* kinks) {
    Recorded r;
    record(r, g, in, false);
    if (kinks) *kinks = r.tape.kink_signature();
    return r.tape.scalar(r.loss);
  };
  std::vector<std::uint8_t> base_kinks;
  forward(graph, inputs, &base_kinks);

  struct Coord {
    bool is_param;
    std::string name;
    std::size_t index;
  };
  std::vector<Coord> coords;
  for (const auto& [name, arr] : graph.parameters) {
    for (std::size_t i = 0; i < arr.values.size(); ++i) coords.push_back({true, name, i});
  }
  for (const auto& [name, arr] : inputs) {
    if (!graph.input_slots.count(name)) continue;
    for (std::size_t i = 0; i < arr.size(); ++i) coords.push_back({false, name, i});
  }
  if (options.max_coordinates > 0 && coords.size() > options.max_coordinates) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coordinates);
  }

  ComputeGraph work = graph;
  auto work_inputs = inputs;
  FiniteDifferenceReport report;
  std::vector<std::uint8_t> kp, km;
  for (const auto& c : coords) {
    double& slot = c.is_param ? work.parameters.at(c.name).values[c.index]
                              : work_inputs.at(c.name)[c.index];
    const double orig = slot;
    slot = orig + options.step;
    const double fp = forward(work, work_inputs, &kp);
    slot = orig - options.step;
    const double fm = forward(work, work_inputs, &km);
    slot = orig;
    if (options.skip_kinks && (kp != base_kinks || km != base_kinks)) {
      ++report.skipped_kinks;
      continue;
    }
    const double numeric = (fp - fm) / (2.0 * options.step);
    const double a = c.is_param ? analytic.parameter_gradients.at(c.name)[c.index]
                                : analytic.input_gradients.at(c.name)[c.index];
    if (!std::isfinite(numeric)) throw NumericalError("finite difference produced a non-finite value");
    const double rel = std::abs(a - numeric) / std::max(std::abs(a), options.floor);
    ++report.compared;
    if (rel >= report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_coordinate =
          (c.is_param ? "param " : "input ") + c.name + "[" + std::to_string(c.index) + "]";
    }
  }
  return report;
}

}  // namespace ecgadv::ad
