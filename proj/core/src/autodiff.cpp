#include "hamobe/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "hamobe/error.hpp"

namespace hamobe {

const Tensor& Var::value() const {
  if (!tape_) fail(ErrorKind::Contract, "use of an unbound Var");
  return tape_->value(*this);
}

int Tape::check(Var v) const {
  if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size()) {
    fail(ErrorKind::Contract, "Var does not belong to this tape");
  }
  return v.id_;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || nodes_[check(p)].requires_grad;
  nodes_.push_back(Node{std::move(value), Tensor{}, needs, needs ? std::move(backward) : nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Tensor* Tape::grad_slot(Var v) {
  Node& n = nodes_[check(v)];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return &n.grad;
}

void Tape::backward(Var root) {
  const int r = check(root);
  if (nodes_[r].value.size() != 1) {
    fail(ErrorKind::Shape, "backward() root must be a single element, got " +
                               shape_str(nodes_[r].value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor{};
  if (!nodes_[r].requires_grad) return;
  nodes_[r].grad = Tensor(nodes_[r].value.shape(), 1.0);
  for (int i = r; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, n.grad, n.value);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[check(v)];
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

namespace {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    fail(ErrorKind::Shape, "axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Shape, std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                               shape_str(b.shape()));
  }
}

void require_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) fail(ErrorKind::Contract, "operands recorded on different tapes");
}

void axpy(std::span<double> dst, std::span<const double> src, double alpha = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

Tensor softmax_value(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x.shape(), axis);
  Tensor y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = x[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, x[base + l * s.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(x[base + l * s.inner] - mx);
        y[base + l * s.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) y[base + l * s.inner] /= z;
    }
  }
  return y;
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "add");
  Tensor out = av;
  axpy(out.data(), bv.data());
  const Var parents[] = {a, b};
  return a.tape().record(std::move(out), parents, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (auto* ga = t.grad_slot(a)) axpy(ga->data(), g.data());
    if (auto* gb = t.grad_slot(b)) axpy(gb->data(), g.data());
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "sub");
  Tensor out = av;
  axpy(out.data(), bv.data(), -1.0);
  const Var parents[] = {a, b};
  return a.tape().record(std::move(out), parents, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (auto* ga = t.grad_slot(a)) axpy(ga->data(), g.data());
    if (auto* gb = t.grad_slot(b)) axpy(gb->data(), g.data(), -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "mul");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const Var parents[] = {a, b};
  return a.tape().record(std::move(out), parents, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (auto* ga = t.grad_slot(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (auto* gb = t.grad_slot(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= c;
  const Var parents[] = {a};
  return a.tape().record(std::move(out), parents, [a, c](Tape& t, const Tensor& g, const Tensor&) {
    if (auto* ga = t.grad_slot(a)) axpy(ga->data(), g.data(), c);
  });
}

Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v += c;
  const Var parents[] = {a};
  return a.tape().record(std::move(out), parents, [a](Tape& t, const Tensor& g, const Tensor&) {
    if (auto* ga = t.grad_slot(a)) axpy(ga->data(), g.data());
  });
}

Var add_bias(Var x, Var b) {
  require_same_tape(x, b);
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  const std::size_t n = xv.shape().back();
  if (bv.rank() != 1 || bv.size() != n) {
    fail(ErrorKind::Shape, "add_bias: bias " + shape_str(bv.shape()) + " vs input " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t rows = xv.size() / n;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  const Var parents[] = {x, b};
  return x.tape().record(std::move(out), parents, [x, b, rows, n](Tape& t, const Tensor& g, const Tensor&) {
    if (auto* gx = t.grad_slot(x)) axpy(gx->data(), g.data());
    if (auto* gb = t.grad_slot(b)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) (*gb)[c] += g[r * n + c];
    }
  });
}

namespace {

// out[rows, m] (+)= a[rows, k] @ b[k, m]
void gemm_nn(const double* a, const double* b, double* out, std::size_t rows, std::size_t k,
             std::size_t m) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out + r * m;
    const double* ar = a + r * k;
    for (std::size_t i = 0; i < k; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      const double* br = b + i * m;
      for (std::size_t c = 0; c < m; ++c) o[c] += av * br[c];
    }
  }
}

// da[rows, k] += g[rows, m] @ b[k, m]^T
void gemm_nt(const double* g, const double* b, double* da, std::size_t rows, std::size_t k,
             std::size_t m) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* gr = g + r * m;
    double* dr = da + r * k;
    for (std::size_t i = 0; i < k; ++i) {
      const double* br = b + i * m;
      double acc = 0.0;
      for (std::size_t c = 0; c < m; ++c) acc += gr[c] * br[c];
      dr[i] += acc;
    }
  }
}

// db[k, m] += a[rows, k]^T @ g[rows, m]
void gemm_tn(const double* a, const double* g, double* db, std::size_t rows, std::size_t k,
             std::size_t m) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* ar = a + r * k;
    const double* gr = g + r * m;
    for (std::size_t i = 0; i < k; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* dr = db + i * m;
      for (std::size_t c = 0; c < m; ++c) dr[c] += av * gr[c];
    }
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    fail(ErrorKind::Shape, "matmul: " + shape_str(av.shape()) + " @ " + shape_str(bv.shape()));
  }
  const std::size_t n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  Tensor out({n, m});
  gemm_nn(av.data().data(), bv.data().data(), out.data().data(), n, k, m);
  const Var parents[] = {a, b};
  return a.tape().record(std::move(out), parents, [a, b, n, k, m](Tape& t, const Tensor& g, const Tensor&) {
    if (auto* ga = t.grad_slot(a)) gemm_nt(g.data().data(), b.value().data().data(), ga->data().data(), n, k, m);
    if (auto* gb = t.grad_slot(b)) gemm_tn(a.value().data().data(), g.data().data(), gb->data().data(), n, k, m);
  });
}

Var linear(Var x, Var w, Var b) {
  require_same_tape(x, w);
  require_same_tape(x, b);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (wv.rank() != 2 || xv.shape().back() != wv.dim(0) || bv.rank() != 1 || bv.size() != wv.dim(1)) {
    fail(ErrorKind::Shape, "linear: input " + shape_str(xv.shape()) + ", weight " + shape_str(wv.shape()) +
                               ", bias " + shape_str(bv.shape()));
  }
  const std::size_t in = wv.dim(0), outd = wv.dim(1), rows = xv.size() / in;
  Shape oshape = xv.shape();
  oshape.back() = outd;
  Tensor out(oshape);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(bv.data().begin(), bv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * outd));
  gemm_nn(xv.data().data(), wv.data().data(), out.data().data(), rows, in, outd);
  const Var parents[] = {x, w, b};
  return x.tape().record(std::move(out), parents, [x, w, b, rows, in, outd](Tape& t, const Tensor& g, const Tensor&) {
    if (auto* gx = t.grad_slot(x))
      gemm_nt(g.data().data(), w.value().data().data(), gx->data().data(), rows, in, outd);
    if (auto* gw = t.grad_slot(w))
      gemm_tn(x.value().data().data(), g.data().data(), gw->data().data(), rows, in, outd);
    if (auto* gb = t.grad_slot(b)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < outd; ++c) (*gb)[c] += g[r * outd + c];
    }
  });
}

Var gelu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(xv[i]);
  const Var parents[] = {x};
  return x.tape().record(std::move(out), parents, [x](Tape& t, const Tensor& g, const Tensor&) {
    auto* gx = t.grad_slot(x);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      (*gx)[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var relu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const Var parents[] = {x};
  return x.tape().record(std::move(out), parents, [x](Tape& t, const Tensor& g, const Tensor&) {
    auto* gx = t.grad_slot(x);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) (*gx)[i] += g[i];
  });
}

Var square(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * xv[i];
  const Var parents[] = {x};
  return x.tape().record(std::move(out), parents, [x](Tape& t, const Tensor& g, const Tensor&) {
    auto* gx = t.grad_slot(x);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += 2.0 * xv[i] * g[i];
  });
}

Var sqrt(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (xv[i] < 0.0) fail(ErrorKind::Numeric, "sqrt of negative value at index " + std::to_string(i));
    out[i] = std::sqrt(xv[i]);
  }
  const Var parents[] = {x};
  return x.tape().record(std::move(out), parents, [x](Tape& t, const Tensor& g, const Tensor& y) {
    auto* gx = t.grad_slot(x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (y[i] > 0.0) (*gx)[i] += g[i] * 0.5 / y[i];
  });
}

Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  const Var parents[] = {x};
  return x.tape().record(Tensor::scalar(acc), parents, [x](Tape& t, const Tensor& g, const Tensor&) {
    auto* gx = t.grad_slot(x);
    const double gv = g[0];
    for (auto& v : gx->data()) v += gv;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Var mean_axis(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  const auto s = split_axis(xv.shape(), axis);
  Shape oshape;
  for (std::size_t i = 0; i < xv.rank(); ++i)
    if (i != axis) oshape.push_back(xv.shape()[i]);
  if (oshape.empty()) oshape.push_back(1);
  Tensor out(oshape);
  const double inv = 1.0 / static_cast<double>(s.len);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t in = 0; in < s.inner; ++in)
        out[o * s.inner + in] += xv[(o * s.len + l) * s.inner + in];
  for (auto& v : out.data()) v *= inv;
  const Var parents[] = {x};
  return x.tape().record(std::move(out), parents, [x, s, inv](Tape& t, const Tensor& g, const Tensor&) {
    auto* gx = t.grad_slot(x);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.len; ++l)
        for (std::size_t in = 0; in < s.inner; ++in)
          (*gx)[(o * s.len + l) * s.inner + in] += g[o * s.inner + in] * inv;
  });
}

Var softmax(Var x, std::size_t axis) {
  Tensor out = softmax_value(x.value(), axis);
  const auto s = split_axis(out.shape(), axis);
  const Var parents[] = {x};
  return x.tape().record(std::move(out), parents, [x, s](Tape& t, const Tensor& g, const Tensor& yv) {
    auto* gx = t.grad_slot(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * yv[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t i = base + l * s.inner;
          (*gx)[i] += yv[i] * (g[i] - dot);
        }
      }
    }
  });
}

Var cross_entropy(Var logits, std::size_t label) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 1) fail(ErrorKind::Shape, "cross_entropy expects rank-1 logits");
  if (label >= lv.size()) {
    fail(ErrorKind::Label, "label " + std::to_string(label) + " out of range for " +
                               std::to_string(lv.size()) + " classes");
  }
  double mx = lv[0];
  for (double v : lv.data()) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : lv.data()) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  const double loss = lse - lv[label];
  const Var parents[] = {logits};
  return logits.tape().record(Tensor::scalar(loss), parents, [logits, label, lse](Tape& t, const Tensor& g, const Tensor&) {
    auto* gl = t.grad_slot(logits);
    const Tensor& lv = logits.value();
    for (std::size_t i = 0; i < lv.size(); ++i) {
      const double p = std::exp(lv[i] - lse);
      (*gl)[i] += g[0] * (p - (i == label ? 1.0 : 0.0));
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const Var parents[] = {x};
  return x.tape().record(std::move(out), parents, [x](Tape& t, const Tensor& g, const Tensor&) {
    auto* gx = t.grad_slot(x);
    axpy(gx->data(), g.data());
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorKind::Shape, "concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) fail(ErrorKind::Shape, "concat axis out of range");
  Shape oshape = first;
  oshape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    const Shape& sh = p.shape();
    if (sh.size() != first.size()) fail(ErrorKind::Shape, "concat rank mismatch");
    for (std::size_t i = 0; i < sh.size(); ++i) {
      if (i != axis && sh[i] != first[i]) {
        fail(ErrorKind::Shape, "concat: " + shape_str(sh) + " incompatible with " + shape_str(first));
      }
    }
    lens.push_back(sh[axis]);
    oshape[axis] += sh[axis];
  }
  const auto s = split_axis(oshape, axis);
  Tensor out(oshape);
  std::size_t at = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& pv = parts[p].value();
    const std::size_t chunk = lens[p] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pv.data().begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.data().begin() + static_cast<std::ptrdiff_t>(o * s.len * s.inner + at * s.inner));
    }
    at += lens[p];
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(out), parts, [ps, lens, s](Tape& t, const Tensor& g, const Tensor&) {
    std::size_t at = 0;
    for (std::size_t p = 0; p < ps.size(); ++p) {
      const std::size_t chunk = lens[p] * s.inner;
      if (auto* gp = t.grad_slot(ps[p])) {
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* src = g.data().data() + o * s.len * s.inner + at * s.inner;
          double* dst = gp->data().data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      at += lens[p];
    }
  });
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  const auto s = split_axis(xv.shape(), axis);
  if (begin >= end || end > s.len) {
    fail(ErrorKind::Shape, "slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                               ") out of range for " + shape_str(xv.shape()));
  }
  Shape oshape = xv.shape();
  oshape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * s.inner;
  Tensor out(oshape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(o * s.len * s.inner + begin * s.inner), chunk,
                out.data().begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  const Var parents[] = {x};
  return x.tape().record(std::move(out), parents, [x, s, begin, chunk](Tape& t, const Tensor& g, const Tensor&) {
    auto* gx = t.grad_slot(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      double* dst = gx->data().data() + o * s.len * s.inner + begin * s.inner;
      const double* src = g.data().data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

Var attention(Var q, Var k, Var v, std::size_t heads) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2) fail(ErrorKind::Shape, "attention expects rank-2 inputs");
  const std::size_t nq = qv.dim(0), nk = kv.dim(0), D = qv.dim(1);
  if (kv.dim(1) != D || vv.dim(1) != D) fail(ErrorKind::Shape, "attention: feature dims differ");
  if (vv.dim(0) != nk) fail(ErrorKind::Shape, "attention: key and value token counts differ");
  if (heads == 0 || D % heads != 0) {
    fail(ErrorKind::Config, "attention: dim " + std::to_string(D) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  const std::size_t hd = D / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // probs[h][i][j]
  std::vector<double> probs(heads * nq * nk);
  Tensor out({nq, D});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < nq; ++i) {
      double* p = probs.data() + (h * nq + i) * nk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < nk; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += qv[i * D + h * hd + c] * kv[j * D + h * hd + c];
        p[j] = s * inv_scale;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < nk; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < nk; ++j) {
        p[j] /= z;
        for (std::size_t c = 0; c < hd; ++c) out[i * D + h * hd + c] += p[j] * vv[j * D + h * hd + c];
      }
    }
  }

  const Var parents[] = {q, k, v};
  return q.tape().record(
      std::move(out), parents,
      [q, k, v, probs = std::move(probs), heads, nq, nk, D, hd, inv_scale](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& qv = q.value();
        const Tensor& kv = k.value();
        const Tensor& vv = v.value();
        auto* gq = t.grad_slot(q);
        auto* gk = t.grad_slot(k);
        auto* gv = t.grad_slot(v);
        std::vector<double> dp(nk);
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < nq; ++i) {
            const double* p = probs.data() + (h * nq + i) * nk;
            double dot = 0.0;
            for (std::size_t j = 0; j < nk; ++j) {
              double acc = 0.0;
              for (std::size_t c = 0; c < hd; ++c) acc += g[i * D + h * hd + c] * vv[j * D + h * hd + c];
              dp[j] = acc;
              dot += acc * p[j];
              if (gv) {
                for (std::size_t c = 0; c < hd; ++c) (*gv)[j * D + h * hd + c] += p[j] * g[i * D + h * hd + c];
              }
            }
            for (std::size_t j = 0; j < nk; ++j) {
              const double ds = p[j] * (dp[j] - dot) * inv_scale;
              if (ds == 0.0) continue;
              for (std::size_t c = 0; c < hd; ++c) {
                if (gq) (*gq)[i * D + h * hd + c] += ds * kv[j * D + h * hd + c];
                if (gk) (*gk)[j * D + h * hd + c] += ds * qv[i * D + h * hd + c];
              }
            }
          }
        }
      });
}

Var mhsa_forward(Var query, Var key, Var value, std::size_t heads, const MhsaWeights& w) {
  Var q = linear(query, w.wq, w.bq);
  Var k = linear(key, w.wk, w.bk);
  Var v = linear(value, w.wv, w.bv);
  return linear(attention(q, k, v, heads), w.wo, w.bo);
}

Var mix_experts(std::span<const Var> experts, Var weights, std::size_t target) {
  if (experts.empty()) fail(ErrorKind::Shape, "mix_experts: no experts");
  const Shape& es = experts[0].shape();
  const std::size_t d = es.back();
  const std::size_t positions = shape_size(es) / d;
  const std::size_t n = experts.size();
  const Tensor& wv = weights.value();
  if (wv.rank() < 2 || wv.shape()[wv.rank() - 2] != n) {
    fail(ErrorKind::Shape, "mix_experts: weights " + shape_str(wv.shape()) + " do not match " +
                               std::to_string(n) + " experts");
  }
  const std::size_t m = wv.shape().back();
  if (target >= m || wv.size() != positions * n * m) {
    fail(ErrorKind::Shape, "mix_experts: weights " + shape_str(wv.shape()) + " incompatible with experts " +
                               shape_str(es));
  }
  for (const Var& e : experts) {
    require_same_tape(weights, e);
    if (e.shape() != es) fail(ErrorKind::Shape, "mix_experts: expert shapes differ");
  }
  Tensor out(es);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& ev = experts[i].value();
    for (std::size_t p = 0; p < positions; ++p) {
      const double w = wv[(p * n + i) * m + target];
      for (std::size_t c = 0; c < d; ++c) out[p * d + c] += w * ev[p * d + c];
    }
  }
  std::vector<Var> parents(experts.begin(), experts.end());
  parents.push_back(weights);
  std::vector<Var> ex(experts.begin(), experts.end());
  return weights.tape().record(
      std::move(out), parents, [ex, weights, target, n, m, d, positions](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& wv = weights.value();
        auto* gw = t.grad_slot(weights);
        for (std::size_t i = 0; i < n; ++i) {
          const Tensor& ev = ex[i].value();
          auto* ge = t.grad_slot(ex[i]);
          for (std::size_t p = 0; p < positions; ++p) {
            const std::size_t wi = (p * n + i) * m + target;
            if (ge) {
              const double w = wv[wi];
              for (std::size_t c = 0; c < d; ++c) (*ge)[p * d + c] += w * g[p * d + c];
            }
            if (gw) {
              double acc = 0.0;
              for (std::size_t c = 0; c < d; ++c) acc += ev[p * d + c] * g[p * d + c];
              (*gw)[wi] += acc;
            }
          }
        }
      });
}

}  // namespace hamobe
