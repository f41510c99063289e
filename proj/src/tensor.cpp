#include "actflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "actflow/rng.hpp"

namespace actflow {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ')';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

namespace {

[[noreturn]] void shape_error(const char* prim, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(prim) + ": shape mismatch " + shape_str(a) + " vs " +
                              shape_str(b));
}

[[noreturn]] void op_error(const char* prim, const std::string& what) {
  throw std::invalid_argument(std::string(prim) + ": " + what);
}

void require_rank2(const char* prim, const Tensor& t) {
  if (t.rank() != 2) op_error(prim, "expected rank-2 input, got " + shape_str(t.shape()));
}

using Storage = std::shared_ptr<std::vector<double>>;

Storage make_storage(std::int64_t n, double fill = 0.0) {
  return std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), fill);
}

// (m x k)(k x n) -> (m x n), with optional transposes on the logical inputs.
// Accumulates into c, which the caller must have initialised.
void matmul_raw(const double* a, const double* b, double* c, int m, int n, int k, bool ta,
                bool tb) {
  if (!ta && !tb) {
    for (int i = 0; i < m; ++i) {
      double* ci = c + static_cast<std::size_t>(i) * n;
      const double* ai = a + static_cast<std::size_t>(i) * k;
      for (int p = 0; p < k; ++p) {
        const double aip = ai[p];
        const double* bp = b + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  } else if (!ta && tb) {
    for (int i = 0; i < m; ++i) {
      const double* ai = a + static_cast<std::size_t>(i) * k;
      double* ci = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* bj = b + static_cast<std::size_t>(j) * k;
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
        ci[j] += acc;
      }
    }
  } else if (ta && !tb) {
    for (int p = 0; p < k; ++p) {
      const double* ap = a + static_cast<std::size_t>(p) * m;
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int i = 0; i < m; ++i) {
        const double api = ap[i];
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
      }
    }
  } else {
    for (int i = 0; i < m; ++i) {
      double* ci = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* bj = b + static_cast<std::size_t>(j) * k;
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += a[static_cast<std::size_t>(p) * m + i] * bj[p];
        ci[j] += acc;
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.storage_ = make_storage(shape_numel(t.shape_));
  return t;
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.storage_ = make_storage(shape_numel(t.shape_), value);
  return t;
}

Tensor Tensor::scalar(double value) { return full({}, value); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.storage_ = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(size()) +
                                               " elements, expected 1");
  return (*storage_)[0];
}

bool Tensor::all_finite() const {
  if (!storage_) return true;
  for (double v : *storage_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor Tensor::detached() const {
  Tensor t;
  t.storage_ = storage_;
  t.shape_ = shape_;
  return t;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor Tape::leaf(const Tensor& values, bool track_gradient) {
  Tensor t;
  t.storage_ = values.storage_;
  t.shape_ = values.shape_;
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  Node n;
  n.size = values.size();
  n.tracked_leaf = track_gradient;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return t;
}

AdjointStore::AdjointStore(const Tape& tape, int output_node)
    : tape_(tape), adj_(tape.nodes_.size()), reachable_(tape.nodes_.size(), 0) {
  // Mark ancestors of the output so the sweep skips unrelated nodes.
  std::vector<int> stack{output_node};
  reachable_[static_cast<std::size_t>(output_node)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    for (int p : tape.nodes_[static_cast<std::size_t>(id)].parents) {
      if (p >= 0 && !reachable_[static_cast<std::size_t>(p)]) {
        reachable_[static_cast<std::size_t>(p)] = 1;
        stack.push_back(p);
      }
    }
  }
}

double* AdjointStore::at(int node) {
  if (node < 0) return nullptr;
  auto idx = static_cast<std::size_t>(node);
  if (!reachable_[idx]) return nullptr;
  if (adj_[idx].empty())
    adj_[idx].assign(static_cast<std::size_t>(tape_.nodes_[idx].size), 0.0);
  return adj_[idx].data();
}

GradientRecord Tape::backward(const Tensor& scalar_output, const std::vector<Tensor>& wrt) const {
  if (scalar_output.tape_ != this || scalar_output.node_ < 0)
    throw std::invalid_argument("backward: output is not a node of this tape");
  if (scalar_output.size() != 1)
    throw std::invalid_argument("backward: output has " + std::to_string(scalar_output.size()) +
                                " elements, expected a scalar");
  for (const Tensor& w : wrt) {
    if (w.tape_ != this || w.node_ < 0)
      throw std::invalid_argument("backward: wrt input is not a node of this tape");
    const Node& n = nodes_[static_cast<std::size_t>(w.node_)];
    if (n.is_leaf && !n.tracked_leaf)
      throw std::invalid_argument("backward: wrt leaf was not marked track_gradient");
  }

  AdjointStore store(*this, scalar_output.node_);
  *store.at(scalar_output.node_) = 1.0;
  for (int id = scalar_output.node_; id >= 0; --id) {
    auto idx = static_cast<std::size_t>(id);
    if (!store.reachable_[idx] || store.adj_[idx].empty()) continue;
    const Node& n = nodes_[idx];
    if (n.pull) n.pull(store.adj_[idx].data(), store);
  }

  GradientRecord rec;
  for (const Tensor& w : wrt) {
    auto idx = static_cast<std::size_t>(w.node_);
    Tensor g = Tensor::zeros(w.shape());
    if (store.reachable_[idx] && !store.adj_[idx].empty())
      std::copy(store.adj_[idx].begin(), store.adj_[idx].end(), g.data());
    rec.grads_.emplace(w.node_, std::move(g));
  }
  return rec;
}

const Tensor& GradientRecord::at(const Tensor& input) const {
  auto it = grads_.find(input.node());
  if (it == grads_.end())
    throw std::invalid_argument("GradientRecord: no gradient recorded for this input");
  return it->second;
}

// ---------------------------------------------------------------------------
// Op recording
// ---------------------------------------------------------------------------

Tensor record_op(const char* name, Tensor value, std::vector<const Tensor*> inputs,
                 std::function<void(const double*, AdjointStore&)> pull) {
  Tape* tape = nullptr;
  for (const Tensor* in : inputs) {
    if (in->tape() != nullptr) {
      if (tape != nullptr && tape != in->tape())
        op_error(name, "inputs recorded on different tapes");
      tape = in->tape();
    }
  }
  if (tape == nullptr) return value;  // pure value computation

  value.tape_ = tape;
  value.node_ = static_cast<int>(tape->nodes_.size());
  Tape::Node n;
  n.size = value.size();
  n.pull = std::move(pull);
  for (const Tensor* in : inputs) n.parents.push_back(in->tape() == tape ? in->node() : -1);
  tape->nodes_.push_back(std::move(n));
  return value;
}

namespace {

// Element-wise binary helper.
template <class Fwd, class Pull>
Tensor ew_binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Pull mk_pull) {
  if (a.shape() != b.shape()) shape_error(name, a.shape(), b.shape());
  Tensor out = Tensor::zeros(a.shape());
  const std::int64_t n = a.size();
  fwd(a.data(), b.data(), out.data(), n);
  return record_op(name, std::move(out), {&a, &b}, mk_pull(a, b, n));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "add", a, b,
      [](const double* x, const double* y, double* o, std::int64_t n) {
        for (std::int64_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
      },
      [](const Tensor& a, const Tensor& b, std::int64_t n) {
        return [pa = a.node(), pb = b.node(), n](const double* g, AdjointStore& s) {
          if (double* da = s.at(pa))
            for (std::int64_t i = 0; i < n; ++i) da[i] += g[i];
          if (double* db = s.at(pb))
            for (std::int64_t i = 0; i < n; ++i) db[i] += g[i];
        };
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "sub", a, b,
      [](const double* x, const double* y, double* o, std::int64_t n) {
        for (std::int64_t i = 0; i < n; ++i) o[i] = x[i] - y[i];
      },
      [](const Tensor& a, const Tensor& b, std::int64_t n) {
        return [pa = a.node(), pb = b.node(), n](const double* g, AdjointStore& s) {
          if (double* da = s.at(pa))
            for (std::int64_t i = 0; i < n; ++i) da[i] += g[i];
          if (double* db = s.at(pb))
            for (std::int64_t i = 0; i < n; ++i) db[i] -= g[i];
        };
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return ew_binary(
      "mul", a, b,
      [](const double* x, const double* y, double* o, std::int64_t n) {
        for (std::int64_t i = 0; i < n; ++i) o[i] = x[i] * y[i];
      },
      [](const Tensor& a, const Tensor& b, std::int64_t n) {
        return [pa = a.node(), pb = b.node(), va = a.detached(), vb = b.detached(),
                n](const double* g, AdjointStore& s) {
          if (double* da = s.at(pa))
            for (std::int64_t i = 0; i < n; ++i) da[i] += g[i] * vb.data()[i];
          if (double* db = s.at(pb))
            for (std::int64_t i = 0; i < n; ++i) db[i] += g[i] * va.data()[i];
        };
      });
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  return record_op("scale", std::move(out), {&a},
                   [pa = a.node(), c, n](const double* g, AdjointStore& s) {
                     if (double* da = s.at(pa))
                       for (std::int64_t i = 0; i < n; ++i) da[i] += g[i] * c;
                   });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require_rank2("add_rowvec", x);
  if (v.rank() != 1 || v.dim(0) != x.dim(1)) shape_error("add_rowvec", x.shape(), v.shape());
  const int n = x.dim(0), d = x.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out.data()[static_cast<std::size_t>(i) * d + j] =
          x.data()[static_cast<std::size_t>(i) * d + j] + v.data()[j];
  return record_op("add_rowvec", std::move(out), {&x, &v},
                   [px = x.node(), pv = v.node(), n, d](const double* g, AdjointStore& s) {
                     if (double* dx = s.at(px))
                       for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * d; ++i)
                         dx[i] += g[i];
                     if (double* dv = s.at(pv))
                       for (int i = 0; i < n; ++i)
                         for (int j = 0; j < d; ++j)
                           dv[j] += g[static_cast<std::size_t>(i) * d + j];
                   });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  require_rank2("mul_rowvec", x);
  if (v.rank() != 1 || v.dim(0) != x.dim(1)) shape_error("mul_rowvec", x.shape(), v.shape());
  const int n = x.dim(0), d = x.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out.data()[static_cast<std::size_t>(i) * d + j] =
          x.data()[static_cast<std::size_t>(i) * d + j] * v.data()[j];
  return record_op(
      "mul_rowvec", std::move(out), {&x, &v},
      [px = x.node(), pv = v.node(), vx = x.detached(), vv = v.detached(), n,
       d](const double* g, AdjointStore& s) {
        if (double* dx = s.at(px))
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
              dx[static_cast<std::size_t>(i) * d + j] +=
                  g[static_cast<std::size_t>(i) * d + j] * vv.data()[j];
        if (double* dv = s.at(pv))
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
              dv[j] += g[static_cast<std::size_t>(i) * d + j] *
                       vx.data()[static_cast<std::size_t>(i) * d + j];
      });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  const int m = trans_a ? a.dim(1) : a.dim(0);
  const int ka = trans_a ? a.dim(0) : a.dim(1);
  const int kb = trans_b ? b.dim(1) : b.dim(0);
  const int n = trans_b ? b.dim(0) : b.dim(1);
  if (ka != kb) shape_error("matmul", a.shape(), b.shape());
  Tensor out = Tensor::zeros({m, n});
  matmul_raw(a.data(), b.data(), out.data(), m, n, ka, trans_a, trans_b);
  return record_op(
      "matmul", std::move(out), {&a, &b},
      [pa = a.node(), pb = b.node(), va = a.detached(), vb = b.detached(), m, n, k = ka, trans_a,
       trans_b](const double* g, AdjointStore& s) {
        if (double* da = s.at(pa)) {
          if (!trans_a) {
            // dA (m x k)
            if (!trans_b)
              matmul_raw(g, vb.data(), da, m, k, n, false, true);
            else
              matmul_raw(g, vb.data(), da, m, k, n, false, false);
          } else {
            // dA (k x m)
            if (!trans_b)
              matmul_raw(vb.data(), g, da, k, m, n, false, true);
            else
              matmul_raw(vb.data(), g, da, k, m, n, true, true);
          }
        }
        if (double* db = s.at(pb)) {
          if (!trans_b) {
            // dB (k x n)
            if (!trans_a)
              matmul_raw(va.data(), g, db, k, n, m, true, false);
            else
              matmul_raw(va.data(), g, db, k, n, m, false, false);
          } else {
            // dB (n x k)
            if (!trans_a)
              matmul_raw(g, va.data(), db, n, k, m, true, false);
            else
              matmul_raw(g, va.data(), db, n, k, m, true, true);
          }
        }
      });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

Tensor layer_norm_mod(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps) {
  require_rank2("layer_norm_mod", x);
  const int n = x.dim(0), d = x.dim(1);
  if (gain.rank() != 1 || gain.dim(0) != d) shape_error("layer_norm_mod", x.shape(), gain.shape());
  if (shift.rank() != 1 || shift.dim(0) != d)
    shape_error("layer_norm_mod", x.shape(), shift.shape());

  Tensor out = Tensor::zeros(x.shape());
  // Normalised rows and 1/std are reused in the reverse pass.
  auto norm = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * d);
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double* xi = x.data() + static_cast<std::size_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xi[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(i)] = is;
    double* ni = norm->data() + static_cast<std::size_t>(i) * d;
    double* oi = out.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) {
      ni[j] = (xi[j] - mu) * is;
      oi[j] = ni[j] * (1.0 + gain.data()[j]) + shift.data()[j];
    }
  }
  return record_op(
      "layer_norm_mod", std::move(out), {&x, &gain, &shift},
      [px = x.node(), pg = gain.node(), ps = shift.node(), vg = gain.detached(), norm, inv_std, n,
       d](const double* g, AdjointStore& s) {
        if (double* dg = s.at(pg))
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
              dg[j] += g[static_cast<std::size_t>(i) * d + j] *
                       (*norm)[static_cast<std::size_t>(i) * d + j];
        if (double* dsh = s.at(ps))
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) dsh[j] += g[static_cast<std::size_t>(i) * d + j];
        if (double* dx = s.at(px)) {
          for (int i = 0; i < n; ++i) {
            const double* gi = g + static_cast<std::size_t>(i) * d;
            const double* ni = norm->data() + static_cast<std::size_t>(i) * d;
            double* dxi = dx + static_cast<std::size_t>(i) * d;
            const double is = (*inv_std)[static_cast<std::size_t>(i)];
            // dn = g * (1 + gain); dx = is * (dn - mean(dn) - n * mean(dn*n))
            double mean_dn = 0.0, mean_dnn = 0.0;
            for (int j = 0; j < d; ++j) {
              const double dn = gi[j] * (1.0 + vg.data()[j]);
              mean_dn += dn;
              mean_dnn += dn * ni[j];
            }
            mean_dn /= d;
            mean_dnn /= d;
            for (int j = 0; j < d; ++j) {
              const double dn = gi[j] * (1.0 + vg.data()[j]);
              dxi[j] += is * (dn - mean_dn - ni[j] * mean_dnn);
            }
          }
        }
      });
}

Tensor softmax_rows(const Tensor& x) {
  require_rank2("softmax_rows", x);
  const int n = x.dim(0), d = x.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < n; ++i) {
    const double* xi = x.data() + static_cast<std::size_t>(i) * d;
    double* oi = out.data() + static_cast<std::size_t>(i) * d;
    double mx = xi[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (int j = 0; j < d; ++j) {
      oi[j] = std::exp(xi[j] - mx);
      z += oi[j];
    }
    for (int j = 0; j < d; ++j) oi[j] /= z;
  }
  return record_op("softmax_rows", out, {&x},
                   [px = x.node(), vy = out.detached(), n, d](const double* g, AdjointStore& s) {
                     if (double* dx = s.at(px)) {
                       for (int i = 0; i < n; ++i) {
                         const double* gi = g + static_cast<std::size_t>(i) * d;
                         const double* yi = vy.data() + static_cast<std::size_t>(i) * d;
                         double dot = 0.0;
                         for (int j = 0; j < d; ++j) dot += gi[j] * yi[j];
                         double* dxi = dx + static_cast<std::size_t>(i) * d;
                         for (int j = 0; j < d; ++j) dxi[j] += (gi[j] - dot) * yi[j];
                       }
                     }
                   });
}

Tensor gelu(const Tensor& x) {
  const std::int64_t n = x.size();
  Tensor out = Tensor::zeros(x.shape());
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  return record_op("gelu", std::move(out), {&x},
                   [px = x.node(), vx = x.detached(), n](const double* g, AdjointStore& s) {
                     if (double* dx = s.at(px)) {
                       constexpr double inv_sqrt2 = 0.70710678118654752440;
                       constexpr double inv_sqrt2pi = 0.39894228040143267794;
                       for (std::int64_t i = 0; i < n; ++i) {
                         const double v = vx.data()[i];
                         const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                         const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                         dx[i] += g[i] * (cdf + v * pdf);
                       }
                     }
                   });
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
  require_rank2("slice_rows", x);
  if (r0 < 0 || r1 > x.dim(0) || r0 >= r1)
    op_error("slice_rows", "range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                               ") invalid for " + shape_str(x.shape()));
  const int d = x.dim(1);
  Tensor out = Tensor::zeros({r1 - r0, d});
  std::copy(x.data() + static_cast<std::size_t>(r0) * d, x.data() + static_cast<std::size_t>(r1) * d,
            out.data());
  return record_op("slice_rows", std::move(out), {&x},
                   [px = x.node(), r0, r1, d](const double* g, AdjointStore& s) {
                     if (double* dx = s.at(px)) {
                       const std::int64_t n = static_cast<std::int64_t>(r1 - r0) * d;
                       double* base = dx + static_cast<std::size_t>(r0) * d;
                       for (std::int64_t i = 0; i < n; ++i) base[i] += g[i];
                     }
                   });
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  require_rank2("slice_cols", x);
  if (c0 < 0 || c1 > x.dim(1) || c0 >= c1)
    op_error("slice_cols", "range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                               ") invalid for " + shape_str(x.shape()));
  const int n = x.dim(0), d = x.dim(1), w = c1 - c0;
  Tensor out = Tensor::zeros({n, w});
  for (int i = 0; i < n; ++i)
    std::copy(x.data() + static_cast<std::size_t>(i) * d + c0,
              x.data() + static_cast<std::size_t>(i) * d + c1,
              out.data() + static_cast<std::size_t>(i) * w);
  return record_op("slice_cols", std::move(out), {&x},
                   [px = x.node(), c0, n, d, w](const double* g, AdjointStore& s) {
                     if (double* dx = s.at(px))
                       for (int i = 0; i < n; ++i)
                         for (int j = 0; j < w; ++j)
                           dx[static_cast<std::size_t>(i) * d + c0 + j] +=
                               g[static_cast<std::size_t>(i) * w + j];
                   });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) op_error("concat_rows", "no inputs");
  const int d = parts[0].dim(1);
  int total = 0;
  for (const Tensor& p : parts) {
    require_rank2("concat_rows", p);
    if (p.dim(1) != d) shape_error("concat_rows", parts[0].shape(), p.shape());
    total += p.dim(0);
  }
  Tensor out = Tensor::zeros({total, d});
  int row = 0;
  std::vector<const Tensor*> ins;
  std::vector<std::pair<int, int>> spans;  // (start row, rows)
  for (const Tensor& p : parts) {
    std::copy(p.data(), p.data() + p.size(), out.data() + static_cast<std::size_t>(row) * d);
    ins.push_back(&p);
    spans.emplace_back(row, p.dim(0));
    row += p.dim(0);
  }
  std::vector<int> pnodes;
  for (const Tensor& p : parts) pnodes.push_back(p.node());
  return record_op("concat_rows", std::move(out), std::move(ins),
                   [pnodes, spans, d](const double* g, AdjointStore& s) {
                     for (std::size_t k = 0; k < pnodes.size(); ++k) {
                       if (double* dp = s.at(pnodes[k])) {
                         const auto [start, rows] = spans[k];
                         const double* gs = g + static_cast<std::size_t>(start) * d;
                         const std::int64_t n = static_cast<std::int64_t>(rows) * d;
                         for (std::int64_t i = 0; i < n; ++i) dp[i] += gs[i];
                       }
                     }
                   });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) op_error("concat_cols", "no inputs");
  const int n = parts[0].dim(0);
  int total = 0;
  for (const Tensor& p : parts) {
    require_rank2("concat_cols", p);
    if (p.dim(0) != n) shape_error("concat_cols", parts[0].shape(), p.shape());
    total += p.dim(1);
  }
  Tensor out = Tensor::zeros({n, total});
  int col = 0;
  std::vector<const Tensor*> ins;
  std::vector<std::pair<int, int>> spans;  // (start col, cols)
  for (const Tensor& p : parts) {
    const int w = p.dim(1);
    for (int i = 0; i < n; ++i)
      std::copy(p.data() + static_cast<std::size_t>(i) * w,
                p.data() + static_cast<std::size_t>(i + 1) * w,
                out.data() + static_cast<std::size_t>(i) * total + col);
    ins.push_back(&p);
    spans.emplace_back(col, w);
    col += w;
  }
  std::vector<int> pnodes;
  std::vector<int> widths;
  for (const Tensor& p : parts) {
    pnodes.push_back(p.node());
    widths.push_back(p.dim(1));
  }
  return record_op("concat_cols", std::move(out), std::move(ins),
                   [pnodes, spans, widths, n, total](const double* g, AdjointStore& s) {
                     for (std::size_t k = 0; k < pnodes.size(); ++k) {
                       if (double* dp = s.at(pnodes[k])) {
                         const auto [start, w] = spans[k];
                         for (int i = 0; i < n; ++i)
                           for (int j = 0; j < w; ++j)
                             dp[static_cast<std::size_t>(i) * w + j] +=
                                 g[static_cast<std::size_t>(i) * total + start + j];
                       }
                     }
                   });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_rank2("gather_rows", table);
  if (ids.empty()) op_error("gather_rows", "no row ids");
  const int rows = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= rows)
      op_error("gather_rows", "row id " + std::to_string(id) + " out of range for " +
                                  shape_str(table.shape()));
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(table.data() + static_cast<std::size_t>(ids[i]) * d,
              table.data() + static_cast<std::size_t>(ids[i] + 1) * d, out.data() + i * d);
  std::vector<int> idv(ids.begin(), ids.end());
  return record_op("gather_rows", std::move(out), {&table},
                   [pt = table.node(), idv, d](const double* g, AdjointStore& s) {
                     if (double* dt = s.at(pt))
                       for (std::size_t i = 0; i < idv.size(); ++i)
                         for (int j = 0; j < d; ++j)
                           dt[static_cast<std::size_t>(idv[i]) * d + j] += g[i * static_cast<std::size_t>(d) + j];
                   });
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size()) shape_error("reshape", x.shape(), new_shape);
  Tensor out = Tensor::from(new_shape, std::vector<double>(x.data(), x.data() + x.size()));
  return record_op("reshape", std::move(out), {&x},
                   [px = x.node(), n = x.size()](const double* g, AdjointStore& s) {
                     if (double* dx = s.at(px))
                       for (std::int64_t i = 0; i < n; ++i) dx[i] += g[i];
                   });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  return record_op("sum", Tensor::scalar(acc), {&x},
                   [px = x.node(), n = x.size()](const double* g, AdjointStore& s) {
                     if (double* dx = s.at(px))
                       for (std::int64_t i = 0; i < n; ++i) dx[i] += g[0];
                   });
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  const double inv = 1.0 / static_cast<double>(x.size());
  return record_op("mean", Tensor::scalar(acc * inv), {&x},
                   [px = x.node(), n = x.size(), inv](const double* g, AdjointStore& s) {
                     if (double* dx = s.at(px))
                       for (std::int64_t i = 0; i < n; ++i) dx[i] += g[0] * inv;
                   });
}

Tensor sum_squares(const Tensor& x) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) acc += x.data()[i] * x.data()[i];
  return record_op("sum_squares", Tensor::scalar(acc), {&x},
                   [px = x.node(), vx = x.detached(), n = x.size()](const double* g,
                                                                    AdjointStore& s) {
                     if (double* dx = s.at(px))
                       for (std::int64_t i = 0; i < n; ++i) dx[i] += g[0] * 2.0 * vx.data()[i];
                   });
}

double l2_norm_value(const Tensor& x) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) acc += x.data()[i] * x.data()[i];
  return std::sqrt(acc);
}

Tensor l2_norm(const Tensor& x) {
  const double norm = l2_norm_value(x);
  return record_op("l2_norm", Tensor::scalar(norm), {&x},
                   [px = x.node(), vx = x.detached(), n = x.size(), norm](const double* g,
                                                                          AdjointStore& s) {
                     if (double* dx = s.at(px)) {
                       if (norm == 0.0) return;  // subgradient 0 at the origin
                       const double c = g[0] / norm;
                       for (std::int64_t i = 0; i < n; ++i) dx[i] += c * vx.data()[i];
                     }
                   });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mse", a.shape(), b.shape());
  const std::int64_t n = a.size();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  const double inv = 1.0 / static_cast<double>(n);
  return record_op("mse", Tensor::scalar(acc * inv), {&a, &b},
                   [pa = a.node(), pb = b.node(), va = a.detached(), vb = b.detached(), n,
                    inv](const double* g, AdjointStore& s) {
                     const double c = 2.0 * g[0] * inv;
                     if (double* da = s.at(pa))
                       for (std::int64_t i = 0; i < n; ++i)
                         da[i] += c * (va.data()[i] - vb.data()[i]);
                     if (double* db = s.at(pb))
                       for (std::int64_t i = 0; i < n; ++i)
                         db[i] -= c * (va.data()[i] - vb.data()[i]);
                   });
}

Tensor stop_gradient(const Tensor& x) {
  if (x.tape() == nullptr) return x;
  Tensor out = Tensor::from(x.shape(), std::vector<double>(x.data(), x.data() + x.size()));
  // Recorded with a null pull: identity forward, zero map in reverse.
  return record_op("stop_gradient", std::move(out), {&x}, nullptr);
}

Tensor self_attention(const Tensor& x, const Tensor& wq, const Tensor& bq, const Tensor& wk,
                      const Tensor& bk, const Tensor& wv, const Tensor& bv, const Tensor& wo,
                      const Tensor& bo, int n_heads) {
  require_rank2("self_attention", x);
  const int d = x.dim(1);
  if (d % n_heads != 0)
    op_error("self_attention", "width " + std::to_string(d) + " not divisible by " +
                                   std::to_string(n_heads) + " heads");
  const int hd = d / n_heads;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor q = affine(x, wq, bq);
  Tensor k = affine(x, wk, bk);
  Tensor v = affine(x, wv, bv);
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
    Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
    Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
    Tensor scores = scale(matmul(qh, kh, false, true), inv_sqrt_hd);
    heads.push_back(matmul(softmax_rows(scores), vh));
  }
  return affine(concat_cols(heads), wo, bo);
}

Tensor randn(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal();
  return t;
}

}  // namespace actflow
