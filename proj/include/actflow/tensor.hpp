#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace actflow {

class Tape;

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// Dense float64 array, row-major. A Tensor is a cheap handle: copies share
// storage. When produced by an op on a Tape it additionally carries the node
// id of its recording, which is what backward() differentiates through.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return storage_ ? static_cast<std::int64_t>(storage_->size()) : 0; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }

  double* data() { return storage_->data(); }
  const double* data() const { return storage_->data(); }
  double item() const;  // requires size() == 1
  std::span<const double> values() const { return {storage_->data(), storage_->size()}; }

  bool defined() const { return storage_ != nullptr; }
  bool on_tape() const { return node_ >= 0; }
  int node() const { return node_; }
  Tape* tape() const { return tape_; }
  bool all_finite() const;

  Tensor detached() const;  // same values, no tape binding (shares storage)

 private:
  friend class Tape;
  friend Tensor record_op(const char* name, Tensor value, std::vector<const Tensor*> inputs,
                          std::function<void(const double*, class AdjointStore&)> pull);
  std::shared_ptr<std::vector<double>> storage_;
  Shape shape_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Gradients from one backward() call, keyed by the node identity of the
// requested inputs. Every requested input appears exactly once.
class GradientRecord {
 public:
  const Tensor& at(const Tensor& input) const;
  bool contains(const Tensor& input) const { return grads_.count(input.node()) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<int, Tensor> grads_;
};

// Records a forward computation as a flat list of nodes so reverse-mode
// gradients can be pulled from any scalar node. Adjoints live in per-call
// buffers, so backward() can run any number of times on the same recording
// (needed when a loss is differentiated first w.r.t. inputs and later, after
// more nodes are appended, w.r.t. parameters).
//
// Not thread-safe: one recording/backward at a time per tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Wraps existing values as a leaf on this tape (storage is shared, not
  // copied). Only tracked leaves are valid backward() targets.
  Tensor leaf(const Tensor& values, bool track_gradient = true);

  // Reverse pass from a one-element output. Inputs must be nodes of this
  // tape; leaves must have been created with track_gradient=true.
  GradientRecord backward(const Tensor& scalar_output, const std::vector<Tensor>& wrt) const;

  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend Tensor record_op(const char* name, Tensor value, std::vector<const Tensor*> inputs,
                          std::function<void(const double*, class AdjointStore&)> pull);
  friend class AdjointStore;

  struct Node {
    std::int64_t size = 0;
    std::function<void(const double*, class AdjointStore&)> pull;  // may be empty
    bool tracked_leaf = false;
    bool is_leaf = false;
    std::vector<int> parents;
  };
  std::vector<Node> nodes_;
};

// Accumulation buffers for one backward sweep.
class AdjointStore {
 public:
  AdjointStore(const Tape& tape, int output_node);
  // Buffer for a node's adjoint, zero-initialised on first touch.
  // Returns nullptr for node ids < 0 (constants) and unreachable nodes.
  double* at(int node);

 private:
  friend class Tape;
  const Tape& tape_;
  std::vector<std::vector<double>> adj_;
  std::vector<char> reachable_;
};

// ---------------------------------------------------------------------------
// Primitives. Shape mismatches throw std::invalid_argument naming the
// primitive and the offending shapes. Results are recorded on the tape of
// their inputs (if any input is tape-bound); ops over plain values stay
// plain values.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

// X: (n, d) with v broadcast across rows.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor mul_rowvec(const Tensor& x, const Tensor& v);

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
// x (n, k) * w (k, m) + b (m)
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

// Row-wise layer norm with modulated affine: y = norm(x) * (1 + gain) + shift.
Tensor layer_norm_mod(const Tensor& x, const Tensor& gain, const Tensor& shift,
                      double eps = 1e-5);

Tensor softmax_rows(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
Tensor reshape(const Tensor& x, Shape new_shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_squares(const Tensor& x);
Tensor l2_norm(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

// Identity forward, zero map in reverse.
Tensor stop_gradient(const Tensor& x);

// Multi-head scaled-dot-product self-attention over a (n, d) token grid.
Tensor self_attention(const Tensor& x, const Tensor& wq, const Tensor& bq, const Tensor& wk,
                      const Tensor& bk, const Tensor& wv, const Tensor& bv, const Tensor& wo,
                      const Tensor& bo, int n_heads);

// Gaussian fill, in evaluation (non-tape) form.
Tensor randn(Shape shape, class Rng& rng);

double l2_norm_value(const Tensor& x);

}  // namespace actflow
