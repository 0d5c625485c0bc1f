#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spt/errors.hpp"

namespace spt {

class Tape;

namespace detail {

struct Storage {
  std::vector<int64_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
  Tape* tape = nullptr;
};

int64_t numel_of(const std::vector<int64_t>& shape);

}  // namespace detail

// Dense row-major f64 tensor. Cheap handle onto shared storage; use clone()
// for an independent deep copy. Gradients accumulate into the storage when a
// tape's backward pass reaches it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, double value);
  static Tensor from(std::vector<int64_t> shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(s_); }
  const std::vector<int64_t>& shape() const;
  int64_t rank() const;
  int64_t dim(int64_t i) const;
  int64_t numel() const;

  double* data();
  const double* data() const;
  std::span<const double> values() const;
  double item() const;                                // scalar tensors only
  double at(std::initializer_list<int64_t> idx) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool has_grad() const;
  // Gradient buffer as a vector; zeros if backward never reached this tensor.
  std::vector<double> grad() const;
  double grad_at(std::initializer_list<int64_t> idx) const;
  void zero_grad();

  Tape* tape() const;
  Tensor& set_tape(Tape* tape);

  Tensor clone() const;     // deep copy, keeps requires_grad and tape
  Tensor detached() const;  // deep copy with requires_grad=false, off-graph

  std::shared_ptr<detail::Storage> storage() const { return s_; }
  static Tensor wrap(std::shared_ptr<detail::Storage> s);

 private:
  std::shared_ptr<detail::Storage> s_;
};

// Per-record view handed to backward functions.
class BackwardCtx {
 public:
  const double* out_grad() const;
  // Gradient accumulation buffer for input i (zero-initialised), or nullptr
  // when that input does not require a gradient.
  double* in_grad(size_t i);
  const detail::Storage& in(size_t i) const;
  const detail::Storage& out() const;

 private:
  friend class Tape;
  struct Impl;
  Impl* impl_ = nullptr;
};

// Execution-ordered record of forward operations for reverse-mode autodiff.
// A tape belongs to one model instance and is confined to a single thread.
class Tape {
 public:
  using BackwardFn = std::function<void(BackwardCtx&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const char* op, std::vector<std::shared_ptr<detail::Storage>> inputs,
              std::shared_ptr<detail::Storage> output, BackwardFn fn);

  // Reverse sweep from a scalar loss. Accumulates into .grad of every
  // requires_grad tensor reachable from the loss; repeated calls accumulate.
  // Tensors not on a path to the loss are left untouched.
  void backward(const Tensor& loss);

  void clear();
  size_t size() const { return records_.size(); }

  bool recording() const { return enabled_; }

  // RAII guard that suspends recording (forward passes for evaluation).
  class NoGrad {
   public:
    explicit NoGrad(Tape& tape) : tape_(tape), prev_(tape.enabled_) { tape_.enabled_ = false; }
    ~NoGrad() { tape_.enabled_ = prev_; }
    NoGrad(const NoGrad&) = delete;

   private:
    Tape& tape_;
    bool prev_;
  };

 private:
  struct Record {
    const char* op;
    std::vector<std::shared_ptr<detail::Storage>> inputs;
    std::shared_ptr<detail::Storage> output;
    BackwardFn fn;
  };
  std::vector<Record> records_;
  bool enabled_ = true;
};

// ---------------------------------------------------------------------------
// Operations. Binary elementwise ops broadcast along trailing axes with the
// usual extent-1 expansion rule.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);  // the "scale" mode

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor sigmoid(const Tensor& a);
Tensor sqrt_elem(const Tensor& a);

Tensor softmax(const Tensor& a, int64_t axis);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

Tensor sum_all(const Tensor& a);   // -> shape {1}
Tensor mean_all(const Tensor& a);  // -> shape {1}
Tensor sum_axis(const Tensor& a, int64_t axis);  // keeps the axis with extent 1

Tensor reshape(const Tensor& a, std::vector<int64_t> shape);
Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1);
Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  return concat_rows(std::span<const Tensor>(parts.data(), parts.size()));
}
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  return concat_cols(std::span<const Tensor>(parts.data(), parts.size()));
}
Tensor repeat_rows(const Tensor& row, int64_t n);  // (1,d) -> (n,d)

// Stride-2 2x2 convolution over an (h*w, c_in) token grid -> (h/2*w/2, c_out).
// kernel is (4*c_in, c_out), rows ordered by kernel tap (0,0),(0,1),(1,0),(1,1).
Tensor conv_down2(const Tensor& x, const Tensor& kernel, const Tensor& bias, int64_t h, int64_t w);
// Stride-2 2x2 transposed convolution: (h*w, c_in) -> (2h*2w, c_out).
// kernel is (c_in, 4*c_out), column blocks ordered by output tap.
Tensor conv_up2(const Tensor& x, const Tensor& kernel, const Tensor& bias, int64_t h, int64_t w);
// Bilinear resize of an (h_in*w_in, c) grid to (h_out*w_out, c), half-pixel centers.
Tensor bilinear_resize(const Tensor& x, int64_t h_in, int64_t w_in, int64_t h_out, int64_t w_out);
// Non-overlapping patch extraction: (h, w) image -> (num_patches, patch*patch).
Tensor extract_patches(const Tensor& img, int64_t patch);

// Square matrix with the diagonal forced to -inf (used before a masked softmax).
Tensor add_neg_inf_diag(const Tensor& a);
// Constant 0/1 gate: 1 where a >= threshold. Not differentiable by design.
Tensor ge_mask(const Tensor& a, double threshold);
Tensor detach(const Tensor& a);

// Mean binary cross-entropy on logits, computed in the numerically stable
// form max(z,0) - z*y + log1p(exp(-|z|)). targets is a constant in [0,1].
Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

bool all_finite(const Tensor& a);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
// ---------------------------------------------------------------------------

struct FiniteDiffEntry {
  std::string param;
  int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct FiniteDiffReport {
  std::vector<FiniteDiffEntry> entries;
  double max_rel_error = 0.0;
  bool passed(double tol) const { return max_rel_error < tol; }
};

// Central-difference check of d loss / d theta for one coordinate of `param`.
// `forward` must recompute the scalar loss from current parameter values.
FiniteDiffEntry finite_diff_coordinate(const std::function<double()>& forward, Tensor& param,
                                       int64_t index, double analytic, double h);

// Relative error convention shared by every gradient check:
// |a - n| / max(1e-8, |a| + |n|).
double rel_error(double analytic, double numeric);

}  // namespace spt
