#include "spt/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_map>

namespace spt {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ")";
  return os.str();
}

using StoragePtr = std::shared_ptr<detail::Storage>;

StoragePtr make_storage(std::vector<int64_t> shape, Tape* tape, bool requires_grad) {
  auto s = std::make_shared<detail::Storage>();
  s->shape = std::move(shape);
  s->data.assign(static_cast<size_t>(detail::numel_of(s->shape)), 0.0);
  s->requires_grad = requires_grad;
  s->tape = tape;
  return s;
}

// Tape of the result: the inputs must agree on their tape (nullptr mixes freely).
Tape* pick_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->defined()) continue;
    Tape* tt = t->tape();
    if (!tt) continue;
    if (tape && tt != tape) fail(ErrorKind::contract, "operands belong to different tapes");
    tape = tt;
  }
  return tape;
}

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

bool should_record(Tape* tape, bool requires_grad) {
  return tape != nullptr && tape->recording() && requires_grad;
}

// Trailing-axes broadcast plan: strides are aligned to the output rank with 0
// marking broadcast dimensions.
struct BroadcastPlan {
  std::vector<int64_t> out_shape;
  std::vector<int64_t> stride_a;
  std::vector<int64_t> stride_b;
  bool same_shape = false;
  int64_t numel = 0;
};

BroadcastPlan make_broadcast_plan(const std::vector<int64_t>& a, const std::vector<int64_t>& b,
                                  const char* op) {
  BroadcastPlan plan;
  const size_t rank = std::max(a.size(), b.size());
  plan.out_shape.resize(rank);
  std::vector<int64_t> ae(rank, 1), be(rank, 1);
  std::copy(a.begin(), a.end(), ae.end() - static_cast<ptrdiff_t>(a.size()));
  std::copy(b.begin(), b.end(), be.end() - static_cast<ptrdiff_t>(b.size()));
  for (size_t i = 0; i < rank; ++i) {
    if (ae[i] == be[i]) {
      plan.out_shape[i] = ae[i];
    } else if (ae[i] == 1) {
      plan.out_shape[i] = be[i];
    } else if (be[i] == 1) {
      plan.out_shape[i] = ae[i];
    } else {
      fail(ErrorKind::dimension, std::string(op) + ": shapes " + shape_str(a) + " and " +
                                     shape_str(b) + " are not broadcastable");
    }
  }
  auto strides_for = [&](const std::vector<int64_t>& ext) {
    std::vector<int64_t> st(rank, 0);
    int64_t acc = 1;
    for (size_t i = rank; i-- > 0;) {
      st[i] = (ext[i] == 1) ? 0 : acc;
      acc *= ext[i];
    }
    return st;
  };
  plan.stride_a = strides_for(ae);
  plan.stride_b = strides_for(be);
  plan.same_shape = (a == b);
  plan.numel = detail::numel_of(plan.out_shape);
  return plan;
}

// Calls fn(out_index, a_index, b_index) for every output element. Rank 1 and
// 2 take tight double loops; higher ranks fall back to an odometer walk.
template <typename Fn>
void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
  const size_t rank = plan.out_shape.size();
  if (plan.same_shape) {
    for (int64_t i = 0; i < plan.numel; ++i) fn(i, i, i);
    return;
  }
  if (rank == 1) {
    const int64_t n = plan.out_shape[0];
    const int64_t sa = plan.stride_a[0], sb = plan.stride_b[0];
    for (int64_t i = 0; i < n; ++i) fn(i, i * sa, i * sb);
    return;
  }
  if (rank == 2) {
    const int64_t rows = plan.out_shape[0], cols = plan.out_shape[1];
    const int64_t sa0 = plan.stride_a[0], sa1 = plan.stride_a[1];
    const int64_t sb0 = plan.stride_b[0], sb1 = plan.stride_b[1];
    int64_t o = 0;
    for (int64_t r = 0; r < rows; ++r) {
      const int64_t base_a = r * sa0, base_b = r * sb0;
      for (int64_t c = 0; c < cols; ++c, ++o) fn(o, base_a + c * sa1, base_b + c * sb1);
    }
    return;
  }
  std::vector<int64_t> idx(rank, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t o = 0; o < plan.numel; ++o) {
    fn(o, ia, ib);
    for (size_t d = rank; d-- > 0;) {
      idx[d]++;
      ia += plan.stride_a[d];
      ib += plan.stride_b[d];
      if (idx[d] < plan.out_shape[d]) break;
      ia -= plan.stride_a[d] * plan.out_shape[d];
      ib -= plan.stride_b[d] * plan.out_shape[d];
      idx[d] = 0;
    }
  }
}

void check_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) fail(ErrorKind::dimension, std::string(op) + ": expected a rank-2 tensor");
}

}  // namespace

namespace detail {
int64_t numel_of(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e <= 0) fail(ErrorKind::dimension, "tensor extents must be positive");
    n *= e;
  }
  return n;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int64_t> shape) {
  Tensor t;
  t.s_ = make_storage(std::move(shape), nullptr, false);
  return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.s_->data.begin(), t.s_->data.end(), value);
  return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<double> values) {
  Tensor t;
  t.s_ = std::make_shared<detail::Storage>();
  t.s_->shape = std::move(shape);
  if (detail::numel_of(t.s_->shape) != static_cast<int64_t>(values.size()))
    fail(ErrorKind::dimension, "Tensor::from: value count does not match shape");
  t.s_->data = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::wrap(std::shared_ptr<detail::Storage> s) {
  Tensor t;
  t.s_ = std::move(s);
  return t;
}

const std::vector<int64_t>& Tensor::shape() const { return s_->shape; }
int64_t Tensor::rank() const { return static_cast<int64_t>(s_->shape.size()); }
int64_t Tensor::dim(int64_t i) const {
  if (i < 0) i += rank();
  return s_->shape[static_cast<size_t>(i)];
}
int64_t Tensor::numel() const { return static_cast<int64_t>(s_->data.size()); }

double* Tensor::data() { return s_->data.data(); }
const double* Tensor::data() const { return s_->data.data(); }
std::span<const double> Tensor::values() const { return {s_->data.data(), s_->data.size()}; }

double Tensor::item() const {
  if (numel() != 1) fail(ErrorKind::contract, "item(): tensor is not a scalar");
  return s_->data[0];
}

static int64_t flat_index(const std::vector<int64_t>& shape, std::initializer_list<int64_t> idx) {
  if (idx.size() != shape.size()) fail(ErrorKind::contract, "at(): index rank mismatch");
  int64_t flat = 0;
  size_t d = 0;
  for (int64_t i : idx) {
    if (i < 0 || i >= shape[d]) fail(ErrorKind::contract, "at(): index out of range");
    flat = flat * shape[d] + i;
    ++d;
  }
  return flat;
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  return s_->data[static_cast<size_t>(flat_index(s_->shape, idx))];
}

bool Tensor::requires_grad() const { return s_ && s_->requires_grad; }
Tensor& Tensor::set_requires_grad(bool value) {
  s_->requires_grad = value;
  return *this;
}
bool Tensor::has_grad() const { return s_ && !s_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (s_->grad.empty()) return std::vector<double>(s_->data.size(), 0.0);
  return s_->grad;
}

double Tensor::grad_at(std::initializer_list<int64_t> idx) const {
  if (s_->grad.empty()) return 0.0;
  return s_->grad[static_cast<size_t>(flat_index(s_->shape, idx))];
}

void Tensor::zero_grad() {
  if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

Tape* Tensor::tape() const { return s_ ? s_->tape : nullptr; }
Tensor& Tensor::set_tape(Tape* tape) {
  s_->tape = tape;
  return *this;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.s_ = std::make_shared<detail::Storage>(*s_);
  return t;
}

Tensor Tensor::detached() const {
  Tensor t = clone();
  t.s_->requires_grad = false;
  t.s_->grad.clear();
  t.s_->tape = nullptr;
  return t;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

struct BackwardCtx::Impl {
  const std::vector<StoragePtr>* inputs;
  const detail::Storage* output;
  const std::vector<double>* out_grad;
  std::unordered_map<detail::Storage*, std::vector<double>>* flow;
};

const double* BackwardCtx::out_grad() const { return impl_->out_grad->data(); }

double* BackwardCtx::in_grad(size_t i) {
  detail::Storage* st = (*impl_->inputs)[i].get();
  if (!st->requires_grad) return nullptr;
  auto& buf = (*impl_->flow)[st];
  if (buf.empty()) buf.assign(st->data.size(), 0.0);
  return buf.data();
}

const detail::Storage& BackwardCtx::in(size_t i) const { return *(*impl_->inputs)[i]; }
const detail::Storage& BackwardCtx::out() const { return *impl_->output; }

void Tape::record(const char* op, std::vector<StoragePtr> inputs, StoragePtr output,
                  BackwardFn fn) {
  records_.push_back(Record{op, std::move(inputs), std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) fail(ErrorKind::contract, "backward: loss must be a scalar");
  std::unordered_map<detail::Storage*, std::vector<double>> flow;
  flow[loss.storage().get()] = {1.0};

  for (size_t r = records_.size(); r-- > 0;) {
    Record& rec = records_[r];
    auto it = flow.find(rec.output.get());
    if (it == flow.end()) continue;  // not on a path to the loss
    BackwardCtx ctx;
    BackwardCtx::Impl impl{&rec.inputs, rec.output.get(), &it->second, &flow};
    ctx.impl_ = &impl;
    rec.fn(ctx);
  }

  for (auto& [st, buf] : flow) {
    if (!st->requires_grad) continue;
    if (st->grad.empty()) st->grad.assign(st->data.size(), 0.0);
    for (size_t i = 0; i < buf.size(); ++i) st->grad[i] += buf[i];
  }
}

void Tape::clear() { records_.clear(); }

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const int64_t m = trans_a ? a.dim(1) : a.dim(0);
  const int64_t k = trans_a ? a.dim(0) : a.dim(1);
  const int64_t kb = trans_b ? b.dim(1) : b.dim(0);
  const int64_t n = trans_b ? b.dim(0) : b.dim(1);
  if (k != kb)
    fail(ErrorKind::dimension, "matmul: inner extents differ, " + shape_str(a.shape()) +
                                   (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) +
                                   (trans_b ? "^T" : ""));

  Tape* tape = pick_tape({&a, &b});
  const bool rg = any_requires_grad({&a, &b});
  auto out = make_storage({m, n}, tape, rg);

  ConstMatMap A(a.data(), a.dim(0), a.dim(1));
  ConstMatMap B(b.data(), b.dim(0), b.dim(1));
  MatMap C(out->data.data(), m, n);
  if (!trans_a && !trans_b)
    C.noalias() = A * B;
  else if (trans_a && !trans_b)
    C.noalias() = A.transpose() * B;
  else if (!trans_a && trans_b)
    C.noalias() = A * B.transpose();
  else
    C.noalias() = A.transpose() * B.transpose();

  if (should_record(tape, rg)) {
    auto sa = a.storage();
    auto sb = b.storage();
    tape->record("matmul", {sa, sb}, out, [m, n, trans_a, trans_b](BackwardCtx& ctx) {
      const detail::Storage& A_ = ctx.in(0);
      const detail::Storage& B_ = ctx.in(1);
      ConstMatMap Am(A_.data.data(), A_.shape[0], A_.shape[1]);
      ConstMatMap Bm(B_.data.data(), B_.shape[0], B_.shape[1]);
      ConstMatMap dC(ctx.out_grad(), m, n);
      if (double* da = ctx.in_grad(0)) {
        MatMap dA(da, A_.shape[0], A_.shape[1]);
        if (!trans_a && !trans_b)
          dA.noalias() += dC * Bm.transpose();
        else if (!trans_a && trans_b)
          dA.noalias() += dC * Bm;
        else if (trans_a && !trans_b)
          dA.noalias() += Bm * dC.transpose();
        else
          dA.noalias() += Bm.transpose() * dC.transpose();
      }
      if (double* db = ctx.in_grad(1)) {
        MatMap dB(db, B_.shape[0], B_.shape[1]);
        if (!trans_a && !trans_b)
          dB.noalias() += Am.transpose() * dC;
        else if (trans_a && !trans_b)
          dB.noalias() += Am * dC;
        else if (!trans_a && trans_b)
          dB.noalias() += dC.transpose() * Am;
        else
          dB.noalias() += dC.transpose() * Am.transpose();
      }
    });
  }
  return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Broadcasting binary elementwise ops
// ---------------------------------------------------------------------------

namespace {

enum class BinOp { add, sub, mul, div };

Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  BroadcastPlan plan = make_broadcast_plan(a.shape(), b.shape(), name);
  Tape* tape = pick_tape({&a, &b});
  const bool rg = any_requires_grad({&a, &b});
  auto out = make_storage(plan.out_shape, tape, rg);

  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out->data.data();
  switch (op) {
    case BinOp::add:
      for_each_broadcast(plan, [&](int64_t o, int64_t ia, int64_t ib) { po[o] = pa[ia] + pb[ib]; });
      break;
    case BinOp::sub:
      for_each_broadcast(plan, [&](int64_t o, int64_t ia, int64_t ib) { po[o] = pa[ia] - pb[ib]; });
      break;
    case BinOp::mul:
      for_each_broadcast(plan, [&](int64_t o, int64_t ia, int64_t ib) { po[o] = pa[ia] * pb[ib]; });
      break;
    case BinOp::div:
      for_each_broadcast(plan, [&](int64_t o, int64_t ia, int64_t ib) { po[o] = pa[ia] / pb[ib]; });
      break;
  }

  if (should_record(tape, rg)) {
    tape->record(name, {a.storage(), b.storage()}, out, [plan, op](BackwardCtx& ctx) {
      const double* go = ctx.out_grad();
      const double* va = ctx.in(0).data.data();
      const double* vb = ctx.in(1).data.data();
      double* da = ctx.in_grad(0);
      double* db = ctx.in_grad(1);
      for_each_broadcast(plan, [&](int64_t o, int64_t ia, int64_t ib) {
        switch (op) {
          case BinOp::add:
            if (da) da[ia] += go[o];
            if (db) db[ib] += go[o];
            break;
          case BinOp::sub:
            if (da) da[ia] += go[o];
            if (db) db[ib] -= go[o];
            break;
          case BinOp::mul:
            if (da) da[ia] += go[o] * vb[ib];
            if (db) db[ib] += go[o] * va[ia];
            break;
          case BinOp::div:
            if (da) da[ia] += go[o] / vb[ib];
            if (db) db[ib] -= go[o] * va[ia] / (vb[ib] * vb[ib]);
            break;
        }
      });
    });
  }
  return Tensor::wrap(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::mul, "mul"); }
Tensor divide(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::div, "div"); }

// ---------------------------------------------------------------------------
// Scalar and unary elementwise ops
// ---------------------------------------------------------------------------

namespace {

template <typename FwdFn, typename BwdFn>
Tensor unary_op(const Tensor& a, const char* name, FwdFn fwd, BwdFn bwd) {
  Tape* tape = pick_tape({&a});
  const bool rg = a.requires_grad();
  auto out = make_storage(a.shape(), tape, rg);
  const double* pa = a.data();
  double* po = out->data.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);

  if (should_record(tape, rg)) {
    auto out_weak = out;
    tape->record(name, {a.storage()}, out, [n, bwd](BackwardCtx& ctx) {
      double* da = ctx.in_grad(0);
      if (!da) return;
      const double* go = ctx.out_grad();
      const double* x = ctx.in(0).data.data();
      const double* y = ctx.out().data.data();
      for (int64_t i = 0; i < n; ++i) da[i] += go[i] * bwd(x[i], y[i]);
    });
  }
  return Tensor::wrap(out);
}

}  // namespace

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(
      a, "add_scalar", [s](double x) { return x + s; },
      [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(
      a, "mul_scalar", [s](double x) { return x * s; },
      [s](double, double) { return s; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

using ArrayMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrayMap = Eigen::Map<const Eigen::ArrayXd>;

// tanh via one vectorized exp; exact at the saturated ends.
Eigen::ArrayXd tanh_fast(const Eigen::ArrayXd& u) {
  return 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
}

}  // namespace

Tensor gelu(const Tensor& a) {
  Tape* tape = pick_tape({&a});
  const bool rg = a.requires_grad();
  auto out = make_storage(a.shape(), tape, rg);
  const int64_t n = a.numel();
  {
    ConstArrayMap x(a.data(), n);
    ArrayMap y(out->data.data(), n);
    Eigen::ArrayXd u = kGeluC * (x + kGeluA * x.cube());
    y = 0.5 * x * (1.0 + tanh_fast(u));
  }
  if (should_record(tape, rg)) {
    tape->record("gelu", {a.storage()}, out, [n](BackwardCtx& ctx) {
      double* da = ctx.in_grad(0);
      if (!da) return;
      ConstArrayMap x(ctx.in(0).data.data(), n);
      ConstArrayMap go(ctx.out_grad(), n);
      ArrayMap d(da, n);
      Eigen::ArrayXd u = kGeluC * (x + kGeluA * x.cube());
      Eigen::ArrayXd t = tanh_fast(u);
      Eigen::ArrayXd du = kGeluC * (1.0 + 3.0 * kGeluA * x.square());
      d += go * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t.square()) * du);
    });
  }
  return Tensor::wrap(out);
}

Tensor sigmoid(const Tensor& a) {
  Tape* tape = pick_tape({&a});
  const bool rg = a.requires_grad();
  auto out = make_storage(a.shape(), tape, rg);
  const int64_t n = a.numel();
  {
    // e = exp(-|x|) keeps the argument non-positive; both branches share it.
    ConstArrayMap x(a.data(), n);
    ArrayMap y(out->data.data(), n);
    Eigen::ArrayXd e = (-x.abs()).exp();
    y = (x >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e));
  }
  if (should_record(tape, rg)) {
    tape->record("sigmoid", {a.storage()}, out, [n](BackwardCtx& ctx) {
      double* da = ctx.in_grad(0);
      if (!da) return;
      ConstArrayMap go(ctx.out_grad(), n);
      ConstArrayMap y(ctx.out().data.data(), n);
      ArrayMap d(da, n);
      d += go * y * (1.0 - y);
    });
  }
  return Tensor::wrap(out);
}

Tensor sqrt_elem(const Tensor& a) {
  for (double v : a.values())
    if (v < 0.0) fail(ErrorKind::contract, "sqrt_elem: negative input");
  return unary_op(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

// ---------------------------------------------------------------------------
// softmax / layernorm
// ---------------------------------------------------------------------------

namespace {

struct AxisSplit {
  int64_t outer, len, inner;
};

AxisSplit split_axis(const std::vector<int64_t>& shape, int64_t axis, const char* op) {
  if (axis < 0) axis += static_cast<int64_t>(shape.size());
  if (axis < 0 || axis >= static_cast<int64_t>(shape.size()))
    fail(ErrorKind::dimension, std::string(op) + ": axis out of range");
  AxisSplit s{1, shape[static_cast<size_t>(axis)], 1};
  for (int64_t i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
    s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor softmax(const Tensor& a, int64_t axis) {
  const AxisSplit sp = split_axis(a.shape(), axis, "softmax");
  Tape* tape = pick_tape({&a});
  const bool rg = a.requires_grad();
  auto out = make_storage(a.shape(), tape, rg);
  const double* pa = a.data();
  double* po = out->data.data();

  if (sp.inner == 1) {
    // Contiguous slices: vectorized max-subtracted exponentials.
    for (int64_t o = 0; o < sp.outer; ++o) {
      Eigen::Map<const Eigen::ArrayXd> x(pa + o * sp.len, sp.len);
      Eigen::Map<Eigen::ArrayXd> y(po + o * sp.len, sp.len);
      const double mx = x.maxCoeff();
      if (mx == -kInf)
        fail(ErrorKind::degenerate, "softmax: slice contains only -inf entries");
      // Vectorized exp mishandles -inf lanes; masked entries must be exactly 0.
      y = (x == -kInf).select(0.0, (x - mx).exp());
      // Scalar-order sum: Eigen's vectorized reduction order varies with the
      // buffer's runtime alignment, which would break bit-reproducibility.
      double sum = 0.0;
      for (int64_t i = 0; i < sp.len; ++i) sum += y[i];
      y /= sum;
    }
  } else {
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t in = 0; in < sp.inner; ++in) {
        const int64_t base = o * sp.len * sp.inner + in;
        double mx = -kInf;
        for (int64_t i = 0; i < sp.len; ++i) mx = std::max(mx, pa[base + i * sp.inner]);
        if (mx == -kInf)
          fail(ErrorKind::degenerate, "softmax: slice contains only -inf entries");
        double sum = 0.0;
        for (int64_t i = 0; i < sp.len; ++i) {
          const double x = pa[base + i * sp.inner];
          const double e = (x == -kInf) ? 0.0 : std::exp(x - mx);
          po[base + i * sp.inner] = e;
          sum += e;
        }
        const double inv = 1.0 / sum;
        for (int64_t i = 0; i < sp.len; ++i) po[base + i * sp.inner] *= inv;
      }
    }
  }

  if (should_record(tape, rg)) {
    tape->record("softmax", {a.storage()}, out, [sp](BackwardCtx& ctx) {
      double* da = ctx.in_grad(0);
      if (!da) return;
      const double* go = ctx.out_grad();
      const double* y = ctx.out().data.data();
      for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t in = 0; in < sp.inner; ++in) {
          const int64_t base = o * sp.len * sp.inner + in;
          double dot = 0.0;
          for (int64_t i = 0; i < sp.len; ++i) {
            const int64_t k = base + i * sp.inner;
            dot += go[k] * y[k];
          }
          for (int64_t i = 0; i < sp.len; ++i) {
            const int64_t k = base + i * sp.inner;
            da[k] += y[k] * (go[k] - dot);
          }
        }
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (eps <= 0.0) fail(ErrorKind::contract, "layernorm: eps must be positive");
  const int64_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d)
    fail(ErrorKind::dimension, "layernorm: gamma/beta must match the last axis extent");
  const int64_t rows = x.numel() / d;

  Tape* tape = pick_tape({&x, &gamma, &beta});
  const bool rg = any_requires_grad({&x, &gamma, &beta});
  auto out = make_storage(x.shape(), tape, rg);

  std::vector<double> mean(static_cast<size_t>(rows)), inv_std(static_cast<size_t>(rows));
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  double* po = out->data.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = px + r * d;
    double mu = 0.0;
    for (int64_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      const double c = xr[i] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    mean[static_cast<size_t>(r)] = mu;
    inv_std[static_cast<size_t>(r)] = inv;
    double* yr = po + r * d;
    for (int64_t i = 0; i < d; ++i) yr[i] = (xr[i] - mu) * inv * pg[i] + pb[i];
  }

  if (should_record(tape, rg)) {
    tape->record("layernorm", {x.storage(), gamma.storage(), beta.storage()}, out,
                 [rows, d, mean = std::move(mean), inv_std = std::move(inv_std)](BackwardCtx& ctx) {
                   const double* go = ctx.out_grad();
                   const double* px = ctx.in(0).data.data();
                   const double* pg = ctx.in(1).data.data();
                   double* dx = ctx.in_grad(0);
                   double* dg = ctx.in_grad(1);
                   double* db = ctx.in_grad(2);
                   for (int64_t r = 0; r < rows; ++r) {
                     const double mu = mean[static_cast<size_t>(r)];
                     const double inv = inv_std[static_cast<size_t>(r)];
                     const double* xr = px + r * d;
                     const double* gr = go + r * d;
                     if (dg || db) {
                       for (int64_t i = 0; i < d; ++i) {
                         const double xhat = (xr[i] - mu) * inv;
                         if (dg) dg[i] += gr[i] * xhat;
                         if (db) db[i] += gr[i];
                       }
                     }
                     if (dx) {
                       // dx = inv/d * (d*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                       double s1 = 0.0, s2 = 0.0;
                       for (int64_t i = 0; i < d; ++i) {
                         const double xhat = (xr[i] - mu) * inv;
                         const double dxh = gr[i] * pg[i];
                         s1 += dxh;
                         s2 += dxh * xhat;
                       }
                       const double nd = static_cast<double>(d);
                       for (int64_t i = 0; i < d; ++i) {
                         const double xhat = (xr[i] - mu) * inv;
                         const double dxh = gr[i] * pg[i];
                         dx[r * d + i] += inv * (dxh - (s1 + xhat * s2) / nd);
                       }
                     }
                   }
                 });
  }
  return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  Tape* tape = pick_tape({&a});
  const bool rg = a.requires_grad();
  auto out = make_storage({1}, tape, rg);
  double s = 0.0;
  for (double v : a.values()) s += v;
  out->data[0] = s;
  if (should_record(tape, rg)) {
    const int64_t n = a.numel();
    tape->record("sum_all", {a.storage()}, out, [n](BackwardCtx& ctx) {
      if (double* da = ctx.in_grad(0)) {
        const double g = ctx.out_grad()[0];
        for (int64_t i = 0; i < n; ++i) da[i] += g;
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& a, int64_t axis) {
  const AxisSplit sp = split_axis(a.shape(), axis, "sum_axis");
  std::vector<int64_t> out_shape = a.shape();
  if (axis < 0) axis += a.rank();
  out_shape[static_cast<size_t>(axis)] = 1;

  Tape* tape = pick_tape({&a});
  const bool rg = a.requires_grad();
  auto out = make_storage(out_shape, tape, rg);
  const double* pa = a.data();
  double* po = out->data.data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t in = 0; in < sp.inner; ++in) {
      double s = 0.0;
      for (int64_t i = 0; i < sp.len; ++i) s += pa[o * sp.len * sp.inner + i * sp.inner + in];
      po[o * sp.inner + in] = s;
    }
  }
  if (should_record(tape, rg)) {
    tape->record("sum_axis", {a.storage()}, out, [sp](BackwardCtx& ctx) {
      if (double* da = ctx.in_grad(0)) {
        const double* go = ctx.out_grad();
        for (int64_t o = 0; o < sp.outer; ++o)
          for (int64_t in = 0; in < sp.inner; ++in) {
            const double g = go[o * sp.inner + in];
            for (int64_t i = 0; i < sp.len; ++i)
              da[o * sp.len * sp.inner + i * sp.inner + in] += g;
          }
      }
    });
  }
  return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, std::vector<int64_t> shape) {
  if (detail::numel_of(shape) != a.numel())
    fail(ErrorKind::dimension, "reshape: element count mismatch");
  Tape* tape = pick_tape({&a});
  const bool rg = a.requires_grad();
  auto out = make_storage(shape, tape, rg);
  out->data = a.storage()->data;
  if (should_record(tape, rg)) {
    const int64_t n = a.numel();
    tape->record("reshape", {a.storage()}, out, [n](BackwardCtx& ctx) {
      if (double* da = ctx.in_grad(0)) {
        const double* go = ctx.out_grad();
        for (int64_t i = 0; i < n; ++i) da[i] += go[i];
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1) {
  check_2d(a, "slice_rows");
  if (r0 < 0 || r1 > a.dim(0) || r0 >= r1) fail(ErrorKind::dimension, "slice_rows: bad range");
  const int64_t cols = a.dim(1);
  Tape* tape = pick_tape({&a});
  const bool rg = a.requires_grad();
  auto out = make_storage({r1 - r0, cols}, tape, rg);
  std::copy(a.data() + r0 * cols, a.data() + r1 * cols, out->data.begin());
  if (should_record(tape, rg)) {
    tape->record("slice_rows", {a.storage()}, out, [r0, r1, cols](BackwardCtx& ctx) {
      if (double* da = ctx.in_grad(0)) {
        const double* go = ctx.out_grad();
        for (int64_t i = 0; i < (r1 - r0) * cols; ++i) da[r0 * cols + i] += go[i];
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1) {
  check_2d(a, "slice_cols");
  if (c0 < 0 || c1 > a.dim(1) || c0 >= c1) fail(ErrorKind::dimension, "slice_cols: bad range");
  const int64_t rows = a.dim(0), cols = a.dim(1), w = c1 - c0;
  Tape* tape = pick_tape({&a});
  const bool rg = a.requires_grad();
  auto out = make_storage({rows, w}, tape, rg);
  for (int64_t r = 0; r < rows; ++r)
    std::copy(a.data() + r * cols + c0, a.data() + r * cols + c1, out->data.begin() + r * w);
  if (should_record(tape, rg)) {
    tape->record("slice_cols", {a.storage()}, out, [rows, cols, c0, w](BackwardCtx& ctx) {
      if (double* da = ctx.in_grad(0)) {
        const double* go = ctx.out_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < w; ++c) da[r * cols + c0 + c] += go[r * w + c];
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) fail(ErrorKind::contract, "concat_rows: empty input");
  const int64_t cols = parts[0].dim(1);
  int64_t rows = 0;
  std::vector<const Tensor*> ptrs;
  for (const Tensor& t : parts) {
    check_2d(t, "concat_rows");
    if (t.dim(1) != cols) fail(ErrorKind::dimension, "concat_rows: column extents differ");
    rows += t.dim(0);
    ptrs.push_back(&t);
  }
  Tape* tape = nullptr;
  bool rg = false;
  for (const Tensor* t : ptrs) {
    Tape* tt = pick_tape({t});
    if (tt) {
      if (tape && tape != tt) fail(ErrorKind::contract, "concat_rows: mixed tapes");
      tape = tt;
    }
    rg = rg || t->requires_grad();
  }
  auto out = make_storage({rows, cols}, tape, rg);
  std::vector<StoragePtr> ins;
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const Tensor* t : ptrs) {
    std::copy(t->data(), t->data() + t->numel(), out->data.begin() + off);
    ins.push_back(t->storage());
    offsets.push_back(off);
    off += t->numel();
  }
  if (should_record(tape, rg)) {
    tape->record("concat_rows", std::move(ins), out, [offsets](BackwardCtx& ctx) {
      const double* go = ctx.out_grad();
      for (size_t i = 0; i < offsets.size(); ++i) {
        if (double* d = ctx.in_grad(i)) {
          const int64_t n = static_cast<int64_t>(ctx.in(i).data.size());
          for (int64_t j = 0; j < n; ++j) d[j] += go[offsets[i] + j];
        }
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) fail(ErrorKind::contract, "concat_cols: empty input");
  const int64_t rows = parts[0].dim(0);
  int64_t cols = 0;
  for (const Tensor& t : parts) {
    check_2d(t, "concat_cols");
    if (t.dim(0) != rows) fail(ErrorKind::dimension, "concat_cols: row extents differ");
    cols += t.dim(1);
  }
  Tape* tape = nullptr;
  bool rg = false;
  for (const Tensor& t : parts) {
    Tape* tt = pick_tape({&t});
    if (tt) {
      if (tape && tape != tt) fail(ErrorKind::contract, "concat_cols: mixed tapes");
      tape = tt;
    }
    rg = rg || t.requires_grad();
  }
  auto out = make_storage({rows, cols}, tape, rg);
  std::vector<StoragePtr> ins;
  std::vector<int64_t> col_offsets;
  int64_t coff = 0;
  for (const Tensor& t : parts) {
    const int64_t w = t.dim(1);
    for (int64_t r = 0; r < rows; ++r)
      std::copy(t.data() + r * w, t.data() + (r + 1) * w, out->data.begin() + r * cols + coff);
    ins.push_back(t.storage());
    col_offsets.push_back(coff);
    coff += w;
  }
  if (should_record(tape, rg)) {
    tape->record("concat_cols", std::move(ins), out, [rows, cols, col_offsets](BackwardCtx& ctx) {
      const double* go = ctx.out_grad();
      for (size_t i = 0; i < col_offsets.size(); ++i) {
        if (double* d = ctx.in_grad(i)) {
          const int64_t w = ctx.in(i).shape[1];
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < w; ++c) d[r * w + c] += go[r * cols + col_offsets[i] + c];
        }
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor repeat_rows(const Tensor& row, int64_t n) {
  check_2d(row, "repeat_rows");
  if (row.dim(0) != 1) fail(ErrorKind::dimension, "repeat_rows: expected a (1,d) tensor");
  const int64_t d = row.dim(1);
  Tape* tape = pick_tape({&row});
  const bool rg = row.requires_grad();
  auto out = make_storage({n, d}, tape, rg);
  for (int64_t r = 0; r < n; ++r)
    std::copy(row.data(), row.data() + d, out->data.begin() + r * d);
  if (should_record(tape, rg)) {
    tape->record("repeat_rows", {row.storage()}, out, [n, d](BackwardCtx& ctx) {
      if (double* da = ctx.in_grad(0)) {
        const double* go = ctx.out_grad();
        for (int64_t r = 0; r < n; ++r)
          for (int64_t c = 0; c < d; ++c) da[c] += go[r * d + c];
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor detach(const Tensor& a) { return a.detached(); }

// ---------------------------------------------------------------------------
// Grid ops (stride-2 2x2 convolutions, bilinear resize, patching)
// ---------------------------------------------------------------------------

namespace {

void check_grid(const Tensor& x, int64_t h, int64_t w, const char* op) {
  check_2d(x, op);
  if (x.dim(0) != h * w)
    fail(ErrorKind::dimension, std::string(op) + ": token count does not match grid " +
                                   std::to_string(h) + "x" + std::to_string(w));
}

}  // namespace

Tensor conv_down2(const Tensor& x, const Tensor& kernel, const Tensor& bias, int64_t h,
                  int64_t w) {
  check_grid(x, h, w, "conv_down2");
  if (h % 2 != 0 || w % 2 != 0) fail(ErrorKind::dimension, "conv_down2: grid extents must be even");
  const int64_t cin = x.dim(1);
  if (kernel.dim(0) != 4 * cin) fail(ErrorKind::dimension, "conv_down2: kernel rows != 4*c_in");
  const int64_t cout = kernel.dim(1);
  if (bias.numel() != cout) fail(ErrorKind::dimension, "conv_down2: bias extent != c_out");
  const int64_t ho = h / 2, wo = w / 2;

  // Gather each output cell's 2x2 input block into one row, then one GEMM.
  Tensor gathered = Tensor::zeros({ho * wo, 4 * cin});
  {
    const double* px = x.data();
    double* pg = gathered.data();
    for (int64_t i = 0; i < ho; ++i)
      for (int64_t j = 0; j < wo; ++j) {
        double* row = pg + (i * wo + j) * 4 * cin;
        for (int64_t u = 0; u < 2; ++u)
          for (int64_t v = 0; v < 2; ++v) {
            const double* src = px + ((2 * i + u) * w + (2 * j + v)) * cin;
            std::copy(src, src + cin, row + (u * 2 + v) * cin);
          }
      }
  }

  Tape* tape = pick_tape({&x, &kernel, &bias});
  const bool rg = any_requires_grad({&x, &kernel, &bias});
  auto out = make_storage({ho * wo, cout}, tape, rg);
  {
    ConstMatMap G(gathered.data(), ho * wo, 4 * cin);
    ConstMatMap K(kernel.data(), 4 * cin, cout);
    MatMap O(out->data.data(), ho * wo, cout);
    O.noalias() = G * K;
    const double* pb = bias.data();
    for (int64_t r = 0; r < ho * wo; ++r)
      for (int64_t c = 0; c < cout; ++c) out->data[static_cast<size_t>(r * cout + c)] += pb[c];
  }

  if (should_record(tape, rg)) {
    tape->record("conv_down2", {x.storage(), kernel.storage(), bias.storage()}, out,
                 [gathered, h, w, ho, wo, cin, cout](BackwardCtx& ctx) {
                   ConstMatMap dO(ctx.out_grad(), ho * wo, cout);
                   if (double* dk = ctx.in_grad(1)) {
                     ConstMatMap G(gathered.data(), ho * wo, 4 * cin);
                     MatMap dK(dk, 4 * cin, cout);
                     dK.noalias() += G.transpose() * dO;
                   }
                   if (double* db = ctx.in_grad(2)) {
                     for (int64_t r = 0; r < ho * wo; ++r)
                       for (int64_t c = 0; c < cout; ++c) db[c] += dO(r, c);
                   }
                   if (double* dx = ctx.in_grad(0)) {
                     ConstMatMap K(ctx.in(1).data.data(), 4 * cin, cout);
                     Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dG =
                         dO * K.transpose();
                     for (int64_t i = 0; i < ho; ++i)
                       for (int64_t j = 0; j < wo; ++j) {
                         const double* row = dG.data() + (i * wo + j) * 4 * cin;
                         for (int64_t u = 0; u < 2; ++u)
                           for (int64_t v = 0; v < 2; ++v) {
                             double* dst = dx + ((2 * i + u) * w + (2 * j + v)) * cin;
                             const double* src = row + (u * 2 + v) * cin;
                             for (int64_t c = 0; c < cin; ++c) dst[c] += src[c];
                           }
                       }
                   }
                 });
  }
  return Tensor::wrap(out);
}

Tensor conv_up2(const Tensor& x, const Tensor& kernel, const Tensor& bias, int64_t h, int64_t w) {
  check_grid(x, h, w, "conv_up2");
  const int64_t cin = x.dim(1);
  if (kernel.dim(0) != cin) fail(ErrorKind::dimension, "conv_up2: kernel rows != c_in");
  if (kernel.dim(1) % 4 != 0) fail(ErrorKind::dimension, "conv_up2: kernel cols must be 4*c_out");
  const int64_t cout = kernel.dim(1) / 4;
  if (bias.numel() != cout) fail(ErrorKind::dimension, "conv_up2: bias extent != c_out");
  const int64_t ho = 2 * h, wo = 2 * w;

  Tape* tape = pick_tape({&x, &kernel, &bias});
  const bool rg = any_requires_grad({&x, &kernel, &bias});
  auto out = make_storage({ho * wo, cout}, tape, rg);
  {
    // One GEMM produces all four output taps, then scatter to the 2x grid.
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> Y4(h * w, 4 * cout);
    ConstMatMap X(x.data(), h * w, cin);
    ConstMatMap K(kernel.data(), cin, 4 * cout);
    Y4.noalias() = X * K;
    const double* pb = bias.data();
    double* po = out->data.data();
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        const double* row = Y4.data() + (i * w + j) * 4 * cout;
        for (int64_t u = 0; u < 2; ++u)
          for (int64_t v = 0; v < 2; ++v) {
            double* dst = po + ((2 * i + u) * wo + (2 * j + v)) * cout;
            const double* src = row + (u * 2 + v) * cout;
            for (int64_t c = 0; c < cout; ++c) dst[c] = src[c] + pb[c];
          }
      }
  }

  if (should_record(tape, rg)) {
    tape->record("conv_up2", {x.storage(), kernel.storage(), bias.storage()}, out,
                 [h, w, wo, cin, cout](BackwardCtx& ctx) {
                   // Gather output grads back into tap-major rows.
                   Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dY4(
                       h * w, 4 * cout);
                   const double* go = ctx.out_grad();
                   for (int64_t i = 0; i < h; ++i)
                     for (int64_t j = 0; j < w; ++j) {
                       double* row = dY4.data() + (i * w + j) * 4 * cout;
                       for (int64_t u = 0; u < 2; ++u)
                         for (int64_t v = 0; v < 2; ++v) {
                           const double* src = go + ((2 * i + u) * wo + (2 * j + v)) * cout;
                           std::copy(src, src + cout, row + (u * 2 + v) * cout);
                         }
                     }
                   if (double* dx = ctx.in_grad(0)) {
                     ConstMatMap K(ctx.in(1).data.data(), cin, 4 * cout);
                     MatMap dX(dx, h * w, cin);
                     dX.noalias() += dY4 * K.transpose();
                   }
                   if (double* dk = ctx.in_grad(1)) {
                     ConstMatMap X(ctx.in(0).data.data(), h * w, cin);
                     MatMap dK(dk, cin, 4 * cout);
                     dK.noalias() += X.transpose() * dY4;
                   }
                   if (double* db = ctx.in_grad(2)) {
                     const int64_t n = h * w * 4;
                     for (int64_t r = 0; r < n; ++r) {
                       const double* src = dY4.data() + r * cout;
                       for (int64_t c = 0; c < cout; ++c) db[c] += src[c];
                     }
                   }
                 });
  }
  return Tensor::wrap(out);
}

Tensor bilinear_resize(const Tensor& x, int64_t h_in, int64_t w_in, int64_t h_out, int64_t w_out) {
  check_grid(x, h_in, w_in, "bilinear_resize");
  const int64_t c = x.dim(1);

  // Half-pixel sampling with edge clamping; weights depend only on geometry.
  struct Tap {
    int64_t lo, hi;
    double wlo, whi;
  };
  auto taps_for = [](int64_t n_out, int64_t n_in) {
    std::vector<Tap> taps(static_cast<size_t>(n_out));
    const double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
    for (int64_t i = 0; i < n_out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      src = std::min(std::max(src, 0.0), static_cast<double>(n_in - 1));
      const int64_t lo = static_cast<int64_t>(std::floor(src));
      const int64_t hi = std::min(lo + 1, n_in - 1);
      const double f = src - static_cast<double>(lo);
      taps[static_cast<size_t>(i)] = Tap{lo, hi, 1.0 - f, f};
    }
    return taps;
  };
  const auto trow = taps_for(h_out, h_in);
  const auto tcol = taps_for(w_out, w_in);

  Tape* tape = pick_tape({&x});
  const bool rg = x.requires_grad();
  auto out = make_storage({h_out * w_out, c}, tape, rg);
  const double* px = x.data();
  double* po = out->data.data();
  for (int64_t i = 0; i < h_out; ++i) {
    const Tap& tr = trow[static_cast<size_t>(i)];
    for (int64_t j = 0; j < w_out; ++j) {
      const Tap& tc = tcol[static_cast<size_t>(j)];
      const double* p00 = px + (tr.lo * w_in + tc.lo) * c;
      const double* p01 = px + (tr.lo * w_in + tc.hi) * c;
      const double* p10 = px + (tr.hi * w_in + tc.lo) * c;
      const double* p11 = px + (tr.hi * w_in + tc.hi) * c;
      double* dst = po + (i * w_out + j) * c;
      for (int64_t k = 0; k < c; ++k)
        dst[k] = tr.wlo * (tc.wlo * p00[k] + tc.whi * p01[k]) +
                 tr.whi * (tc.wlo * p10[k] + tc.whi * p11[k]);
    }
  }

  if (should_record(tape, rg)) {
    tape->record("bilinear_resize", {x.storage()}, out,
                 [h_out, w_out, w_in, c, trow, tcol](BackwardCtx& ctx) {
                   if (double* dx = ctx.in_grad(0)) {
                     const double* go = ctx.out_grad();
                     for (int64_t i = 0; i < h_out; ++i) {
                       const Tap& tr = trow[static_cast<size_t>(i)];
                       for (int64_t j = 0; j < w_out; ++j) {
                         const Tap& tc = tcol[static_cast<size_t>(j)];
                         const double* g = go + (i * w_out + j) * c;
                         double* d00 = dx + (tr.lo * w_in + tc.lo) * c;
                         double* d01 = dx + (tr.lo * w_in + tc.hi) * c;
                         double* d10 = dx + (tr.hi * w_in + tc.lo) * c;
                         double* d11 = dx + (tr.hi * w_in + tc.hi) * c;
                         for (int64_t k = 0; k < c; ++k) {
                           d00[k] += tr.wlo * tc.wlo * g[k];
                           d01[k] += tr.wlo * tc.whi * g[k];
                           d10[k] += tr.whi * tc.wlo * g[k];
                           d11[k] += tr.whi * tc.whi * g[k];
                         }
                       }
                     }
                   }
                 });
  }
  return Tensor::wrap(out);
}

Tensor extract_patches(const Tensor& img, int64_t patch) {
  check_2d(img, "extract_patches");
  const int64_t h = img.dim(0), w = img.dim(1);
  if (h % patch != 0 || w % patch != 0)
    fail(ErrorKind::dimension, "extract_patches: image not divisible by patch size");
  const int64_t gh = h / patch, gw = w / patch;
  Tape* tape = pick_tape({&img});
  const bool rg = img.requires_grad();
  auto out = make_storage({gh * gw, patch * patch}, tape, rg);
  const double* pi = img.data();
  double* po = out->data.data();
  for (int64_t gi = 0; gi < gh; ++gi)
    for (int64_t gj = 0; gj < gw; ++gj) {
      double* row = po + (gi * gw + gj) * patch * patch;
      for (int64_t u = 0; u < patch; ++u)
        for (int64_t v = 0; v < patch; ++v)
          row[u * patch + v] = pi[(gi * patch + u) * w + gj * patch + v];
    }
  if (should_record(tape, rg)) {
    tape->record("extract_patches", {img.storage()}, out, [gh, gw, w, patch](BackwardCtx& ctx) {
      if (double* dx = ctx.in_grad(0)) {
        const double* go = ctx.out_grad();
        for (int64_t gi = 0; gi < gh; ++gi)
          for (int64_t gj = 0; gj < gw; ++gj) {
            const double* row = go + (gi * gw + gj) * patch * patch;
            for (int64_t u = 0; u < patch; ++u)
              for (int64_t v = 0; v < patch; ++v)
                dx[(gi * patch + u) * w + gj * patch + v] += row[u * patch + v];
          }
      }
    });
  }
  return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Masking / loss helpers
// ---------------------------------------------------------------------------

Tensor add_neg_inf_diag(const Tensor& a) {
  check_2d(a, "add_neg_inf_diag");
  if (a.dim(0) != a.dim(1)) fail(ErrorKind::dimension, "add_neg_inf_diag: matrix must be square");
  const int64_t n = a.dim(0);
  Tape* tape = pick_tape({&a});
  const bool rg = a.requires_grad();
  auto out = make_storage({n, n}, tape, rg);
  out->data = a.storage()->data;
  for (int64_t i = 0; i < n; ++i) out->data[static_cast<size_t>(i * n + i)] = -kInf;
  if (should_record(tape, rg)) {
    tape->record("add_neg_inf_diag", {a.storage()}, out, [n](BackwardCtx& ctx) {
      if (double* da = ctx.in_grad(0)) {
        const double* go = ctx.out_grad();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < n; ++j)
            if (i != j) da[i * n + j] += go[i * n + j];
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor ge_mask(const Tensor& a, double threshold) {
  auto out = make_storage(a.shape(), a.tape(), false);
  const double* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i)
    out->data[static_cast<size_t>(i)] = (pa[i] >= threshold) ? 1.0 : 0.0;
  return Tensor::wrap(out);
}

Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape())
    fail(ErrorKind::dimension, "bce_with_logits_mean: shape mismatch " +
                                   shape_str(logits.shape()) + " vs " +
                                   shape_str(targets.shape()));
  Tape* tape = pick_tape({&logits, &targets});
  const bool rg = logits.requires_grad();
  auto out = make_storage({1}, tape, rg);
  const int64_t n = logits.numel();
  const double* z = logits.data();
  const double* y = targets.data();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i)
    s += std::max(z[i], 0.0) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
  out->data[0] = s / static_cast<double>(n);

  if (should_record(tape, rg)) {
    tape->record("bce_with_logits_mean", {logits.storage(), targets.storage()}, out,
                 [n](BackwardCtx& ctx) {
                   if (double* dz = ctx.in_grad(0)) {
                     const double g = ctx.out_grad()[0] / static_cast<double>(n);
                     const double* z = ctx.in(0).data.data();
                     const double* y = ctx.in(1).data.data();
                     for (int64_t i = 0; i < n; ++i) {
                       double sig;
                       if (z[i] >= 0.0)
                         sig = 1.0 / (1.0 + std::exp(-z[i]));
                       else {
                         const double e = std::exp(z[i]);
                         sig = e / (1.0 + e);
                       }
                       dz[i] += g * (sig - y[i]);
                     }
                   }
                 });
  }
  return Tensor::wrap(out);
}

bool all_finite(const Tensor& a) {
  for (double v : a.values())
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

FiniteDiffEntry finite_diff_coordinate(const std::function<double()>& forward, Tensor& param,
                                       int64_t index, double analytic, double h) {
  if (h <= 0.0) fail(ErrorKind::contract, "finite_diff_coordinate: h must be positive");
  double* p = param.data() + index;
  const double saved = *p;
  *p = saved + h;
  const double f_plus = forward();
  *p = saved - h;
  const double f_minus = forward();
  *p = saved;
  if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
    fail(ErrorKind::probe, "finite_diff_coordinate: non-finite loss at perturbed point");
  FiniteDiffEntry e;
  e.index = index;
  e.analytic = analytic;
  e.numeric = (f_plus - f_minus) / (2.0 * h);
  e.rel_error = rel_error(e.analytic, e.numeric);
  return e;
}

}  // namespace spt
