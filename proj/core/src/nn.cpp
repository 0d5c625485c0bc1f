#include "spt/nn.hpp"

#include <cmath>

#include "spt/peft.hpp"

namespace spt::nn {

void xavier_uniform(Tensor& t, int64_t fan_in, int64_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  double* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = rng.uniform(-limit, limit);
}

void normal_init(Tensor& t, double stddev, Rng& rng) {
  double* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = rng.normal(0.0, stddev);
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

void Linear::init(int64_t in, int64_t out, LinearKind k, Rng& rng, Tape* tape) {
  kind = k;
  w = Tensor::zeros({out, in});
  xavier_uniform(w, in, out, rng);
  w.set_tape(tape);
  b = Tensor::zeros({1, out});
  b.set_tape(tape);
}

Tensor Linear::forward(const Tensor& x) const {
  if (!peft) return add(matmul(x, w, false, true), b);
  switch (peft->kind) {
    case PeftKind::lora:
      return forward_lora(x, w, b, peft->lora_b, peft->lora_a, peft->scaling);
    case PeftKind::dora:
      return forward_dora(x, w, b, peft->dora_m, peft->lora_b, peft->lora_a);
    case PeftKind::adapter:
      break;  // adapters live on blocks, never on a Linear
  }
  fail(ErrorKind::contract, "Linear::forward: invalid attachment kind");
}

void Linear::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", &w, false});
  out.push_back({prefix + ".bias", &b, false});
  if (peft) {
    switch (peft->kind) {
      case PeftKind::lora:
        out.push_back({prefix + ".lora.B", &peft->lora_b, false});
        out.push_back({prefix + ".lora.A", &peft->lora_a, false});
        break;
      case PeftKind::dora:
        out.push_back({prefix + ".dora.m", &peft->dora_m, false});
        out.push_back({prefix + ".dora.B", &peft->lora_b, false});
        out.push_back({prefix + ".dora.A", &peft->lora_a, false});
        break;
      case PeftKind::adapter:
        break;
    }
  }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

void LayerNorm::init(int64_t d, Tape* tape) {
  gamma = Tensor::full({1, d}, 1.0);
  gamma.set_tape(tape);
  beta = Tensor::zeros({1, d});
  beta.set_tape(tape);
}

Tensor LayerNorm::forward(const Tensor& x) const { return layernorm(x, gamma, beta, eps); }

void LayerNorm::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".gamma", &gamma, false});
  out.push_back({prefix + ".beta", &beta, false});
}

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

void Mlp::init(int64_t d, int64_t hidden, bool use_gelu, Rng& rng, Tape* tape) {
  gelu_act = use_gelu;
  fc1.init(d, hidden, LinearKind::mlp, rng, tape);
  fc2.init(hidden, d, LinearKind::mlp, rng, tape);
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = fc1.forward(x);
  h = gelu_act ? gelu(h) : relu(h);
  return fc2.forward(h);
}

void Mlp::collect(const std::string& prefix, ParamList& out) {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

// ---------------------------------------------------------------------------
// Adapter
// ---------------------------------------------------------------------------

void Adapter::init(int64_t d, int64_t r, Rng& rng, Tape* tape) {
  down = Tensor::zeros({d, r});
  normal_init(down, 0.02, rng);
  down.set_tape(tape);
  up = Tensor::zeros({r, d});  // zero so the residual branch starts inert
  up.set_tape(tape);
}

Tensor Adapter::forward(const Tensor& x) const { return forward_adapter(x, down, up); }

void Adapter::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".down", &down, false});
  out.push_back({prefix + ".up", &up, false});
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

void Attention::init(int64_t d, int64_t n_heads, Rng& rng, Tape* tape) {
  if (d % n_heads != 0) fail(ErrorKind::config, "attention: dim not divisible by heads");
  heads = n_heads;
  q.init(d, d, LinearKind::query, rng, tape);
  k.init(d, d, LinearKind::key, rng, tape);
  v.init(d, d, LinearKind::value, rng, tape);
  out.init(d, d, LinearKind::output, rng, tape);
}

Tensor Attention::forward(const Tensor& queries, const Tensor& keys, const Tensor& values) const {
  const int64_t d = q.out_features();
  const int64_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor Q = q.forward(queries);
  Tensor K = k.forward(keys);
  Tensor V = v.forward(values);

  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (int64_t h = 0; h < heads; ++h) {
    Tensor Qh = slice_cols(Q, h * dh, (h + 1) * dh);
    Tensor Kh = slice_cols(K, h * dh, (h + 1) * dh);
    Tensor Vh = slice_cols(V, h * dh, (h + 1) * dh);
    Tensor scores = mul_scalar(matmul(Qh, Kh, false, true), scale);
    Tensor attn = softmax(scores, 1);
    head_outs.push_back(matmul(attn, Vh));
  }
  Tensor merged = concat_cols(head_outs);
  return out.forward(merged);
}

void Attention::collect(const std::string& prefix, ParamList& out_list) {
  q.collect(prefix + ".q", out_list);
  k.collect(prefix + ".k", out_list);
  v.collect(prefix + ".v", out_list);
  out.collect(prefix + ".out", out_list);
}

// ---------------------------------------------------------------------------

void reseat_params(const ParamList& params, Tape* tape) {
  for (const NamedTensor& nt : params) {
    *nt.tensor = nt.tensor->clone();
    nt.tensor->set_tape(tape);
  }
}

}  // namespace spt::nn
