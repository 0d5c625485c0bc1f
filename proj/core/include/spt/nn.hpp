#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "spt/rng.hpp"
#include "spt/tensor.hpp"

namespace spt::nn {

struct NamedTensor {
  std::string name;
  Tensor* tensor;
  bool buffer;  // buffers are serialized but never counted as parameters
};
using ParamList = std::vector<NamedTensor>;

enum class LinearKind { query, key, value, output, mlp, embed, conv, head };
enum class PeftKind { lora, dora, adapter };

// Low-rank state attachable to one linear map. For LoRA: y = W0 x + s*B(Ax)
// with B zero at init. For DoRA the frozen W0 acts as the direction V and m
// holds per-column magnitudes, initialised to the column norms of W0.
struct PeftAttachment {
  PeftKind kind = PeftKind::lora;
  Tensor lora_b;  // (out, r)
  Tensor lora_a;  // (r, in)
  Tensor dora_m;  // (1, in), dora only
  double scaling = 1.0;
};

void xavier_uniform(Tensor& t, int64_t fan_in, int64_t fan_out, Rng& rng);
void normal_init(Tensor& t, double stddev, Rng& rng);

struct Linear {
  Tensor w;  // (out, in)
  Tensor b;  // (1, out)
  LinearKind kind = LinearKind::mlp;
  std::optional<PeftAttachment> peft;

  void init(int64_t in, int64_t out, LinearKind k, Rng& rng, Tape* tape);
  int64_t in_features() const { return w.dim(1); }
  int64_t out_features() const { return w.dim(0); }
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out);
};

struct LayerNorm {
  Tensor gamma, beta;
  double eps = 1e-5;

  void init(int64_t d, Tape* tape);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out);
};

struct Mlp {
  Linear fc1, fc2;
  bool gelu_act = true;

  void init(int64_t d, int64_t hidden, bool use_gelu, Rng& rng, Tape* tape);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out);
};

// Residual bottleneck inserted after a block's MLP sublayer:
// o = x + relu(x W_down) W_up, with W_up zero at init.
struct Adapter {
  Tensor down;  // (d, r)
  Tensor up;    // (r, d)

  void init(int64_t d, int64_t r, Rng& rng, Tape* tape);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out);
};

struct Attention {
  Linear q, k, v, out;
  int64_t heads = 1;

  void init(int64_t d, int64_t n_heads, Rng& rng, Tape* tape);
  Tensor forward(const Tensor& queries, const Tensor& keys, const Tensor& values) const;
  void collect(const std::string& prefix, ParamList& out);
};

// Replace every tensor handle in `params` with an independent deep copy bound
// to `tape`. Used to materialise decoder copies and frozen evaluation clones.
void reseat_params(const ParamList& params, Tape* tape);

}  // namespace spt::nn
