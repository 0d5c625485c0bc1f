#pragma once

#include <cstdint>
#include <set>
#include <string>

#include "spt/nn.hpp"
#include "spt/tensor.hpp"

namespace spt {

struct SptModel;

enum class PeftTarget { image_encoder, prompt_encoder, draft_decoder, refine_decoder };

struct PeftConfig {
  nn::PeftKind kind = nn::PeftKind::lora;
  int64_t rank = 8;
  double scaling = 1.0;
  std::set<PeftTarget> targets = {PeftTarget::image_encoder, PeftTarget::prompt_encoder,
                                  PeftTarget::draft_decoder, PeftTarget::refine_decoder};
  std::set<nn::LinearKind> target_layer_kinds = {nn::LinearKind::query, nn::LinearKind::key,
                                                 nn::LinearKind::value, nn::LinearKind::output};

  void validate() const;
};

// Attach trainable PEFT state to the targeted parts of the model. Base
// parameters stay frozen; re-attachment to an already-attached target is a
// no-op. With an empty target set the model is left untouched.
void attach(SptModel& model, const PeftConfig& config);

// y = W0 x + scaling * B (A x), row-vector convention: (n,in) -> (n,out).
Tensor forward_lora(const Tensor& x, const Tensor& w0, const Tensor& bias, const Tensor& lora_b,
                    const Tensor& lora_a, double scaling);
// y = (m (.)col (W0 + BA) / ||W0 + BA||_c) x; magnitudes m and B, A train,
// the direction W0 stays frozen. Zero column norms are rejected.
Tensor forward_dora(const Tensor& x, const Tensor& w0, const Tensor& bias, const Tensor& dora_m,
                    const Tensor& lora_b, const Tensor& lora_a);
// o = x + relu(x W_down) W_up.
Tensor forward_adapter(const Tensor& x, const Tensor& w_down, const Tensor& w_up);

// Explicit merged weight matrix whose plain forward reproduces the attachment
// forward (LoRA and DoRA only; Adapter has no equivalent single matrix).
Tensor merge(const nn::Linear& linear);

struct ParamCounts {
  int64_t total = 0;
  int64_t trainable = 0;
  double ratio_percent = 0.0;
};

ParamCounts count_parameters(const SptModel& model);
double trainable_ratio_percent(double total, double trainable);

// Per-column Euclidean norms of a (d,k) matrix, returned as (1,k).
Tensor column_norms(const Tensor& w);

std::string to_string(PeftTarget target);
std::string to_string(nn::PeftKind kind);
std::string to_string(nn::LinearKind kind);

}  // namespace spt
