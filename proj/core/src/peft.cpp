#include "spt/peft.hpp"

#include <cmath>

#include "spt/sdt.hpp"

namespace spt {

void PeftConfig::validate() const {
  if (rank < 1) fail(ErrorKind::config, "peft: rank must be >= 1");
  if (target_layer_kinds.empty() && kind != nn::PeftKind::adapter)
    fail(ErrorKind::config, "peft: target_layer_kinds must not be empty");
}

Tensor column_norms(const Tensor& w) {
  Tensor sq = sum_axis(mul(w, w), 0);  // (1,k)
  return sqrt_elem(sq);
}

Tensor forward_lora(const Tensor& x, const Tensor& w0, const Tensor& bias, const Tensor& lora_b,
                    const Tensor& lora_a, double scaling) {
  Tensor base = add(matmul(x, w0, false, true), bias);
  // B(Ax) without materialising BA: (n,in)A^T -> (n,r), then (n,r)B^T -> (n,out).
  Tensor delta = matmul(matmul(x, lora_a, false, true), lora_b, false, true);
  return add(base, mul_scalar(delta, scaling));
}

Tensor forward_dora(const Tensor& x, const Tensor& w0, const Tensor& bias, const Tensor& dora_m,
                    const Tensor& lora_b, const Tensor& lora_a) {
  Tensor direction = add(w0, matmul(lora_b, lora_a));  // (out,in)
  Tensor norms_sq = sum_axis(mul(direction, direction), 0);
  for (double v : norms_sq.values())
    if (v == 0.0) fail(ErrorKind::degenerate, "forward_dora: zero column norm in V + BA");
  Tensor norms = sqrt_elem(norms_sq);                    // (1,in)
  Tensor scaled = mul(direction, divide(dora_m, norms)); // column-wise m / ||.||_c
  return add(matmul(x, scaled, false, true), bias);
}

Tensor forward_adapter(const Tensor& x, const Tensor& w_down, const Tensor& w_up) {
  return add(x, matmul(relu(matmul(x, w_down)), w_up));
}

Tensor merge(const nn::Linear& linear) {
  if (!linear.peft) fail(ErrorKind::unsupported, "merge: no attachment on this linear map");
  switch (linear.peft->kind) {
    case nn::PeftKind::lora: {
      Tensor delta = matmul(linear.peft->lora_b, linear.peft->lora_a);
      return add(linear.w, mul_scalar(delta, linear.peft->scaling)).detached();
    }
    case nn::PeftKind::dora: {
      Tensor direction = add(linear.w, matmul(linear.peft->lora_b, linear.peft->lora_a));
      Tensor norms_sq = sum_axis(mul(direction, direction), 0);
      for (double v : norms_sq.values())
        if (v == 0.0) fail(ErrorKind::degenerate, "merge: zero column norm in V + BA");
      Tensor norms = sqrt_elem(norms_sq);
      return mul(direction, divide(linear.peft->dora_m, norms)).detached();
    }
    case nn::PeftKind::adapter:
      fail(ErrorKind::unsupported, "merge: adapter attachments cannot be merged");
  }
  fail(ErrorKind::contract, "merge: invalid attachment kind");
}

namespace {

struct TargetWalker {
  SptModel& model;

  template <typename Fn>
  void for_each_linear(PeftTarget target, Fn&& fn) {
    auto visit_attention = [&](nn::Attention& a) {
      fn(a.q);
      fn(a.k);
      fn(a.v);
      fn(a.out);
    };
    auto visit_mlp = [&](nn::Mlp& m) {
      fn(m.fc1);
      fn(m.fc2);
    };
    switch (target) {
      case PeftTarget::image_encoder:
        for (EncoderBlock& block : model.image_encoder.blocks) {
          visit_attention(block.attn);
          visit_mlp(block.mlp);
        }
        fn(model.image_encoder.patch_embed);
        break;
      case PeftTarget::prompt_encoder:
        // The prompt encoder has no attention projections; its conv kernels
        // are raw tensors, so there is nothing to attach at the default
        // layer kinds.
        break;
      case PeftTarget::draft_decoder:
      case PeftTarget::refine_decoder: {
        MaskDecoder& dec = (target == PeftTarget::draft_decoder) ? model.draft_dec()
                                                                 : model.refine_decoder;
        for (TwoWayBlock* block : {&dec.tw1, &dec.tw2}) {
          visit_attention(block->self_attn);
          visit_attention(block->cross_token_to_image);
          visit_mlp(block->mlp);
          visit_attention(block->cross_image_to_token);
        }
        visit_attention(dec.final_attn);
        fn(dec.mask_mlp.l1);
        fn(dec.mask_mlp.l2);
        fn(dec.mask_mlp.l3);
        fn(dec.iou_head.l1);
        fn(dec.iou_head.l2);
        fn(dec.iou_head.l3);
        break;
      }
    }
  }

  template <typename Fn>
  void for_each_block(PeftTarget target, Fn&& fn) {
    switch (target) {
      case PeftTarget::image_encoder:
        for (EncoderBlock& block : model.image_encoder.blocks)
          fn(block.adapter, model.cfg.encoder_dim);
        break;
      case PeftTarget::prompt_encoder:
        break;
      case PeftTarget::draft_decoder:
      case PeftTarget::refine_decoder: {
        MaskDecoder& dec = (target == PeftTarget::draft_decoder) ? model.draft_dec()
                                                                 : model.refine_decoder;
        fn(dec.tw1.adapter, model.cfg.decoder_dim);
        fn(dec.tw2.adapter, model.cfg.decoder_dim);
        break;
      }
    }
  }
};

}  // namespace

void attach(SptModel& model, const PeftConfig& config) {
  config.validate();
  Tape* tape = model.tape.get();
  // Attachment init draws from a stream independent of the model seed so a
  // freshly attached model still matches its base bit-for-bit (B or W_up are
  // zero regardless).
  Rng rng(mix_seed({model.cfg.seed, 0x9e77ull}));

  TargetWalker walker{model};
  for (PeftTarget target : config.targets) {
    if (model.sdt.share_decoder && target == PeftTarget::draft_decoder) continue;  // same decoder

    if (config.kind == nn::PeftKind::adapter) {
      walker.for_each_block(target, [&](std::optional<nn::Adapter>& slot, int64_t d) {
        if (slot) return;  // idempotent per target
        if (config.rank >= d)
          fail(ErrorKind::config, "peft: rank must be < block dim for adapters");
        nn::Adapter a;
        a.init(d, config.rank, rng, tape);
        a.down.set_requires_grad(true);
        a.up.set_requires_grad(true);
        slot = a;
      });
      continue;
    }

    walker.for_each_linear(target, [&](nn::Linear& linear) {
      if (!config.target_layer_kinds.contains(linear.kind)) return;
      if (linear.peft) return;  // idempotent per target
      const int64_t out = linear.out_features();
      const int64_t in = linear.in_features();
      if (config.rank >= std::min(out, in))
        fail(ErrorKind::config, "peft: rank must be < min(d,k) of every targeted matrix");
      nn::PeftAttachment att;
      att.kind = config.kind;
      att.scaling = config.scaling;
      att.lora_b = Tensor::zeros({out, config.rank});  // zero so delta W = BA = 0
      att.lora_b.set_tape(tape);
      att.lora_b.set_requires_grad(true);
      att.lora_a = Tensor::zeros({config.rank, in});
      nn::normal_init(att.lora_a, 0.02, rng);
      att.lora_a.set_tape(tape);
      att.lora_a.set_requires_grad(true);
      if (config.kind == nn::PeftKind::dora) {
        att.dora_m = column_norms(linear.w).detached();
        att.dora_m.set_tape(tape);
        att.dora_m.set_requires_grad(true);
      }
      linear.peft = std::move(att);
    });
  }
  model.applied_peft = config;
}

ParamCounts count_parameters(const SptModel& model) {
  ParamCounts counts;
  nn::ParamList params = const_cast<SptModel&>(model).params();
  for (const nn::NamedTensor& nt : params) {
    if (nt.buffer) continue;
    counts.total += nt.tensor->numel();
    if (nt.tensor->requires_grad()) counts.trainable += nt.tensor->numel();
  }
  counts.ratio_percent =
      trainable_ratio_percent(static_cast<double>(counts.total), static_cast<double>(counts.trainable));
  return counts;
}

double trainable_ratio_percent(double total, double trainable) {
  if (total <= 0.0) return 0.0;
  return 100.0 * trainable / total;
}

std::string to_string(PeftTarget target) {
  switch (target) {
    case PeftTarget::image_encoder: return "image_encoder";
    case PeftTarget::prompt_encoder: return "prompt_encoder";
    case PeftTarget::draft_decoder: return "draft_decoder";
    case PeftTarget::refine_decoder: return "refine_decoder";
  }
  return "";
}

std::string to_string(nn::PeftKind kind) {
  switch (kind) {
    case nn::PeftKind::lora: return "lora";
    case nn::PeftKind::dora: return "dora";
    case nn::PeftKind::adapter: return "adapter";
  }
  return "";
}

std::string to_string(nn::LinearKind kind) {
  switch (kind) {
    case nn::LinearKind::query: return "query";
    case nn::LinearKind::key: return "key";
    case nn::LinearKind::value: return "value";
    case nn::LinearKind::output: return "output";
    case nn::LinearKind::mlp: return "mlp";
    case nn::LinearKind::embed: return "embed";
    case nn::LinearKind::conv: return "conv";
    case nn::LinearKind::head: return "head";
  }
  return "";
}

}  // namespace spt
