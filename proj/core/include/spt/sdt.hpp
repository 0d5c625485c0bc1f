#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "spt/data.hpp"
#include "spt/metrics.hpp"
#include "spt/peft.hpp"
#include "spt/sam.hpp"
#include "spt/vra.hpp"

namespace spt {

struct SdtConfig {
  bool enabled = true;
  bool share_decoder = false;  // one decoder applied twice with shared PEFT state
  bool detach_draft = false;   // stop gradients from the refine loss into the draft

  void validate() const {}
};

enum class PromptModePolicy { mixed, one_box, region_box, points5, points10 };

struct TrainConfig {
  int64_t epochs = 16;
  double lr = 1e-3;
  int64_t lr_drop_epoch = 10;  // epochs after this one use lr * lr_drop_factor
  double lr_drop_factor = 0.1;
  int64_t batch_size = 8;
  uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  PromptModePolicy prompt_mode = PromptModePolicy::mixed;
  int64_t min_area = 8;  // region filter used when deriving training prompts

  void validate() const;
};

// The full draft-then-refine model. The draft decoder is constructed as an
// exact copy of the refine decoder; with share_decoder one instance serves
// both passes. All base parameters are frozen at construction; trainable
// state enters through PEFT attachments and VRA scale vectors.
struct SptModel {
  ModelConfig cfg;
  VraConfig vra;
  SdtConfig sdt;
  std::unique_ptr<Tape> tape;
  ImageEncoder image_encoder;
  PromptEncoder prompt_encoder;
  MaskDecoder refine_decoder;
  std::optional<MaskDecoder> draft_decoder;  // absent when share_decoder
  std::optional<PeftConfig> applied_peft;

  static SptModel build(const ModelConfig& cfg, const VraConfig& vra, const SdtConfig& sdt);

  MaskDecoder& draft_dec() { return sdt.share_decoder ? refine_decoder : *draft_decoder; }
  const MaskDecoder& draft_dec() const {
    return sdt.share_decoder ? refine_decoder : *draft_decoder;
  }

  nn::ParamList params();  // deterministic order; includes buffers
};

// Deep copy: rebuild with identical configs/attachments, then copy all values.
SptModel clone_model(const SptModel& m);

struct SptForward {
  Tensor draft_logits;   // (image_size^2, 1); equals refine when SDT is off
  Tensor refine_logits;  // (image_size^2, 1)
  Tensor draft_iou;
  Tensor refine_iou;
};

struct ForwardOptions {
  // Test hook: run the refine pass on the no-mask dense embedding instead of
  // the encoded draft (degenerate-SDT identity).
  bool force_no_mask_refine = false;
};

SptForward spt_forward(SptModel& model, const std::vector<double>& image, const PromptSet& prompts,
                       const ForwardOptions& options = {});

// L_CE + L_dice over the draft mask plus the same two terms over the refined
// mask (unweighted sum). The IoU prediction head receives no loss.
Tensor compute_loss(const Tensor& draft_logits, const Tensor& refine_logits,
                    const std::vector<uint8_t>& gt);
// Single-path variant used when SDT is disabled.
Tensor compute_loss_single(const Tensor& logits, const std::vector<uint8_t>& gt);
// 1 - (2*sum(p*y)+eps) / (sum(p)+sum(y)+eps) with eps = 1.
Tensor dice_loss(const Tensor& logits, const Tensor& targets);

// Threshold rule: logit >= 0 (sigma >= 0.5, ties count as anomaly).
std::vector<uint8_t> binarize_logits(const Tensor& logits);

struct Prediction {
  std::vector<uint8_t> draft_mask;
  std::vector<uint8_t> refine_mask;
  double iou_pred = 0.0;
};

Prediction predict(SptModel& model, const std::vector<double>& image, const PromptSet& prompts);

struct EpochLog {
  int64_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double draft_miou = 0.0;
  double refine_miou = 0.0;
  int64_t wall_ms = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
};

// Adam on the trainable parameters only. Per-epoch held-out one-box mIoU for
// the draft and refine outputs is logged. Throws diverged (with the model
// restored to the last finite epoch) if the loss stops being finite.
TrainResult train(SptModel& model, const std::vector<SyntheticSample>& train_samples,
                  const std::vector<SyntheticSample>& eval_samples, const TrainConfig& config);

// Prompt-mode mixture used during training: per image and epoch a mode is
// drawn; region modes pick one surviving region and pair it with that
// region's mask as the ground truth.
struct TrainInstance {
  PromptSet prompt;
  std::vector<uint8_t> gt;
};
TrainInstance make_train_instance(const SyntheticSample& sample, PromptModePolicy policy,
                                  int64_t min_area, Rng& rng);

std::string to_string(PromptModePolicy policy);
PromptModePolicy prompt_mode_from_string(const std::string& s);

// ---------------------------------------------------------------------------
// Gradient checking across the trainable surface.
// ---------------------------------------------------------------------------

struct GradCheckOptions {
  int64_t samples = 64;   // coordinates to probe, spread across parameter groups
  double h = 1e-5;
  double tol_rel = 1e-3;
  uint64_t seed = 0;
  int64_t batch = 2;      // images in the probe batch
};

FiniteDiffReport grad_check(SptModel& model, const std::vector<SyntheticSample>& samples,
                            const GradCheckOptions& options);

}  // namespace spt
