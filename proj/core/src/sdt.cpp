#include "spt/sdt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace spt {

void TrainConfig::validate() const {
  if (epochs < 0) fail(ErrorKind::config, "train: epochs must be >= 0");
  if (lr <= 0.0) fail(ErrorKind::config, "train: lr must be positive");
  if (lr_drop_epoch > epochs)
    fail(ErrorKind::config, "train: lr_drop_epoch must be <= epochs");
  if (lr_drop_factor <= 0.0) fail(ErrorKind::config, "train: lr_drop_factor must be positive");
  if (batch_size < 1) fail(ErrorKind::config, "train: batch_size must be >= 1");
  if (min_area < 1) fail(ErrorKind::config, "train: min_area must be >= 1");
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

SptModel SptModel::build(const ModelConfig& cfg, const VraConfig& vra, const SdtConfig& sdt) {
  cfg.validate();
  vra.validate();
  sdt.validate();

  SptModel m;
  m.cfg = cfg;
  m.vra = vra;
  m.sdt = sdt;
  m.tape = std::make_unique<Tape>();
  Tape* tape = m.tape.get();

  Rng rng(cfg.seed);
  m.image_encoder.init(cfg, rng, tape);
  m.prompt_encoder.init(cfg, rng, tape);
  m.refine_decoder.init(cfg, rng, tape);
  if (!sdt.share_decoder) {
    // The draft decoder starts as an exact copy of the refine decoder.
    m.draft_decoder = m.refine_decoder;
    nn::ParamList copies;
    m.draft_decoder->collect("draft_decoder", copies);
    nn::reseat_params(copies, tape);
  }

  // The base model is frozen; training capacity enters via PEFT attachments
  // and VRA scale vectors.
  nn::ParamList all = m.params();
  for (const nn::NamedTensor& nt : all) nt.tensor->set_requires_grad(false);

  configure_placement(m, vra.placement);
  return m;
}

nn::ParamList SptModel::params() {
  nn::ParamList out;
  image_encoder.collect("image_encoder", out);
  prompt_encoder.collect("prompt_encoder", out);
  if (draft_decoder) draft_decoder->collect("draft_decoder", out);
  refine_decoder.collect("refine_decoder", out);
  return out;
}

SptModel clone_model(const SptModel& m) {
  SptModel copy = SptModel::build(m.cfg, m.vra, m.sdt);
  if (m.applied_peft) attach(copy, *m.applied_peft);
  nn::ParamList src = const_cast<SptModel&>(m).params();
  nn::ParamList dst = copy.params();
  if (src.size() != dst.size()) fail(ErrorKind::contract, "clone_model: parameter set mismatch");
  for (size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != dst[i].name)
      fail(ErrorKind::contract, "clone_model: parameter order mismatch at " + src[i].name);
    dst[i].tensor->storage()->data = src[i].tensor->storage()->data;
    dst[i].tensor->set_requires_grad(src[i].tensor->requires_grad());
  }
  return copy;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

SptForward spt_forward(SptModel& model, const std::vector<double>& image, const PromptSet& prompts,
                       const ForwardOptions& options) {
  const ModelConfig& cfg = model.cfg;
  if (static_cast<int64_t>(image.size()) != cfg.image_size * cfg.image_size)
    fail(ErrorKind::dimension, "forward: image does not match the configured size");

  Tensor img = Tensor::from({cfg.image_size, cfg.image_size}, image);
  Tensor e_img = model.image_encoder.forward(img, cfg);
  auto [e_sparse, e_dense, e_pos] = model.prompt_encoder.forward(prompts, cfg);

  // Relation matrix: once per image from the display-phase tokens, shared by
  // both decoder passes.
  std::optional<RelationMatrix> rel;
  const bool vra_active = model.vra.placement != VraPlacement::none;
  if (vra_active) rel = compute_relation(e_img, model.vra.alpha);
  const RelationMatrix* relp = rel ? &*rel : nullptr;

  EmbeddingBundle bundle{e_img, e_sparse, e_dense, e_pos};

  if (!model.sdt.enabled) {
    DecodeResult r = model.refine_decoder.decode(bundle, cfg, relp, model.vra.use_raw_relation);
    return {r.logits, r.logits, r.iou_pred, r.iou_pred};
  }

  DecodeResult draft = model.draft_dec().decode(bundle, cfg, relp, model.vra.use_raw_relation);

  Tensor draft_logits_for_encode =
      model.sdt.detach_draft ? detach(draft.logits).set_tape(model.tape.get()) : draft.logits;
  Tensor e_draft = model.prompt_encoder.encode_mask(sigmoid(draft_logits_for_encode), cfg);

  EmbeddingBundle refine_bundle{
      e_img, e_sparse,
      options.force_no_mask_refine ? model.prompt_encoder.no_mask_dense(cfg) : e_draft, e_pos};
  DecodeResult refine =
      model.refine_decoder.decode(refine_bundle, cfg, relp, model.vra.use_raw_relation);

  return {draft.logits, refine.logits, draft.iou_pred, refine.iou_pred};
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace {

Tensor targets_tensor(const std::vector<uint8_t>& gt, Tape* tape) {
  std::vector<double> vals(gt.size());
  for (size_t i = 0; i < gt.size(); ++i) vals[i] = gt[i] ? 1.0 : 0.0;
  Tensor t = Tensor::from({static_cast<int64_t>(gt.size()), 1}, std::move(vals));
  t.set_tape(tape);
  return t;
}

}  // namespace

Tensor dice_loss(const Tensor& logits, const Tensor& targets) {
  constexpr double kSmooth = 1.0;
  Tensor p = sigmoid(logits);
  Tensor intersection = sum_all(mul(p, targets));
  Tensor denom = add_scalar(add(sum_all(p), sum_all(targets)), kSmooth);
  Tensor numer = add_scalar(mul_scalar(intersection, 2.0), kSmooth);
  return add_scalar(mul_scalar(divide(numer, denom), -1.0), 1.0);
}

Tensor compute_loss(const Tensor& draft_logits, const Tensor& refine_logits,
                    const std::vector<uint8_t>& gt) {
  if (draft_logits.shape() != refine_logits.shape())
    fail(ErrorKind::dimension, "compute_loss: draft/refine shape mismatch");
  if (draft_logits.numel() != static_cast<int64_t>(gt.size()))
    fail(ErrorKind::dimension, "compute_loss: ground truth size mismatch");
  Tensor y = targets_tensor(gt, draft_logits.tape());
  Tensor total = add(bce_with_logits_mean(draft_logits, y), dice_loss(draft_logits, y));
  total = add(total, bce_with_logits_mean(refine_logits, y));
  return add(total, dice_loss(refine_logits, y));
}

Tensor compute_loss_single(const Tensor& logits, const std::vector<uint8_t>& gt) {
  if (logits.numel() != static_cast<int64_t>(gt.size()))
    fail(ErrorKind::dimension, "compute_loss: ground truth size mismatch");
  Tensor y = targets_tensor(gt, logits.tape());
  return add(bce_with_logits_mean(logits, y), dice_loss(logits, y));
}

std::vector<uint8_t> binarize_logits(const Tensor& logits) {
  std::vector<uint8_t> mask(static_cast<size_t>(logits.numel()));
  const double* p = logits.data();
  for (int64_t i = 0; i < logits.numel(); ++i) mask[static_cast<size_t>(i)] = p[i] >= 0.0 ? 1 : 0;
  return mask;
}

Prediction predict(SptModel& model, const std::vector<double>& image, const PromptSet& prompts) {
  Tape::NoGrad guard(*model.tape);
  SptForward out = spt_forward(model, image, prompts);
  Prediction pred;
  pred.draft_mask = binarize_logits(out.draft_logits);
  pred.refine_mask = binarize_logits(out.refine_logits);
  pred.iou_pred = out.refine_iou.item();
  return pred;
}

// ---------------------------------------------------------------------------
// Training instances
// ---------------------------------------------------------------------------

std::string to_string(PromptModePolicy policy) {
  switch (policy) {
    case PromptModePolicy::mixed: return "mixed";
    case PromptModePolicy::one_box: return "one_box";
    case PromptModePolicy::region_box: return "region_box";
    case PromptModePolicy::points5: return "points5";
    case PromptModePolicy::points10: return "points10";
  }
  return "mixed";
}

PromptModePolicy prompt_mode_from_string(const std::string& s) {
  if (s == "mixed") return PromptModePolicy::mixed;
  if (s == "one_box") return PromptModePolicy::one_box;
  if (s == "region_box") return PromptModePolicy::region_box;
  if (s == "points5") return PromptModePolicy::points5;
  if (s == "points10") return PromptModePolicy::points10;
  fail(ErrorKind::config, "train: unknown prompt mode '" + s + "'");
}

TrainInstance make_train_instance(const SyntheticSample& sample, PromptModePolicy policy,
                                  int64_t min_area, Rng& rng) {
  const int64_t s = sample.size;
  std::vector<DefectRegion> regions = connected_components(sample.mask, s, s);
  std::vector<DefectRegion> kept = filter_small_regions(regions, min_area);
  if (kept.empty()) kept = std::move(regions);  // tiny-defect fallback
  if (kept.empty()) fail(ErrorKind::no_defect, "train: sample has an empty ground-truth mask");

  PromptModePolicy mode = policy;
  if (policy == PromptModePolicy::mixed) {
    switch (rng.uniform_int(0, 3)) {
      case 0: mode = PromptModePolicy::one_box; break;
      case 1: mode = PromptModePolicy::region_box; break;
      case 2: mode = PromptModePolicy::points5; break;
      default: mode = PromptModePolicy::points10; break;
    }
  }

  TrainInstance inst;
  if (mode == PromptModePolicy::one_box) {
    inst.prompt.boxes.push_back(derive_one_box(kept));
    inst.gt = sample.mask;
    return inst;
  }

  const DefectRegion& region =
      kept[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(kept.size()) - 1))];
  inst.gt = region_mask(region, s, s);
  if (mode == PromptModePolicy::region_box) {
    inst.prompt.boxes.push_back(PromptSet::Box{static_cast<double>(region.x0),
                                               static_cast<double>(region.y0),
                                               static_cast<double>(region.x1),
                                               static_cast<double>(region.y1)});
  } else {
    const int64_t k = (mode == PromptModePolicy::points5) ? 5 : 10;
    inst.prompt.points = sample_points(inst.gt, s, s, k, rng.next_u64());
  }
  return inst;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

namespace {

class Adam {
 public:
  Adam(std::vector<Tensor> params, const TrainConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    state_m_.resize(params_.size());
    state_v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      state_m_[i].assign(static_cast<size_t>(params_[i].numel()), 0.0);
      state_v_[i].assign(static_cast<size_t>(params_[i].numel()), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      const std::vector<double> g = p.grad();
      double* pd = p.data();
      for (int64_t j = 0; j < p.numel(); ++j) {
        double grad = g[static_cast<size_t>(j)];
        if (cfg_.weight_decay != 0.0) grad += cfg_.weight_decay * pd[j];
        double& m = state_m_[i][static_cast<size_t>(j)];
        double& v = state_v_[i][static_cast<size_t>(j)];
        m = cfg_.adam_beta1 * m + (1.0 - cfg_.adam_beta1) * grad;
        v = cfg_.adam_beta2 * v + (1.0 - cfg_.adam_beta2) * grad * grad;
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        pd[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      }
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  size_t size() const { return params_.size(); }

 private:
  std::vector<Tensor> params_;
  TrainConfig cfg_;
  std::vector<std::vector<double>> state_m_, state_v_;
  int64_t t_ = 0;
};

std::vector<Tensor> trainable_params(SptModel& model) {
  std::vector<Tensor> out;
  for (const nn::NamedTensor& nt : model.params())
    if (!nt.buffer && nt.tensor->requires_grad()) out.push_back(*nt.tensor);
  return out;
}

std::vector<std::vector<double>> snapshot_values(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> snap;
  snap.reserve(params.size());
  for (const Tensor& p : params) snap.push_back(p.storage()->data);
  return snap;
}

void restore_values(std::vector<Tensor>& params, const std::vector<std::vector<double>>& snap) {
  for (size_t i = 0; i < params.size(); ++i) params[i].storage()->data = snap[i];
}

// Held-out one-box mIoU of the draft and refine outputs.
std::pair<double, double> one_box_miou(SptModel& model,
                                       const std::vector<SyntheticSample>& samples,
                                       int64_t min_area) {
  double draft_sum = 0.0, refine_sum = 0.0;
  int64_t count = 0;
  for (const SyntheticSample& sample : samples) {
    std::vector<DefectRegion> regions = connected_components(sample.mask, sample.size, sample.size);
    std::vector<DefectRegion> kept = filter_small_regions(regions, min_area);
    if (kept.empty()) kept = std::move(regions);
    if (kept.empty()) continue;
    PromptSet prompt;
    prompt.boxes.push_back(derive_one_box(kept));
    Prediction pred = predict(model, sample.image, prompt);
    draft_sum += iou(pred.draft_mask, sample.mask);
    refine_sum += iou(pred.refine_mask, sample.mask);
    ++count;
  }
  if (count == 0) return {0.0, 0.0};
  return {draft_sum / static_cast<double>(count), refine_sum / static_cast<double>(count)};
}

}  // namespace

TrainResult train(SptModel& model, const std::vector<SyntheticSample>& train_samples,
                  const std::vector<SyntheticSample>& eval_samples, const TrainConfig& config) {
  config.validate();
  if (train_samples.empty()) fail(ErrorKind::config, "train: dataset is empty");

  std::vector<Tensor> trainables = trainable_params(model);
  Adam adam(trainables, config);
  std::vector<std::vector<double>> last_good = snapshot_values(trainables);

  TrainResult result;
  const int64_t n = static_cast<int64_t>(train_samples.size());

  for (int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    const double lr = (epoch > config.lr_drop_epoch) ? config.lr * config.lr_drop_factor
                                                     : config.lr;

    Rng epoch_rng(mix_seed({config.seed, 0x45504f43ull, static_cast<uint64_t>(epoch)}));
    std::vector<int64_t> order = epoch_rng.permutation(n);

    double loss_sum = 0.0;
    int64_t batch_count = 0;
    for (int64_t start = 0; start < n; start += config.batch_size) {
      const int64_t end = std::min(n, start + config.batch_size);
      adam.zero_grad();
      Tensor total;
      for (int64_t b = start; b < end; ++b) {
        const int64_t idx = order[static_cast<size_t>(b)];
        Rng instance_rng(mix_seed({config.seed, 0x494e5354ull, static_cast<uint64_t>(epoch),
                                   static_cast<uint64_t>(idx)}));
        TrainInstance inst = make_train_instance(train_samples[static_cast<size_t>(idx)],
                                                 config.prompt_mode, config.min_area,
                                                 instance_rng);
        SptForward out = spt_forward(model, train_samples[static_cast<size_t>(idx)].image,
                                     inst.prompt);
        Tensor loss = model.sdt.enabled
                          ? compute_loss(out.draft_logits, out.refine_logits, inst.gt)
                          : compute_loss_single(out.refine_logits, inst.gt);
        total = total.defined() ? add(total, loss) : loss;
      }
      total = mul_scalar(total, 1.0 / static_cast<double>(end - start));
      const double loss_value = total.item();
      if (!std::isfinite(loss_value)) {
        restore_values(trainables, last_good);
        model.tape->clear();
        fail(ErrorKind::diverged, "train: non-finite loss at epoch " + std::to_string(epoch));
      }
      loss_sum += loss_value;
      ++batch_count;
      model.tape->backward(total);
      adam.step(lr);
      model.tape->clear();
    }

    auto [draft_miou, refine_miou] = one_box_miou(model, eval_samples, config.min_area);
    last_good = snapshot_values(trainables);

    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    entry.loss = batch_count > 0 ? loss_sum / static_cast<double>(batch_count) : 0.0;
    entry.draft_miou = draft_miou;
    entry.refine_miou = refine_miou;
    entry.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - epoch_start)
                        .count();
    result.log.push_back(entry);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

FiniteDiffReport grad_check(SptModel& model, const std::vector<SyntheticSample>& samples,
                            const GradCheckOptions& options) {
  if (samples.empty()) fail(ErrorKind::config, "grad_check: need at least one sample");
  const int64_t batch = std::min<int64_t>(options.batch, static_cast<int64_t>(samples.size()));

  // Fixed probe instances: alternate box and point prompts for coverage.
  std::vector<TrainInstance> instances;
  for (int64_t i = 0; i < batch; ++i) {
    Rng rng(mix_seed({options.seed, 0x47434b21ull, static_cast<uint64_t>(i)}));
    instances.push_back(make_train_instance(
        samples[static_cast<size_t>(i)],
        (i % 2 == 0) ? PromptModePolicy::one_box : PromptModePolicy::points5, 8, rng));
  }

  auto loss_of = [&]() -> Tensor {
    Tensor total;
    for (int64_t i = 0; i < batch; ++i) {
      SptForward out =
          spt_forward(model, samples[static_cast<size_t>(i)].image, instances[static_cast<size_t>(i)].prompt);
      Tensor loss = model.sdt.enabled
                        ? compute_loss(out.draft_logits, out.refine_logits,
                                       instances[static_cast<size_t>(i)].gt)
                        : compute_loss_single(out.refine_logits, instances[static_cast<size_t>(i)].gt);
      total = total.defined() ? add(total, loss) : loss;
    }
    return mul_scalar(total, 1.0 / static_cast<double>(batch));
  };

  // Analytic gradients once.
  nn::ParamList all_params = model.params();
  std::vector<nn::NamedTensor> trainable;
  for (const nn::NamedTensor& nt : all_params)
    if (!nt.buffer && nt.tensor->requires_grad()) trainable.push_back(nt);
  if (trainable.empty()) fail(ErrorKind::config, "grad_check: model has no trainable parameters");

  for (const nn::NamedTensor& nt : trainable) nt.tensor->zero_grad();
  model.tape->clear();
  Tensor loss = loss_of();
  model.tape->backward(loss);
  model.tape->clear();

  // Numeric probes with recording off.
  auto forward_value = [&]() -> double {
    Tape::NoGrad guard(*model.tape);
    return loss_of().item();
  };

  // Stratify by component so the probe set spans the encoder, both decoders
  // and the VRA scales; groups are visited round-robin.
  std::vector<std::string> group_names;
  std::vector<std::vector<const nn::NamedTensor*>> groups;
  auto group_of = [](const std::string& name) {
    if (name.find(".vra_") != std::string::npos) return std::string("vra");
    return name.substr(0, name.find('.'));
  };
  for (const nn::NamedTensor& nt : trainable) {
    const std::string g = group_of(nt.name);
    auto it = std::find(group_names.begin(), group_names.end(), g);
    if (it == group_names.end()) {
      group_names.push_back(g);
      groups.emplace_back();
      it = group_names.end() - 1;
    }
    groups[static_cast<size_t>(it - group_names.begin())].push_back(&nt);
  }

  Rng pick(mix_seed({options.seed, 0x434f4f52ull}));
  FiniteDiffReport report;
  std::vector<size_t> cursors(groups.size(), 0);
  int64_t taken = 0;
  while (taken < options.samples) {
    const size_t g = static_cast<size_t>(taken) % groups.size();
    const nn::NamedTensor& nt = *groups[g][cursors[g] % groups[g].size()];
    cursors[g]++;
    const int64_t index = pick.uniform_int(0, nt.tensor->numel() - 1);
    const double analytic = nt.tensor->grad()[static_cast<size_t>(index)];
    FiniteDiffEntry entry =
        finite_diff_coordinate(forward_value, *nt.tensor, index, analytic, options.h);
    entry.param = nt.name;
    report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
    report.entries.push_back(std::move(entry));
    ++taken;
  }
  return report;
}

}  // namespace spt
