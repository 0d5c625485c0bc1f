#include "spt/sam.hpp"

#include <cmath>

namespace spt {

namespace {

constexpr int64_t kEncoderMlpRatio = 4;
constexpr int64_t kDecoderMlpRatio = 4;

bool is_power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0) fail(ErrorKind::config, "model: sizes must be positive");
  if (image_size % patch_size != 0)
    fail(ErrorKind::config, "model: image_size must be divisible by patch_size");
  if (!is_power_of_two(patch_size))
    fail(ErrorKind::config, "model: patch_size must be a power of two");
  if (encoder_dim % encoder_heads != 0)
    fail(ErrorKind::config, "model: encoder_dim must be divisible by encoder_heads");
  if (decoder_dim % decoder_heads != 0)
    fail(ErrorKind::config, "model: decoder_dim must be divisible by decoder_heads");
  if (num_mask_tokens < 1) fail(ErrorKind::config, "model: num_mask_tokens must be >= 1");
  if (encoder_dim != decoder_dim)
    fail(ErrorKind::config, "model: encoder_dim must equal decoder_dim (no neck projection)");
  if (decoder_dim % 4 != 0)
    fail(ErrorKind::config, "model: decoder_dim must be divisible by 4 (upsampler channels)");
  if (encoder_dim % 2 != 0) fail(ErrorKind::config, "model: encoder_dim must be even");
}

void PromptSet::validate(int64_t image_size) const {
  const double s = static_cast<double>(image_size);
  for (const Point& p : points) {
    if (p.x < 0.0 || p.x >= s || p.y < 0.0 || p.y >= s)
      fail(ErrorKind::config, "prompt: point coordinate outside the image");
    if (p.label != 0 && p.label != 1)
      fail(ErrorKind::config, "prompt: point label must be 0 (background) or 1 (foreground)");
  }
  for (const Box& b : boxes) {
    if (b.x0 > b.x1 || b.y0 > b.y1) fail(ErrorKind::config, "prompt: box corners out of order");
    if (b.x0 < 0.0 || b.y0 < 0.0 || b.x1 >= s || b.y1 >= s)
      fail(ErrorKind::config, "prompt: box coordinate outside the image");
  }
  if (mask_prompt && static_cast<int64_t>(mask_prompt->size()) != image_size * image_size)
    fail(ErrorKind::dimension, "prompt: mask prompt must have image_size^2 entries");
}

// ---------------------------------------------------------------------------
// Image encoder
// ---------------------------------------------------------------------------

void EncoderBlock::init(int64_t d, int64_t heads, Rng& rng, Tape* tape) {
  ln1.init(d, tape);
  ln2.init(d, tape);
  attn.init(d, heads, rng, tape);
  mlp.init(d, d * kEncoderMlpRatio, /*use_gelu=*/true, rng, tape);
}

Tensor EncoderBlock::forward(const Tensor& x) const {
  Tensor h = ln1.forward(x);
  Tensor y = add(x, attn.forward(h, h, h));
  Tensor z = add(y, mlp.forward(ln2.forward(y)));
  if (adapter) z = adapter->forward(z);
  return z;
}

void EncoderBlock::collect(const std::string& prefix, nn::ParamList& out) {
  ln1.collect(prefix + ".ln1", out);
  attn.collect(prefix + ".attn", out);
  ln2.collect(prefix + ".ln2", out);
  mlp.collect(prefix + ".mlp", out);
  if (adapter) adapter->collect(prefix + ".adapter", out);
}

void ImageEncoder::init(const ModelConfig& cfg, Rng& rng, Tape* tape) {
  patch_embed.init(cfg.patch_size * cfg.patch_size, cfg.encoder_dim, nn::LinearKind::embed, rng,
                   tape);
  pos_embed = Tensor::zeros({cfg.grid_tokens(), cfg.encoder_dim});
  nn::normal_init(pos_embed, 0.02, rng);
  pos_embed.set_tape(tape);
  blocks.resize(static_cast<size_t>(cfg.encoder_depth));
  for (auto& block : blocks) block.init(cfg.encoder_dim, cfg.encoder_heads, rng, tape);
}

Tensor ImageEncoder::forward(const Tensor& image, const ModelConfig& cfg) const {
  if (image.rank() != 2 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size)
    fail(ErrorKind::dimension, "encode_image: image does not match the configured size");
  Tensor x = extract_patches(image, cfg.patch_size);
  Tensor e = add(patch_embed.forward(x), pos_embed);
  for (const auto& block : blocks) e = block.forward(e);
  return e;
}

void ImageEncoder::collect(const std::string& prefix, nn::ParamList& out) {
  patch_embed.collect(prefix + ".patch_embed", out);
  out.push_back({prefix + ".pos_embed", &pos_embed, false});
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(prefix + ".block" + std::to_string(i), out);
}

// ---------------------------------------------------------------------------
// Prompt encoder
// ---------------------------------------------------------------------------

void MaskDownscaler::init(int64_t d, int64_t patch_size, Rng& rng, Tape* tape) {
  kernels.clear();
  biases.clear();
  norms.clear();
  int64_t stages = 0;
  for (int64_t p = patch_size; p > 1; p /= 2) ++stages;
  int64_t cin = 1;
  for (int64_t s = 0; s < stages; ++s) {
    const int64_t cout = (s == stages - 1) ? d : std::min<int64_t>(d, 4 * (1ll << (2 * s)));
    Tensor k = Tensor::zeros({4 * cin, cout});
    nn::xavier_uniform(k, 4 * cin, cout, rng);
    k.set_tape(tape);
    Tensor b = Tensor::zeros({1, cout});
    b.set_tape(tape);
    kernels.push_back(k);
    biases.push_back(b);
    if (s + 1 < stages) {
      nn::LayerNorm ln;
      ln.init(cout, tape);
      norms.push_back(ln);
    }
    cin = cout;
  }
}

Tensor MaskDownscaler::forward(const Tensor& mask_tokens, int64_t image_size) const {
  Tensor x = mask_tokens;
  int64_t side = image_size;
  for (size_t s = 0; s < kernels.size(); ++s) {
    x = conv_down2(x, kernels[s], biases[s], side, side);
    side /= 2;
    if (s + 1 < kernels.size()) {
      x = gelu(norms[s].forward(x));
    }
  }
  return x;
}

void MaskDownscaler::collect(const std::string& prefix, nn::ParamList& out) {
  for (size_t s = 0; s < kernels.size(); ++s) {
    out.push_back({prefix + ".conv" + std::to_string(s) + ".kernel", &kernels[s], false});
    out.push_back({prefix + ".conv" + std::to_string(s) + ".bias", &biases[s], false});
  }
  for (size_t s = 0; s < norms.size(); ++s)
    norms[s].collect(prefix + ".ln" + std::to_string(s), out);
}

void PromptEncoder::init(const ModelConfig& cfg, Rng& rng, Tape* tape) {
  const int64_t d = cfg.decoder_dim;
  fourier = Tensor::zeros({2, d / 2});
  nn::normal_init(fourier, 1.0, rng);
  fourier.set_tape(tape);

  auto embed = [&](Tensor& t) {
    t = Tensor::zeros({1, d});
    nn::normal_init(t, 1.0, rng);
    t.set_tape(tape);
  };
  embed(label_fg);
  embed(label_bg);
  embed(corner_tl);
  embed(corner_br);
  embed(no_mask);
  embed(pad_token);

  mask_down.init(d, cfg.patch_size, rng, tape);

  // Positional encoding of the embedding grid, evaluated at cell centers.
  const int64_t g = cfg.grid_size();
  std::vector<std::pair<double, double>> centers;
  centers.reserve(static_cast<size_t>(g * g));
  for (int64_t i = 0; i < g; ++i)
    for (int64_t j = 0; j < g; ++j)
      centers.emplace_back((static_cast<double>(j) + 0.5) / static_cast<double>(g),
                           (static_cast<double>(i) + 0.5) / static_cast<double>(g));
  grid_pos = encode_coords(centers, tape);
}

Tensor PromptEncoder::encode_coords(const std::vector<std::pair<double, double>>& xy,
                                    Tape* tape) const {
  const int64_t half = fourier.dim(1);
  const int64_t n = static_cast<int64_t>(xy.size());
  Tensor out = Tensor::zeros({n, 2 * half});
  const double* g = fourier.data();
  double* po = out.data();
  for (int64_t r = 0; r < n; ++r) {
    const double px = 2.0 * xy[static_cast<size_t>(r)].first - 1.0;
    const double py = 2.0 * xy[static_cast<size_t>(r)].second - 1.0;
    for (int64_t j = 0; j < half; ++j) {
      const double proj = 2.0 * M_PI * (px * g[j] + py * g[half + j]);
      po[r * 2 * half + j] = std::sin(proj);
      po[r * 2 * half + half + j] = std::cos(proj);
    }
  }
  out.set_tape(tape);
  return out;
}

std::tuple<Tensor, Tensor, Tensor> PromptEncoder::forward(const PromptSet& prompts,
                                                          const ModelConfig& cfg) const {
  if (prompts.empty()) fail(ErrorKind::missing_prompt, "encode_prompts: prompt set is empty");
  prompts.validate(cfg.image_size);
  const double s = static_cast<double>(cfg.image_size);
  Tape* tape = fourier.tape();

  std::vector<Tensor> tokens;
  for (const PromptSet::Point& p : prompts.points) {
    Tensor pe = encode_coords({{(p.x + 0.5) / s, (p.y + 0.5) / s}}, tape);
    tokens.push_back(add(pe, p.label == 1 ? label_fg : label_bg));
  }
  for (const PromptSet::Box& b : prompts.boxes) {
    Tensor pe_tl = encode_coords({{(b.x0 + 0.5) / s, (b.y0 + 0.5) / s}}, tape);
    Tensor pe_br = encode_coords({{(b.x1 + 0.5) / s, (b.y1 + 0.5) / s}}, tape);
    tokens.push_back(add(pe_tl, corner_tl));
    tokens.push_back(add(pe_br, corner_br));
  }
  Tensor e_sparse;
  if (tokens.empty()) {
    e_sparse = concat_rows(std::vector<Tensor>{pad_token});
  } else {
    e_sparse = concat_rows(tokens);
  }

  Tensor e_dense;
  if (prompts.mask_prompt) {
    Tensor m = Tensor::from({cfg.image_size * cfg.image_size, 1}, *prompts.mask_prompt);
    m.set_tape(tape);
    e_dense = encode_mask(m, cfg);
  } else {
    e_dense = no_mask_dense(cfg);
  }
  return {e_sparse, e_dense, grid_pos};
}

Tensor PromptEncoder::encode_mask(const Tensor& mask_probs, const ModelConfig& cfg) const {
  if (mask_probs.dim(0) != cfg.image_size * cfg.image_size || mask_probs.dim(1) != 1)
    fail(ErrorKind::dimension, "encode_mask: expected (image_size^2, 1) input");
  return mask_down.forward(mask_probs, cfg.image_size);
}

Tensor PromptEncoder::no_mask_dense(const ModelConfig& cfg) const {
  return repeat_rows(no_mask, cfg.grid_tokens());
}

void PromptEncoder::collect(const std::string& prefix, nn::ParamList& out) {
  out.push_back({prefix + ".fourier", &fourier, true});
  out.push_back({prefix + ".label_fg", &label_fg, false});
  out.push_back({prefix + ".label_bg", &label_bg, false});
  out.push_back({prefix + ".corner_tl", &corner_tl, false});
  out.push_back({prefix + ".corner_br", &corner_br, false});
  out.push_back({prefix + ".no_mask", &no_mask, false});
  out.push_back({prefix + ".pad_token", &pad_token, false});
  mask_down.collect(prefix + ".mask_down", out);
  out.push_back({prefix + ".grid_pos", &grid_pos, true});
}

// ---------------------------------------------------------------------------
// Two-way block
// ---------------------------------------------------------------------------

void TwoWayBlock::init(int64_t d, int64_t heads, Rng& rng, Tape* tape) {
  self_attn.init(d, heads, rng, tape);
  ln1.init(d, tape);
  cross_token_to_image.init(d, heads, rng, tape);
  ln2.init(d, tape);
  mlp.init(d, d * kDecoderMlpRatio, /*use_gelu=*/false, rng, tape);
  ln3.init(d, tape);
  cross_image_to_token.init(d, heads, rng, tape);
  ln4.init(d, tape);
}

std::pair<Tensor, Tensor> TwoWayBlock::forward(const Tensor& tokens, const Tensor& image,
                                               const Tensor& query_pe,
                                               const Tensor& image_pe) const {
  // (1) token self-attention
  Tensor t = ln1.forward(add(tokens, self_attn.forward(tokens, tokens, tokens)));
  // (2) token-to-image cross attention
  {
    Tensor q = add(t, query_pe);
    Tensor kv = add(image, image_pe);
    t = ln2.forward(add(t, cross_token_to_image.forward(q, kv, kv)));
  }
  // (3) token MLP (+ optional adapter)
  t = ln3.forward(add(t, mlp.forward(t)));
  if (adapter) t = adapter->forward(t);
  // (4) image-to-token cross attention
  Tensor im;
  {
    Tensor q = add(image, image_pe);
    im = ln4.forward(add(image, cross_image_to_token.forward(q, t, t)));
  }
  return {t, im};
}

void TwoWayBlock::collect(const std::string& prefix, nn::ParamList& out) {
  self_attn.collect(prefix + ".self_attn", out);
  ln1.collect(prefix + ".ln1", out);
  cross_token_to_image.collect(prefix + ".cross_t2i", out);
  ln2.collect(prefix + ".ln2", out);
  mlp.collect(prefix + ".mlp", out);
  ln3.collect(prefix + ".ln3", out);
  cross_image_to_token.collect(prefix + ".cross_i2t", out);
  ln4.collect(prefix + ".ln4", out);
  if (adapter) adapter->collect(prefix + ".adapter", out);
}

// ---------------------------------------------------------------------------
// Heads / upsampler / decoder
// ---------------------------------------------------------------------------

void HeadMlp::init(int64_t in, int64_t hidden, int64_t out, Rng& rng, Tape* tape) {
  l1.init(in, hidden, nn::LinearKind::head, rng, tape);
  l2.init(hidden, hidden, nn::LinearKind::head, rng, tape);
  l3.init(hidden, out, nn::LinearKind::head, rng, tape);
}

Tensor HeadMlp::forward(const Tensor& x) const {
  return l3.forward(relu(l2.forward(relu(l1.forward(x)))));
}

void HeadMlp::collect(const std::string& prefix, nn::ParamList& out) {
  l1.collect(prefix + ".l1", out);
  l2.collect(prefix + ".l2", out);
  l3.collect(prefix + ".l3", out);
}

void Upsampler::init(int64_t d, Rng& rng, Tape* tape) {
  const int64_t c1 = d / 2, c2 = d / 4;
  k1 = Tensor::zeros({d, 4 * c1});
  nn::xavier_uniform(k1, d, 4 * c1, rng);
  k1.set_tape(tape);
  b1 = Tensor::zeros({1, c1});
  b1.set_tape(tape);
  ln.init(c1, tape);
  k2 = Tensor::zeros({c1, 4 * c2});
  nn::xavier_uniform(k2, c1, 4 * c2, rng);
  k2.set_tape(tape);
  b2 = Tensor::zeros({1, c2});
  b2.set_tape(tape);
}

Tensor Upsampler::forward(const Tensor& grid, int64_t h, int64_t w) const {
  Tensor x = conv_up2(grid, k1, b1, h, w);
  x = gelu(ln.forward(x));
  x = conv_up2(x, k2, b2, 2 * h, 2 * w);
  return gelu(x);
}

void Upsampler::collect(const std::string& prefix, nn::ParamList& out) {
  out.push_back({prefix + ".conv0.kernel", &k1, false});
  out.push_back({prefix + ".conv0.bias", &b1, false});
  ln.collect(prefix + ".ln", out);
  out.push_back({prefix + ".conv1.kernel", &k2, false});
  out.push_back({prefix + ".conv1.bias", &b2, false});
}

void MaskDecoder::init(const ModelConfig& cfg, Rng& rng, Tape* tape) {
  const int64_t d = cfg.decoder_dim;
  iou_token = Tensor::zeros({1, d});
  nn::normal_init(iou_token, 1.0, rng);
  iou_token.set_tape(tape);
  mask_tokens = Tensor::zeros({cfg.num_mask_tokens, d});
  nn::normal_init(mask_tokens, 1.0, rng);
  mask_tokens.set_tape(tape);
  tw1.init(d, cfg.decoder_heads, rng, tape);
  tw2.init(d, cfg.decoder_heads, rng, tape);
  final_attn.init(d, cfg.decoder_heads, rng, tape);
  ln_final.init(d, tape);
  upsample.init(d, rng, tape);
  mask_mlp.init(d, d, d / 4, rng, tape);
  // Damp the output head so initial logits sit near the decision boundary;
  // large random logits stall early training on imbalanced masks.
  for (int64_t i = 0; i < mask_mlp.l3.w.numel(); ++i) mask_mlp.l3.w.data()[i] *= 0.25;
  iou_head.init(d, d, 1, rng, tape);
}

DecodeResult MaskDecoder::decode(const EmbeddingBundle& bundle, const ModelConfig& cfg,
                                 const RelationMatrix* rel, bool use_raw_relation) const {
  const int64_t g = cfg.grid_size();
  const int64_t ns = bundle.e_sparse.dim(0);

  Tensor im = add(bundle.e_img, bundle.e_dense);
  Tensor t0 = concat_rows(std::vector<Tensor>{bundle.e_sparse, iou_token, mask_tokens});
  const Tensor& query_pe = t0;  // token embeddings double as their positional terms

  auto [t1, im1] = tw1.forward(t0, im, query_pe, bundle.e_pos);
  if (vra_beta_tw1.defined() && rel)
    im1 = apply_relation(*rel, im1, vra_beta_tw1, use_raw_relation);
  auto [t2, im2] = tw2.forward(t1, im1, query_pe, bundle.e_pos);
  if (vra_beta_tw2.defined() && rel)
    im2 = apply_relation(*rel, im2, vra_beta_tw2, use_raw_relation);

  Tensor q = add(t2, query_pe);
  Tensor kv = add(im2, bundle.e_pos);
  Tensor t3 = ln_final.forward(add(t2, final_attn.forward(q, kv, kv)));

  // First mask token only; tokens are ordered [sparse, iou, mask...].
  Tensor e_mask_star = slice_rows(t3, ns + 1, ns + 2);
  Tensor wvec = mask_mlp.forward(e_mask_star);  // (1, d/4)
  Tensor up = upsample.forward(im2, g, g);      // (16g^2, d/4)
  Tensor lowres = matmul(up, wvec, false, true);
  Tensor logits = bilinear_resize(lowres, 4 * g, 4 * g, cfg.image_size, cfg.image_size);

  Tensor iou_feat = slice_rows(t3, ns, ns + 1);
  Tensor iou_pred = sigmoid(iou_head.forward(iou_feat));
  return {logits, iou_pred};
}

void MaskDecoder::collect(const std::string& prefix, nn::ParamList& out) {
  out.push_back({prefix + ".iou_token", &iou_token, false});
  out.push_back({prefix + ".mask_tokens", &mask_tokens, false});
  tw1.collect(prefix + ".tw1", out);
  tw2.collect(prefix + ".tw2", out);
  final_attn.collect(prefix + ".final_attn", out);
  ln_final.collect(prefix + ".ln_final", out);
  upsample.collect(prefix + ".upsample", out);
  mask_mlp.collect(prefix + ".mask_mlp", out);
  iou_head.collect(prefix + ".iou_head", out);
  if (vra_beta_tw1.defined()) out.push_back({prefix + ".vra_tw1.beta", &vra_beta_tw1, false});
  if (vra_beta_tw2.defined()) out.push_back({prefix + ".vra_tw2.beta", &vra_beta_tw2, false});
}

}  // namespace spt
