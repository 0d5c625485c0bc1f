#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "spt/nn.hpp"
#include "spt/rng.hpp"
#include "spt/tensor.hpp"
#include "spt/vra.hpp"

namespace spt {

struct ModelConfig {
  int64_t image_size = 64;
  int64_t patch_size = 8;
  int64_t encoder_dim = 64;
  int64_t encoder_depth = 4;
  int64_t encoder_heads = 4;
  int64_t decoder_dim = 64;
  int64_t decoder_heads = 4;
  int64_t num_mask_tokens = 3;
  uint64_t seed = 0;

  int64_t grid_size() const { return image_size / patch_size; }
  int64_t grid_tokens() const { return grid_size() * grid_size(); }
  void validate() const;
};

struct PromptSet {
  struct Point {
    double x = 0.0, y = 0.0;
    int label = 1;  // 1 foreground, 0 background
  };
  struct Box {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  };

  std::vector<Point> points;
  std::vector<Box> boxes;
  std::optional<std::vector<double>> mask_prompt;  // image_size^2 values in [0,1]

  bool empty() const { return points.empty() && boxes.empty() && !mask_prompt.has_value(); }
  void validate(int64_t image_size) const;
};

// The four embedding roles produced in the display phase.
struct EmbeddingBundle {
  Tensor e_img;     // (grid_tokens, d)
  Tensor e_sparse;  // (n_s, d)
  Tensor e_dense;   // (grid_tokens, d)
  Tensor e_pos;     // (grid_tokens, d)
};

// ---------------------------------------------------------------------------
// Image encoder: patch embedding + learned positions + pre-norm ViT blocks.
// ---------------------------------------------------------------------------

struct EncoderBlock {
  nn::LayerNorm ln1, ln2;
  nn::Attention attn;
  nn::Mlp mlp;
  std::optional<nn::Adapter> adapter;

  void init(int64_t d, int64_t heads, Rng& rng, Tape* tape);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, nn::ParamList& out);
};

struct ImageEncoder {
  nn::Linear patch_embed;  // patch^2 -> d
  Tensor pos_embed;        // (grid_tokens, d)
  std::vector<EncoderBlock> blocks;

  void init(const ModelConfig& cfg, Rng& rng, Tape* tape);
  // image: (image_size, image_size) pixel tensor in [0,1].
  Tensor forward(const Tensor& image, const ModelConfig& cfg) const;
  void collect(const std::string& prefix, nn::ParamList& out);
};

// ---------------------------------------------------------------------------
// Prompt encoder: Fourier point encoding + learned type embeddings + mask
// downscaling branch. The Fourier basis is a frozen seeded buffer.
// ---------------------------------------------------------------------------

struct MaskDownscaler {
  // log2(patch_size) stride-2 2x2 convs, channels 1 -> 4 -> 16 -> ... -> d,
  // with LN+GELU between stages.
  std::vector<Tensor> kernels;
  std::vector<Tensor> biases;
  std::vector<nn::LayerNorm> norms;

  void init(int64_t d, int64_t patch_size, Rng& rng, Tape* tape);
  Tensor forward(const Tensor& mask_tokens, int64_t image_size) const;  // (S*S,1) -> (g*g,d)
  void collect(const std::string& prefix, nn::ParamList& out);
};

struct PromptEncoder {
  Tensor fourier;      // (2, d/2) frozen buffer
  Tensor label_fg;     // (1, d)
  Tensor label_bg;     // (1, d)
  Tensor corner_tl;    // (1, d)
  Tensor corner_br;    // (1, d)
  Tensor no_mask;      // (1, d)
  Tensor pad_token;    // (1, d) used when a mask-only prompt leaves e_sparse empty
  Tensor grid_pos;     // (grid_tokens, d) frozen buffer (Fourier at cell centers)
  MaskDownscaler mask_down;

  void init(const ModelConfig& cfg, Rng& rng, Tape* tape);
  // Fourier features of normalized coordinates in [0,1]^2, one row per pair.
  Tensor encode_coords(const std::vector<std::pair<double, double>>& xy, Tape* tape) const;
  // Returns {e_sparse, e_dense, e_pos}; throws missing_prompt on empty input.
  std::tuple<Tensor, Tensor, Tensor> forward(const PromptSet& prompts,
                                             const ModelConfig& cfg) const;
  // The mask branch alone: (image_size^2, 1) probabilities -> (grid_tokens, d).
  Tensor encode_mask(const Tensor& mask_probs, const ModelConfig& cfg) const;
  Tensor no_mask_dense(const ModelConfig& cfg) const;
  void collect(const std::string& prefix, nn::ParamList& out);
};

// ---------------------------------------------------------------------------
// Two-way transformer decoder.
// ---------------------------------------------------------------------------

struct TwoWayBlock {
  nn::Attention self_attn;
  nn::LayerNorm ln1;
  nn::Attention cross_token_to_image;
  nn::LayerNorm ln2;
  nn::Mlp mlp;
  nn::LayerNorm ln3;
  nn::Attention cross_image_to_token;
  nn::LayerNorm ln4;
  std::optional<nn::Adapter> adapter;

  void init(int64_t d, int64_t heads, Rng& rng, Tape* tape);
  // Returns (tokens_next, image_next).
  std::pair<Tensor, Tensor> forward(const Tensor& tokens, const Tensor& image,
                                    const Tensor& query_pe, const Tensor& image_pe) const;
  void collect(const std::string& prefix, nn::ParamList& out);
};

// 3-layer MLP head with ReLU between layers (mask token and IoU heads).
struct HeadMlp {
  nn::Linear l1, l2, l3;

  void init(int64_t in, int64_t hidden, int64_t out, Rng& rng, Tape* tape);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, nn::ParamList& out);
};

struct Upsampler {
  // Two stride-2 transposed convs d -> d/2 -> d/4 with LN+GELU after the
  // first and GELU after the second.
  Tensor k1, b1, k2, b2;
  nn::LayerNorm ln;

  void init(int64_t d, Rng& rng, Tape* tape);
  Tensor forward(const Tensor& grid, int64_t h, int64_t w) const;  // -> (4h*4w, d/4)
  void collect(const std::string& prefix, nn::ParamList& out);
};

struct DecodeResult {
  Tensor logits;    // (image_size^2, 1)
  Tensor iou_pred;  // (1, 1), sigmoid-activated, informational only
};

struct MaskDecoder {
  Tensor iou_token;    // (1, d)
  Tensor mask_tokens;  // (num_mask_tokens, d)
  TwoWayBlock tw1, tw2;
  nn::Attention final_attn;
  nn::LayerNorm ln_final;
  Upsampler upsample;
  HeadMlp mask_mlp;  // d -> d -> d -> d/4
  HeadMlp iou_head;  // d -> d -> 1
  Tensor vra_beta_tw1;  // defined only when the placement includes tw1
  Tensor vra_beta_tw2;

  void init(const ModelConfig& cfg, Rng& rng, Tape* tape);
  // rel may be null (no relation adapter active).
  DecodeResult decode(const EmbeddingBundle& bundle, const ModelConfig& cfg,
                      const RelationMatrix* rel, bool use_raw_relation) const;
  void collect(const std::string& prefix, nn::ParamList& out);
};

}  // namespace spt
