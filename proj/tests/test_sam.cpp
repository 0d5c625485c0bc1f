#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "spt/sdt.hpp"

using namespace spt;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

std::vector<double> random_image(int64_t size, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> img(static_cast<size_t>(size * size));
  for (double& v : img) v = rng.uniform();
  return img;
}

void zero_tensor(Tensor& t) { std::fill(t.data(), t.data() + t.numel(), 0.0); }

SptModel toy_model(uint64_t seed = 0, VraPlacement placement = VraPlacement::none) {
  ModelConfig cfg;
  cfg.seed = seed;
  VraConfig vra;
  vra.placement = placement;
  return SptModel::build(cfg, vra, SdtConfig{});
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.image_size = 60;  // not divisible by patch 8
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = ModelConfig{};
  cfg.encoder_dim = 66;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = ModelConfig{};
  cfg.num_mask_tokens = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("encode_image produces the grid shape and is deterministic") {
  SptModel m = toy_model(3);
  std::vector<double> img = random_image(64, 17);
  Tensor image = Tensor::from({64, 64}, img);
  Tensor e1 = m.image_encoder.forward(image, m.cfg);
  CHECK(e1.shape() == std::vector<int64_t>{64, 64});  // 8x8 grid x 64 channels

  Tensor e2 = m.image_encoder.forward(image, m.cfg);
  CHECK(max_abs_diff(e1, e2) == 0.0);

  Tensor wrong = Tensor::zeros({32, 32});
  CHECK_THROWS_AS(m.image_encoder.forward(wrong, m.cfg), Error);
}

TEST_CASE("zero image and zeroed residual branches leave only the positional term") {
  SptModel m = toy_model(5);
  zero_tensor(m.image_encoder.patch_embed.w);
  zero_tensor(m.image_encoder.patch_embed.b);
  for (EncoderBlock& block : m.image_encoder.blocks) {
    zero_tensor(block.attn.out.w);
    zero_tensor(block.attn.out.b);
    zero_tensor(block.mlp.fc2.w);
    zero_tensor(block.mlp.fc2.b);
  }
  Tensor zero_image = Tensor::zeros({64, 64});
  Tensor e = m.image_encoder.forward(zero_image, m.cfg);
  CHECK(max_abs_diff(e, m.image_encoder.pos_embed) == 0.0);
}

TEST_CASE("encode_prompts token counts") {
  SptModel m = toy_model(7);
  {
    PromptSet p;
    p.points.push_back({10.0, 20.0, 1});
    auto [sparse, dense, pos] = m.prompt_encoder.forward(p, m.cfg);
    CHECK(sparse.shape() == std::vector<int64_t>{1, 64});
    CHECK(dense.shape() == std::vector<int64_t>{64, 64});
    CHECK(pos.shape() == std::vector<int64_t>{64, 64});
  }
  {
    PromptSet p;
    p.boxes.push_back({4.0, 6.0, 40.0, 50.0});
    auto [sparse, dense, pos] = m.prompt_encoder.forward(p, m.cfg);
    CHECK(sparse.dim(0) == 2);  // two corner tokens
    (void)dense;
    (void)pos;
  }
  {
    PromptSet p;
    p.points.push_back({10.0, 20.0, 1});
    p.points.push_back({11.0, 21.0, 0});
    p.boxes.push_back({4.0, 6.0, 40.0, 50.0});
    auto [sparse, dense, pos] = m.prompt_encoder.forward(p, m.cfg);
    CHECK(sparse.dim(0) == 4);
    (void)dense;
    (void)pos;
  }
}

TEST_CASE("no mask prompt gives a constant dense embedding") {
  SptModel m = toy_model(9);
  PromptSet p;
  p.points.push_back({5.0, 5.0, 1});
  auto [sparse, dense, pos] = m.prompt_encoder.forward(p, m.cfg);
  (void)sparse;
  (void)pos;
  for (int64_t r = 1; r < dense.dim(0); ++r)
    for (int64_t c = 0; c < dense.dim(1); ++c) CHECK(dense.at({r, c}) == dense.at({0, c}));
}

TEST_CASE("empty prompt set raises missing_prompt") {
  SptModel m = toy_model(11);
  PromptSet p;
  CHECK_THROWS_AS(m.prompt_encoder.forward(p, m.cfg), Error);
  try {
    m.prompt_encoder.forward(p, m.cfg);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::missing_prompt);
  }
}

TEST_CASE("mask-only prompt is padded to one sparse token") {
  SptModel m = toy_model(13);
  PromptSet p;
  p.mask_prompt = std::vector<double>(64 * 64, 0.25);
  auto [sparse, dense, pos] = m.prompt_encoder.forward(p, m.cfg);
  CHECK(sparse.dim(0) == 1);
  (void)dense;
  (void)pos;
}

TEST_CASE("prompt coordinate validation") {
  SptModel m = toy_model(15);
  PromptSet p;
  p.points.push_back({64.0, 0.0, 1});  // out of range
  CHECK_THROWS_AS(m.prompt_encoder.forward(p, m.cfg), Error);
  PromptSet q;
  q.boxes.push_back({10.0, 10.0, 5.0, 20.0});  // corners out of order
  CHECK_THROWS_AS(q.validate(64), Error);
}

TEST_CASE("two_way_block preserves shapes and token bookkeeping") {
  SptModel m = toy_model(17);
  Rng rng(5);
  auto rnd = [&](std::vector<int64_t> shape) {
    Tensor t = Tensor::zeros(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-1.0, 1.0);
    return t;
  };
  Tensor tokens = rnd({6, 64});
  Tensor image = rnd({64, 64});
  Tensor query_pe = rnd({6, 64});
  Tensor image_pe = rnd({64, 64});
  auto [t_next, im_next] = m.refine_decoder.tw1.forward(tokens, image, query_pe, image_pe);
  CHECK(t_next.shape() == std::vector<int64_t>{6, 64});
  CHECK(im_next.shape() == std::vector<int64_t>{64, 64});
}

TEST_CASE("two_way_block with zero projections reduces to layernorm chains") {
  SptModel m = toy_model(19);
  TwoWayBlock& block = m.refine_decoder.tw1;
  for (nn::Attention* a :
       {&block.self_attn, &block.cross_token_to_image, &block.cross_image_to_token}) {
    zero_tensor(a->out.w);
    zero_tensor(a->out.b);
  }
  zero_tensor(block.mlp.fc2.w);
  zero_tensor(block.mlp.fc2.b);

  Rng rng(7);
  auto rnd = [&](std::vector<int64_t> shape) {
    Tensor t = Tensor::zeros(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-1.0, 1.0);
    return t;
  };
  Tensor tokens = rnd({5, 64});
  Tensor image = rnd({64, 64});
  Tensor query_pe = rnd({5, 64});
  Tensor image_pe = rnd({64, 64});
  auto [t_next, im_next] = block.forward(tokens, image, query_pe, image_pe);

  // Expected: tokens pass ln1, ln2, ln3 in sequence; the image passes ln4.
  Tensor expect_t = block.ln3.forward(block.ln2.forward(block.ln1.forward(tokens)));
  Tensor expect_im = block.ln4.forward(image);
  CHECK(max_abs_diff(t_next, expect_t) < 1e-12);
  CHECK(max_abs_diff(im_next, expect_im) < 1e-12);
}

TEST_CASE("two_way_block is equivariant under grid token permutations") {
  SptModel m = toy_model(21);
  TwoWayBlock& block = m.refine_decoder.tw1;
  Rng rng(9);
  auto rnd = [&](std::vector<int64_t> shape) {
    Tensor t = Tensor::zeros(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-1.0, 1.0);
    return t;
  };
  const int64_t n = 16, d = 64;
  Tensor tokens = rnd({4, d});
  Tensor image = rnd({n, d});
  Tensor query_pe = rnd({4, d});
  Tensor image_pe = rnd({n, d});

  Rng perm_rng(31);
  std::vector<int64_t> perm = perm_rng.permutation(n);
  auto permute_rows = [&](const Tensor& t) {
    Tensor out = Tensor::zeros(t.shape());
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < d; ++c)
        out.data()[r * d + c] = t.at({perm[static_cast<size_t>(r)], c});
    return out;
  };

  auto [t1, im1] = block.forward(tokens, image, query_pe, image_pe);
  auto [t2, im2] = block.forward(tokens, permute_rows(image), query_pe, permute_rows(image_pe));
  CHECK(max_abs_diff(t2, t1) < 1e-9);
  CHECK(max_abs_diff(im2, permute_rows(im1)) < 1e-9);
}

TEST_CASE("decode_mask shape, determinism, and zero-head behaviour") {
  SptModel m = toy_model(23);
  std::vector<double> img = random_image(64, 23);
  PromptSet p;
  p.boxes.push_back({8.0, 8.0, 50.0, 50.0});

  Tensor image = Tensor::from({64, 64}, img);
  Tensor e_img = m.image_encoder.forward(image, m.cfg);
  auto [e_sparse, e_dense, e_pos] = m.prompt_encoder.forward(p, m.cfg);
  EmbeddingBundle bundle{e_img, e_sparse, e_dense, e_pos};

  DecodeResult r1 = m.refine_decoder.decode(bundle, m.cfg, nullptr, false);
  CHECK(r1.logits.shape() == std::vector<int64_t>{64 * 64, 1});
  CHECK(r1.iou_pred.numel() == 1);
  CHECK(r1.iou_pred.item() > 0.0);
  CHECK(r1.iou_pred.item() < 1.0);

  DecodeResult r2 = m.refine_decoder.decode(bundle, m.cfg, nullptr, false);
  CHECK(max_abs_diff(r1.logits, r2.logits) == 0.0);  // bit-identical

  zero_tensor(m.refine_decoder.mask_mlp.l3.w);
  zero_tensor(m.refine_decoder.mask_mlp.l3.b);
  DecodeResult r3 = m.refine_decoder.decode(bundle, m.cfg, nullptr, false);
  for (int64_t i = 0; i < r3.logits.numel(); ++i) CHECK(r3.logits.data()[i] == 0.0);
}

TEST_CASE("mask prompts are not ignored") {
  SptModel m = toy_model(25);
  std::vector<double> img = random_image(64, 29);
  Tensor image = Tensor::from({64, 64}, img);
  Tensor e_img = m.image_encoder.forward(image, m.cfg);

  PromptSet no_mask;
  no_mask.points.push_back({30.0, 30.0, 1});
  auto [s1, d1, pos1] = m.prompt_encoder.forward(no_mask, m.cfg);

  PromptSet with_mask = no_mask;
  std::vector<double> mp(64 * 64, 0.0);
  for (int64_t y = 20; y < 40; ++y)
    for (int64_t x = 20; x < 40; ++x) mp[static_cast<size_t>(y * 64 + x)] = 1.0;
  with_mask.mask_prompt = mp;
  auto [s2, d2, pos2] = m.prompt_encoder.forward(with_mask, m.cfg);

  DecodeResult r1 = m.refine_decoder.decode({e_img, s1, d1, pos1}, m.cfg, nullptr, false);
  DecodeResult r2 = m.refine_decoder.decode({e_img, s2, d2, pos2}, m.cfg, nullptr, false);
  CHECK(max_abs_diff(r1.logits, r2.logits) > 0.0);
}

TEST_CASE("all outputs stay finite on unit-range inputs") {
  SptModel m = toy_model(27);
  std::vector<double> img = random_image(64, 31);
  PromptSet p;
  p.points.push_back({12.0, 40.0, 1});
  p.boxes.push_back({2.0, 2.0, 60.0, 60.0});
  SptForward out = spt_forward(m, img, p);
  CHECK(all_finite(out.draft_logits));
  CHECK(all_finite(out.refine_logits));
  CHECK(all_finite(out.draft_iou));
  CHECK(all_finite(out.refine_iou));
}

TEST_CASE("weight-copy fidelity: a copied model matches the original") {
  SptModel m = toy_model(33);
  SptModel copy = clone_model(m);
  std::vector<double> img = random_image(64, 37);
  PromptSet p;
  p.boxes.push_back({10.0, 10.0, 44.0, 44.0});
  SptForward a = spt_forward(m, img, p);
  SptForward b = spt_forward(copy, img, p);
  CHECK(max_abs_diff(a.draft_logits, b.draft_logits) == 0.0);
  CHECK(max_abs_diff(a.refine_logits, b.refine_logits) == 0.0);
}

TEST_CASE("draft decoder starts as an exact copy of the refine decoder") {
  SptModel m = toy_model(35);
  nn::ParamList draft_params, refine_params;
  m.draft_decoder->collect("d", draft_params);
  m.refine_decoder.collect("r", refine_params);
  REQUIRE(draft_params.size() == refine_params.size());
  for (size_t i = 0; i < draft_params.size(); ++i) {
    const Tensor& a = *draft_params[i].tensor;
    const Tensor& b = *refine_params[i].tensor;
    REQUIRE(a.shape() == b.shape());
    for (int64_t j = 0; j < a.numel(); ++j) CHECK(a.data()[j] == b.data()[j]);
  }
}
