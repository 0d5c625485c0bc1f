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

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

std::vector<double> random_image(int64_t size, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> img(static_cast<size_t>(size * size));
  for (double& v : img) v = rng.uniform();
  return img;
}

SptModel base_model(uint64_t seed = 0) {
  ModelConfig cfg;
  cfg.seed = seed;
  VraConfig vra;
  vra.placement = VraPlacement::none;
  return SptModel::build(cfg, vra, SdtConfig{});
}

PeftConfig peft_of(nn::PeftKind kind) {
  PeftConfig pc;
  pc.kind = kind;
  return pc;
}

}  // namespace

TEST_CASE("forward_lora hand oracle") {
  // W0 = 0, r = 1: y = B (A x) = [3, 0] for x = [3, 5].
  Tensor x = Tensor::from({1, 2}, {3, 5});
  Tensor w0 = Tensor::zeros({2, 2});
  Tensor bias = Tensor::zeros({1, 2});
  Tensor b = Tensor::from({2, 1}, {1, 0});
  Tensor a = Tensor::from({1, 2}, {1, 0});
  Tensor y = forward_lora(x, w0, bias, b, a, 1.0);
  CHECK(y.at({0, 0}) == 3.0);
  CHECK(y.at({0, 1}) == 0.0);
}

TEST_CASE("lora with B = 0 reproduces the base map exactly") {
  Rng rng(3);
  Tensor x = random_tensor({4, 6}, rng);
  Tensor w0 = random_tensor({5, 6}, rng);
  Tensor bias = random_tensor({1, 5}, rng);
  Tensor b = Tensor::zeros({5, 2});
  Tensor a = random_tensor({2, 6}, rng);
  Tensor y = forward_lora(x, w0, bias, b, a, 1.0);
  Tensor base = add(matmul(x, w0, false, true), bias);
  CHECK(max_abs_diff(y, base) == 0.0);
}

TEST_CASE("lora merge equivalence on random small matrices") {
  Rng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    const int64_t d = rng.uniform_int(5, 16);
    const int64_t k = rng.uniform_int(5, 16);
    const int64_t r = rng.uniform_int(1, 4);
    nn::Linear lin;
    lin.w = random_tensor({d, k}, rng);
    lin.b = random_tensor({1, d}, rng);
    lin.peft = nn::PeftAttachment{};
    lin.peft->kind = nn::PeftKind::lora;
    lin.peft->scaling = rng.uniform(0.5, 2.0);
    lin.peft->lora_b = random_tensor({d, r}, rng);
    lin.peft->lora_a = random_tensor({r, k}, rng);

    Tensor x = random_tensor({3, k}, rng);
    Tensor unmerged = lin.forward(x);
    Tensor merged_w = merge(lin);
    Tensor merged = add(matmul(x, merged_w, false, true), lin.b);
    CHECK(max_abs_diff(unmerged, merged) < 1e-9);
  }
}

TEST_CASE("forward_dora identities") {
  Rng rng(7);
  Tensor w0 = random_tensor({4, 6}, rng);
  Tensor bias = Tensor::zeros({1, 4});
  Tensor x = random_tensor({2, 6}, rng);
  Tensor m = column_norms(w0).detached();
  Tensor zero_b = Tensor::zeros({4, 2});
  Tensor a = random_tensor({2, 6}, rng);

  // Delta V = 0 and m = ||W0||_c reproduce W0 x exactly.
  Tensor y = forward_dora(x, w0, bias, m, zero_b, a);
  Tensor base = matmul(x, w0, false, true);
  CHECK(max_abs_diff(y, base) == 0.0);

  // Doubling m doubles the output.
  Tensor m2 = mul_scalar(m, 2.0).detached();
  Tensor y2 = forward_dora(x, w0, bias, m2, zero_b, a);
  CHECK(max_abs_diff(y2, mul_scalar(y, 2.0)) < 1e-12);
}

TEST_CASE("forward_dora matches an explicit normalize-then-scale oracle") {
  Rng rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    const int64_t d = rng.uniform_int(4, 10);
    const int64_t k = rng.uniform_int(4, 10);
    const int64_t r = rng.uniform_int(1, 3);
    Tensor w0 = random_tensor({d, k}, rng);
    Tensor b = random_tensor({d, r}, rng, -0.2, 0.2);
    Tensor a = random_tensor({r, k}, rng, -0.2, 0.2);
    Tensor m = random_tensor({1, k}, rng, 0.5, 2.0);
    Tensor bias = Tensor::zeros({1, d});
    Tensor x = random_tensor({2, k}, rng);

    // Oracle: explicit W' = W0 + BA, column normalization, column scaling.
    Tensor w_prime = Tensor::zeros({d, k});
    for (int64_t i = 0; i < d; ++i)
      for (int64_t j = 0; j < k; ++j) {
        double delta = 0.0;
        for (int64_t t = 0; t < r; ++t) delta += b.at({i, t}) * a.at({t, j});
        w_prime.data()[i * k + j] = w0.at({i, j}) + delta;
      }
    Tensor expected = Tensor::zeros({2, d});
    for (int64_t row = 0; row < 2; ++row)
      for (int64_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < k; ++j) {
          double norm = 0.0;
          for (int64_t t = 0; t < d; ++t) norm += w_prime.at({t, j}) * w_prime.at({t, j});
          norm = std::sqrt(norm);
          acc += m.at({0, j}) * w_prime.at({i, j}) / norm * x.at({row, j});
        }
        expected.data()[row * d + i] = acc;
      }

    Tensor y = forward_dora(x, w0, bias, m, b, a);
    CHECK(max_abs_diff(y, expected) < 1e-9);

    // Merged weight path agrees too.
    nn::Linear lin;
    lin.w = w0;
    lin.b = bias;
    lin.peft = nn::PeftAttachment{};
    lin.peft->kind = nn::PeftKind::dora;
    lin.peft->lora_b = b;
    lin.peft->lora_a = a;
    lin.peft->dora_m = m;
    Tensor merged = matmul(x, merge(lin), false, true);
    CHECK(max_abs_diff(y, merged) < 1e-9);
  }
}

TEST_CASE("dora rejects a zero column norm") {
  Tensor w0 = Tensor::zeros({2, 2});  // V + BA has zero columns
  Tensor bias = Tensor::zeros({1, 2});
  Tensor m = Tensor::from({1, 2}, {1, 1});
  Tensor b = Tensor::zeros({2, 1});
  Tensor a = Tensor::zeros({1, 2});
  Tensor x = Tensor::from({1, 2}, {1, 2});
  CHECK_THROWS_AS(forward_dora(x, w0, bias, m, b, a), Error);
}

TEST_CASE("forward_adapter identities and hand oracle") {
  // W_up = 0 leaves the input untouched.
  Rng rng(11);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor down = random_tensor({4, 2}, rng);
  Tensor up = Tensor::zeros({2, 4});
  CHECK(max_abs_diff(forward_adapter(x, down, up), x) == 0.0);

  // r = d = 2 with identity projections: o = x + relu(x).
  Tensor x2 = Tensor::from({1, 2}, {-1, 2});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor o = forward_adapter(x2, eye, eye);
  CHECK(o.at({0, 0}) == -1.0);
  CHECK(o.at({0, 1}) == 4.0);
}

TEST_CASE("adapter gradients match finite differences") {
  Rng rng(13);
  Tape tape;
  Tensor x = random_tensor({3, 4}, rng);
  Tensor down = random_tensor({4, 2}, rng);
  Tensor up = random_tensor({2, 4}, rng);
  for (Tensor* t : {&x, &down, &up}) {
    t->set_tape(&tape);
    t->set_requires_grad(true);
  }
  Tensor w = random_tensor({3, 4}, rng, 0.3, 1.0);
  auto loss_of = [&]() { return sum_all(mul(forward_adapter(x, down, up), w)); };
  Tensor loss = loss_of();
  tape.backward(loss);
  tape.clear();
  auto value = [&]() {
    Tape::NoGrad guard(tape);
    return loss_of().item();
  };
  for (Tensor* t : {&x, &down, &up}) {
    const std::vector<double> g = t->grad();
    for (int64_t i = 0; i < t->numel(); ++i) {
      FiniteDiffEntry e = finite_diff_coordinate(value, *t, i, g[static_cast<size_t>(i)], 1e-5);
      CHECK(e.rel_error < 1e-4);
    }
  }
}

TEST_CASE("fresh attachments leave model logits within 1e-12") {
  std::vector<double> img = random_image(64, 41);
  PromptSet p;
  p.boxes.push_back({6.0, 6.0, 52.0, 52.0});
  p.points.push_back({30.0, 28.0, 1});

  SptModel base = base_model(21);
  SptForward base_out = spt_forward(base, img, p);

  for (nn::PeftKind kind : {nn::PeftKind::lora, nn::PeftKind::dora, nn::PeftKind::adapter}) {
    SptModel m = base_model(21);
    attach(m, peft_of(kind));
    SptForward out = spt_forward(m, img, p);
    INFO("kind ", to_string(kind));
    CHECK(max_abs_diff(out.draft_logits, base_out.draft_logits) < 1e-12);
    CHECK(max_abs_diff(out.refine_logits, base_out.refine_logits) < 1e-12);
  }
}

TEST_CASE("attach with no targets leaves zero trainable parameters") {
  SptModel m = base_model(23);
  PeftConfig pc;
  pc.targets.clear();
  attach(m, pc);
  ParamCounts counts = count_parameters(m);
  CHECK(counts.trainable == 0);
  CHECK(counts.ratio_percent == 0.0);
}

TEST_CASE("attach is idempotent per target") {
  SptModel m = base_model(25);
  attach(m, peft_of(nn::PeftKind::lora));
  const ParamCounts once = count_parameters(m);
  attach(m, peft_of(nn::PeftKind::lora));
  const ParamCounts twice = count_parameters(m);
  CHECK(once.total == twice.total);
  CHECK(once.trainable == twice.trainable);
}

TEST_CASE("trainable ratio is monotone in targets and rank") {
  auto trainable_with = [](std::set<PeftTarget> targets, int64_t rank) {
    SptModel m = base_model(27);
    PeftConfig pc;
    pc.targets = std::move(targets);
    pc.rank = rank;
    attach(m, pc);
    return count_parameters(m).trainable;
  };
  const int64_t t1 = trainable_with({PeftTarget::image_encoder}, 8);
  const int64_t t2 = trainable_with({PeftTarget::image_encoder, PeftTarget::refine_decoder}, 8);
  const int64_t t3 = trainable_with(
      {PeftTarget::image_encoder, PeftTarget::refine_decoder, PeftTarget::draft_decoder}, 8);
  CHECK(t1 < t2);
  CHECK(t2 < t3);

  const int64_t r4 = trainable_with({PeftTarget::image_encoder}, 4);
  const int64_t r16 = trainable_with({PeftTarget::image_encoder}, 16);
  CHECK(r4 < t1);
  CHECK(t1 < r16);
}

TEST_CASE("parameter accounting reproduces the reference ratios") {
  CHECK(std::abs(trainable_ratio_percent(93.636e6, 0.372e6) - 0.397) < 0.001);
  CHECK(std::abs(trainable_ratio_percent(89.719e6, 0.326e6) - 0.364) < 0.001);
  CHECK(trainable_ratio_percent(1e6, 0.0) == 0.0);
}

TEST_CASE("adapter attachments cannot merge") {
  nn::Linear no_attachment;
  no_attachment.w = Tensor::zeros({4, 4});
  CHECK_THROWS_AS(merge(no_attachment), Error);

  nn::Linear adapter_kind;
  adapter_kind.w = Tensor::zeros({4, 4});
  adapter_kind.peft = nn::PeftAttachment{};
  adapter_kind.peft->kind = nn::PeftKind::adapter;
  try {
    merge(adapter_kind);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::unsupported);
  }
}

TEST_CASE("rank must stay below the smallest targeted extent") {
  SptModel m = base_model(31);
  PeftConfig pc;
  pc.rank = 64;  // equal to d, not allowed
  CHECK_THROWS_AS(attach(m, pc), Error);
}

TEST_CASE("merged lora weight equals W0 exactly when B is zero") {
  Rng rng(33);
  nn::Linear lin;
  lin.w = random_tensor({6, 5}, rng);
  lin.b = Tensor::zeros({1, 6});
  lin.peft = nn::PeftAttachment{};
  lin.peft->kind = nn::PeftKind::lora;
  lin.peft->scaling = 1.0;
  lin.peft->lora_b = Tensor::zeros({6, 2});
  lin.peft->lora_a = random_tensor({2, 5}, rng);
  Tensor merged = merge(lin);
  CHECK(max_abs_diff(merged, lin.w) == 0.0);
}
