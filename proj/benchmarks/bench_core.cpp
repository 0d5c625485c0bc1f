#include <benchmark/benchmark.h>

#include "spt/sdt.hpp"

using namespace spt;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-1.0, 1.0);
  return t;
}

std::vector<double> random_image(int64_t size, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> img(static_cast<size_t>(size * size));
  for (double& v : img) v = rng.uniform();
  return img;
}

PromptSet box_prompt() {
  PromptSet p;
  p.boxes.push_back({8.0, 8.0, 52.0, 52.0});
  return p;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(1);
  Tensor a = random_tensor({n, n}, rng);
  Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_Softmax(benchmark::State& state) {
  Rng rng(2);
  Tensor x = random_tensor({64, 64}, rng);
  for (auto _ : state) {
    Tensor y = softmax(x, 1);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_Softmax);

static void BM_Gelu(benchmark::State& state) {
  Rng rng(3);
  Tensor x = random_tensor({64, 256}, rng);
  for (auto _ : state) {
    Tensor y = gelu(x);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_Gelu);

static void BM_EncoderForward(benchmark::State& state) {
  SptModel m = SptModel::build(ModelConfig{}, VraConfig{}, SdtConfig{});
  Tensor image = Tensor::from({64, 64}, random_image(64, 5));
  Tape::NoGrad guard(*m.tape);
  for (auto _ : state) {
    Tensor e = m.image_encoder.forward(image, m.cfg);
    benchmark::DoNotOptimize(e.data());
  }
}
BENCHMARK(BM_EncoderForward);

static void BM_FullForward(benchmark::State& state) {
  SptModel m = SptModel::build(ModelConfig{}, VraConfig{}, SdtConfig{});
  attach(m, PeftConfig{});
  std::vector<double> img = random_image(64, 7);
  PromptSet p = box_prompt();
  Tape::NoGrad guard(*m.tape);
  for (auto _ : state) {
    SptForward out = spt_forward(m, img, p);
    benchmark::DoNotOptimize(out.refine_logits.data());
  }
}
BENCHMARK(BM_FullForward);

static void BM_TrainStep(benchmark::State& state) {
  SptModel m = SptModel::build(ModelConfig{}, VraConfig{}, SdtConfig{});
  attach(m, PeftConfig{});
  std::vector<double> img = random_image(64, 9);
  PromptSet p = box_prompt();
  std::vector<uint8_t> gt(64 * 64, 0);
  for (int64_t y = 16; y < 44; ++y)
    for (int64_t x = 16; x < 44; ++x) gt[static_cast<size_t>(y * 64 + x)] = 1;
  for (auto _ : state) {
    SptForward out = spt_forward(m, img, p);
    Tensor loss = compute_loss(out.draft_logits, out.refine_logits, gt);
    m.tape->backward(loss);
    m.tape->clear();
    benchmark::DoNotOptimize(loss.data());
  }
}
BENCHMARK(BM_TrainStep);

static void BM_RelationMatrix(benchmark::State& state) {
  Rng rng(11);
  Tensor e = random_tensor({64, 64}, rng);
  for (auto _ : state) {
    RelationMatrix rel = compute_relation(e, 0.25);
    benchmark::DoNotOptimize(rel.a_star.data());
  }
}
BENCHMARK(BM_RelationMatrix);

static void BM_BoundaryIou(benchmark::State& state) {
  Rng rng(13);
  std::vector<uint8_t> a(64 * 64), b(64 * 64);
  for (auto& v : a) v = rng.uniform() < 0.3 ? 1 : 0;
  for (auto& v : b) v = rng.uniform() < 0.3 ? 1 : 0;
  for (auto _ : state) {
    double s = boundary_iou(a, b, 64, 64, 2);
    benchmark::DoNotOptimize(s);
  }
}
BENCHMARK(BM_BoundaryIou);

BENCHMARK_MAIN();
