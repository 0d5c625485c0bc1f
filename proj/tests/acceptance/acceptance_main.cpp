// Acceptance suite: one pass/fail line per criterion. Training-based
// criteria (9-11) share one set of seed-averaged runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spt/checkpoint.hpp"
#include "spt/config.hpp"
#include "spt/data.hpp"
#include "spt/metrics.hpp"
#include "spt/pgm.hpp"
#include "spt/sdt.hpp"

using namespace spt;
using clock_type = std::chrono::steady_clock;

namespace {

int g_failures = 0;
int g_only = 0;  // run a single criterion when nonzero
bool g_write_golden = false;

void report(int criterion, bool pass, const std::string& detail) {
  printf("[%s] criterion %2d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
  fflush(stdout);
  if (!pass) ++g_failures;
}

bool should_run(int criterion) { return g_only == 0 || g_only == criterion; }

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::vector<double> random_image(int64_t size, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> img(static_cast<size_t>(size * size));
  for (double& v : img) v = rng.uniform();
  return img;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

PromptSet random_prompt(uint64_t seed) {
  Rng rng(seed);
  PromptSet p;
  if (rng.uniform() < 0.5) {
    const double x0 = rng.uniform(0.0, 30.0), y0 = rng.uniform(0.0, 30.0);
    p.boxes.push_back({x0, y0, x0 + rng.uniform(8.0, 30.0), y0 + rng.uniform(8.0, 30.0)});
  }
  const int64_t n_points = rng.uniform_int(p.boxes.empty() ? 1 : 0, 3);
  for (int64_t i = 0; i < n_points; ++i)
    p.points.push_back({rng.uniform(0.0, 63.0), rng.uniform(0.0, 63.0),
                        static_cast<int>(rng.uniform_int(0, 1))});
  return p;
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient fidelity across encoder, decoders, every PEFT kind,
// and the VRA scales. >= 64 coordinates, max rel err < 1e-3, < 60 s.
// ---------------------------------------------------------------------------
void criterion_1() {
  const auto t0 = clock_type::now();
  DataSpec spec;
  auto probe = generate_dataset(7, 4, 64, spec);

  double max_rel = 0.0;
  int64_t coords = 0;
  std::map<std::string, int64_t> group_hits;
  for (nn::PeftKind kind : {nn::PeftKind::lora, nn::PeftKind::dora, nn::PeftKind::adapter}) {
    ModelConfig cfg;
    VraConfig vra;
    vra.placement = VraPlacement::both;
    SptModel m = SptModel::build(cfg, vra, SdtConfig{});
    PeftConfig pc;
    pc.kind = kind;
    attach(m, pc);
    GradCheckOptions options;
    options.samples = 22;
    options.h = 1e-5;
    options.tol_rel = 1e-3;
    FiniteDiffReport rep = grad_check(m, probe, options);
    max_rel = std::max(max_rel, rep.max_rel_error);
    coords += static_cast<int64_t>(rep.entries.size());
    for (const FiniteDiffEntry& e : rep.entries) {
      if (e.param.find(".vra_") != std::string::npos)
        group_hits["vra_beta"]++;
      else
        group_hits[e.param.substr(0, e.param.find('.'))]++;
    }
  }
  const double secs = seconds_since(t0);
  const bool spans = group_hits.count("image_encoder") && group_hits.count("draft_decoder") &&
                     group_hits.count("refine_decoder") && group_hits.count("vra_beta");
  std::ostringstream os;
  os << "gradient fidelity: max rel err " << std::scientific << std::setprecision(2) << max_rel
     << " over " << coords << " coords (lora+dora+adapter), " << std::fixed
     << std::setprecision(1) << secs << " s";
  report(1, coords >= 64 && max_rel < 1e-3 && spans && secs < 60.0, os.str());
}

// ---------------------------------------------------------------------------
// Criterion 2: fresh LoRA / DoRA / Adapter attachments leave logits within
// 1e-12 of the base model on 8 random inputs.
// ---------------------------------------------------------------------------
void criterion_2() {
  SptModel base = SptModel::build(ModelConfig{}, VraConfig{}, SdtConfig{});
  std::vector<std::pair<std::vector<double>, PromptSet>> inputs;
  for (uint64_t i = 0; i < 8; ++i)
    inputs.emplace_back(random_image(64, 100 + i), random_prompt(200 + i));

  std::vector<SptForward> base_out;
  for (auto& [img, prompt] : inputs) base_out.push_back(spt_forward(base, img, prompt));

  double worst = 0.0;
  for (nn::PeftKind kind : {nn::PeftKind::lora, nn::PeftKind::dora, nn::PeftKind::adapter}) {
    SptModel m = SptModel::build(ModelConfig{}, VraConfig{}, SdtConfig{});
    PeftConfig pc;
    pc.kind = kind;
    attach(m, pc);
    for (size_t i = 0; i < inputs.size(); ++i) {
      SptForward out = spt_forward(m, inputs[i].first, inputs[i].second);
      worst = std::max(worst, max_abs_diff(out.draft_logits, base_out[i].draft_logits));
      worst = std::max(worst, max_abs_diff(out.refine_logits, base_out[i].refine_logits));
    }
  }
  std::ostringstream os;
  os << "peft init identities: max |delta logit| " << std::scientific << std::setprecision(2)
     << worst << " across lora/dora/adapter on 8 inputs";
  report(2, worst < 1e-12, os.str());
}

// ---------------------------------------------------------------------------
// Criterion 3: merged LoRA / DoRA weights reproduce unmerged forwards within
// 1e-9 on 100 random small matrices.
// ---------------------------------------------------------------------------
void criterion_3() {
  Rng rng(31);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const int64_t d = rng.uniform_int(4, 16);
    const int64_t k = rng.uniform_int(4, 16);
    const int64_t r = rng.uniform_int(1, std::min<int64_t>(4, std::min(d, k) - 1));
    for (nn::PeftKind kind : {nn::PeftKind::lora, nn::PeftKind::dora}) {
      nn::Linear lin;
      lin.w = Tensor::zeros({d, k});
      for (int64_t i = 0; i < lin.w.numel(); ++i) lin.w.data()[i] = rng.uniform(-1.0, 1.0);
      lin.b = Tensor::zeros({1, d});
      lin.peft = nn::PeftAttachment{};
      lin.peft->kind = kind;
      lin.peft->scaling = rng.uniform(0.5, 2.0);
      lin.peft->lora_b = Tensor::zeros({d, r});
      lin.peft->lora_a = Tensor::zeros({r, k});
      for (int64_t i = 0; i < lin.peft->lora_b.numel(); ++i)
        lin.peft->lora_b.data()[i] = rng.uniform(-0.5, 0.5);
      for (int64_t i = 0; i < lin.peft->lora_a.numel(); ++i)
        lin.peft->lora_a.data()[i] = rng.uniform(-0.5, 0.5);
      if (kind == nn::PeftKind::dora) {
        lin.peft->dora_m = Tensor::zeros({1, k});
        for (int64_t i = 0; i < k; ++i) lin.peft->dora_m.data()[i] = rng.uniform(0.5, 2.0);
      }
      Tensor x = Tensor::zeros({3, k});
      for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = rng.uniform(-1.0, 1.0);
      Tensor unmerged = lin.forward(x);
      Tensor merged = add(matmul(x, merge(lin), false, true), lin.b);
      worst = std::max(worst, max_abs_diff(unmerged, merged));
    }
  }
  std::ostringstream os;
  os << "merge equivalence: max |merged - unmerged| " << std::scientific << std::setprecision(2)
     << worst << " over 100 random matrices (lora and dora)";
  report(3, worst < 1e-9, os.str());
}

// ---------------------------------------------------------------------------
// Criterion 4: relation-matrix invariants on 1000 random token sets.
// ---------------------------------------------------------------------------
void criterion_4() {
  Rng rng(41);
  double worst_row_sum = 0.0;
  double worst_scale_diff = 0.0;
  bool diag_ok = true;
  bool band_ok = true;
  for (int rep = 0; rep < 1000; ++rep) {
    const int64_t n = rng.uniform_int(2, 32);
    const int64_t d = rng.uniform_int(3, 64);
    const double alpha = rng.uniform(0.0, 0.5);
    Tensor e = Tensor::zeros({n, d});
    for (int64_t i = 0; i < e.numel(); ++i) e.data()[i] = rng.uniform(-2.0, 2.0);
    RelationMatrix rel = compute_relation(e, alpha);
    const double threshold = alpha / static_cast<double>(d);
    for (int64_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        row += rel.a.at({i, j});
        const double s = rel.a_star.at({i, j});
        if (s != 0.0 && s < threshold) band_ok = false;
      }
      worst_row_sum = std::max(worst_row_sum, std::abs(row - 1.0));
      if (rel.a.at({i, i}) != 0.0) diag_ok = false;
    }
    // positive per-row rescaling leaves the thresholded matrix unchanged
    Tensor scaled = e.clone();
    for (int64_t r = 0; r < n; ++r) {
      const double c = rng.uniform(0.2, 5.0);
      for (int64_t j = 0; j < d; ++j) scaled.data()[r * d + j] *= c;
    }
    RelationMatrix rel2 = compute_relation(scaled, alpha);
    worst_scale_diff = std::max(worst_scale_diff, max_abs_diff(rel.a_star, rel2.a_star));
  }
  std::ostringstream os;
  os << "relation invariants: row-sum dev " << std::scientific << std::setprecision(2)
     << worst_row_sum << ", rescale dev " << worst_scale_diff << ", diag "
     << (diag_ok ? "exact" : "BROKEN") << ", threshold band "
     << (band_ok ? "empty" : "VIOLATED") << " on 1000 instances";
  report(4, worst_row_sum <= 1e-9 && worst_scale_diff <= 1e-9 && diag_ok && band_ok, os.str());
}

// ---------------------------------------------------------------------------
// Criterion 5: with beta = 0 the full forward equals the no-VRA forward
// within 1e-12.
// ---------------------------------------------------------------------------
void criterion_5() {
  ModelConfig cfg;
  cfg.seed = 5;
  VraConfig with;
  with.placement = VraPlacement::both;
  VraConfig without;
  without.placement = VraPlacement::none;
  SptModel m_with = SptModel::build(cfg, with, SdtConfig{});
  SptModel m_without = SptModel::build(cfg, without, SdtConfig{});
  attach(m_with, PeftConfig{});
  attach(m_without, PeftConfig{});

  double worst = 0.0;
  for (uint64_t i = 0; i < 4; ++i) {
    std::vector<double> img = random_image(64, 300 + i);
    PromptSet p = random_prompt(400 + i);
    SptForward a = spt_forward(m_with, img, p);
    SptForward b = spt_forward(m_without, img, p);
    worst = std::max(worst, max_abs_diff(a.draft_logits, b.draft_logits));
    worst = std::max(worst, max_abs_diff(a.refine_logits, b.refine_logits));
    m_with.tape->clear();
    m_without.tape->clear();
  }
  std::ostringstream os;
  os << "vra-off identity: max |delta logit| " << std::scientific << std::setprecision(2)
     << worst << " between beta=0 and no-VRA forwards";
  report(5, worst < 1e-12, os.str());
}

// ---------------------------------------------------------------------------
// Criterion 6: parameter accounting arithmetic.
// ---------------------------------------------------------------------------
void criterion_6() {
  const double r1 = trainable_ratio_percent(93.636e6, 0.372e6);
  const double r2 = trainable_ratio_percent(89.719e6, 0.326e6);
  std::ostringstream os;
  os << "parameter accounting: (93.636M, 0.372M) -> " << std::fixed << std::setprecision(4) << r1
     << "%, (89.719M, 0.326M) -> " << r2 << "%";
  report(6, std::abs(r1 - 0.397) < 0.001 && std::abs(r2 - 0.364) < 0.001, os.str());
}

// ---------------------------------------------------------------------------
// Criterion 7: iou and boundary_iou match exhaustive pixel-set brute force on
// every pair of 3x3 masks, exactly, in under 30 s.
// ---------------------------------------------------------------------------
void criterion_7() {
  const auto t0 = clock_type::now();
  // Brute-force oracles, written directly against the set definitions.
  auto oracle_iou = [](const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      inter += (a[i] && b[i]);
      uni += (a[i] || b[i]);
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  };
  auto oracle_boundary = [](const std::vector<uint8_t>& m, int64_t band) {
    std::vector<uint8_t> out(9, 0);
    for (int64_t y = 0; y < 3; ++y)
      for (int64_t x = 0; x < 3; ++x) {
        if (!m[static_cast<size_t>(y * 3 + x)]) continue;
        bool boundary = false;
        for (int64_t qy = y - band; qy <= y + band && !boundary; ++qy)
          for (int64_t qx = x - band; qx <= x + band; ++qx)
            if (qx < 0 || qy < 0 || qx >= 3 || qy >= 3 ||
                !m[static_cast<size_t>(qy * 3 + qx)]) {
              boundary = true;
              break;
            }
        if (boundary) out[static_cast<size_t>(y * 3 + x)] = 1;
      }
    return out;
  };

  std::vector<std::vector<uint8_t>> masks(512, std::vector<uint8_t>(9));
  std::vector<std::vector<uint8_t>> boundaries(512);
  for (uint32_t bits = 0; bits < 512; ++bits) {
    for (int i = 0; i < 9; ++i) masks[bits][static_cast<size_t>(i)] = (bits >> i) & 1;
    boundaries[bits] = oracle_boundary(masks[bits], 1);
    if (boundary_region(masks[bits], 3, 3, 1) != boundaries[bits]) {
      report(7, false, "metric oracle: boundary_region mismatch");
      return;
    }
  }
  int64_t pairs = 0;
  for (uint32_t a = 0; a < 512; ++a)
    for (uint32_t b = 0; b < 512; ++b) {
      if (iou(masks[a], masks[b]) != oracle_iou(masks[a], masks[b])) {
        report(7, false, "metric oracle: iou mismatch");
        return;
      }
      if (boundary_iou(masks[a], masks[b], 3, 3, 1) !=
          oracle_iou(boundaries[a], boundaries[b])) {
        report(7, false, "metric oracle: boundary_iou mismatch");
        return;
      }
      ++pairs;
    }
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << "metric oracle equivalence: " << pairs << " 3x3 mask pairs exact, " << std::fixed
     << std::setprecision(1) << secs << " s";
  report(7, pairs == 512 * 512 && secs < 30.0, os.str());
}

// ---------------------------------------------------------------------------
// Criterion 8: preprocessing protocol against checked-in golden files.
// The pinned 16-sample set mixes small and large defects so the strict
// sub-50-px filter is exercised.
// ---------------------------------------------------------------------------
std::string derive_preprocessing_json() {
  DataSpec spec;
  spec.small_defect_prob = 0.55;
  spec.min_defects = 2;
  spec.max_defects = 4;
  spec.min_total_area = 120;
  auto samples = generate_dataset(20260809, 16, 64, spec);

  std::ostringstream os;
  os << "[\n";
  for (size_t si = 0; si < samples.size(); ++si) {
    const SyntheticSample& s = samples[si];
    auto regions = connected_components(s.mask, 64, 64);
    auto kept = filter_small_regions(regions, 50);
    os << "  {\"sample\": " << si << ", \"regions\": [";
    for (size_t r = 0; r < regions.size(); ++r) {
      const auto& reg = regions[r];
      os << (r ? ", " : "") << "[" << reg.area << ", " << reg.x0 << ", " << reg.y0 << ", "
         << reg.x1 << ", " << reg.y1 << "]";
    }
    os << "],\n   \"kept\": [";
    for (size_t r = 0; r < kept.size(); ++r) os << (r ? ", " : "") << kept[r].area;
    os << "],\n   \"one_box\": ";
    if (kept.empty()) {
      os << "null";
    } else {
      PromptSet::Box box = derive_one_box(kept);
      os << "[" << box.x0 << ", " << box.y0 << ", " << box.x1 << ", " << box.y1 << "]";
    }
    os << ",\n   \"multi_boxes\": [";
    if (!kept.empty()) {
      auto boxes = derive_multi_boxes(kept);
      for (size_t b = 0; b < boxes.size(); ++b)
        os << (b ? ", " : "") << "[" << boxes[b].x0 << ", " << boxes[b].y0 << ", " << boxes[b].x1
           << ", " << boxes[b].y1 << "]";
    }
    os << "],\n   \"points5\": [";
    {
      auto pts = sample_points(s.mask, 64, 64, 5, mix_seed({s.sample_seed, 5}));
      for (size_t p = 0; p < pts.size(); ++p)
        os << (p ? ", " : "") << "[" << static_cast<int64_t>(pts[p].x) << ", "
           << static_cast<int64_t>(pts[p].y) << "]";
    }
    os << "],\n   \"points10\": [";
    {
      auto pts = sample_points(s.mask, 64, 64, 10, mix_seed({s.sample_seed, 10}));
      for (size_t p = 0; p < pts.size(); ++p)
        os << (p ? ", " : "") << "[" << static_cast<int64_t>(pts[p].x) << ", "
           << static_cast<int64_t>(pts[p].y) << "]";
    }
    os << "]}" << (si + 1 < samples.size() ? "," : "") << "\n";
  }
  os << "]\n";
  return os.str();
}

void criterion_8() {
  const std::string derived = derive_preprocessing_json();
  const std::string golden_path = std::string(SPT_GOLDEN_DIR) + "/preprocessing_16.json";
  if (g_write_golden) {
    std::ofstream out(golden_path, std::ios::binary);
    out << derived;
    printf("wrote %s (%zu bytes)\n", golden_path.c_str(), derived.size());
    return;
  }
  std::ifstream in(golden_path, std::ios::binary);
  if (!in) {
    report(8, false, "preprocessing protocol: golden file missing: " + golden_path);
    return;
  }
  std::string golden(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
  std::ostringstream os;
  os << "preprocessing protocol: 16-sample derivation "
     << (derived == golden ? "matches" : "DIFFERS from") << " golden bytes (" << derived.size()
     << " bytes)";
  report(8, derived == golden, os.str());
}

// ---------------------------------------------------------------------------
// Criteria 9-11: seed-averaged training runs, shared across the three checks.
// ---------------------------------------------------------------------------

struct RunOutput {
  std::vector<EpochLog> log;
  std::string log_text;     // JSON lines with the volatile wall_ms excluded
  std::string report_json;  // full four-mode evaluation report
};

std::string log_to_text(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os.precision(17);
  for (const EpochLog& e : log)
    os << "{\"epoch\":" << e.epoch << ",\"lr\":" << e.lr << ",\"loss\":" << e.loss
       << ",\"draft_miou\":" << e.draft_miou << ",\"refine_miou\":" << e.refine_miou << "}\n";
  return os.str();
}

RunOutput run_training(uint64_t seed, bool sdt_on, bool vra_on) {
  DataSpec spec;
  auto train_set = generate_dataset(seed, 512, 64, spec);
  auto eval_set = generate_dataset(mix_seed({seed, 0x4556414cull}), 128, 64, spec);

  ModelConfig mc;
  mc.seed = seed;
  VraConfig vc;
  vc.placement = vra_on ? VraPlacement::both : VraPlacement::none;
  SdtConfig sc;
  sc.enabled = sdt_on;
  SptModel model = SptModel::build(mc, vc, sc);
  attach(model, PeftConfig{});

  TrainConfig tc;
  tc.seed = seed;  // defaults: 16 epochs, lr 1e-3 dropped x0.1 after epoch 10, batch 8
  RunOutput out;
  TrainResult result = train(model, train_set, eval_set, tc);
  out.log = result.log;
  out.log_text = log_to_text(result.log);

  EvalOptions eo;
  eo.min_area = 8;
  eo.point_seed = seed;
  PredictFn fn = [&model](const SyntheticSample& s, const PromptSet& p) {
    return predict(model, s.image, p).refine_mask;
  };
  out.report_json = report_json(evaluate(fn, eval_set, eo));
  return out;
}

void criteria_9_10_11() {
  const auto t0 = clock_type::now();
  const std::vector<uint64_t> seeds = {0, 1, 2};

  std::map<std::string, std::vector<RunOutput>> runs;
  struct Config {
    const char* name;
    bool sdt, vra;
  };
  const std::vector<Config> configs = {
      {"spt", true, true}, {"sdt_only", true, false}, {"peft_only", false, false}};
  for (const Config& c : configs) {
    for (uint64_t seed : seeds) {
      runs[c.name].push_back(run_training(seed, c.sdt, c.vra));
      fprintf(stderr, "  [run] %s seed %llu: final refine mIoU %.4f (%.0f s elapsed)\n", c.name,
              static_cast<unsigned long long>(seed), runs[c.name].back().log.back().refine_miou,
              seconds_since(t0));
    }
  }

  // ---- criterion 9: training sanity on the full SPT configuration ----
  {
    const std::vector<RunOutput>& spt = runs["spt"];
    const size_t epochs = spt[0].log.size();
    double mean_first_loss = 0.0, mean_final_loss = 0.0, mean_final_refine = 0.0;
    for (const RunOutput& r : spt) {
      mean_first_loss += r.log.front().loss;
      mean_final_loss += r.log.back().loss;
      mean_final_refine += r.log.back().refine_miou;
    }
    mean_first_loss /= 3.0;
    mean_final_loss /= 3.0;
    mean_final_refine /= 3.0;

    bool tracks = true;
    double mean_gap = 0.0;
    for (size_t e = 0; e < epochs; ++e) {
      double refine = 0.0, draft = 0.0;
      for (const RunOutput& r : spt) {
        refine += r.log[e].refine_miou;
        draft += r.log[e].draft_miou;
      }
      refine /= 3.0;
      draft /= 3.0;
      if (refine < draft - 0.02) tracks = false;
      mean_gap += (refine - draft) / static_cast<double>(epochs);
    }
    const double secs = seconds_since(t0);
    std::ostringstream os;
    os << "training sanity: loss " << std::fixed << std::setprecision(3) << mean_first_loss
       << " -> " << mean_final_loss << " (ratio " << mean_final_loss / mean_first_loss
       << "), final refine mIoU " << mean_final_refine << ", refine-draft mean gap "
       << std::setprecision(4) << mean_gap << ", seeds {0,1,2}, " << std::setprecision(0) << secs
       << " s";
    report(9,
           mean_final_loss < 0.5 * mean_first_loss && mean_final_refine >= 0.5 && tracks &&
               mean_gap > 0.0,
           os.str());
  }

  // ---- criterion 10: ablation ordering SPT >= SDT-only >= PEFT-only ----
  {
    auto mean_final = [&](const char* name) {
      double v = 0.0;
      for (const RunOutput& r : runs[name]) v += r.log.back().refine_miou;
      return v / 3.0;
    };
    const double spt = mean_final("spt");
    const double sdt = mean_final("sdt_only");
    const double peft = mean_final("peft_only");
    std::ostringstream os;
    os << "ablation ordering: SPT " << std::fixed << std::setprecision(4) << spt << " >= SDT "
       << sdt << " >= PEFT " << peft << " (guard -0.01)";
    report(10, spt >= sdt - 0.01 && sdt >= peft - 0.01, os.str());
  }

  // ---- criterion 11: determinism of the seed-0 run ----
  {
    RunOutput again = run_training(0, true, true);
    const RunOutput& first = runs["spt"][0];
    const bool log_same = again.log_text == first.log_text;
    const bool report_same = again.report_json == first.report_json;
    std::ostringstream os;
    os << "determinism: repeated seed-0 run gives "
       << (log_same ? "an identical training log" : "a DIFFERENT training log") << " and "
       << (report_same ? "an identical evaluation report" : "a DIFFERENT evaluation report");
    report(11, log_same && report_same, os.str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) g_only = std::atoi(argv[i + 1]);
    if (std::strcmp(argv[i], "--write-golden") == 0) g_write_golden = true;
  }
  if (g_write_golden) {
    criterion_8();
    return 0;
  }

  if (should_run(1)) criterion_1();
  if (should_run(2)) criterion_2();
  if (should_run(3)) criterion_3();
  if (should_run(4)) criterion_4();
  if (should_run(5)) criterion_5();
  if (should_run(6)) criterion_6();
  if (should_run(7)) criterion_7();
  if (should_run(8)) criterion_8();
  if (should_run(9) || should_run(10) || should_run(11)) criteria_9_10_11();

  if (g_failures > 0) {
    printf("%d criterion(s) failed\n", g_failures);
    return 1;
  }
  printf("all acceptance criteria passed\n");
  return 0;
}
