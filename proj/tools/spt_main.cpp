// Command-line front end: dataset generation, training with ablation
// switches, evaluation, single-image prediction, and gradient checking.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "spt/checkpoint.hpp"
#include "spt/config.hpp"
#include "spt/data.hpp"
#include "spt/metrics.hpp"
#include "spt/pgm.hpp"
#include "spt/sdt.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using namespace spt;

namespace {

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::io:
      return 2;
    case ErrorKind::diverged:
      return 3;
    default:
      return 1;  // usage / config / schema / contract
  }
}

// ---------------------------------------------------------------------------
// Dotted-path overrides on top of an optional JSON config file.
// ---------------------------------------------------------------------------

const std::vector<std::string> kOverrideKeys = {
    "model.image_size", "model.patch_size", "model.encoder_dim", "model.encoder_depth",
    "model.encoder_heads", "model.decoder_dim", "model.decoder_heads", "model.num_mask_tokens",
    "model.seed", "peft.kind", "peft.rank", "peft.scaling", "peft.targets",
    "peft.target_layer_kinds", "vra.alpha", "vra.placement", "vra.use_raw_relation",
    "sdt.enabled", "sdt.share_decoder", "sdt.detach_draft", "train.epochs", "train.lr",
    "train.lr_drop_epoch", "train.lr_drop_factor", "train.batch_size", "train.seed",
    "train.adam_beta1", "train.adam_beta2", "train.adam_eps", "train.weight_decay",
    "train.prompt_mode", "train.min_area", "data.seed", "data.n_train", "data.n_eval",
    "data.size", "data.min_area", "eval.modes", "eval.point_seed", "eval.biou_band"};

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorKind::config, "config: " + key + " expects true|false");
}

std::vector<std::string> split_csv(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(v);
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  // Route the raw string through the JSON codec so the CLI and the config
  // file share one set of parsers and validators.
  auto as_ll = [&] { return std::stoll(value); };
  auto as_ull = [&] { return std::stoull(value); };
  auto as_d = [&] { return std::stod(value); };

  if (key == "model.image_size") cfg.model.image_size = as_ll();
  else if (key == "model.patch_size") cfg.model.patch_size = as_ll();
  else if (key == "model.encoder_dim") cfg.model.encoder_dim = as_ll();
  else if (key == "model.encoder_depth") cfg.model.encoder_depth = as_ll();
  else if (key == "model.encoder_heads") cfg.model.encoder_heads = as_ll();
  else if (key == "model.decoder_dim") cfg.model.decoder_dim = as_ll();
  else if (key == "model.decoder_heads") cfg.model.decoder_heads = as_ll();
  else if (key == "model.num_mask_tokens") cfg.model.num_mask_tokens = as_ll();
  else if (key == "model.seed") cfg.model.seed = as_ull();
  else if (key == "peft.kind") {
    ordered_json j;
    j["peft"] = ordered_json{{"kind", value}};
    RunConfig tmp = run_config_from_json(j.dump());
    cfg.peft.kind = tmp.peft.kind;
  } else if (key == "peft.rank") cfg.peft.rank = as_ll();
  else if (key == "peft.scaling") cfg.peft.scaling = as_d();
  else if (key == "peft.targets") {
    ordered_json j;
    j["peft"] = ordered_json{{"targets", split_csv(value)}};
    RunConfig tmp = run_config_from_json(j.dump());
    cfg.peft.targets = tmp.peft.targets;
  } else if (key == "peft.target_layer_kinds") {
    ordered_json j;
    j["peft"] = ordered_json{{"target_layer_kinds", split_csv(value)}};
    RunConfig tmp = run_config_from_json(j.dump());
    cfg.peft.target_layer_kinds = tmp.peft.target_layer_kinds;
  } else if (key == "vra.alpha") cfg.vra.alpha = as_d();
  else if (key == "vra.placement") cfg.vra.placement = vra_placement_from_string(value);
  else if (key == "vra.use_raw_relation") cfg.vra.use_raw_relation = parse_bool(value, key);
  else if (key == "sdt.enabled") cfg.sdt.enabled = parse_bool(value, key);
  else if (key == "sdt.share_decoder") cfg.sdt.share_decoder = parse_bool(value, key);
  else if (key == "sdt.detach_draft") cfg.sdt.detach_draft = parse_bool(value, key);
  else if (key == "train.epochs") cfg.train.epochs = as_ll();
  else if (key == "train.lr") cfg.train.lr = as_d();
  else if (key == "train.lr_drop_epoch") cfg.train.lr_drop_epoch = as_ll();
  else if (key == "train.lr_drop_factor") cfg.train.lr_drop_factor = as_d();
  else if (key == "train.batch_size") cfg.train.batch_size = as_ll();
  else if (key == "train.seed") cfg.train.seed = as_ull();
  else if (key == "train.adam_beta1") cfg.train.adam_beta1 = as_d();
  else if (key == "train.adam_beta2") cfg.train.adam_beta2 = as_d();
  else if (key == "train.adam_eps") cfg.train.adam_eps = as_d();
  else if (key == "train.weight_decay") cfg.train.weight_decay = as_d();
  else if (key == "train.prompt_mode") cfg.train.prompt_mode = prompt_mode_from_string(value);
  else if (key == "train.min_area") cfg.train.min_area = as_ll();
  else if (key == "data.seed") cfg.data.seed = as_ull();
  else if (key == "data.n_train") cfg.data.n_train = as_ll();
  else if (key == "data.n_eval") cfg.data.n_eval = as_ll();
  else if (key == "data.size") cfg.data.size = as_ll();
  else if (key == "data.min_area") cfg.data.min_area = as_ll();
  else if (key == "eval.modes") {
    cfg.eval.modes.clear();
    for (const std::string& m : split_csv(value)) cfg.eval.modes.push_back(eval_mode_from_string(m));
  } else if (key == "eval.point_seed") cfg.eval.point_seed = as_ull();
  else if (key == "eval.biou_band") cfg.eval.biou_band = as_ll();
  else fail(ErrorKind::config, "config: unknown override " + key);
}

RunConfig resolve_config(const std::string& config_path,
                         const std::map<std::string, std::string>& overrides) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = load_run_config(config_path);
  for (const auto& [key, value] : overrides) apply_override(cfg, key, value);
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Dataset on disk: PGM pairs plus a JSON index.
// ---------------------------------------------------------------------------

std::string sample_name(int64_t id) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << id;
  return os.str();
}

DataSpec training_data_spec() { return DataSpec{}; }

void cmd_gen_data(const RunConfig& cfg, const std::string& out_dir) {
  const DataSpec spec = training_data_spec();
  std::vector<SyntheticSample> train_set =
      generate_dataset(cfg.data.seed, cfg.data.n_train, cfg.data.size, spec);
  std::vector<SyntheticSample> eval_set = generate_dataset(
      mix_seed({cfg.data.seed, 0x4556414cull}), cfg.data.n_eval, cfg.data.size, spec);

  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "train", ec);
  fs::create_directories(fs::path(out_dir) / "eval", ec);
  if (ec) fail(ErrorKind::io, "gen-data: cannot create " + out_dir);

  ordered_json index;
  index["seed"] = cfg.data.seed;
  index["size"] = cfg.data.size;
  index["min_area"] = cfg.data.min_area;
  ordered_json samples = ordered_json::array();

  auto emit = [&](const std::vector<SyntheticSample>& set, const std::string& split) {
    for (size_t i = 0; i < set.size(); ++i) {
      const SyntheticSample& s = set[i];
      const std::string base = split + "/" + sample_name(static_cast<int64_t>(i));
      write_pgm(out_dir + "/" + base + ".pgm", s.size, s.size, quantize_image(s.image));
      write_mask_pgm(out_dir + "/" + base + "_mask.pgm", s.size, s.size, s.mask);
      ordered_json rec;
      rec["id"] = static_cast<int64_t>(i);
      rec["split"] = split;
      rec["image"] = base + ".pgm";
      rec["mask"] = base + "_mask.pgm";
      rec["sample_seed"] = s.sample_seed;
      samples.push_back(rec);
    }
  };
  emit(train_set, "train");
  emit(eval_set, "eval");
  index["samples"] = samples;

  std::ofstream out(out_dir + "/index.json");
  if (!out) fail(ErrorKind::io, "gen-data: cannot write index.json");
  out << index.dump(2) << "\n";
  std::cout << "wrote " << train_set.size() << " train + " << eval_set.size()
            << " eval samples to " << out_dir << "\n";
}

struct Dataset {
  std::vector<SyntheticSample> train;
  std::vector<SyntheticSample> eval;
};

Dataset load_dataset(const std::string& dir) {
  std::ifstream in(dir + "/index.json");
  if (!in) fail(ErrorKind::io, "dataset: cannot open " + dir + "/index.json");
  ordered_json index;
  try {
    index = ordered_json::parse(in);
  } catch (const std::exception& e) {
    fail(ErrorKind::io, std::string("dataset: index parse error: ") + e.what());
  }
  Dataset ds;
  for (const auto& rec : index["samples"]) {
    SyntheticSample s;
    int64_t w = 0, h = 0;
    s.image = dequantize_image(read_pgm(dir + "/" + rec["image"].get<std::string>(), w, h));
    s.size = w;
    int64_t mw = 0, mh = 0;
    s.mask = read_mask_pgm(dir + "/" + rec["mask"].get<std::string>(), mw, mh);
    if (mw != w || mh != h) fail(ErrorKind::io, "dataset: image/mask size mismatch");
    s.sample_seed = rec["sample_seed"].get<uint64_t>();
    if (rec["split"].get<std::string>() == "train")
      ds.train.push_back(std::move(s));
    else
      ds.eval.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// train / eval / predict / grad-check
// ---------------------------------------------------------------------------

std::string log_line(const EpochLog& e) {
  ordered_json j;
  j["epoch"] = e.epoch;
  j["lr"] = e.lr;
  j["loss"] = e.loss;
  j["draft_miou"] = e.draft_miou;
  j["refine_miou"] = e.refine_miou;
  j["wall_ms"] = e.wall_ms;
  return j.dump();
}

int cmd_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_ckpt,
              std::string log_path) {
  Dataset ds = load_dataset(data_dir);
  if (log_path.empty()) log_path = out_ckpt + ".log.jsonl";

  SptModel model = SptModel::build(cfg.model, cfg.vra, cfg.sdt);
  attach(model, cfg.peft);

  try {
    TrainResult result = train(model, ds.train, ds.eval, cfg.train);
    std::ofstream log(log_path);
    if (!log) fail(ErrorKind::io, "train: cannot write " + log_path);
    for (const EpochLog& e : result.log) log << log_line(e) << "\n";
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::diverged) {
      // The model holds the last finite epoch; keep it for post-mortems.
      save_checkpoint(out_ckpt, model, cfg);
      std::cerr << "error: " << e.what() << " (last-good checkpoint kept)\n";
      return 3;
    }
    throw;
  }
  save_checkpoint(out_ckpt, model, cfg);
  std::cout << "checkpoint: " << out_ckpt << "\nlog: " << log_path << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt, const std::string& data_dir,
             const std::string& report_prefix, bool oracle, int64_t workers) {
  Dataset ds = load_dataset(data_dir);
  SptModel model = load_checkpoint(ckpt, cfg);

  EvalOptions options;
  options.modes = cfg.eval.modes;
  options.point_seed = cfg.eval.point_seed;
  options.min_area = cfg.data.min_area;
  options.boundary_band = cfg.eval.biou_band;
  options.workers = workers;
  options.oracle = oracle;

  PredictFn fn = [&model](const SyntheticSample& sample, const PromptSet& prompt) {
    return predict(model, sample.image, prompt).refine_mask;
  };
  EvalReport report = evaluate(fn, ds.eval, options);

  const std::string table = report_table(report);
  std::cout << table;
  {
    std::ofstream out(report_prefix + ".json");
    if (!out) fail(ErrorKind::io, "eval: cannot write report json");
    out << report_json(report);
  }
  {
    std::ofstream out(report_prefix + ".txt");
    if (!out) fail(ErrorKind::io, "eval: cannot write report table");
    out << table;
  }
  return 0;
}

PromptSet parse_prompt_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrorKind::config, std::string("prompts: JSON parse error: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::config, "prompts: top level must be an object");
  PromptSet prompts;
  for (const auto& [key, value] : j.items()) {
    if (key == "points") {
      if (!value.is_array()) fail(ErrorKind::config, "prompts: field 'points' must be an array");
      for (const auto& p : value) {
        if (!p.is_array() || p.size() != 3 || !p[0].is_number() || !p[1].is_number() ||
            !p[2].is_number())
          fail(ErrorKind::config, "prompts: field 'points' entries must be [x,y,label]");
        prompts.points.push_back(
            PromptSet::Point{p[0].get<double>(), p[1].get<double>(), p[2].get<int>()});
      }
    } else if (key == "boxes") {
      if (!value.is_array()) fail(ErrorKind::config, "prompts: field 'boxes' must be an array");
      for (const auto& b : value) {
        if (!b.is_array() || b.size() != 4)
          fail(ErrorKind::config, "prompts: field 'boxes' entries must be [x0,y0,x1,y1]");
        prompts.boxes.push_back(PromptSet::Box{b[0].get<double>(), b[1].get<double>(),
                                               b[2].get<double>(), b[3].get<double>()});
      }
    } else {
      fail(ErrorKind::config, "prompts: unknown field '" + key + "'");
    }
  }
  return prompts;
}

int cmd_predict(const RunConfig& cfg, const std::string& ckpt, const std::string& image_path,
                const std::string& prompt_text, const std::string& out_prefix) {
  int64_t w = 0, h = 0;
  std::vector<double> image = dequantize_image(read_pgm(image_path, w, h));
  PromptSet prompts = parse_prompt_json(prompt_text);
  if (prompts.empty()) fail(ErrorKind::missing_prompt, "predict: prompt set is empty");

  SptModel model = load_checkpoint(ckpt, cfg);
  if (w != model.cfg.image_size || h != model.cfg.image_size)
    fail(ErrorKind::dimension, "predict: image size does not match the checkpoint config");

  const auto t0 = std::chrono::steady_clock::now();
  Prediction pred = predict(model, image, prompts);
  const auto ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0)
          .count();

  write_mask_pgm(out_prefix + "_draft.pgm", w, h, pred.draft_mask);
  write_mask_pgm(out_prefix + "_refine.pgm", w, h, pred.refine_mask);
  ordered_json meta;
  meta["iou_pred"] = pred.iou_pred;
  meta["wall_ms"] = ms;
  std::ofstream out(out_prefix + "_meta.json");
  if (!out) fail(ErrorKind::io, "predict: cannot write meta json");
  out << meta.dump(2) << "\n";
  std::cout << "wrote " << out_prefix << "_draft.pgm, _refine.pgm, _meta.json\n";
  return 0;
}

int cmd_grad_check(const RunConfig& cfg, int64_t n_samples, double h, double tol) {
  DataSpec spec = training_data_spec();
  std::vector<SyntheticSample> probe =
      generate_dataset(mix_seed({cfg.data.seed, 0x47434b21ull}), 4, cfg.data.size, spec);

  SptModel model = SptModel::build(cfg.model, cfg.vra, cfg.sdt);
  attach(model, cfg.peft);

  GradCheckOptions options;
  options.samples = n_samples;
  options.h = h;
  options.tol_rel = tol;
  options.seed = cfg.model.seed;

  const auto t0 = std::chrono::steady_clock::now();
  FiniteDiffReport report = grad_check(model, probe, options);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::cout << "checked " << report.entries.size() << " coordinates in " << std::fixed
            << std::setprecision(1) << secs << " s\n";
  std::cout << "max relative error: " << std::scientific << std::setprecision(3)
            << report.max_rel_error << " (tolerance " << tol << ")\n";
  if (!report.passed(tol)) {
    for (const FiniteDiffEntry& e : report.entries)
      if (e.rel_error >= tol)
        std::cout << "  mismatch " << e.param << "[" << e.index << "] analytic=" << e.analytic
                  << " numeric=" << e.numeric << " rel=" << e.rel_error << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy-scale promptable anomaly segmentation with draft-then-refine decoding"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON run configuration file");
  std::map<std::string, std::string> overrides;
  for (const std::string& key : kOverrideKeys) {
    app.add_option_function<std::string>(
        "--" + key, [&overrides, key](const std::string& v) { overrides[key] = v; },
        "override " + key);
  }

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic anomaly dataset");
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "Train with the configured ablation switches");
  std::string tr_data, tr_out, tr_log;
  tr->add_option("--data", tr_data, "dataset directory (from gen-data)")->required();
  tr->add_option("--out", tr_out, "output checkpoint path")->required();
  tr->add_option("--log", tr_log, "training log path (JSON lines)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint under the four prompt modes");
  std::string ev_ckpt, ev_data, ev_report;
  bool ev_oracle = false;
  int64_t ev_workers = 1;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--report", ev_report, "report path prefix")->required();
  ev->add_flag("--oracle", ev_oracle, "score ground truth against itself (harness self-test)");
  ev->add_option("--workers", ev_workers, "evaluation worker threads");

  auto* pr = app.add_subcommand("predict", "Segment one image from inline JSON prompts");
  std::string pr_ckpt, pr_image, pr_prompts, pr_out;
  pr->add_option("--checkpoint", pr_ckpt, "checkpoint path")->required();
  pr->add_option("--image", pr_image, "input PGM image")->required();
  pr->add_option("--prompts", pr_prompts,
                 R"(inline JSON, e.g. {"points":[[32,40,1]],"boxes":[[8,8,56,56]]})")
      ->required();
  pr->add_option("--out", pr_out, "output path prefix")->required();

  auto* gc = app.add_subcommand("grad-check",
                                "Compare analytic gradients with central finite differences");
  int64_t gc_samples = 64;
  double gc_h = 1e-5, gc_tol = 1e-3;
  gc->add_option("--samples", gc_samples, "trainable coordinates to probe");
  gc->add_option("--h", gc_h, "finite-difference step");
  gc->add_option("--tol", gc_tol, "relative-error tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // usage errors map to exit 1
  }

  try {
    const RunConfig cfg = resolve_config(config_path, overrides);
    if (gen->parsed()) {
      cmd_gen_data(cfg, gen_out);
      return 0;
    }
    if (tr->parsed()) return cmd_train(cfg, tr_data, tr_out, tr_log);
    if (ev->parsed()) return cmd_eval(cfg, ev_ckpt, ev_data, ev_report, ev_oracle, ev_workers);
    if (pr->parsed()) return cmd_predict(cfg, pr_ckpt, pr_image, pr_prompts, pr_out);
    if (gc->parsed()) return cmd_grad_check(cfg, gc_samples, gc_h, gc_tol);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
