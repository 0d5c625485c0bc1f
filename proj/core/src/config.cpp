#include "spt/config.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace spt {

using ordered_json = nlohmann::ordered_json;

namespace {

nn::PeftKind peft_kind_from_string(const std::string& s) {
  if (s == "lora") return nn::PeftKind::lora;
  if (s == "dora") return nn::PeftKind::dora;
  if (s == "adapter") return nn::PeftKind::adapter;
  fail(ErrorKind::config, "peft: unknown kind '" + s + "' (lora|dora|adapter)");
}

PeftTarget peft_target_from_string(const std::string& s) {
  if (s == "image_encoder") return PeftTarget::image_encoder;
  if (s == "prompt_encoder") return PeftTarget::prompt_encoder;
  if (s == "draft_decoder") return PeftTarget::draft_decoder;
  if (s == "refine_decoder") return PeftTarget::refine_decoder;
  fail(ErrorKind::config, "peft: unknown target '" + s + "'");
}

nn::LinearKind linear_kind_from_string(const std::string& s) {
  if (s == "query") return nn::LinearKind::query;
  if (s == "key") return nn::LinearKind::key;
  if (s == "value") return nn::LinearKind::value;
  if (s == "output") return nn::LinearKind::output;
  if (s == "mlp") return nn::LinearKind::mlp;
  if (s == "embed") return nn::LinearKind::embed;
  if (s == "head") return nn::LinearKind::head;
  fail(ErrorKind::config, "peft: unknown layer kind '" + s + "'");
}

template <typename T>
T get_number(const ordered_json& j, const std::string& where) {
  if (!j.is_number()) fail(ErrorKind::config, "config: " + where + " must be a number");
  return j.get<T>();
}

bool get_bool(const ordered_json& j, const std::string& where) {
  if (!j.is_boolean()) fail(ErrorKind::config, "config: " + where + " must be a boolean");
  return j.get<bool>();
}

std::string get_string(const ordered_json& j, const std::string& where) {
  if (!j.is_string()) fail(ErrorKind::config, "config: " + where + " must be a string");
  return j.get<std::string>();
}

void parse_model(const ordered_json& j, ModelConfig& m) {
  for (const auto& [key, value] : j.items()) {
    if (key == "image_size") m.image_size = get_number<int64_t>(value, "model.image_size");
    else if (key == "patch_size") m.patch_size = get_number<int64_t>(value, "model.patch_size");
    else if (key == "encoder_dim") m.encoder_dim = get_number<int64_t>(value, "model.encoder_dim");
    else if (key == "encoder_depth") m.encoder_depth = get_number<int64_t>(value, "model.encoder_depth");
    else if (key == "encoder_heads") m.encoder_heads = get_number<int64_t>(value, "model.encoder_heads");
    else if (key == "decoder_dim") m.decoder_dim = get_number<int64_t>(value, "model.decoder_dim");
    else if (key == "decoder_heads") m.decoder_heads = get_number<int64_t>(value, "model.decoder_heads");
    else if (key == "num_mask_tokens") m.num_mask_tokens = get_number<int64_t>(value, "model.num_mask_tokens");
    else if (key == "seed") m.seed = get_number<uint64_t>(value, "model.seed");
    else fail(ErrorKind::config, "config: unknown key model." + key);
  }
}

void parse_peft(const ordered_json& j, PeftConfig& p) {
  for (const auto& [key, value] : j.items()) {
    if (key == "kind") p.kind = peft_kind_from_string(get_string(value, "peft.kind"));
    else if (key == "rank") p.rank = get_number<int64_t>(value, "peft.rank");
    else if (key == "scaling") p.scaling = get_number<double>(value, "peft.scaling");
    else if (key == "targets") {
      if (!value.is_array()) fail(ErrorKind::config, "config: peft.targets must be an array");
      p.targets.clear();
      for (const auto& t : value) p.targets.insert(peft_target_from_string(get_string(t, "peft.targets[]")));
    } else if (key == "target_layer_kinds") {
      if (!value.is_array()) fail(ErrorKind::config, "config: peft.target_layer_kinds must be an array");
      p.target_layer_kinds.clear();
      for (const auto& t : value)
        p.target_layer_kinds.insert(linear_kind_from_string(get_string(t, "peft.target_layer_kinds[]")));
    } else {
      fail(ErrorKind::config, "config: unknown key peft." + key);
    }
  }
}

void parse_vra(const ordered_json& j, VraConfig& v) {
  for (const auto& [key, value] : j.items()) {
    if (key == "alpha") v.alpha = get_number<double>(value, "vra.alpha");
    else if (key == "placement") v.placement = vra_placement_from_string(get_string(value, "vra.placement"));
    else if (key == "use_raw_relation") v.use_raw_relation = get_bool(value, "vra.use_raw_relation");
    else fail(ErrorKind::config, "config: unknown key vra." + key);
  }
}

void parse_sdt(const ordered_json& j, SdtConfig& s) {
  for (const auto& [key, value] : j.items()) {
    if (key == "enabled") s.enabled = get_bool(value, "sdt.enabled");
    else if (key == "share_decoder") s.share_decoder = get_bool(value, "sdt.share_decoder");
    else if (key == "detach_draft") s.detach_draft = get_bool(value, "sdt.detach_draft");
    else fail(ErrorKind::config, "config: unknown key sdt." + key);
  }
}

void parse_train(const ordered_json& j, TrainConfig& t) {
  for (const auto& [key, value] : j.items()) {
    if (key == "epochs") t.epochs = get_number<int64_t>(value, "train.epochs");
    else if (key == "lr") t.lr = get_number<double>(value, "train.lr");
    else if (key == "lr_drop_epoch") t.lr_drop_epoch = get_number<int64_t>(value, "train.lr_drop_epoch");
    else if (key == "lr_drop_factor") t.lr_drop_factor = get_number<double>(value, "train.lr_drop_factor");
    else if (key == "batch_size") t.batch_size = get_number<int64_t>(value, "train.batch_size");
    else if (key == "seed") t.seed = get_number<uint64_t>(value, "train.seed");
    else if (key == "adam_beta1") t.adam_beta1 = get_number<double>(value, "train.adam_beta1");
    else if (key == "adam_beta2") t.adam_beta2 = get_number<double>(value, "train.adam_beta2");
    else if (key == "adam_eps") t.adam_eps = get_number<double>(value, "train.adam_eps");
    else if (key == "weight_decay") t.weight_decay = get_number<double>(value, "train.weight_decay");
    else if (key == "prompt_mode") t.prompt_mode = prompt_mode_from_string(get_string(value, "train.prompt_mode"));
    else if (key == "min_area") t.min_area = get_number<int64_t>(value, "train.min_area");
    else fail(ErrorKind::config, "config: unknown key train." + key);
  }
}

void parse_data(const ordered_json& j, DataConfig& d) {
  for (const auto& [key, value] : j.items()) {
    if (key == "seed") d.seed = get_number<uint64_t>(value, "data.seed");
    else if (key == "n_train") d.n_train = get_number<int64_t>(value, "data.n_train");
    else if (key == "n_eval") d.n_eval = get_number<int64_t>(value, "data.n_eval");
    else if (key == "size") d.size = get_number<int64_t>(value, "data.size");
    else if (key == "min_area") d.min_area = get_number<int64_t>(value, "data.min_area");
    else fail(ErrorKind::config, "config: unknown key data." + key);
  }
}

void parse_eval(const ordered_json& j, EvalConfig& e) {
  for (const auto& [key, value] : j.items()) {
    if (key == "modes") {
      if (!value.is_array()) fail(ErrorKind::config, "config: eval.modes must be an array");
      e.modes.clear();
      for (const auto& m : value) e.modes.push_back(eval_mode_from_string(get_string(m, "eval.modes[]")));
    } else if (key == "point_seed") {
      e.point_seed = get_number<uint64_t>(value, "eval.point_seed");
    } else if (key == "biou_band") {
      e.biou_band = get_number<int64_t>(value, "eval.biou_band");
    } else {
      fail(ErrorKind::config, "config: unknown key eval." + key);
    }
  }
}

}  // namespace

void DataConfig::validate() const {
  if (n_train < 0 || n_eval < 0) fail(ErrorKind::config, "data: sample counts must be >= 0");
  if (size < 16) fail(ErrorKind::config, "data: size must be >= 16");
  if (min_area < 1) fail(ErrorKind::config, "data: min_area must be >= 1");
}

void EvalConfig::validate() const {
  if (modes.empty()) fail(ErrorKind::config, "eval: modes must not be empty");
  if (biou_band < 0) fail(ErrorKind::config, "eval: biou_band must be >= 0");
}

void RunConfig::validate() const {
  model.validate();
  peft.validate();
  vra.validate();
  sdt.validate();
  train.validate();
  data.validate();
  eval.validate();
  if (data.size != model.image_size)
    fail(ErrorKind::config, "config: data.size must match model.image_size");
}

RunConfig run_config_from_json(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const std::exception& e) {
    fail(ErrorKind::config, std::string("config: JSON parse error: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::config, "config: top level must be an object");
  RunConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "model") parse_model(value, cfg.model);
    else if (key == "peft") parse_peft(value, cfg.peft);
    else if (key == "vra") parse_vra(value, cfg.vra);
    else if (key == "sdt") parse_sdt(value, cfg.sdt);
    else if (key == "train") parse_train(value, cfg.train);
    else if (key == "data") parse_data(value, cfg.data);
    else if (key == "eval") parse_eval(value, cfg.eval);
    else fail(ErrorKind::config, "config: unknown key " + key);
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(ss.str());
}

std::string run_config_to_json(const RunConfig& config) {
  ordered_json j;
  {
    ordered_json m;
    m["image_size"] = config.model.image_size;
    m["patch_size"] = config.model.patch_size;
    m["encoder_dim"] = config.model.encoder_dim;
    m["encoder_depth"] = config.model.encoder_depth;
    m["encoder_heads"] = config.model.encoder_heads;
    m["decoder_dim"] = config.model.decoder_dim;
    m["decoder_heads"] = config.model.decoder_heads;
    m["num_mask_tokens"] = config.model.num_mask_tokens;
    m["seed"] = config.model.seed;
    j["model"] = m;
  }
  {
    ordered_json p;
    p["kind"] = to_string(config.peft.kind);
    p["rank"] = config.peft.rank;
    p["scaling"] = config.peft.scaling;
    ordered_json targets = ordered_json::array();
    for (PeftTarget t : config.peft.targets) targets.push_back(to_string(t));
    p["targets"] = targets;
    ordered_json kinds = ordered_json::array();
    for (nn::LinearKind k : config.peft.target_layer_kinds) kinds.push_back(to_string(k));
    p["target_layer_kinds"] = kinds;
    j["peft"] = p;
  }
  {
    ordered_json v;
    v["alpha"] = config.vra.alpha;
    v["placement"] = to_string(config.vra.placement);
    v["use_raw_relation"] = config.vra.use_raw_relation;
    j["vra"] = v;
  }
  {
    ordered_json s;
    s["enabled"] = config.sdt.enabled;
    s["share_decoder"] = config.sdt.share_decoder;
    s["detach_draft"] = config.sdt.detach_draft;
    j["sdt"] = s;
  }
  {
    ordered_json t;
    t["epochs"] = config.train.epochs;
    t["lr"] = config.train.lr;
    t["lr_drop_epoch"] = config.train.lr_drop_epoch;
    t["lr_drop_factor"] = config.train.lr_drop_factor;
    t["batch_size"] = config.train.batch_size;
    t["seed"] = config.train.seed;
    t["adam_beta1"] = config.train.adam_beta1;
    t["adam_beta2"] = config.train.adam_beta2;
    t["adam_eps"] = config.train.adam_eps;
    t["weight_decay"] = config.train.weight_decay;
    t["prompt_mode"] = to_string(config.train.prompt_mode);
    t["min_area"] = config.train.min_area;
    j["train"] = t;
  }
  {
    ordered_json d;
    d["seed"] = config.data.seed;
    d["n_train"] = config.data.n_train;
    d["n_eval"] = config.data.n_eval;
    d["size"] = config.data.size;
    d["min_area"] = config.data.min_area;
    j["data"] = d;
  }
  {
    ordered_json e;
    ordered_json modes = ordered_json::array();
    for (EvalMode m : config.eval.modes) modes.push_back(to_string(m));
    e["modes"] = modes;
    e["point_seed"] = config.eval.point_seed;
    e["biou_band"] = config.eval.biou_band;
    j["eval"] = e;
  }
  return j.dump(2) + "\n";
}

}  // namespace spt
