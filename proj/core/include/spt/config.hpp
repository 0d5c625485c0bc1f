#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spt/metrics.hpp"
#include "spt/peft.hpp"
#include "spt/sdt.hpp"

namespace spt {

struct DataConfig {
  uint64_t seed = 0;
  int64_t n_train = 512;
  int64_t n_eval = 128;
  int64_t size = 64;
  int64_t min_area = 8;  // toy-scale default; the protocol value 50 is used for parity checks

  void validate() const;
};

struct EvalConfig {
  std::vector<EvalMode> modes = {EvalMode::one_box, EvalMode::multi_boxes, EvalMode::point5,
                                 EvalMode::point10};
  uint64_t point_seed = 0;
  int64_t biou_band = 0;  // 0 = derived from the image diagonal

  void validate() const;
};

// Every ablation axis in one place: model topology, PEFT, the relation
// adapter, the draft-then-refine switchboard, training and evaluation.
struct RunConfig {
  ModelConfig model;
  PeftConfig peft;
  VraConfig vra;
  SdtConfig sdt;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;

  void validate() const;
};

// Strict JSON codec: unknown keys are rejected.
RunConfig run_config_from_json(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& config);

}  // namespace spt
