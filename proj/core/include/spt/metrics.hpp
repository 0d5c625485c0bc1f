#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "spt/data.hpp"
#include "spt/sam.hpp"

namespace spt {

// |a n b| / |a u b|; 1.0 when both masks are empty.
double iou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt);

// Pixels of m within `band` (Chebyshev) of background or of the image border.
std::vector<uint8_t> boundary_region(const std::vector<uint8_t>& m, int64_t w, int64_t h,
                                     int64_t band);

// IoU restricted to the contour bands of both masks.
double boundary_iou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt, int64_t w,
                    int64_t h, int64_t band);

// max(1, round(0.02 * image diagonal)).
int64_t default_boundary_band(int64_t w, int64_t h);

enum class EvalMode { one_box, multi_boxes, point5, point10 };
std::string to_string(EvalMode mode);
EvalMode eval_mode_from_string(const std::string& s);

// One scored prediction: a prompt plus the ground truth for that prompt.
// One-box mode yields one instance per image; multi-box and point modes yield
// one instance per surviving defect region.
struct EvalInstance {
  int64_t image_index = 0;
  int64_t region_index = -1;  // -1 for one_box
  EvalMode mode = EvalMode::one_box;
  PromptSet prompt;
  std::vector<uint8_t> gt;
};

struct EvalOptions {
  std::vector<EvalMode> modes = {EvalMode::one_box, EvalMode::multi_boxes, EvalMode::point5,
                                 EvalMode::point10};
  uint64_t point_seed = 0;
  int64_t min_area = 50;
  int64_t boundary_band = 0;  // 0 = default_boundary_band
  int64_t workers = 1;
  bool oracle = false;  // score the ground truth against itself (harness self-test)
};

std::vector<EvalInstance> build_eval_instances(const std::vector<SyntheticSample>& samples,
                                               const EvalOptions& options);

struct ModeScores {
  bool present = false;
  int64_t count = 0;
  double miou = 0.0;
  double mbiou = 0.0;
};

struct InstanceRecord {
  EvalMode mode;
  int64_t image_index;
  int64_t region_index;
  double iou;
  double biou;
};

struct EvalReport {
  ModeScores one_box, multi_boxes, point5, point10;
  ModeScores box_level, point_level, overall;  // means over mode scores
  std::vector<InstanceRecord> records;

  const ModeScores& mode(EvalMode m) const;
};

// Prediction callback: binary refine mask (0/1, size*size) for one prompt.
using PredictFn =
    std::function<std::vector<uint8_t>(const SyntheticSample&, const PromptSet&)>;

EvalReport evaluate(const PredictFn& predict, const std::vector<SyntheticSample>& samples,
                    const EvalOptions& options);

// Aggregation alone (exposed so reports can be recomputed from records).
EvalReport aggregate_records(std::vector<InstanceRecord> records);

std::string report_table(const EvalReport& report);
std::string report_json(const EvalReport& report);

}  // namespace spt
