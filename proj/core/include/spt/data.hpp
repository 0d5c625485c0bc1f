#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spt/rng.hpp"
#include "spt/sam.hpp"

namespace spt {

// Controls the procedural defect generator. The toy training profile keeps
// every defect comfortably above the region filter; the "small defects"
// knob admits sub-50-px regions so the filter path gets exercised.
struct DataSpec {
  int64_t min_defects = 1;
  int64_t max_defects = 2;
  double min_offset = 0.35;   // absolute intensity offset of a defect
  double max_offset = 0.60;
  int64_t min_total_area = 80;
  bool allow_empty = false;   // permit zero-defect samples (eval-only corpora)
  double small_defect_prob = 0.0;  // chance a defect is shrunk below 50 px
};

struct DefectDescriptor {
  std::string kind;  // blob | scratch | stain
  double offset = 0.0;
  int64_t area = 0;
};

struct SyntheticSample {
  int64_t size = 0;
  std::vector<double> image;  // size*size grayscale in [0,1]
  std::vector<uint8_t> mask;  // size*size binary ground truth (0/1)
  uint64_t sample_seed = 0;
  std::vector<DefectDescriptor> defects;
};

// One sample, fully determined by its seed and the spec.
SyntheticSample generate_sample(uint64_t sample_seed, int64_t size, const DataSpec& spec);
// Dataset of n samples; per-sample seeds are derived as mix(seed, index).
std::vector<SyntheticSample> generate_dataset(uint64_t seed, int64_t n, int64_t size,
                                              const DataSpec& spec);

// ---------------------------------------------------------------------------
// Prompt-derivation preprocessing.
// ---------------------------------------------------------------------------

struct DefectRegion {
  int64_t area = 0;
  int64_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive bbox
  std::vector<int64_t> pixels;             // flat indices, scanline order
};

// 8-connected labeling; regions reported in scanline-first order.
std::vector<DefectRegion> connected_components(const std::vector<uint8_t>& mask, int64_t w,
                                               int64_t h);

// Drops regions with area strictly below min_area.
std::vector<DefectRegion> filter_small_regions(std::vector<DefectRegion> regions,
                                               int64_t min_area = 50);

// Componentwise min/max box over all regions; throws no_defect when empty.
PromptSet::Box derive_one_box(const std::vector<DefectRegion>& regions);
// One box per region, in region order.
std::vector<PromptSet::Box> derive_multi_boxes(const std::vector<DefectRegion>& regions);

// k uniform foreground points over the mask's defect pixels. Distinct points
// when the defect area allows it, with replacement otherwise.
std::vector<PromptSet::Point> sample_points(const std::vector<uint8_t>& mask, int64_t w, int64_t h,
                                            int64_t k, uint64_t seed);

// Binary mask containing only the given region's pixels.
std::vector<uint8_t> region_mask(const DefectRegion& region, int64_t w, int64_t h);

}  // namespace spt
