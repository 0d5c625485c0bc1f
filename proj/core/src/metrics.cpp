#include "spt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace spt {

using ordered_json = nlohmann::ordered_json;

double iou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
  if (pred.size() != gt.size()) fail(ErrorKind::dimension, "iou: mask sizes differ");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += (p && g);
    uni += (p || g);
  }
  if (uni == 0) return 1.0;  // both masks empty: a correct empty prediction
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<uint8_t> boundary_region(const std::vector<uint8_t>& m, int64_t w, int64_t h,
                                     int64_t band) {
  if (static_cast<int64_t>(m.size()) != w * h)
    fail(ErrorKind::dimension, "boundary_region: mask size mismatch");
  if (band < 1) fail(ErrorKind::config, "boundary_region: band must be >= 1");
  // mask minus its erosion with a (2*band+1)^2 square element; pixels outside
  // the image count as background, so mask pixels at the border stay in.
  std::vector<uint8_t> boundary(m.size(), 0);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      if (!m[static_cast<size_t>(y * w + x)]) continue;
      bool eroded = true;
      for (int64_t dy = -band; dy <= band && eroded; ++dy)
        for (int64_t dx = -band; dx <= band; ++dx) {
          const int64_t nx = x + dx, ny = y + dy;
          if (nx < 0 || ny < 0 || nx >= w || ny >= h ||
              !m[static_cast<size_t>(ny * w + nx)]) {
            eroded = false;
            break;
          }
        }
      if (!eroded) boundary[static_cast<size_t>(y * w + x)] = 1;
    }
  return boundary;
}

double boundary_iou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt, int64_t w,
                    int64_t h, int64_t band) {
  return iou(boundary_region(pred, w, h, band), boundary_region(gt, w, h, band));
}

int64_t default_boundary_band(int64_t w, int64_t h) {
  const double diag = std::sqrt(static_cast<double>(w * w + h * h));
  return std::max<int64_t>(1, static_cast<int64_t>(std::llround(0.02 * diag)));
}

std::string to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::one_box: return "one_box";
    case EvalMode::multi_boxes: return "multi_boxes";
    case EvalMode::point5: return "point5";
    case EvalMode::point10: return "point10";
  }
  return "one_box";
}

EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "one_box") return EvalMode::one_box;
  if (s == "multi_boxes") return EvalMode::multi_boxes;
  if (s == "point5") return EvalMode::point5;
  if (s == "point10") return EvalMode::point10;
  fail(ErrorKind::config, "eval: unknown mode '" + s + "'");
}

std::vector<EvalInstance> build_eval_instances(const std::vector<SyntheticSample>& samples,
                                               const EvalOptions& options) {
  std::vector<EvalInstance> instances;
  for (size_t si = 0; si < samples.size(); ++si) {
    const SyntheticSample& sample = samples[si];
    std::vector<DefectRegion> regions = connected_components(sample.mask, sample.size, sample.size);
    regions = filter_small_regions(regions, options.min_area);
    if (regions.empty()) continue;

    for (EvalMode mode : options.modes) {
      if (mode == EvalMode::one_box) {
        EvalInstance inst;
        inst.image_index = static_cast<int64_t>(si);
        inst.mode = mode;
        inst.prompt.boxes.push_back(derive_one_box(regions));
        inst.gt = sample.mask;
        instances.push_back(std::move(inst));
        continue;
      }
      // Region-level instances: the ground truth is that region alone.
      for (size_t ri = 0; ri < regions.size(); ++ri) {
        EvalInstance inst;
        inst.image_index = static_cast<int64_t>(si);
        inst.region_index = static_cast<int64_t>(ri);
        inst.mode = mode;
        inst.gt = region_mask(regions[ri], sample.size, sample.size);
        if (mode == EvalMode::multi_boxes) {
          inst.prompt.boxes.push_back(PromptSet::Box{
              static_cast<double>(regions[ri].x0), static_cast<double>(regions[ri].y0),
              static_cast<double>(regions[ri].x1), static_cast<double>(regions[ri].y1)});
        } else {
          const int64_t k = (mode == EvalMode::point5) ? 5 : 10;
          const uint64_t seed = mix_seed({options.point_seed, static_cast<uint64_t>(si),
                                          static_cast<uint64_t>(ri), static_cast<uint64_t>(k)});
          inst.prompt.points = sample_points(inst.gt, sample.size, sample.size, k, seed);
        }
        instances.push_back(std::move(inst));
      }
    }
  }
  return instances;
}

const ModeScores& EvalReport::mode(EvalMode m) const {
  switch (m) {
    case EvalMode::one_box: return one_box;
    case EvalMode::multi_boxes: return multi_boxes;
    case EvalMode::point5: return point5;
    case EvalMode::point10: return point10;
  }
  return one_box;
}

EvalReport aggregate_records(std::vector<InstanceRecord> records) {
  EvalReport report;
  report.records = std::move(records);

  auto score_mode = [&](EvalMode m) {
    ModeScores s;
    for (const InstanceRecord& r : report.records) {
      if (r.mode != m) continue;
      s.present = true;
      s.count += 1;
      s.miou += r.iou;
      s.mbiou += r.biou;
    }
    if (s.count > 0) {
      s.miou /= static_cast<double>(s.count);
      s.mbiou /= static_cast<double>(s.count);
    }
    return s;
  };
  report.one_box = score_mode(EvalMode::one_box);
  report.multi_boxes = score_mode(EvalMode::multi_boxes);
  report.point5 = score_mode(EvalMode::point5);
  report.point10 = score_mode(EvalMode::point10);

  auto mean_of = [](std::initializer_list<const ModeScores*> parts) {
    ModeScores s;
    int64_t present = 0;
    for (const ModeScores* p : parts) {
      if (!p->present) continue;
      ++present;
      s.count += p->count;
      s.miou += p->miou;
      s.mbiou += p->mbiou;
    }
    if (present > 0) {
      s.present = true;
      s.miou /= static_cast<double>(present);
      s.mbiou /= static_cast<double>(present);
    }
    return s;
  };
  report.box_level = mean_of({&report.one_box, &report.multi_boxes});
  report.point_level = mean_of({&report.point5, &report.point10});
  report.overall =
      mean_of({&report.one_box, &report.multi_boxes, &report.point5, &report.point10});
  return report;
}

EvalReport evaluate(const PredictFn& predict, const std::vector<SyntheticSample>& samples,
                    const EvalOptions& options) {
  std::vector<EvalInstance> instances = build_eval_instances(samples, options);
  std::vector<InstanceRecord> records(instances.size());

  auto score_range = [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      const EvalInstance& inst = instances[i];
      const SyntheticSample& sample = samples[static_cast<size_t>(inst.image_index)];
      const int64_t band = options.boundary_band > 0
                               ? options.boundary_band
                               : default_boundary_band(sample.size, sample.size);
      std::vector<uint8_t> pred =
          options.oracle ? inst.gt : predict(sample, inst.prompt);
      records[i] = InstanceRecord{inst.mode, inst.image_index, inst.region_index,
                                  iou(pred, inst.gt),
                                  boundary_iou(pred, inst.gt, sample.size, sample.size, band)};
    }
  };

  const int64_t workers = std::max<int64_t>(1, options.workers);
  if (workers == 1 || instances.size() < 2) {
    score_range(0, instances.size());
  } else {
    // Instances are independent; records keep dataset order so the reduction
    // is deterministic regardless of the worker count.
    std::vector<std::thread> pool;
    const size_t chunk = (instances.size() + static_cast<size_t>(workers) - 1) /
                         static_cast<size_t>(workers);
    for (int64_t t = 0; t < workers; ++t) {
      const size_t begin = static_cast<size_t>(t) * chunk;
      const size_t end = std::min(instances.size(), begin + chunk);
      if (begin >= end) break;
      pool.emplace_back(score_range, begin, end);
    }
    for (std::thread& th : pool) th.join();
  }
  return aggregate_records(std::move(records));
}

std::string report_table(const EvalReport& report) {
  std::ostringstream os;
  auto cell = [](const ModeScores& s, bool biou) {
    std::ostringstream c;
    if (!s.present)
      c << "   -  ";
    else
      c << std::fixed << std::setprecision(3) << (biou ? s.mbiou : s.miou);
    return c.str();
  };
  os << "Metric  | One box | Multi boxes | Point=5 | Point=10 | Box-lvl | Point-lvl |  Avg.\n";
  os << "--------+---------+-------------+---------+----------+---------+-----------+------\n";
  os << "mIoU    |  " << cell(report.one_box, false) << "  |    " << cell(report.multi_boxes, false)
     << "    |  " << cell(report.point5, false) << "  |  " << cell(report.point10, false)
     << "   |  " << cell(report.box_level, false) << "  |   " << cell(report.point_level, false)
     << "   | " << cell(report.overall, false) << "\n";
  os << "mBIoU   |  " << cell(report.one_box, true) << "  |    " << cell(report.multi_boxes, true)
     << "    |  " << cell(report.point5, true) << "  |  " << cell(report.point10, true)
     << "   |  " << cell(report.box_level, true) << "  |   " << cell(report.point_level, true)
     << "   | " << cell(report.overall, true) << "\n";
  return os.str();
}

std::string report_json(const EvalReport& report) {
  ordered_json j;
  auto mode_json = [](const ModeScores& s) {
    ordered_json m;
    m["present"] = s.present;
    m["count"] = s.count;
    m["miou"] = s.miou;
    m["mbiou"] = s.mbiou;
    return m;
  };
  j["one_box"] = mode_json(report.one_box);
  j["multi_boxes"] = mode_json(report.multi_boxes);
  j["point5"] = mode_json(report.point5);
  j["point10"] = mode_json(report.point10);
  j["box_level"] = mode_json(report.box_level);
  j["point_level"] = mode_json(report.point_level);
  j["overall"] = mode_json(report.overall);
  ordered_json recs = ordered_json::array();
  for (const InstanceRecord& r : report.records) {
    ordered_json rec;
    rec["mode"] = to_string(r.mode);
    rec["image"] = r.image_index;
    rec["region"] = r.region_index;
    rec["iou"] = r.iou;
    rec["biou"] = r.biou;
    recs.push_back(rec);
  }
  j["records"] = recs;
  return j.dump(2) + "\n";
}

}  // namespace spt
