#include "spt/data.hpp"

#include <algorithm>
#include <cmath>

namespace spt {

namespace {

// Single value-noise octave: a random lattice sampled bilinearly.
struct NoiseOctave {
  int64_t cell;
  int64_t lattice_w;
  std::vector<double> lattice;

  NoiseOctave(int64_t size, int64_t cell_size, Rng& rng) : cell(cell_size) {
    lattice_w = size / cell + 2;
    lattice.resize(static_cast<size_t>(lattice_w * lattice_w));
    for (double& v : lattice) v = rng.uniform();
  }

  double at(double x, double y) const {
    const double gx = x / static_cast<double>(cell);
    const double gy = y / static_cast<double>(cell);
    const int64_t ix = static_cast<int64_t>(gx);
    const int64_t iy = static_cast<int64_t>(gy);
    const double fx = gx - static_cast<double>(ix);
    const double fy = gy - static_cast<double>(iy);
    auto l = [&](int64_t xx, int64_t yy) {
      return lattice[static_cast<size_t>(yy * lattice_w + xx)];
    };
    const double top = l(ix, iy) * (1.0 - fx) + l(ix + 1, iy) * fx;
    const double bot = l(ix, iy + 1) * (1.0 - fx) + l(ix + 1, iy + 1) * fx;
    return top * (1.0 - fy) + bot * fy;
  }
};

std::vector<double> make_background(int64_t size, Rng& rng) {
  NoiseOctave o1(size, 16, rng), o2(size, 8, rng), o3(size, 4, rng);
  const bool grating = rng.uniform() < 0.5;
  const double amp = grating ? rng.uniform(0.015, 0.04) : 0.0;
  const double freq = grating ? rng.uniform(0.05, 0.15) : 0.0;
  const double angle = grating ? rng.uniform(0.0, M_PI) : 0.0;
  const double phase = grating ? rng.uniform(0.0, 2.0 * M_PI) : 0.0;
  const double ca = std::cos(angle), sa = std::sin(angle);

  std::vector<double> img(static_cast<size_t>(size * size));
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      double v = 0.55 * o1.at(fx, fy) + 0.30 * o2.at(fx, fy) + 0.15 * o3.at(fx, fy);
      v = 0.38 + 0.24 * v;
      if (grating) v += amp * std::sin(2.0 * M_PI * freq * (fx * ca + fy * sa) + phase);
      img[static_cast<size_t>(y * size + x)] = std::clamp(v, 0.0, 1.0);
    }
  return img;
}

void mark(std::vector<uint8_t>& m, int64_t size, int64_t x, int64_t y) {
  if (x >= 0 && y >= 0 && x < size && y < size) m[static_cast<size_t>(y * size + x)] = 1;
}

std::vector<uint8_t> raster_blob(int64_t size, bool small, Rng& rng) {
  std::vector<uint8_t> m(static_cast<size_t>(size * size), 0);
  const int64_t n_ellipses = rng.uniform_int(1, 3);
  const double margin = 8.0;
  double cx = rng.uniform(margin, static_cast<double>(size) - margin);
  double cy = rng.uniform(margin, static_cast<double>(size) - margin);
  for (int64_t e = 0; e < n_ellipses; ++e) {
    const double a = small ? rng.uniform(1.2, 3.2) : rng.uniform(5.0, 12.0);
    const double b = small ? rng.uniform(1.2, 3.2) : rng.uniform(5.0, 12.0);
    const double theta = rng.uniform(0.0, M_PI);
    const double ct = std::cos(theta), st = std::sin(theta);
    const double ex = (e == 0) ? cx : cx + rng.uniform(-5.0, 5.0);
    const double ey = (e == 0) ? cy : cy + rng.uniform(-5.0, 5.0);
    const int64_t r = static_cast<int64_t>(std::ceil(std::max(a, b))) + 1;
    for (int64_t y = static_cast<int64_t>(ey) - r; y <= static_cast<int64_t>(ey) + r; ++y)
      for (int64_t x = static_cast<int64_t>(ex) - r; x <= static_cast<int64_t>(ex) + r; ++x) {
        const double dx = static_cast<double>(x) - ex, dy = static_cast<double>(y) - ey;
        const double u = (dx * ct + dy * st) / a;
        const double v = (-dx * st + dy * ct) / b;
        if (u * u + v * v <= 1.0) mark(m, size, x, y);
      }
  }
  return m;
}

std::vector<uint8_t> raster_scratch(int64_t size, bool small, Rng& rng) {
  std::vector<uint8_t> m(static_cast<size_t>(size * size), 0);
  const int64_t segments = small ? rng.uniform_int(1, 2) : rng.uniform_int(2, 3);
  const double radius = small ? 1.0 : rng.uniform(1.0, 2.0);
  double x = rng.uniform(8.0, static_cast<double>(size) - 8.0);
  double y = rng.uniform(8.0, static_cast<double>(size) - 8.0);
  double angle = rng.uniform(0.0, 2.0 * M_PI);
  const int64_t ri = static_cast<int64_t>(std::ceil(radius));
  for (int64_t s = 0; s < segments; ++s) {
    const double len = small ? rng.uniform(4.0, 8.0) : rng.uniform(12.0, 22.0);
    const double steps = std::ceil(len * 4.0);
    for (int64_t t = 0; t <= static_cast<int64_t>(steps); ++t) {
      const double px = x + std::cos(angle) * len * static_cast<double>(t) / steps;
      const double py = y + std::sin(angle) * len * static_cast<double>(t) / steps;
      for (int64_t dy = -ri; dy <= ri; ++dy)
        for (int64_t dx = -ri; dx <= ri; ++dx) {
          const double qx = std::floor(px) + static_cast<double>(dx);
          const double qy = std::floor(py) + static_cast<double>(dy);
          if ((qx - px) * (qx - px) + (qy - py) * (qy - py) <= radius * radius)
            mark(m, size, static_cast<int64_t>(qx), static_cast<int64_t>(qy));
        }
    }
    x += std::cos(angle) * len;
    y += std::sin(angle) * len;
    angle += rng.uniform(-0.8, 0.8);
  }
  return m;
}

std::vector<uint8_t> raster_stain(int64_t size, bool small, Rng& rng) {
  std::vector<uint8_t> m(static_cast<size_t>(size * size), 0);
  const double radius = small ? rng.uniform(2.2, 4.0) : rng.uniform(7.0, 14.0);
  const double cx = rng.uniform(radius + 2.0, static_cast<double>(size) - radius - 2.0);
  const double cy = rng.uniform(radius + 2.0, static_cast<double>(size) - radius - 2.0);
  NoiseOctave noise(size, 8, rng);

  // Keep the upper ~60% of the noise values inside the disc so the stain has
  // an irregular but mostly-connected footprint.
  std::vector<std::pair<double, int64_t>> candidates;
  for (int64_t y = static_cast<int64_t>(cy - radius) - 1; y <= static_cast<int64_t>(cy + radius) + 1;
       ++y)
    for (int64_t x = static_cast<int64_t>(cx - radius) - 1;
         x <= static_cast<int64_t>(cx + radius) + 1; ++x) {
      if (x < 0 || y < 0 || x >= size || y >= size) continue;
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      if (dx * dx + dy * dy > radius * radius) continue;
      candidates.emplace_back(noise.at(static_cast<double>(x), static_cast<double>(y)),
                              y * size + x);
    }
  if (candidates.empty()) return m;
  std::vector<std::pair<double, int64_t>> sorted = candidates;
  std::sort(sorted.begin(), sorted.end());
  const double threshold = sorted[static_cast<size_t>(sorted.size() * 3 / 10)].first;
  for (const auto& [v, idx] : candidates)
    if (v >= threshold) m[static_cast<size_t>(idx)] = 1;

  // Keep the largest connected piece of the thresholded patch; satellite
  // speckles otherwise become separate near-unlearnable regions.
  auto pieces = connected_components(m, size, size);
  if (pieces.size() > 1) {
    size_t largest = 0;
    for (size_t i = 1; i < pieces.size(); ++i)
      if (pieces[i].area > pieces[largest].area) largest = i;
    std::fill(m.begin(), m.end(), 0);
    for (int64_t p : pieces[largest].pixels) m[static_cast<size_t>(p)] = 1;
  }
  return m;
}

SyntheticSample try_generate(uint64_t stream_seed, int64_t size, const DataSpec& spec) {
  Rng rng(stream_seed);
  SyntheticSample out;
  out.size = size;
  out.image = make_background(size, rng);
  out.mask.assign(static_cast<size_t>(size * size), 0);

  // Multi-defect images are the minority so single-region prompts dominate.
  int64_t n_defects = spec.min_defects;
  for (int64_t extra = spec.min_defects; extra < spec.max_defects; ++extra)
    if (rng.uniform() < 0.2) ++n_defects;
  for (int64_t d = 0; d < n_defects; ++d) {
    const double kind_draw = rng.uniform();
    const bool small = rng.uniform() < spec.small_defect_prob;
    std::vector<uint8_t> dm;
    DefectDescriptor desc;
    if (kind_draw < 0.45) {
      dm = raster_blob(size, small, rng);
      desc.kind = "blob";
    } else if (kind_draw < 0.80) {
      dm = raster_stain(size, small, rng);
      desc.kind = "stain";
    } else {
      dm = raster_scratch(size, small, rng);
      desc.kind = "scratch";
    }
    const double magnitude = rng.uniform(spec.min_offset, spec.max_offset);
    // Push the defect away from the local background level so the contrast
    // never clips away.
    double local_mean = 0.0;
    int64_t local_count = 0;
    for (size_t i = 0; i < dm.size(); ++i)
      if (dm[i]) {
        local_mean += out.image[i];
        ++local_count;
      }
    if (local_count > 0) local_mean /= static_cast<double>(local_count);
    desc.offset = local_mean > 0.5 ? -magnitude : magnitude;
    int64_t area = 0;
    for (size_t i = 0; i < dm.size(); ++i) {
      if (!dm[i]) continue;
      out.image[i] = std::clamp(out.image[i] + desc.offset, 0.0, 1.0);
      out.mask[i] = 1;
      ++area;
    }
    desc.area = area;
    out.defects.push_back(desc);
  }

  // Quantize to the PGM grid so in-memory and on-disk pipelines agree exactly.
  for (double& v : out.image) v = std::round(v * 255.0) / 255.0;
  return out;
}

int64_t mask_area(const std::vector<uint8_t>& mask) {
  int64_t a = 0;
  for (uint8_t v : mask) a += v;
  return a;
}

}  // namespace

SyntheticSample generate_sample(uint64_t sample_seed, int64_t size, const DataSpec& spec) {
  if (size < 16) fail(ErrorKind::config, "generate_sample: size must be >= 16");
  for (uint64_t attempt = 0; attempt < 64; ++attempt) {
    SyntheticSample out = try_generate(mix_seed({sample_seed, attempt}), size, spec);
    const int64_t area = mask_area(out.mask);
    if (spec.allow_empty && spec.min_defects == 0) {
      out.sample_seed = sample_seed;
      return out;
    }
    if (area >= spec.min_total_area) {
      out.sample_seed = sample_seed;
      return out;
    }
  }
  fail(ErrorKind::contract, "generate_sample: could not synthesize a defective sample");
}

std::vector<SyntheticSample> generate_dataset(uint64_t seed, int64_t n, int64_t size,
                                              const DataSpec& spec) {
  if (n < 0) fail(ErrorKind::config, "generate_dataset: n must be >= 0");
  std::vector<SyntheticSample> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    out.push_back(generate_sample(mix_seed({seed, static_cast<uint64_t>(i)}), size, spec));
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

std::vector<DefectRegion> connected_components(const std::vector<uint8_t>& mask, int64_t w,
                                               int64_t h) {
  if (static_cast<int64_t>(mask.size()) != w * h)
    fail(ErrorKind::dimension, "connected_components: mask size mismatch");
  std::vector<int32_t> label(static_cast<size_t>(w * h), 0);
  std::vector<DefectRegion> regions;
  std::vector<int64_t> stack;

  for (int64_t start = 0; start < w * h; ++start) {
    if (!mask[static_cast<size_t>(start)] || label[static_cast<size_t>(start)]) continue;
    const int32_t id = static_cast<int32_t>(regions.size()) + 1;
    DefectRegion region;
    region.x0 = region.x1 = start % w;
    region.y0 = region.y1 = start / w;
    stack.clear();
    stack.push_back(start);
    label[static_cast<size_t>(start)] = id;
    while (!stack.empty()) {
      const int64_t p = stack.back();
      stack.pop_back();
      region.pixels.push_back(p);
      const int64_t x = p % w, y = p / w;
      region.x0 = std::min(region.x0, x);
      region.x1 = std::max(region.x1, x);
      region.y0 = std::min(region.y0, y);
      region.y1 = std::max(region.y1, y);
      for (int64_t dy = -1; dy <= 1; ++dy)
        for (int64_t dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int64_t nx = x + dx, ny = y + dy;
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          const int64_t q = ny * w + nx;
          if (mask[static_cast<size_t>(q)] && !label[static_cast<size_t>(q)]) {
            label[static_cast<size_t>(q)] = id;
            stack.push_back(q);
          }
        }
    }
    std::sort(region.pixels.begin(), region.pixels.end());
    region.area = static_cast<int64_t>(region.pixels.size());
    regions.push_back(std::move(region));
  }
  return regions;
}

std::vector<DefectRegion> filter_small_regions(std::vector<DefectRegion> regions,
                                               int64_t min_area) {
  if (min_area < 1) fail(ErrorKind::config, "filter_small_regions: min_area must be >= 1");
  std::vector<DefectRegion> kept;
  kept.reserve(regions.size());
  for (DefectRegion& r : regions)
    if (r.area >= min_area) kept.push_back(std::move(r));  // strict less-than is discarded
  return kept;
}

PromptSet::Box derive_one_box(const std::vector<DefectRegion>& regions) {
  if (regions.empty()) fail(ErrorKind::no_defect, "derive_one_box: no defect regions");
  PromptSet::Box box{static_cast<double>(regions[0].x0), static_cast<double>(regions[0].y0),
                     static_cast<double>(regions[0].x1), static_cast<double>(regions[0].y1)};
  for (const DefectRegion& r : regions) {
    box.x0 = std::min(box.x0, static_cast<double>(r.x0));
    box.y0 = std::min(box.y0, static_cast<double>(r.y0));
    box.x1 = std::max(box.x1, static_cast<double>(r.x1));
    box.y1 = std::max(box.y1, static_cast<double>(r.y1));
  }
  return box;
}

std::vector<PromptSet::Box> derive_multi_boxes(const std::vector<DefectRegion>& regions) {
  if (regions.empty()) fail(ErrorKind::no_defect, "derive_multi_boxes: no defect regions");
  std::vector<PromptSet::Box> boxes;
  boxes.reserve(regions.size());
  for (const DefectRegion& r : regions)
    boxes.push_back(PromptSet::Box{static_cast<double>(r.x0), static_cast<double>(r.y0),
                                   static_cast<double>(r.x1), static_cast<double>(r.y1)});
  return boxes;
}

std::vector<PromptSet::Point> sample_points(const std::vector<uint8_t>& mask, int64_t w, int64_t h,
                                            int64_t k, uint64_t seed) {
  if (static_cast<int64_t>(mask.size()) != w * h)
    fail(ErrorKind::dimension, "sample_points: mask size mismatch");
  if (k < 1) fail(ErrorKind::config, "sample_points: k must be >= 1");
  std::vector<int64_t> pixels;
  for (int64_t i = 0; i < w * h; ++i)
    if (mask[static_cast<size_t>(i)]) pixels.push_back(i);
  if (pixels.empty()) fail(ErrorKind::no_defect, "sample_points: empty mask");

  Rng rng(seed);
  std::vector<int64_t> chosen;
  const int64_t n = static_cast<int64_t>(pixels.size());
  if (n >= k) {
    // Distinct points via partial Fisher-Yates.
    for (int64_t i = 0; i < k; ++i) {
      const int64_t j = rng.uniform_int(i, n - 1);
      std::swap(pixels[static_cast<size_t>(i)], pixels[static_cast<size_t>(j)]);
      chosen.push_back(pixels[static_cast<size_t>(i)]);
    }
  } else {
    // Defect smaller than k: sample with replacement.
    for (int64_t i = 0; i < k; ++i)
      chosen.push_back(pixels[static_cast<size_t>(rng.uniform_int(0, n - 1))]);
  }

  std::vector<PromptSet::Point> points;
  points.reserve(static_cast<size_t>(k));
  for (int64_t p : chosen)
    points.push_back(PromptSet::Point{static_cast<double>(p % w), static_cast<double>(p / w), 1});
  return points;
}

std::vector<uint8_t> region_mask(const DefectRegion& region, int64_t w, int64_t h) {
  std::vector<uint8_t> m(static_cast<size_t>(w * h), 0);
  for (int64_t p : region.pixels) m[static_cast<size_t>(p)] = 1;
  return m;
}

}  // namespace spt
