#include "terra/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "terra/image_io.hpp"

namespace fs = std::filesystem;

namespace terra {

namespace {

// Per-class base colors; picked to be mutually distinct so texture carries
// real class evidence.
constexpr double kBaseColor[kNumClasses][3] = {
    {0.62, 0.62, 0.66},  // smooth: concrete gray
    {0.34, 0.46, 0.20},  // rough: grass/dirt green
    {0.46, 0.38, 0.32},  // bumpy: rock brown-gray
    {0.14, 0.30, 0.52},  // forbidden: water blue
    {0.30, 0.20, 0.10},  // obstacles: trunk brown
    {0.72, 0.80, 0.94},  // background: sky
};

double unit_from_hash(std::uint64_t h) {  // [0,1)
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Deterministic lattice value noise in [-1,1]; smoothstep-interpolated so no
// libm enters the pixel path.
double value_noise(std::uint64_t key, double y, double x, double cell) {
  const double fy = y / cell, fx = x / cell;
  const auto y0 = static_cast<std::int64_t>(std::floor(fy));
  const auto x0 = static_cast<std::int64_t>(std::floor(fx));
  double ty = fy - static_cast<double>(y0);
  double tx = fx - static_cast<double>(x0);
  ty = ty * ty * (3.0 - 2.0 * ty);
  tx = tx * tx * (3.0 - 2.0 * tx);
  auto corner = [key](std::int64_t gy, std::int64_t gx) {
    const std::uint64_t h = SplitMix64::mix(key, SplitMix64::mix(static_cast<std::uint64_t>(gy),
                                                                 static_cast<std::uint64_t>(gx)));
    return 2.0 * unit_from_hash(h) - 1.0;
  };
  const double v00 = corner(y0, x0), v01 = corner(y0, x0 + 1);
  const double v10 = corner(y0 + 1, x0), v11 = corner(y0 + 1, x0 + 1);
  const double top = v00 + (v01 - v00) * tx;
  const double bot = v10 + (v11 - v10) * tx;
  return top + (bot - top) * ty;
}

void draw_segment(LabelMask& mask, int y0, int x0, int y1, int x1, std::uint8_t label,
                  bool thick) {
  // Bresenham; optional second pixel for ~2 px width
  int dy = std::abs(y1 - y0), dx = std::abs(x1 - x0);
  const int sy = y0 < y1 ? 1 : -1, sx = x0 < x1 ? 1 : -1;
  int err = (dx > dy ? dx : -dy) / 2;
  int y = y0, x = x0;
  for (;;) {
    mask.at(y, x) = label;
    if (thick) {
      const int ty = dx > dy ? y + 1 : y;
      const int tx = dx > dy ? x : x + 1;
      if (ty < mask.h && tx < mask.w) mask.at(ty, tx) = label;
    }
    if (y == y1 && x == x1) break;
    const int e2 = err;
    if (e2 > -dx) {
      err -= dy;
      x += sx;
    }
    if (e2 < dy) {
      err += dx;
      y += sy;
    }
  }
}

std::vector<std::uint8_t> boundary_pixels(const LabelMask& m) {
  std::vector<std::uint8_t> b(m.labels.size(), 0);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      const std::uint8_t v = m.at(y, x);
      const bool edge = (y > 0 && m.at(y - 1, x) != v) || (y + 1 < m.h && m.at(y + 1, x) != v) ||
                        (x > 0 && m.at(y, x - 1) != v) || (x + 1 < m.w && m.at(y, x + 1) != v);
      if (edge) b[static_cast<std::size_t>(y) * m.w + x] = 1;
    }
  return b;
}

}  // namespace

void SceneSpec::validate() const {
  require(height > 0 && width > 0 && height % 32 == 0 && width % 32 == 0,
          "scene size must be positive and divisible by 32, got ", height, "x", width);
  double sum = 0.0;
  for (double f : class_frequencies) {
    require(f >= 0.0, "class frequencies must be non-negative");
    sum += f;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "class frequencies must sum to 1, got ", sum);
  require(thin_structure_count >= 0 && boundary_noise_px >= 0,
          "thin_structure_count and boundary_noise_px must be non-negative");
  for (const auto& t : texture_scales)
    require(t.scale > 0.0 && t.amplitude >= 0.0, "invalid texture parameters");
}

std::uint64_t SceneSpec::hash() const {
  std::uint64_t h = fnv1a(&seed, sizeof seed);
  h = fnv1a(&height, sizeof height, h);
  h = fnv1a(&width, sizeof width, h);
  h = fnv1a(class_frequencies.data(), sizeof class_frequencies, h);
  h = fnv1a(&thin_structure_count, sizeof thin_structure_count, h);
  h = fnv1a(&boundary_noise_px, sizeof boundary_noise_px, h);
  h = fnv1a(texture_scales.data(), sizeof texture_scales, h);
  return h;
}

Sample generate(const SceneSpec& spec, int index) {
  spec.validate();
  const int h = spec.height, w = spec.width;
  const std::uint64_t base =
      SplitMix64::mix(SplitMix64::mix(spec.seed, 0x5CE4E5ULL), static_cast<std::uint64_t>(index));
  SplitMix64 rng_sites(SplitMix64::mix(base, 1));
  SplitMix64 rng_structs(SplitMix64::mix(base, 2));
  SplitMix64 rng_noise(SplitMix64::mix(base, 3));
  const std::uint64_t texture_key = SplitMix64::mix(base, 4);

  // 1. Voronoi partition with per-cell labels from class_frequencies.
  const int sites = std::max(8, (h * w) / 1024);
  std::vector<int> sy(static_cast<std::size_t>(sites)), sx(static_cast<std::size_t>(sites));
  std::vector<std::uint8_t> slab(static_cast<std::size_t>(sites));
  for (int s = 0; s < sites; ++s) {
    sy[static_cast<std::size_t>(s)] = rng_sites.next_int(h);
    sx[static_cast<std::size_t>(s)] = rng_sites.next_int(w);
    const double u = rng_sites.next_double();
    double cum = 0.0;
    std::uint8_t lab = kNumClasses - 1;
    for (int c = 0; c < kNumClasses; ++c) {
      cum += spec.class_frequencies[static_cast<std::size_t>(c)];
      if (u < cum) {
        lab = static_cast<std::uint8_t>(c);
        break;
      }
    }
    slab[static_cast<std::size_t>(s)] = lab;
  }
  LabelMask clean = make_mask(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      long best = -1;
      int who = 0;
      for (int s = 0; s < sites; ++s) {
        const long dy = y - sy[static_cast<std::size_t>(s)];
        const long dx = x - sx[static_cast<std::size_t>(s)];
        const long d = dy * dy + dx * dx;
        if (best < 0 || d < best) {  // ties keep the lower site index
          best = d;
          who = s;
        }
      }
      clean.at(y, x) = slab[static_cast<std::size_t>(who)];
    }

  // 2. Thin structures: 1-2 px polylines labeled Obstacles.
  const int min_len = std::min(h, w) / 4;
  for (int t = 0; t < spec.thin_structure_count; ++t) {
    int y0 = rng_structs.next_int(h), x0 = rng_structs.next_int(w);
    int y1 = y0, x1 = x0;
    for (int attempt = 0; attempt < 16; ++attempt) {
      y1 = rng_structs.next_int(h);
      x1 = rng_structs.next_int(w);
      if (std::max(std::abs(y1 - y0), std::abs(x1 - x0)) >= min_len) break;
    }
    // jittered midpoint makes it a polyline rather than a straight wire
    int ym = (y0 + y1) / 2 + rng_structs.next_int(std::max(1, h / 8)) - h / 16;
    int xm = (x0 + x1) / 2 + rng_structs.next_int(std::max(1, w / 8)) - w / 16;
    ym = std::clamp(ym, 0, h - 1);
    xm = std::clamp(xm, 0, w - 1);
    const bool thick = rng_structs.next_int(2) == 1;
    draw_segment(clean, y0, x0, ym, xm, static_cast<std::uint8_t>(TerrainGroup::kObstacles), thick);
    draw_segment(clean, ym, xm, y1, x1, static_cast<std::uint8_t>(TerrainGroup::kObstacles), thick);
  }

  // 3. Per-class procedural texture.
  std::vector<double> img(3 * static_cast<std::size_t>(h) * w);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int c = clean.at(y, x);
      const TextureParams& tp = spec.texture_scales[static_cast<std::size_t>(c)];
      const std::uint64_t ck = SplitMix64::mix(texture_key, static_cast<std::uint64_t>(c));
      const double n = value_noise(ck, y, x, tp.scale);
      const std::uint64_t px_h = SplitMix64::mix(
          ck, SplitMix64::mix(static_cast<std::uint64_t>(y), static_cast<std::uint64_t>(x) + 7));
      const double speckle = (2.0 * unit_from_hash(px_h) - 1.0) * 0.02;
      for (int ch = 0; ch < 3; ++ch) {
        double v = kBaseColor[c][ch] + tp.amplitude * n + speckle;
        img[static_cast<std::size_t>(ch) * plane + static_cast<std::size_t>(y) * w + x] =
            std::clamp(v, 0.0, 1.0);
      }
    }

  // 4. Boundary label noise: random square stamps centered on clean-boundary
  // pixels, radius <= boundary_noise_px, so gt_noisy can only differ from
  // gt_clean within that Chebyshev distance of a clean boundary.
  LabelMask noisy = clean;
  if (spec.boundary_noise_px > 0) {
    const std::vector<std::uint8_t> bnd = boundary_pixels(clean);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!bnd[static_cast<std::size_t>(y) * w + x]) continue;
        if (rng_noise.next_double() >= 0.35) continue;
        const int r = 1 + rng_noise.next_int(spec.boundary_noise_px);
        // donor label: own label (dilation) or a differing 4-neighbor (erosion)
        std::uint8_t donor = clean.at(y, x);
        if (rng_noise.next_int(2) == 1) {
          const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
          const int pick = rng_noise.next_int(4);
          const int ny = y + dy[pick], nx = x + dx[pick];
          if (ny >= 0 && ny < h && nx >= 0 && nx < w) donor = clean.at(ny, nx);
        }
        const int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
        const int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
        for (int yy = y0; yy <= y1; ++yy)
          for (int xx = x0; xx <= x1; ++xx) noisy.at(yy, xx) = donor;
      }
  }

  Sample s;
  s.image = Tensor::from_data({3, h, w}, std::move(img));
  s.gt_clean = std::move(clean);
  s.gt_noisy = std::move(noisy);
  s.seed = spec.seed;
  s.spec_hash = spec.hash();
  s.index = index;
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05d", index);
  s.name = buf;
  return s;
}

std::vector<Sample> load_dir(const std::string& images_path, const std::string& masks_path,
                             const RemapTable& remap) {
  if (!fs::is_directory(images_path))
    throw ArtifactError(cat("image directory '", images_path, "' does not exist"));
  if (!fs::is_directory(masks_path))
    throw ArtifactError(cat("mask directory '", masks_path, "' does not exist"));
  std::map<std::string, fs::path> images;  // sorted by stem for a stable order
  for (const auto& e : fs::directory_iterator(images_path))
    if (e.is_regular_file() && e.path().extension() == ".ppm")
      images[e.path().stem().string()] = e.path();
  std::vector<Sample> out;
  int idx = 0;
  for (const auto& [stem, img_path] : images) {
    const fs::path mask_path = fs::path(masks_path) / (stem + ".pgm");
    if (!fs::exists(mask_path))
      throw ArtifactError(cat("no mask for image '", stem, "' (expected ", mask_path.string(), ")"));
    Sample s;
    s.image = read_ppm(img_path.string());
    s.gt_clean = remap.remap(read_pgm(mask_path.string()));
    s.gt_noisy = s.gt_clean;  // real labels are the noisy labels
    s.index = idx++;
    s.name = stem;
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const std::string& out_dir, const SceneSpec& spec, int count) {
  spec.validate();
  require(count >= 0, "write_dataset: negative count");
  fs::create_directories(fs::path(out_dir) / "images");
  fs::create_directories(fs::path(out_dir) / "masks");
  fs::create_directories(fs::path(out_dir) / "masks_clean");
  std::ostringstream manifest;
  manifest << "{\n  \"spec_hash\": " << spec.hash() << ",\n  \"seed\": " << spec.seed
           << ",\n  \"items\": [\n";
  for (int i = 0; i < count; ++i) {
    Sample s = generate(spec, i);
    const std::string img_rel = "images/" + s.name + ".ppm";
    const std::string mask_rel = "masks/" + s.name + ".pgm";
    const std::string clean_rel = "masks_clean/" + s.name + ".pgm";
    write_ppm((fs::path(out_dir) / img_rel).string(), s.image);
    write_pgm((fs::path(out_dir) / mask_rel).string(), s.gt_noisy);
    write_pgm((fs::path(out_dir) / clean_rel).string(), s.gt_clean);
    manifest << "    {\"image\": \"" << img_rel << "\", \"mask\": \"" << mask_rel
             << "\", \"mask_clean\": \"" << clean_rel << "\", \"seed\": " << s.seed
             << ", \"index\": " << i << ", \"spec_hash\": " << s.spec_hash << "}"
             << (i + 1 < count ? ",\n" : "\n");
  }
  manifest << "  ]\n}\n";
  std::ofstream mf(fs::path(out_dir) / "manifest.json");
  if (!mf) throw ArtifactError(cat("cannot write manifest under '", out_dir, "'"));
  mf << manifest.str();
}

}  // namespace terra
