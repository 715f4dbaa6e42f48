#include "dscm/morpho.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

namespace dscm::morpho {

namespace {

constexpr int kScale = 4;  // working resolution for thickness operations
constexpr double kDeg = 180.0 / std::numbers::pi;

float max_value(const Raster& r) {
  float m = 0.0f;
  for (float v : r.data) m = std::max(m, v);
  return m;
}

}  // namespace

// ------------------------------------------------------------------ rasters

std::vector<std::uint8_t> Raster::to_bytes() const {
  std::vector<std::uint8_t> out(data.size());
  for (std::size_t k = 0; k < data.size(); ++k)
    out[k] = static_cast<std::uint8_t>(std::lround(std::clamp(data[k], 0.0f, 255.0f)));
  return out;
}

Raster Raster::from_bytes(const std::uint8_t* p, int h, int w, int c) {
  Raster r(h, w, c);
  for (std::size_t k = 0; k < r.data.size(); ++k) r.data[k] = p[k];
  return r;
}

Variant parse_variant(const std::string& s) {
  if (s == "grayscale") return Variant::Grayscale;
  if (s == "colour" || s == "color") return Variant::Colour;
  throw ArgumentError("unknown variant '" + s + "' (expected grayscale|colour)");
}

std::string to_string(Variant v) { return v == Variant::Grayscale ? "grayscale" : "colour"; }

Raster to_gray(const Raster& image) {
  if (image.channels == 1) return image;
  Raster g(image.height, image.width, 1);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) {
      float m = 0.0f;
      for (int ch = 0; ch < image.channels; ++ch) m = std::max(m, image.at(r, c, ch));
      g.at(r, c) = m;
    }
  return g;
}

Raster upsample(const Raster& gray, int factor) {
  Raster out(gray.height * factor, gray.width * factor, 1);
  auto sample = [&](int r, int c) {
    r = std::clamp(r, 0, gray.height - 1);
    c = std::clamp(c, 0, gray.width - 1);
    return gray.at(r, c);
  };
  for (int r = 0; r < out.height; ++r) {
    double y = (r + 0.5) / factor - 0.5;
    int y0 = static_cast<int>(std::floor(y));
    double fy = y - y0;
    for (int c = 0; c < out.width; ++c) {
      double x = (c + 0.5) / factor - 0.5;
      int x0 = static_cast<int>(std::floor(x));
      double fx = x - x0;
      double v = (1 - fy) * ((1 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1)) +
                 fy * ((1 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
      out.at(r, c) = static_cast<float>(v);
    }
  }
  return out;
}

Raster downsample(const Raster& hires, int factor) {
  Raster out(hires.height / factor, hires.width / factor, 1);
  const float norm = 1.0f / static_cast<float>(factor * factor);
  for (int r = 0; r < out.height; ++r)
    for (int c = 0; c < out.width; ++c) {
      float acc = 0.0f;
      for (int dr = 0; dr < factor; ++dr)
        for (int dc = 0; dc < factor; ++dc) acc += hires.at(r * factor + dr, c * factor + dc);
      out.at(r, c) = acc * norm;
    }
  return out;
}

std::vector<std::uint8_t> threshold_mask(const Raster& gray, float threshold) {
  std::vector<std::uint8_t> m(gray.data.size());
  for (std::size_t k = 0; k < m.size(); ++k) m[k] = gray.data[k] > threshold ? 1 : 0;
  return m;
}

// Zhang-Suen thinning. Pixels on the border are treated as background.
std::vector<std::uint8_t> skeletonize(std::vector<std::uint8_t> mask, int height, int width) {
  auto px = [&](int r, int c) -> int {
    if (r < 0 || c < 0 || r >= height || c >= width) return 0;
    return mask[static_cast<std::size_t>(r) * width + c];
  };
  std::vector<std::size_t> remove;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      remove.clear();
      for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c) {
          if (!px(r, c)) continue;
          // P2..P9 clockwise from north.
          std::array<int, 8> n{px(r - 1, c), px(r - 1, c + 1), px(r, c + 1), px(r + 1, c + 1),
                               px(r + 1, c), px(r + 1, c - 1), px(r, c - 1), px(r - 1, c - 1)};
          int b = 0;
          for (int v : n) b += v;
          if (b < 2 || b > 6) continue;
          int a = 0;
          for (int k = 0; k < 8; ++k) a += (n[k] == 0 && n[(k + 1) % 8] == 1);
          if (a != 1) continue;
          if (pass == 0) {
            if (n[0] * n[2] * n[4] != 0 || n[2] * n[4] * n[6] != 0) continue;
          } else {
            if (n[0] * n[2] * n[6] != 0 || n[0] * n[4] * n[6] != 0) continue;
          }
          remove.push_back(static_cast<std::size_t>(r) * width + c);
        }
      for (auto k : remove) mask[k] = 0;
      changed = changed || !remove.empty();
    }
  }
  return mask;
}

namespace {

// 1-D squared distance transform (lower envelope of parabolas). Background
// samples are 0, foreground samples kFar.
constexpr double kFar = 1e12;

void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    double diff = q - v[k];
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace

std::vector<float> distance_to_background(const std::vector<std::uint8_t>& mask, int height, int width) {
  const int n = std::max(height, width);
  std::vector<double> grid(static_cast<std::size_t>(height) * width);
  for (std::size_t k = 0; k < grid.size(); ++k) grid[k] = mask[k] ? kFar : 0.0;
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  // columns then rows
  for (int c = 0; c < width; ++c) {
    f.resize(height);
    d.resize(height);
    for (int r = 0; r < height; ++r) f[r] = grid[static_cast<std::size_t>(r) * width + c];
    edt_1d(f, d, v, z);
    for (int r = 0; r < height; ++r) grid[static_cast<std::size_t>(r) * width + c] = d[r];
  }
  for (int r = 0; r < height; ++r) {
    f.resize(width);
    d.resize(width);
    for (int c = 0; c < width; ++c) f[c] = grid[static_cast<std::size_t>(r) * width + c];
    edt_1d(f, d, v, z);
    for (int c = 0; c < width; ++c) grid[static_cast<std::size_t>(r) * width + c] = d[c];
  }
  std::vector<float> out(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k)
    out[k] = grid[k] >= kFar ? std::numeric_limits<float>::infinity() : static_cast<float>(std::sqrt(grid[k]));
  return out;
}

// ------------------------------------------------------------------ measurement

namespace {

struct Moments {
  double mass = 0.0;
  double mu11 = 0.0;  // covariance of (column, up)
  double mu02 = 0.0;  // variance of up
};

Moments weighted_moments(const Raster& gray) {
  Moments m;
  double sx = 0.0, sy = 0.0;
  for (int r = 0; r < gray.height; ++r)
    for (int c = 0; c < gray.width; ++c) {
      double w = gray.at(r, c);
      m.mass += w;
      sx += w * c;
      sy += w * -r;
    }
  if (m.mass <= 0.0) throw MeasurementError("image has no foreground");
  double cx = sx / m.mass, cy = sy / m.mass;
  for (int r = 0; r < gray.height; ++r)
    for (int c = 0; c < gray.width; ++c) {
      double w = gray.at(r, c);
      double dy = -r - cy;
      m.mu11 += w * (c - cx) * dy;
      m.mu02 += w * dy * dy;
    }
  return m;
}

double measure_thickness(const Raster& gray) {
  Raster hires = upsample(gray, kScale);
  float peak = max_value(hires);
  if (peak <= 0.0f) throw MeasurementError("image has no foreground");
  auto mask = threshold_mask(hires, 0.5f * peak);
  auto skel = skeletonize(mask, hires.height, hires.width);
  auto dist = distance_to_background(mask, hires.height, hires.width);
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < skel.size(); ++k)
    if (skel[k]) {
      acc += dist[k];
      ++n;
    }
  if (n == 0) throw MeasurementError("image has no skeleton");
  // A discrete stroke of width w has centre distance (w + 1) / 2 to the background.
  return (2.0 * acc / static_cast<double>(n) - 1.0) / kScale;
}

double measure_intensity(const Raster& gray) {
  float peak = max_value(gray);
  if (peak <= 0.0f) throw MeasurementError("image has no foreground");
  double acc = 0.0;
  std::size_t n = 0;
  for (float v : gray.data)
    if (v > 0.5f * peak) {
      acc += v;
      ++n;
    }
  return acc / static_cast<double>(n);
}

}  // namespace

double measure_slant(const Raster& gray) {
  Moments m = weighted_moments(gray);
  if (m.mu02 <= 0.0) throw MeasurementError("slant undefined for a single-row image");
  return std::atan(m.mu11 / m.mu02) * kDeg;
}

Morphometrics measure_morphometrics(const Raster& image) {
  Raster gray = to_gray(image);
  Morphometrics out;
  out.thickness = measure_thickness(gray);
  out.intensity = measure_intensity(gray);
  out.slant = measure_slant(gray);
  return out;
}

// ------------------------------------------------------------------ perturbations

namespace {

Raster set_slant(const Raster& gray, double degrees) {
  if (!(std::abs(degrees) < 90.0)) throw DomainError("s", "slant must lie strictly inside (-90, 90) degrees");
  const double shear = std::tan(degrees / kDeg) - std::tan(measure_slant(gray) / kDeg);
  const double rc = (gray.height - 1) / 2.0;
  Raster out(gray.height, gray.width, 1);
  for (int r = 0; r < gray.height; ++r) {
    // up-coordinate of this row relative to the centre
    const double offset = shear * (rc - r);
    for (int c = 0; c < gray.width; ++c) {
      double x = c - offset;
      int x0 = static_cast<int>(std::floor(x));
      double fx = x - x0;
      auto get = [&](int col) { return (col < 0 || col >= gray.width) ? 0.0f : gray.at(r, col); };
      out.at(r, c) = static_cast<float>((1.0 - fx) * get(x0) + fx * get(x0 + 1));
    }
  }
  return out;
}

// Re-renders the stroke as the union of discs of the target radius centred on the skeleton.
Raster set_thickness(const Raster& gray, double target) {
  if (!(target > 0.0) || !std::isfinite(target)) throw DomainError("t", "thickness must be positive");
  Raster hires = upsample(gray, kScale);
  float peak = max_value(hires);
  if (peak <= 0.0f) throw MeasurementError("image has no foreground");
  auto skel = skeletonize(threshold_mask(hires, 0.5f * peak), hires.height, hires.width);
  bool any = std::any_of(skel.begin(), skel.end(), [](std::uint8_t v) { return v != 0; });
  if (!any) throw MeasurementError("image has no skeleton");
  std::vector<std::uint8_t> not_skel(skel.size());
  for (std::size_t k = 0; k < skel.size(); ++k) not_skel[k] = skel[k] ? 0 : 1;
  auto dist = distance_to_background(not_skel, hires.height, hires.width);
  // Solid stroke of (2R + 1) hires pixels measures as 2R / scale.
  const double radius = target * kScale / 2.0;
  Raster render(hires.height, hires.width, 1);
  for (std::size_t k = 0; k < dist.size(); ++k)
    render.data[k] = static_cast<float>(255.0 * std::clamp(radius + 0.5 - dist[k], 0.0, 1.0));
  // Disc caps at stroke ends shift the moments; restore the input slant.
  return set_slant(downsample(render, kScale), measure_slant(gray));
}

Raster set_intensity(const Raster& gray, double target) {
  if (!(target > 0.0 && target <= 255.0)) throw DomainError("i", "intensity must lie in (0, 255]");
  float peak = max_value(gray);
  if (peak <= 0.0f) throw MeasurementError("image has no foreground");
  // Foreground is fixed by the input; clipping at 255 makes this a fixed-point iteration.
  auto mask = threshold_mask(gray, 0.5f * peak);
  Raster out = gray;
  for (int iter = 0; iter < 50; ++iter) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < mask.size(); ++k)
      if (mask[k]) {
        acc += out.data[k];
        ++n;
      }
    double mean = acc / static_cast<double>(n);
    if (std::abs(mean - target) < 1e-3) break;
    double gain = target / mean;
    for (auto& v : out.data) v = std::clamp(static_cast<float>(v * gain), 0.0f, 255.0f);
  }
  return out;
}

}  // namespace

Raster set_hue(const Raster& gray, double hue) {
  if (gray.channels != 1) throw ArgumentError("set_hue expects a single-channel image");
  if (!std::isfinite(hue)) throw DomainError("h", "hue must be finite");
  double h = std::fmod(hue, 1.0);
  if (h < 0.0) h += 1.0;
  const double h6 = h * 6.0;
  const int sector = static_cast<int>(std::floor(h6)) % 6;
  const double f = h6 - std::floor(h6);
  // saturation 1: (p, q, t) = (0, v(1-f), v f)
  Raster out(gray.height, gray.width, 3);
  for (int r = 0; r < gray.height; ++r)
    for (int c = 0; c < gray.width; ++c) {
      double v = gray.at(r, c);
      double q = v * (1.0 - f), t = v * f;
      double rgb[3];
      switch (sector) {
        case 0: rgb[0] = v, rgb[1] = t, rgb[2] = 0; break;
        case 1: rgb[0] = q, rgb[1] = v, rgb[2] = 0; break;
        case 2: rgb[0] = 0, rgb[1] = v, rgb[2] = t; break;
        case 3: rgb[0] = 0, rgb[1] = q, rgb[2] = v; break;
        case 4: rgb[0] = t, rgb[1] = 0, rgb[2] = v; break;
        default: rgb[0] = v, rgb[1] = 0, rgb[2] = q; break;
      }
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = static_cast<float>(rgb[ch]);
    }
  return out;
}

Raster apply_morphology(const Raster& image, MorphOp op, double target) {
  if (op == MorphOp::Hue) return set_hue(to_gray(image), target);
  if (image.channels != 1) throw ArgumentError("thickness, slant and intensity operate on grayscale images");
  switch (op) {
    case MorphOp::Thickness: return set_thickness(image, target);
    case MorphOp::Slant: return set_slant(image, target);
    case MorphOp::Intensity: return set_intensity(image, target);
    case MorphOp::Hue: break;
  }
  return image;
}

// ------------------------------------------------------------------ sampling

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t split, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

ParentSample sample_parents(std::mt19937_64& rng, int d, Variant variant, double source_slant) {
  if (d < 0 || d > 9) throw ArgumentError("digit class must be in 0..9");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::gamma_distribution<double> gamma(10.0, 1.0 / 5.0);  // shape 10, rate 5
  std::bernoulli_distribution exo_slant(0.2);

  ParentSample p;
  p.d = d;
  p.exo.eps_t = gamma(rng);
  p.t = 0.5 + p.exo.eps_t;
  if (variant == Variant::Grayscale) {
    p.exo.eps_i = normal(rng);
    p.i = 191.0 / (1.0 + std::exp(-(0.5 * p.exo.eps_i + 2.0 * p.t - 5.0)));
  }
  p.exo.branch_s = exo_slant(rng) ? 1 : 0;
  if (p.exo.branch_s == 0) {
    p.exo.eps_s = normal(rng);
    p.s = -27.0 + 6.0 * d + 3.0 * p.exo.eps_s;
  } else {
    p.exo.eps_s = source_slant;
    p.s = source_slant;
  }
  if (variant == Variant::Colour) {
    std::bernoulli_distribution exo_hue(0.5);
    p.exo.branch_h = exo_hue(rng) ? 1 : 0;
    if (p.exo.branch_h == 0) {
      p.exo.eps_h = normal(rng);
      p.h = 0.1 * d + 0.05 + 0.05 * p.exo.eps_h;
    } else {
      p.exo.eps_h = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      p.h = p.exo.eps_h;
    }
  }
  return p;
}

// ------------------------------------------------------------------ IDX

namespace {

std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("truncated IDX header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void write_be32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Raster IdxImages::raster(int index) const {
  if (index < 0 || index >= count) throw ArgumentError("image index out of range");
  const std::size_t stride = static_cast<std::size_t>(height) * width * channels;
  return Raster::from_bytes(data.data() + stride * index, height, width, channels);
}

IdxImages read_idx_images(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::uint32_t magic = read_be32(in);
  if ((magic >> 8) != 0x08) throw IoError(path.string() + ": not an unsigned-byte IDX file");
  int ndim = static_cast<int>(magic & 0xff);
  if (ndim != 3 && ndim != 4) throw IoError(path.string() + ": expected a 3- or 4-dimensional IDX image file");
  IdxImages img;
  img.count = static_cast<int>(read_be32(in));
  img.height = static_cast<int>(read_be32(in));
  img.width = static_cast<int>(read_be32(in));
  img.channels = ndim == 4 ? static_cast<int>(read_be32(in)) : 1;
  img.data.resize(static_cast<std::size_t>(img.count) * img.height * img.width * img.channels);
  in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (!in) throw IoError(path.string() + ": truncated image data");
  return img;
}

std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  if (read_be32(in) != 0x00000801) throw IoError(path.string() + ": not an IDX label file");
  std::vector<std::uint8_t> labels(read_be32(in));
  in.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (!in) throw IoError(path.string() + ": truncated label data");
  return labels;
}

void write_idx_images(const std::filesystem::path& path, const IdxImages& images) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const bool colour = images.channels != 1;
  write_be32(out, 0x00000800u | (colour ? 4u : 3u));
  write_be32(out, static_cast<std::uint32_t>(images.count));
  write_be32(out, static_cast<std::uint32_t>(images.height));
  write_be32(out, static_cast<std::uint32_t>(images.width));
  if (colour) write_be32(out, static_cast<std::uint32_t>(images.channels));
  out.write(reinterpret_cast<const char*>(images.data.data()), static_cast<std::streamsize>(images.data.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_be32(out, 0x00000801u);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

// ------------------------------------------------------------------ dataset

SourceFiles locate_source(const std::filesystem::path& dir) {
  auto find = [&](std::initializer_list<const char*> names) {
    for (const char* n : names) {
      auto p = dir / n;
      if (std::filesystem::exists(p)) return p;
    }
    throw IoError("missing MNIST source file " + (dir / *names.begin()).string());
  };
  return {find({"train-images-idx3-ubyte", "train-images.idx3-ubyte"}),
          find({"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"}),
          find({"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"}),
          find({"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"})};
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_split(const std::filesystem::path& dir, std::uint64_t split_id, const GeneratorConfig& cfg,
                 const IdxImages& glyphs, const std::vector<std::uint8_t>& labels, int offset, int count) {
  std::filesystem::create_directories(dir);
  const bool colour = cfg.variant == Variant::Colour;
  IdxImages out;
  out.count = count;
  out.height = glyphs.height;
  out.width = glyphs.width;
  out.channels = colour ? 3 : 1;
  out.data.reserve(static_cast<std::size_t>(count) * out.height * out.width * out.channels);

  std::ofstream attrs(dir / "attributes.csv");
  std::ofstream exo(dir / "exogenous.csv");
  if (!attrs || !exo) throw IoError("cannot write split files under " + dir.string());
  if (colour) {
    attrs << "index,d,t,s,h,branch_s,branch_h\n";
    exo << "index,eps_d,eps_t,eps_s,eps_h,branch_s,branch_h\n";
  } else {
    attrs << "index,d,t,i,s,branch_s\n";
    exo << "index,eps_d,eps_t,eps_i,eps_s,branch_s\n";
  }

  for (int n = 0; n < count; ++n) {
    const int src = offset + n;
    Raster glyph = glyphs.raster(src);
    const int d = labels.at(src);
    auto rng = sample_rng(cfg.seed, split_id, static_cast<std::uint64_t>(n));
    ParentSample p = sample_parents(rng, d, cfg.variant, measure_slant(glyph));

    Raster img = p.exo.branch_s == 0 ? apply_morphology(glyph, MorphOp::Slant, p.s) : glyph;
    img = apply_morphology(img, MorphOp::Thickness, p.t);
    img = colour ? apply_morphology(img, MorphOp::Hue, p.h) : apply_morphology(img, MorphOp::Intensity, p.i);
    auto bytes = img.to_bytes();
    out.data.insert(out.data.end(), bytes.begin(), bytes.end());

    if (colour) {
      attrs << n << ',' << d << ',' << fmt(p.t) << ',' << fmt(p.s) << ',' << fmt(p.h) << ','
            << p.exo.branch_s << ',' << p.exo.branch_h << '\n';
      exo << n << ',' << d << ',' << fmt(p.exo.eps_t) << ',' << fmt(p.exo.eps_s) << ',' << fmt(p.exo.eps_h)
          << ',' << p.exo.branch_s << ',' << p.exo.branch_h << '\n';
    } else {
      attrs << n << ',' << d << ',' << fmt(p.t) << ',' << fmt(p.i) << ',' << fmt(p.s) << ','
            << p.exo.branch_s << '\n';
      exo << n << ',' << d << ',' << fmt(p.exo.eps_t) << ',' << fmt(p.exo.eps_i) << ',' << fmt(p.exo.eps_s)
          << ',' << p.exo.branch_s << '\n';
    }
  }
  write_idx_images(dir / "images.idx", out);
}

}  // namespace

void generate_dataset(const GeneratorConfig& cfg, const std::filesystem::path& out) {
  SourceFiles src = locate_source(cfg.source);
  IdxImages train_glyphs = read_idx_images(src.train_images);
  auto train_labels = read_idx_labels(src.train_labels);
  IdxImages test_glyphs = read_idx_images(src.test_images);
  auto test_labels = read_idx_labels(src.test_labels);
  if (cfg.train < 0 || cfg.val < 0 || cfg.test < 0) throw ArgumentError("split sizes must be non-negative");
  if (cfg.train + cfg.val > train_glyphs.count || cfg.train + cfg.val > static_cast<int>(train_labels.size()))
    throw ArgumentError("train + val split sizes exceed the source training set");
  if (cfg.test > test_glyphs.count || cfg.test > static_cast<int>(test_labels.size()))
    throw ArgumentError("test split size exceeds the source test set");

  std::filesystem::create_directories(out);
  write_split(out / "train", 0, cfg, train_glyphs, train_labels, 0, cfg.train);
  write_split(out / "val", 1, cfg, train_glyphs, train_labels, cfg.train, cfg.val);
  write_split(out / "test", 2, cfg, test_glyphs, test_labels, 0, cfg.test);

  nlohmann::ordered_json manifest;
  manifest["format_version"] = kDatasetFormatVersion;
  manifest["variant"] = to_string(cfg.variant);
  manifest["seed"] = cfg.seed;
  manifest["counts"] = {{"train", cfg.train}, {"val", cfg.val}, {"test", cfg.test}};
  manifest["image_shape"] = {train_glyphs.height, train_glyphs.width, cfg.variant == Variant::Colour ? 3 : 1};
  std::ofstream mf(out / "manifest.json");
  if (!mf) throw IoError("cannot write manifest under " + out.string());
  mf << manifest.dump(2) << '\n';
}

Split load_split(const std::filesystem::path& dataset, const std::string& split) {
  Split s;
  std::ifstream mf(dataset / "manifest.json");
  if (!mf) throw IoError("no dataset manifest under " + dataset.string());
  auto manifest = nlohmann::json::parse(mf);
  s.variant = parse_variant(manifest.at("variant").get<std::string>());
  s.images = read_idx_images(dataset / split / "images.idx");

  std::ifstream in(dataset / split / "attributes.csv");
  if (!in) throw IoError("missing attributes.csv for split '" + split + "'");
  std::string line;
  std::getline(in, line);
  std::vector<std::string> cols;
  {
    std::stringstream hs(line);
    std::string c;
    while (std::getline(hs, c, ',')) cols.push_back(c);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    Attributes a;
    for (const auto& c : cols) {
      if (!std::getline(ls, cell, ',')) throw IoError("short row in attributes.csv");
      double v = std::stod(cell);
      if (c == "index") a.index = static_cast<int>(v);
      else if (c == "d") a.d = static_cast<int>(v);
      else if (c == "t") a.t = v;
      else if (c == "i") a.i = v;
      else if (c == "s") a.s = v;
      else if (c == "h") a.h = v;
      else if (c == "branch_s") a.branch_s = static_cast<int>(v);
      else if (c == "branch_h") a.branch_h = static_cast<int>(v);
    }
    s.attributes.push_back(a);
  }
  if (static_cast<int>(s.attributes.size()) != s.images.count)
    throw IoError("attribute rows and image count differ in split '" + split + "'");
  return s;
}

}  // namespace dscm::morpho
