#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dscm/error.hpp"

namespace dscm::morpho {

/// Row-major raster with values on the [0, 255] scale. Channels are interleaved.
struct Raster {
  int height = 28;
  int width = 28;
  int channels = 1;
  std::vector<float> data;

  Raster() = default;
  Raster(int h, int w, int c = 1, float fill = 0.0f)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int r, int col, int ch = 0) { return data[(static_cast<std::size_t>(r) * width + col) * channels + ch]; }
  float at(int r, int col, int ch = 0) const { return data[(static_cast<std::size_t>(r) * width + col) * channels + ch]; }
  std::vector<std::uint8_t> to_bytes() const;
  static Raster from_bytes(const std::uint8_t* p, int h, int w, int c = 1);
};

/// Raised when a morphometric is undefined, i.e. the image has no foreground.
class MeasurementError : public DomainError {
 public:
  explicit MeasurementError(const std::string& what) : DomainError("image", what) {}
};

enum class Variant { Grayscale, Colour };
Variant parse_variant(const std::string& s);
std::string to_string(Variant v);

enum class MorphOp { Thickness, Slant, Intensity, Hue };

/// Exogenous record of one sample. branch_* is 0 for the causal mechanism
/// and 1 when the value was drawn from the source/uniform distribution.
struct Exogenous {
  double eps_t = 0.0;
  double eps_i = 0.0;
  double eps_s = 0.0;
  double eps_h = 0.0;
  int branch_s = 0;
  int branch_h = 0;
};

struct ParentSample {
  int d = 0;
  double t = 0.0;
  double i = 0.0;  // grayscale only
  double s = 0.0;
  double h = 0.0;  // colour only
  Exogenous exo;
};

/// Draws (t, i, s[, h]) for digit d. source_slant is the measured slant of the
/// base glyph, used when the slant falls in the source-distribution branch.
ParentSample sample_parents(std::mt19937_64& rng, int d, Variant variant, double source_slant);

/// Per-sample generator, seeded from (seed, split, index) so samples are independent of order.
std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t split, std::uint64_t index);

struct Morphometrics {
  double thickness = 0.0;  // pixels
  double intensity = 0.0;  // mean foreground grey level
  double slant = 0.0;      // degrees, positive when the top leans right
};

/// Thickness from the skeleton's distance transform, slant from second-order
/// moments, intensity as the mean foreground value. Colour images are measured
/// on their value channel.
Morphometrics measure_morphometrics(const Raster& image);

double measure_slant(const Raster& gray);

Raster apply_morphology(const Raster& image, MorphOp op, double target);

/// Grey level -> HSV(h, 1, v) colour raster.
Raster set_hue(const Raster& gray, double hue);

// Building blocks, exposed for tests.
Raster to_gray(const Raster& image);
Raster upsample(const Raster& gray, int factor);
Raster downsample(const Raster& hires, int factor);
std::vector<std::uint8_t> threshold_mask(const Raster& gray, float threshold);
std::vector<std::uint8_t> skeletonize(std::vector<std::uint8_t> mask, int height, int width);
/// Exact Euclidean distance from each pixel to the nearest pixel where mask == 0.
std::vector<float> distance_to_background(const std::vector<std::uint8_t>& mask, int height, int width);

// ------------------------------------------------------------------ IDX files

struct IdxImages {
  int count = 0;
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;

  Raster raster(int index) const;
};

IdxImages read_idx_images(const std::filesystem::path& path);
std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path);
void write_idx_images(const std::filesystem::path& path, const IdxImages& images);
void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels);

// ------------------------------------------------------------------ datasets

struct GeneratorConfig {
  Variant variant = Variant::Grayscale;
  /// Directory holding MNIST-format train-/t10k- image and label files.
  std::filesystem::path source;
  int train = 50000;
  int val = 10000;
  int test = 10000;
  std::uint64_t seed = 0;
};

inline constexpr int kDatasetFormatVersion = 1;

/// Writes <out>/{train,val,test}/{images.idx,attributes.csv,exogenous.csv} and <out>/manifest.json.
/// Train and val glyphs come from the source training file, test glyphs from the test file.
void generate_dataset(const GeneratorConfig& config, const std::filesystem::path& out);

/// Finds MNIST image/label files in a directory (train-images-idx3-ubyte etc.).
struct SourceFiles {
  std::filesystem::path train_images, train_labels, test_images, test_labels;
};
SourceFiles locate_source(const std::filesystem::path& dir);

struct Attributes {
  int index = 0;
  int d = 0;
  double t = 0.0;
  double i = 0.0;
  double s = 0.0;
  double h = 0.0;
  int branch_s = 0;
  int branch_h = 0;
};

/// One split of a generated dataset.
struct Split {
  IdxImages images;
  std::vector<Attributes> attributes;
  Variant variant = Variant::Grayscale;
};

Split load_split(const std::filesystem::path& dataset, const std::string& split);

}  // namespace dscm::morpho
