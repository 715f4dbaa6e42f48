#include "dscm/morpho.hpp"

#include "doctest_torch.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

using namespace dscm::morpho;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = fs::path(DSCM_TEST_DATA) / "mnist-mini";

IdxImages glyphs() { return read_idx_images(kSource / "t10k-images-idx3-ubyte"); }

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dscm_test_morpho_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Raster bar(int width_px) {
  Raster r(28, 28);
  for (int row = 4; row < 24; ++row)
    for (int c = 14 - width_px / 2; c < 14 - width_px / 2 + width_px; ++c) r.at(row, c) = 255.0f;
  return r;
}

}  // namespace

TEST_CASE("exogenous moments at N = 1e5") {
  const int N = 100000;
  double sum_t = 0.0;
  int branch_s = 0;
  for (int k = 0; k < N; ++k) {
    auto rng = sample_rng(11, 0, k);
    auto p = sample_parents(rng, k % 10, Variant::Grayscale, 13.0);
    sum_t += p.t;
    branch_s += p.exo.branch_s;
    if (p.exo.branch_s) CHECK(p.s == 13.0);
    CHECK(p.i > 0.0);
    CHECK(p.i < 191.0);
  }
  // t = 0.5 + Gamma(shape 10, rate 5): mean 2.5, variance 10 / 25
  CHECK(std::abs(sum_t / N - 2.5) < 3.0 * std::sqrt(0.4 / N));
  CHECK(std::abs(static_cast<double>(branch_s) / N - 0.2) < 3.0 * std::sqrt(0.2 * 0.8 / N));
}

TEST_CASE("slant given digit on the causal branch") {
  const int N = 100000;
  for (int d : {0, 4, 9}) {
    double sum = 0.0;
    int n = 0;
    for (int k = 0; k < N; ++k) {
      auto rng = sample_rng(5, static_cast<std::uint64_t>(d), k);
      auto p = sample_parents(rng, d, Variant::Grayscale, 0.0);
      if (p.exo.branch_s == 0) {
        sum += p.s;
        ++n;
      }
    }
    CAPTURE(d);
    CHECK(std::abs(sum / n - (-27.0 + 6.0 * d)) < 3.0 * 3.0 / std::sqrt(n));
  }
}

TEST_CASE("hue mixture") {
  const int N = 100000;
  int uniform = 0, n_causal = 0;
  double causal_sum = 0.0;
  for (int k = 0; k < N; ++k) {
    auto rng = sample_rng(3, 0, k);
    auto p = sample_parents(rng, 6, Variant::Colour, 0.0);
    CHECK(p.i == 0.0);
    if (p.exo.branch_h) {
      ++uniform;
      CHECK(p.h >= 0.0);
      CHECK(p.h < 1.0);
    } else {
      causal_sum += p.h;
      ++n_causal;
    }
  }
  CHECK(std::abs(static_cast<double>(uniform) / N - 0.5) < 3.0 * std::sqrt(0.25 / N));
  CHECK(std::abs(causal_sum / n_causal - 0.65) < 3.0 * 0.05 / std::sqrt(n_causal));
}

TEST_CASE("sampling is reproducible per index") {
  auto a = sample_rng(1, 2, 3), b = sample_rng(1, 2, 3), c = sample_rng(1, 2, 4);
  auto pa = sample_parents(a, 1, Variant::Grayscale, 0.0);
  auto pb = sample_parents(b, 1, Variant::Grayscale, 0.0);
  auto pc = sample_parents(c, 1, Variant::Grayscale, 0.0);
  CHECK(pa.t == pb.t);
  CHECK(pa.s == pb.s);
  CHECK(pa.t != pc.t);
  CHECK_THROWS_AS(sample_parents(a, 10, Variant::Grayscale, 0.0), dscm::ArgumentError);
}

TEST_CASE("distance transform and skeleton on a bar") {
  std::vector<std::uint8_t> mask(9 * 9, 0);
  for (int r = 1; r < 8; ++r)
    for (int c = 3; c < 6; ++c) mask[r * 9 + c] = 1;
  auto dt = distance_to_background(mask, 9, 9);
  CHECK(dt[4 * 9 + 4] == doctest::Approx(2.0));
  CHECK(dt[4 * 9 + 3] == doctest::Approx(1.0));
  CHECK(dt[0] == 0.0f);
  auto skel = skeletonize(mask, 9, 9);
  int on = 0;
  for (int r = 0; r < 9; ++r) {
    int row = 0;
    for (int c = 0; c < 9; ++c) row += skel[r * 9 + c];
    CHECK(row <= 1);
    on += row;
  }
  CHECK(on >= 3);
}

TEST_CASE("measurements on synthetic strokes") {
  auto m = measure_morphometrics(bar(3));
  CHECK(std::abs(m.thickness - 3.0) < 0.3);
  CHECK(std::abs(m.slant) < 1e-6);
  CHECK(m.intensity == doctest::Approx(255.0));
  CHECK_THROWS_AS(measure_morphometrics(Raster(28, 28)), MeasurementError);
}

TEST_CASE("morphological operations round trip through the measurers") {
  auto src = glyphs();
  double t_err = 0.0, i_err = 0.0, s_err = 0.0;
  int n = 0;
  for (int k = 0; k < src.count; ++k) {
    auto rng = sample_rng(0, 9, k);
    auto p = sample_parents(rng, 0, Variant::Grayscale, 0.0);
    double s_target = (k % 2 ? 1.0 : -1.0) * (15.0 + k % 20);
    auto img = apply_morphology(src.raster(k), MorphOp::Thickness, p.t);
    img = apply_morphology(img, MorphOp::Slant, s_target);
    img = apply_morphology(img, MorphOp::Intensity, p.i);
    auto q = Raster::from_bytes(img.to_bytes().data(), 28, 28);
    auto m = measure_morphometrics(q);
    t_err += std::abs(m.thickness - p.t) / p.t;
    i_err += std::abs(m.intensity - p.i) / p.i;
    s_err += std::abs(m.slant - s_target) / std::abs(s_target);
    ++n;
  }
  CHECK(t_err / n <= 0.10);
  CHECK(i_err / n <= 0.10);
  CHECK(s_err / n <= 0.10);
}

TEST_CASE("hue colouring") {
  auto g = glyphs().raster(0);
  auto c = set_hue(g, 0.0);
  REQUIRE(c.channels == 3);
  for (int r = 0; r < 28; ++r)
    for (int col = 0; col < 28; ++col) {
      CHECK(c.at(r, col, 0) == doctest::Approx(g.at(r, col)));
      CHECK(c.at(r, col, 1) == doctest::Approx(0.0f));
    }
  auto back = to_gray(set_hue(g, 0.37));
  for (std::size_t j = 0; j < g.data.size(); ++j) CHECK(back.data[j] == doctest::Approx(g.data[j]).epsilon(1e-4));
}

TEST_CASE("idx round trip") {
  auto dir = scratch("idx");
  fs::create_directories(dir);
  IdxImages img;
  img.count = 2;
  img.height = 2;
  img.width = 3;
  img.channels = 3;
  for (int j = 0; j < 36; ++j) img.data.push_back(static_cast<std::uint8_t>(j * 7));
  write_idx_images(dir / "c.idx", img);
  auto back = read_idx_images(dir / "c.idx");
  CHECK(back.channels == 3);
  CHECK(back.data == img.data);
  write_idx_labels(dir / "l.idx", {1, 2, 9});
  CHECK(read_idx_labels(dir / "l.idx") == std::vector<std::uint8_t>{1, 2, 9});
  CHECK_THROWS_AS(read_idx_images(dir / "missing.idx"), dscm::IoError);
  fs::remove_all(dir);
}

TEST_CASE("dataset generation") {
  GeneratorConfig cfg;
  cfg.source = kSource;
  cfg.train = 24;
  cfg.val = 8;
  cfg.test = 8;
  cfg.seed = 0;
  auto a = scratch("a"), b = scratch("b");
  generate_dataset(cfg, a);
  generate_dataset(cfg, b);
  for (auto f : {"manifest.json", "train/images.idx", "train/attributes.csv", "test/exogenous.csv"})
    CHECK(slurp(a / f) == slurp(b / f));

  auto manifest = nlohmann::json::parse(slurp(a / "manifest.json"));
  CHECK(manifest["counts"]["train"] == 24);
  CHECK(manifest["variant"] == "grayscale");
  auto header = slurp(a / "train/attributes.csv").substr(0, 24);
  CHECK(header.rfind("index,d,t,i,s,branch_s", 0) == 0);

  auto train = load_split(a, "train");
  CHECK(train.images.count == 24);
  CHECK(train.attributes.size() == 24);
  auto labels = read_idx_labels(kSource / "train-labels-idx1-ubyte");
  for (int k = 0; k < 24; ++k) CHECK(train.attributes[k].d == labels[k]);
  auto val = load_split(a, "val");
  for (int k = 0; k < 8; ++k) CHECK(val.attributes[k].d == labels[24 + k]);

  cfg.variant = Variant::Colour;
  auto c = scratch("c");
  generate_dataset(cfg, c);
  CHECK(slurp(c / "train/attributes.csv").rfind("index,d,t,s,h,branch_s,branch_h", 0) == 0);
  auto colour = load_split(c, "test");
  CHECK(colour.images.channels == 3);

  cfg.train = 60;
  CHECK_THROWS_AS(generate_dataset(cfg, scratch("d")), dscm::ArgumentError);
  cfg.source = kSource / "nowhere";
  CHECK_THROWS_AS(generate_dataset(cfg, scratch("e")), dscm::IoError);
  for (const auto& p : {a, b, c, scratch("d"), scratch("e")}) fs::remove_all(p);
}
