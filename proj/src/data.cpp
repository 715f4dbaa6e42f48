#include "dscm/data.hpp"

#include <cstdio>
#include <cstring>
#include <memory>

#include <png.h>

#include "dscm/error.hpp"

namespace dscm::data {

ParentVector to_parents(const morpho::Attributes& a, morpho::Variant variant) {
  ParentVector pa;
  pa["d"] = a.d;
  pa["t"] = a.t;
  pa["s"] = a.s;
  if (variant == morpho::Variant::Grayscale)
    pa["i"] = a.i;
  else
    pa["h"] = a.h;
  return pa;
}

TensorSplit load_tensors(const std::filesystem::path& dataset, const std::string& split, int64_t limit) {
  auto s = morpho::load_split(dataset, split);
  int64_t n = s.images.count;
  if (limit >= 0) n = std::min(n, limit);
  const int64_t H = s.images.height, W = s.images.width, C = s.images.channels;
  TensorSplit out;
  out.variant = s.variant;
  auto raw = torch::from_blob(s.images.data.data(), {static_cast<int64_t>(s.images.count), H, W, C}, torch::kUInt8);
  out.images = raw.narrow(0, 0, n).permute({0, 3, 1, 2}).contiguous().clone();
  out.labels = torch::empty({n}, torch::kLong);
  for (int64_t k = 0; k < n; ++k) {
    const auto& a = s.attributes[static_cast<std::size_t>(k)];
    out.labels[k] = a.d;
    out.parents.push_back(to_parents(a, s.variant));
  }
  return out;
}

morpho::Raster to_raster(const torch::Tensor& unit_image) {
  auto img = unit_image.detach().to(torch::kFloat).clamp(0.0, 1.0).mul(255.0).permute({1, 2, 0}).contiguous();
  morpho::Raster r(static_cast<int>(img.size(0)), static_cast<int>(img.size(1)), static_cast<int>(img.size(2)));
  std::memcpy(r.data.data(), img.data_ptr<float>(), r.data.size() * sizeof(float));
  return r;
}

torch::Tensor image_grid(const std::vector<torch::Tensor>& columns, int pad) {
  if (columns.empty()) throw ArgumentError("image grid needs at least one column");
  const auto& first = columns.front();
  const int64_t B = first.size(0), C = first.size(1), H = first.size(2), W = first.size(3);
  for (const auto& c : columns)
    if (!c.sizes().equals(first.sizes())) throw ArgumentError("grid columns must share a shape");
  const int64_t cols = static_cast<int64_t>(columns.size());
  auto grid = torch::ones({C, B * H + (B + 1) * pad, cols * W + (cols + 1) * pad});
  for (int64_t j = 0; j < cols; ++j)
    for (int64_t b = 0; b < B; ++b) {
      int64_t r0 = pad + b * (H + pad), c0 = pad + j * (W + pad);
      grid.narrow(1, r0, H).narrow(2, c0, W).copy_(columns[static_cast<std::size_t>(j)][b].to(torch::kFloat));
    }
  return grid;
}

void write_png(const std::filesystem::path& path, const torch::Tensor& unit_image) {
  if (unit_image.dim() != 3 || (unit_image.size(0) != 1 && unit_image.size(0) != 3))
    throw ArgumentError("PNG output expects a [1|3, H, W] image");
  auto bytes = unit_image.detach().to(torch::kFloat).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8)
                   .permute({1, 2, 0}).contiguous();
  const int H = static_cast<int>(bytes.size(0)), W = static_cast<int>(bytes.size(1));
  const int C = static_cast<int>(bytes.size(2));

  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
               C == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto* base = bytes.data_ptr<std::uint8_t>();
  for (int r = 0; r < H; ++r) png_write_row(png, base + static_cast<std::size_t>(r) * W * C);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace dscm::data
