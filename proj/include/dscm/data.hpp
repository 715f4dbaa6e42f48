#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "dscm/morpho.hpp"
#include "dscm/scm.hpp"

namespace dscm::data {

/// A dataset split as tensors.
struct TensorSplit {
  torch::Tensor images;  // uint8 [N, C, H, W]
  torch::Tensor labels;  // int64 [N], digit class
  std::vector<ParentVector> parents;
  morpho::Variant variant = morpho::Variant::Grayscale;

  int64_t size() const { return images.size(0); }
};

ParentVector to_parents(const morpho::Attributes& a, morpho::Variant variant);

/// First `limit` samples of a split (all when limit < 0).
TensorSplit load_tensors(const std::filesystem::path& dataset, const std::string& split, int64_t limit = -1);

/// [C, H, W] image on [0, 1] -> Raster on the 0..255 scale.
morpho::Raster to_raster(const torch::Tensor& unit_image);

/// Tiles columns of [B, C, H, W] batches on [0, 1]: one row per sample,
/// columns left to right, `pad` pixels of white between tiles. Returns [C, H', W'].
torch::Tensor image_grid(const std::vector<torch::Tensor>& columns, int pad = 2);

/// Writes a [C, H, W] image on [0, 1] (C = 1 or 3) as an 8-bit PNG.
void write_png(const std::filesystem::path& path, const torch::Tensor& unit_image);

}  // namespace dscm::data
