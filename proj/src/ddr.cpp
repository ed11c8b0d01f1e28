#include "ddrvlad/ddr.h"

#include <cmath>

namespace ddrvlad {

DescriptorSet ddr_split(const FeatureMap& fm, const DdrConfig& cfg) {
  const std::uint32_t split = cfg.split_factor == 0 ? fm.depth : cfg.split_factor;
  if (fm.depth % split != 0)
    throw Error("depth " + std::to_string(fm.depth) + " is not divisible by split factor " +
                std::to_string(split));
  const std::uint32_t per_cell = fm.depth / split;

  DescriptorSet ds;
  ds.grid_height = fm.height;
  ds.grid_width = fm.width;
  ds.rows = Matrix(fm.cells() * per_cell, split);
  ds.origin.reserve(ds.rows.rows);
  // The H, W, D layout already stores each cell's depth vector contiguously,
  // so row r is simply data[r*split, (r+1)*split).
  for (std::size_t i = 0; i < fm.data.size(); ++i) ds.rows.data[i] = fm.data[i];
  for (std::uint32_t h = 0; h < fm.height; ++h)
    for (std::uint32_t w = 0; w < fm.width; ++w)
      for (std::uint32_t j = 0; j < per_cell; ++j) ds.origin.push_back({h, w});
  return ds;
}

DescriptorSet root_square_normalize(DescriptorSet ds) {
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto row = ds.rows.row(i);
    double l1 = 0.0;
    for (double x : row) l1 += std::abs(x);
    if (l1 == 0.0) continue;
    for (double& x : row) {
      const double y = x / l1;
      x = std::copysign(std::sqrt(std::abs(y)), y);
    }
  }
  return ds;
}

DescriptorSet extract_descriptors(const FeatureMap& fm, const DdrConfig& cfg) {
  DescriptorSet ds = ddr_split(fm, cfg);
  if (cfg.apply_root_square) ds = root_square_normalize(std::move(ds));
  return ds;
}

}  // namespace ddrvlad
