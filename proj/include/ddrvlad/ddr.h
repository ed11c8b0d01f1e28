#pragma once

#include <cstdint>
#include <vector>

#include "ddrvlad/common.h"
#include "ddrvlad/tensor_store.h"

namespace ddrvlad {

inline constexpr std::uint32_t kDefaultSplitFactor = 128;

struct DdrConfig {
  /// Dimension of each output descriptor. Zero means "whole depth vector"
  /// (DDR disabled: one descriptor per spatial cell).
  std::uint32_t split_factor = kDefaultSplitFactor;
  bool apply_root_square = true;
};

/// Spatial cell a descriptor was cut from.
struct CellIndex {
  std::uint32_t h = 0;
  std::uint32_t w = 0;
  friend bool operator==(const CellIndex&, const CellIndex&) = default;
};

/// n descriptors of dimension d, one per matrix row.
struct DescriptorSet {
  Matrix rows;
  /// Per-row spatial origin; empty when the set was not cut from a map.
  std::vector<CellIndex> origin;
  std::uint32_t grid_height = 0;
  std::uint32_t grid_width = 0;

  std::size_t size() const { return rows.rows; }
  std::size_t dim() const { return rows.cols; }
};

/// Splits every cell's depth vector into D / split_factor consecutive
/// chunks. Row order is (h, w, j) with j innermost, so row k of cell (h, w)
/// holds channels [k*s, (k+1)*s). Descriptors never mix cells.
DescriptorSet ddr_split(const FeatureMap& fm, const DdrConfig& cfg);

/// L1-normalizes each row, then maps x -> sign(x) * sqrt(|x|).
/// All-zero rows are left untouched.
DescriptorSet root_square_normalize(DescriptorSet ds);

/// ddr_split followed by root_square_normalize when cfg asks for it.
DescriptorSet extract_descriptors(const FeatureMap& fm, const DdrConfig& cfg);

}  // namespace ddrvlad
