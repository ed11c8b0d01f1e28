#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ddrvlad/codebook.h"
#include "ddrvlad/ddr.h"

namespace ddrvlad {

/// Guard below which a residual norm, a standard deviation, or a final L2
/// norm is treated as zero.
inline constexpr double kNormGuard = 1e-12;

enum class VladStage { raw, residual_normalized, zscored, l2_final, whitened };
enum class ZScoreScope { global, per_word };

std::string to_string(VladStage s);
std::string to_string(ZScoreScope s);
ZScoreScope parse_zscore_scope(const std::string& name);

struct VladVector {
  std::size_t words = 0;
  std::size_t word_dim = 0;
  std::vector<double> values;
  VladStage stage = VladStage::raw;
  std::optional<std::size_t> whitened_dim;
  /// Set when a normalization step met an all-zero (or near-zero) vector.
  bool degenerate = false;
  /// Set when the Z-score step found sigma below kNormGuard and was skipped.
  bool sigma_guard_fired = false;
};

struct VladConfig {
  ZScoreScope zscore_scope = ZScoreScope::global;
};

struct LocVladConfig {
  /// Fraction of spatial cells kept per axis, centered.
  double central_fraction = 0.75;
  /// Database images get plain VLAD when true.
  bool queries_only = true;
};

/// Per-word sum of residuals x - mu_q(x). When normalize_residuals is set
/// each residual is divided by its L2 norm first (residuals shorter than
/// kNormGuard contribute zero). Words without descriptors stay zero.
VladVector aggregate_residuals(const DescriptorSet& ds, const Codebook& cb, bool normalize_residuals);

/// Subtracts the mean and divides by the population standard deviation,
/// either over the whole vector or per word block. Blocks whose deviation
/// is below kNormGuard are left unchanged.
VladVector zscore_normalize(VladVector v, ZScoreScope scope = ZScoreScope::global);

/// Scales to unit L2 norm; near-zero vectors are flagged degenerate instead.
VladVector l2_finalize(VladVector v);

/// Residual-normalized aggregation, Z-score, then final L2.
VladVector vlad_encode(const DescriptorSet& ds, const Codebook& cb, const VladConfig& cfg = {});

/// Half-open [begin, end) row and column ranges of the centered window.
struct CellWindow {
  std::uint32_t row_begin = 0, row_end = 0, col_begin = 0, col_end = 0;
  bool contains(const CellIndex& c) const {
    return c.h >= row_begin && c.h < row_end && c.w >= col_begin && c.w < col_end;
  }
  bool covers(std::uint32_t height, std::uint32_t width) const {
    return row_begin == 0 && col_begin == 0 && row_end == height && col_end == width;
  }
};

/// ceil(fraction * H) x ceil(fraction * W) cells, centered (offset floored).
CellWindow central_window(std::uint32_t height, std::uint32_t width, double fraction);

/// Mean of the whole-image VLAD and the central-window VLAD, re-normalized.
/// ds must carry spatial origins.
VladVector locvlad_encode(const DescriptorSet& ds, const Codebook& cb, const LocVladConfig& loc,
                          const VladConfig& cfg = {});
VladVector locvlad_encode(const FeatureMap& fm, const DdrConfig& ddr, const LocVladConfig& loc,
                          const Codebook& cb, const VladConfig& cfg = {});

}  // namespace ddrvlad
