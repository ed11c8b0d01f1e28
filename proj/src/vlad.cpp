#include "ddrvlad/vlad.h"

#include <cmath>

namespace ddrvlad {

std::string to_string(VladStage s) {
  switch (s) {
    case VladStage::raw: return "raw";
    case VladStage::residual_normalized: return "residual_normalized";
    case VladStage::zscored: return "zscored";
    case VladStage::l2_final: return "l2_final";
    case VladStage::whitened: return "whitened";
  }
  return "unknown";
}

std::string to_string(ZScoreScope s) { return s == ZScoreScope::global ? "global" : "per_word"; }

ZScoreScope parse_zscore_scope(const std::string& name) {
  if (name == "global") return ZScoreScope::global;
  if (name == "per_word") return ZScoreScope::per_word;
  throw Error("unknown zscore scope '" + name + "' (expected global or per_word)");
}

VladVector aggregate_residuals(const DescriptorSet& ds, const Codebook& cb, bool normalize_residuals) {
  if (ds.size() == 0) throw Error("cannot encode an empty descriptor set");
  if (ds.dim() != cb.dim())
    throw Error("descriptor dimension " + std::to_string(ds.dim()) + " does not match codebook dimension " +
                std::to_string(cb.dim()));
  const std::size_t d = cb.dim();
  VladVector v;
  v.words = cb.size();
  v.word_dim = d;
  v.values.assign(cb.size() * d, 0.0);
  v.stage = normalize_residuals ? VladStage::residual_normalized : VladStage::raw;

  std::vector<double> residual(d);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto x = ds.rows.row(i);
    const std::size_t word = cb.quantize(x);
    const auto mu = cb.centroid(word);
    for (std::size_t j = 0; j < d; ++j) residual[j] = x[j] - mu[j];
    double scale = 1.0;
    if (normalize_residuals) {
      const double norm = l2_norm(residual);
      if (norm < kNormGuard) continue;
      scale = 1.0 / norm;
    }
    double* block = v.values.data() + word * d;
    for (std::size_t j = 0; j < d; ++j) block[j] += residual[j] * scale;
  }
  return v;
}

namespace {

// Returns false when the deviation guard fired.
bool standardize(std::span<double> block) {
  const double n = static_cast<double>(block.size());
  double mean = 0.0;
  for (double x : block) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : block) var += (x - mean) * (x - mean);
  const double sigma = std::sqrt(var / n);
  if (sigma < kNormGuard) return false;
  for (double& x : block) x = (x - mean) / sigma;
  return true;
}

}  // namespace

VladVector zscore_normalize(VladVector v, ZScoreScope scope) {
  if (v.values.empty()) throw Error("cannot normalize an empty vector");
  std::span<double> all(v.values);
  if (scope == ZScoreScope::global || v.word_dim == 0) {
    v.sigma_guard_fired = !standardize(all);
  } else {
    for (std::size_t w = 0; w < v.words; ++w)
      v.sigma_guard_fired |= !standardize(all.subspan(w * v.word_dim, v.word_dim));
  }
  v.stage = VladStage::zscored;
  return v;
}

VladVector l2_finalize(VladVector v) {
  const double norm = l2_norm(v.values);
  if (norm < kNormGuard) {
    v.degenerate = true;
    std::fill(v.values.begin(), v.values.end(), 0.0);
  } else {
    for (double& x : v.values) x /= norm;
  }
  if (v.stage != VladStage::whitened) v.stage = VladStage::l2_final;
  return v;
}

VladVector vlad_encode(const DescriptorSet& ds, const Codebook& cb, const VladConfig& cfg) {
  return l2_finalize(zscore_normalize(aggregate_residuals(ds, cb, true), cfg.zscore_scope));
}

CellWindow central_window(std::uint32_t height, std::uint32_t width, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw Error("central_fraction must lie in (0, 1], got " + std::to_string(fraction));
  const auto extent = [fraction](std::uint32_t n) {
    auto e = static_cast<std::uint32_t>(std::ceil(fraction * static_cast<double>(n)));
    return std::min(e, n);
  };
  const std::uint32_t rows = extent(height);
  const std::uint32_t cols = extent(width);
  CellWindow win;
  win.row_begin = (height - rows) / 2;
  win.row_end = win.row_begin + rows;
  win.col_begin = (width - cols) / 2;
  win.col_end = win.col_begin + cols;
  return win;
}

VladVector locvlad_encode(const DescriptorSet& ds, const Codebook& cb, const LocVladConfig& loc,
                          const VladConfig& cfg) {
  if (ds.origin.size() != ds.size())
    throw Error("locVLAD needs descriptors with spatial origins");
  const CellWindow win = central_window(ds.grid_height, ds.grid_width, loc.central_fraction);
  VladVector full = vlad_encode(ds, cb, cfg);
  if (win.covers(ds.grid_height, ds.grid_width)) return full;

  DescriptorSet center;
  center.grid_height = ds.grid_height;
  center.grid_width = ds.grid_width;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (win.contains(ds.origin[i])) keep.push_back(i);
  if (keep.empty()) throw Error("locVLAD central window holds no descriptors");
  center.rows = Matrix(keep.size(), ds.dim());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const auto src = ds.rows.row(keep[r]);
    std::copy(src.begin(), src.end(), center.rows.row(r).begin());
    center.origin.push_back(ds.origin[keep[r]]);
  }
  const VladVector central = vlad_encode(center, cb, cfg);

  VladVector mean = full;
  for (std::size_t i = 0; i < mean.values.size(); ++i)
    mean.values[i] = 0.5 * (full.values[i] + central.values[i]);
  mean.degenerate = false;
  mean.sigma_guard_fired = full.sigma_guard_fired || central.sigma_guard_fired;
  return l2_finalize(std::move(mean));
}

VladVector locvlad_encode(const FeatureMap& fm, const DdrConfig& ddr, const LocVladConfig& loc,
                          const Codebook& cb, const VladConfig& cfg) {
  return locvlad_encode(extract_descriptors(fm, ddr), cb, loc, cfg);
}

}  // namespace ddrvlad
