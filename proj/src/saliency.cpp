#include "sact/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sact {

Field<double> upsample_nearest(const Field<double>& field, Index height, Index width) {
  if (field.size() == 0) throw std::invalid_argument("upsample_nearest: empty field");
  Field<double> out(height, width);
  for (Index i = 0; i < height; ++i)
    for (Index j = 0; j < width; ++j) out(i, j) = field(i * field.rows() / height, j * field.cols() / width);
  return out;
}

Field<double> total_ponder_map(std::span<const Field<double>> maps) {
  if (maps.empty()) throw std::invalid_argument("total_ponder_map: at least one block map is required");
  Index H = 0, W = 0;
  for (const auto& m : maps) {
    H = std::max<Index>(H, m.rows());
    W = std::max<Index>(W, m.cols());
  }
  Field<double> total = Field<double>::Zero(H, W);
  for (const auto& m : maps) total += upsample_nearest(m, H, W);
  return total;
}

Field<double> normalize_map(const Field<double>& field) {
  if (field.size() == 0) return field;
  const double lo = field.minCoeff(), hi = field.maxCoeff();
  if (!(hi > lo)) return Field<double>::Zero(field.rows(), field.cols());
  return (field - lo) / (hi - lo);
}

namespace {

// Index into [0, n) of the half-sample symmetric, 2n-periodic extension.
Index reflect(Index x, Index n) {
  const Index period = 2 * n;
  Index m = x % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

std::vector<double> gaussian_taps(double s) {
  const auto r = static_cast<Index>(std::ceil(3.0 * s));
  std::vector<double> taps(static_cast<std::size_t>(2 * r + 1));
  double sum = 0;
  for (Index d = -r; d <= r; ++d) {
    const double v = std::exp(-static_cast<double>(d * d) / (2.0 * s * s));
    taps[static_cast<std::size_t>(d + r)] = v;
    sum += v;
  }
  for (double& v : taps) v /= sum;
  return taps;
}

}  // namespace

Field<double> gaussian_blur(const Field<double>& field, double s) {
  if (!(s > 0)) throw std::invalid_argument("gaussian_blur: s must be > 0");
  const auto taps = gaussian_taps(s);
  const Index r = static_cast<Index>(taps.size() / 2);
  const Index H = field.rows(), W = field.cols();
  Field<double> rows(H, W), out(H, W);
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j) {
      double acc = 0;
      for (Index d = -r; d <= r; ++d) acc += taps[static_cast<std::size_t>(d + r)] * field(i, reflect(j + d, W));
      rows(i, j) = acc;
    }
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j) {
      double acc = 0;
      for (Index d = -r; d <= r; ++d) acc += taps[static_cast<std::size_t>(d + r)] * rows(reflect(i + d, H), j);
      out(i, j) = acc;
    }
  return out;
}

Field<double> center_baseline(Index height, Index width, const CenterBaseline& config) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("center_baseline: empty field");
  if (!(config.sigma_fraction > 0)) throw std::invalid_argument("center_baseline: sigma fraction must be > 0");
  const double sigma = config.sigma_fraction * static_cast<double>(std::min(height, width));
  const double ci = static_cast<double>(height - 1) / 2.0, cj = static_cast<double>(width - 1) / 2.0;
  Field<double> b(height, width);
  for (Index i = 0; i < height; ++i)
    for (Index j = 0; j < width; ++j) {
      const double di = static_cast<double>(i) - ci, dj = static_cast<double>(j) - cj;
      b(i, j) = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
    }
  return b / b.maxCoeff();
}

Field<double> add_center_baseline(const Field<double>& field, double gamma, const CenterBaseline& config) {
  if (!(gamma >= 0)) throw std::invalid_argument("add_center_baseline: gamma must be >= 0");
  return field + gamma * center_baseline(field.rows(), field.cols(), config);
}

Field<double> postprocess_saliency(const Field<double>& ponder, const SaliencyParams& params) {
  return add_center_baseline(gaussian_blur(normalize_map(ponder), params.blur_s), params.gamma, params.center);
}

double auc_judd(const Field<double>& saliency, std::span<const Fixation> fixations) {
  if (fixations.empty()) throw std::invalid_argument("auc_judd: at least one fixation is required");
  const Index H = saliency.rows(), W = saliency.cols();
  std::vector<char> fixated(static_cast<std::size_t>(H * W), 0);
  std::vector<double> positives;
  for (const auto& [r, c] : fixations) {
    if (r < 0 || r >= H || c < 0 || c >= W)
      throw std::out_of_range("auc_judd: fixation (" + std::to_string(r) + "," + std::to_string(c) +
                              ") outside the " + std::to_string(H) + "x" + std::to_string(W) + " map");
    fixated[static_cast<std::size_t>(r * W + c)] = 1;
    positives.push_back(saliency(r, c));
  }
  std::vector<double> negatives;
  for (Index i = 0; i < H * W; ++i)
    if (!fixated[static_cast<std::size_t>(i)]) negatives.push_back(saliency(i / W, i % W));
  if (negatives.empty()) throw std::invalid_argument("auc_judd: every pixel is fixated, no negatives");
  std::sort(negatives.begin(), negatives.end());
  double wins = 0;
  for (double v : positives) {
    const auto lo = std::lower_bound(negatives.begin(), negatives.end(), v);
    const auto hi = std::upper_bound(lo, negatives.end(), v);
    wins += static_cast<double>(lo - negatives.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(positives.size()) * static_cast<double>(negatives.size()));
}

std::vector<GridPoint> saliency_grid_search(std::span<const Field<double>> ponder_maps,
                                            std::span<const std::vector<Fixation>> fixations,
                                            std::span<const double> blur_values, std::span<const double> gamma_values,
                                            const CenterBaseline& center) {
  if (ponder_maps.size() != fixations.size())
    throw std::invalid_argument("saliency_grid_search: maps and fixation sets differ in count");
  if (ponder_maps.empty()) throw std::invalid_argument("saliency_grid_search: no images");
  std::vector<GridPoint> out;
  for (double s : blur_values)
    for (double g : gamma_values) {
      double sum = 0;
      for (std::size_t i = 0; i < ponder_maps.size(); ++i)
        sum += auc_judd(postprocess_saliency(ponder_maps[i], SaliencyParams{s, g, center}), fixations[i]);
      out.push_back(GridPoint{s, g, sum / static_cast<double>(ponder_maps.size())});
    }
  return out;
}

}  // namespace sact
