#pragma once

#include "sact/tensor.hpp"

#include <span>
#include <utility>
#include <vector>

namespace sact {

using Fixation = std::pair<Index, Index>;  // (row, col)

/// Nearest-neighbour resize: target (i, j) reads source (floor(i*h/H), floor(j*w/W)).
Field<double> upsample_nearest(const Field<double>& field, Index height, Index width);

/// Every map resized to the largest extent among them, then summed positionwise.
Field<double> total_ponder_map(std::span<const Field<double>> maps);

/// (x - min) / (max - min); all zeros when max == min.
Field<double> normalize_map(const Field<double>& field);

/// Separable Gaussian with standard deviation `s`, radius ceil(3s), weights summing to one.
/// Borders use the half-sample symmetric extension, which keeps both constants and the field
/// sum unchanged.
Field<double> gaussian_blur(const Field<double>& field, double s);

struct CenterBaseline {
  double sigma_fraction = 0.25;  // sigma = fraction * min(H, W)
};

/// Isotropic Gaussian at ((H-1)/2, (W-1)/2), divided by its largest sample.
Field<double> center_baseline(Index height, Index width, const CenterBaseline& config = {});
Field<double> add_center_baseline(const Field<double>& field, double gamma, const CenterBaseline& config = {});

struct SaliencyParams {
  double blur_s = 10.0;
  double gamma = 0.005;
  CenterBaseline center;
};

/// normalize, blur, add the weighted center baseline.
Field<double> postprocess_saliency(const Field<double>& ponder, const SaliencyParams& params = {});

/// ROC area with fixated pixels as positives (one per fixation entry) and all other pixels as
/// negatives; ties count one half.
double auc_judd(const Field<double>& saliency, std::span<const Fixation> fixations);

struct GridPoint {
  double blur_s = 0;
  double gamma = 0;
  double auc = 0;  // mean over images
};

/// Evaluates every (s, gamma) pair; results in row-major grid order.
std::vector<GridPoint> saliency_grid_search(std::span<const Field<double>> ponder_maps,
                                            std::span<const std::vector<Fixation>> fixations,
                                            std::span<const double> blur_values, std::span<const double> gamma_values,
                                            const CenterBaseline& center = {});

}  // namespace sact
