#pragma once

#include <cstddef>

#include "regvit/autodiff.hpp"
#include "regvit/tensor.hpp"

// Separable bicubic resizing of H×W grids, with optional antialiasing when
// downscaling, plus the unit-gradient diagnostics built on it.
namespace regvit {

struct ResizeSpec {
  std::size_t src_h = 16, src_w = 16;
  std::size_t dst_h = 7, dst_w = 7;
  bool antialias = false;
  double a = -0.5;  // Catmull-Rom

  void validate() const;
};

// Cubic convolution kernel with parameter a.
double cubic_kernel(double t, double a);

// out × in weights along one axis. Sample centres sit at half-pixel offsets
// and out-of-range taps clamp to the edge. With antialias and out < in the
// kernel is stretched by in/out and each row renormalized to sum 1.
Tensor resize_weights(std::size_t in, std::size_t out, bool antialias, double a);

// H×W×d → H'×W'×d.
Tensor bicubic_resize(const Tensor& map, const ResizeSpec& spec);
// H×W → H'×W' on a tape, as R_y · X · R_xᵀ.
ad::Var bicubic_resize(ad::Var map, const ResizeSpec& spec);

// Gradient of sum(resize(x)) with respect to x (H×W), i.e. Rᵀ·1.
Tensor unit_gradient_map(const ResizeSpec& spec);

// Coefficient of variation (population std / mean) of the column sums of g.
double striping_metric(const Tensor& g);

}  // namespace regvit
