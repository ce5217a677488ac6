#include "regvit/interp.hpp"

#include <algorithm>
#include <cmath>

#include "regvit/errors.hpp"

namespace regvit {

void ResizeSpec::validate() const {
  if (src_h == 0 || src_w == 0 || dst_h == 0 || dst_w == 0) throw ConfigError("resize extents must be at least 1");
  if (!std::isfinite(a)) throw ConfigError("kernel parameter a must be finite");
}

double cubic_kernel(double t, double a) {
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return (((t - 5.0) * t + 8.0) * t - 4.0) * a;
  return 0.0;
}

Tensor resize_weights(std::size_t in, std::size_t out, bool antialias, double a) {
  if (in == 0 || out == 0) throw ConfigError("resize extents must be at least 1");
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double stretch = antialias && scale > 1.0 ? scale : 1.0;
  const double support = 2.0 * stretch;
  Tensor w({out, in}, 0.0);
  for (std::size_t i = 0; i < out; ++i) {
    const double centre = (static_cast<double>(i) + 0.5) * scale - 0.5;
    const auto lo = static_cast<long>(std::floor(centre - support));
    const auto hi = static_cast<long>(std::ceil(centre + support));
    double total = 0.0;
    for (long j = lo; j <= hi; ++j) {
      const double k = cubic_kernel((static_cast<double>(j) - centre) / stretch, a);
      if (k == 0.0) continue;
      const auto src = static_cast<std::size_t>(std::clamp(j, 0L, static_cast<long>(in) - 1));
      w.at(i, src) += k;
      total += k;
    }
    if (stretch > 1.0)
      for (std::size_t j = 0; j < in; ++j) w.at(i, j) /= total;
  }
  return w;
}

Tensor bicubic_resize(const Tensor& map, const ResizeSpec& spec) {
  spec.validate();
  if (map.rank() != 3 || map.dim(0) != spec.src_h || map.dim(1) != spec.src_w) {
    throw DimensionError("resize expects " + std::to_string(spec.src_h) + "x" + std::to_string(spec.src_w) +
                         "xd, got " + shape_to_string(map.shape()));
  }
  const Tensor ry = resize_weights(spec.src_h, spec.dst_h, spec.antialias, spec.a);
  const Tensor rx = resize_weights(spec.src_w, spec.dst_w, spec.antialias, spec.a);
  const std::size_t d = map.dim(2);
  // Rows first: [H, W·d] → [H', W·d]; then columns per output row.
  const Tensor rows = matmul(ry, map.reshaped({spec.src_h, spec.src_w * d}));
  Tensor out({spec.dst_h, spec.dst_w, d});
  for (std::size_t i = 0; i < spec.dst_h; ++i) {
    const Tensor slab = matmul(rx, rows.slice0(i, i + 1).reshaped({spec.src_w, d}));
    std::copy(slab.data().begin(), slab.data().end(), out.data().begin() + static_cast<long>(i * spec.dst_w * d));
  }
  return out;
}

ad::Var bicubic_resize(ad::Var map, const ResizeSpec& spec) {
  spec.validate();
  const Tensor& x = map.value();
  if (x.rank() != 2 || x.dim(0) != spec.src_h || x.dim(1) != spec.src_w) {
    throw DimensionError("resize expects " + std::to_string(spec.src_h) + "x" + std::to_string(spec.src_w) + ", got " +
                         shape_to_string(x.shape()));
  }
  ad::Tape& tape = *map.tape;
  const ad::Var ry = tape.constant(resize_weights(spec.src_h, spec.dst_h, spec.antialias, spec.a));
  const ad::Var rx = tape.constant(resize_weights(spec.src_w, spec.dst_w, spec.antialias, spec.a));
  return ad::matmul_nt(ad::matmul(ry, map), rx);
}

Tensor unit_gradient_map(const ResizeSpec& spec) {
  ad::Tape tape;
  const ad::Var x = tape.leaf(Tensor::zeros({spec.src_h, spec.src_w}));
  const ad::Var total = ad::sum(bicubic_resize(x, spec));
  return ad::backward(tape, total)[x];
}

double striping_metric(const Tensor& g) {
  if (g.rank() != 2) throw DimensionError("striping metric expects a 2-D map, got " + shape_to_string(g.shape()));
  const std::size_t rows = g.dim(0), cols = g.dim(1);
  std::vector<double> sums(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) sums[c] += g.at(r, c);
  double mean = 0.0;
  for (double s : sums) mean += s;
  mean /= static_cast<double>(cols);
  if (mean == 0.0) throw NumericError("striping metric is undefined for a map whose column sums average to 0");
  double var = 0.0;
  for (double s : sums) var += (s - mean) * (s - mean);
  return std::sqrt(var / static_cast<double>(cols)) / std::abs(mean);
}

}  // namespace regvit
