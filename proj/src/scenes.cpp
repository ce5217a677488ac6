#include "regvit/scenes.hpp"

#include <array>
#include <cmath>

#include "regvit/errors.hpp"
#include "regvit/rng.hpp"

namespace regvit {

namespace {

struct RadiusRange {
  std::int64_t lo, hi;
};

RadiusRange disk_radii(const SceneSpec& spec) {
  const auto lo = static_cast<std::int64_t>((spec.min_size) / 2);  // ceil((min-1)/2)
  const auto hi = static_cast<std::int64_t>((spec.max_size - 1) / 2);
  return {lo, hi};
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace

void SceneSpec::validate() const {
  if (channels == 0 || image_size == 0) throw SpecError("image_size and channels must be positive");
  if (min_size == 0 || min_size > max_size) {
    throw SpecError("object size range [" + std::to_string(min_size) + "," + std::to_string(max_size) + "] is empty");
  }
  if (max_size > image_size) {
    throw SpecError("object size " + std::to_string(max_size) + " cannot fit in a " + std::to_string(image_size) +
                    " pixel image");
  }
  const auto radii = disk_radii(*this);
  if (radii.lo > radii.hi) {
    throw SpecError("no odd disk diameter lies in [" + std::to_string(min_size) + "," + std::to_string(max_size) + "]");
  }
  if (noise_std < 0.0) throw SpecError("noise_std must be non-negative");
}

Dataset synth_dataset(std::uint64_t seed, std::size_t n, const SceneSpec& spec) {
  spec.validate();
  if (n == 0) throw SpecError("dataset size must be at least 1");
  const std::size_t size = spec.image_size;
  const std::size_t ch = spec.channels;
  const auto s = static_cast<std::int64_t>(size);
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    Sample sample;
    sample.label = i % 2;
    const ObjectShape shape = spec.class_rule == ClassRule::Shape
                                  ? (sample.label == 0 ? ObjectShape::Rect : ObjectShape::Disk)
                                  : (rng.uniform() < 0.5 ? ObjectShape::Rect : ObjectShape::Disk);

    std::vector<double> bg(ch), fg(ch);
    for (std::size_t c = 0; c < ch; ++c) {
      if (spec.class_rule == ClassRule::Background) {
        // Class 0 backgrounds are dark in channel 0, class 1 bright.
        const double centre = (c == 0) == (sample.label == 1) ? 0.8 : 0.2;
        bg[c] = clamp01(centre + rng.uniform(-0.1, 0.1));
      } else {
        bg[c] = rng.uniform(0.0, 1.0);
      }
      fg[c] = std::fmod(bg[c] + 0.5 + rng.uniform(-0.2, 0.2), 1.0);
    }

    sample.mask = Tensor({size, size});
    if (shape == ObjectShape::Rect) {
      const auto w = rng.uniform_int(static_cast<std::int64_t>(spec.min_size), static_cast<std::int64_t>(spec.max_size));
      const auto h = rng.uniform_int(static_cast<std::int64_t>(spec.min_size), static_cast<std::int64_t>(spec.max_size));
      const auto x0 = rng.uniform_int(0, s - w);
      const auto y0 = rng.uniform_int(0, s - h);
      sample.box = {static_cast<int>(x0), static_cast<int>(y0), static_cast<int>(x0 + w - 1), static_cast<int>(y0 + h - 1)};
      for (auto y = y0; y < y0 + h; ++y)
        for (auto x = x0; x < x0 + w; ++x) sample.mask[static_cast<std::size_t>(y * s + x)] = 1.0;
    } else {
      const auto radii = disk_radii(spec);
      const auto r = rng.uniform_int(radii.lo, radii.hi);
      const auto cx = rng.uniform_int(r, s - 1 - r);
      const auto cy = rng.uniform_int(r, s - 1 - r);
      sample.box = {static_cast<int>(cx - r), static_cast<int>(cy - r), static_cast<int>(cx + r), static_cast<int>(cy + r)};
      for (std::int64_t y = 0; y < s; ++y)
        for (std::int64_t x = 0; x < s; ++x)
          if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) sample.mask[static_cast<std::size_t>(y * s + x)] = 1.0;
    }

    sample.image = Tensor({ch, size, size});
    for (std::size_t c = 0; c < ch; ++c) {
      for (std::size_t p = 0; p < size * size; ++p) {
        double v = sample.mask[p] > 0.0 ? fg[c] : bg[c];
        if (spec.background == Background::Noise && sample.mask[p] == 0.0) v += spec.noise_std * rng.normal();
        sample.image[c * size * size + p] = v;
      }
    }
    out.push_back(std::move(sample));
  }
  return out;
}

Background parse_background(const std::string& name) {
  if (name == "uniform") return Background::Uniform;
  if (name == "noise") return Background::Noise;
  throw UsageError("unknown background '" + name + "' (expected uniform|noise)");
}

ClassRule parse_class_rule(const std::string& name) {
  if (name == "shape") return ClassRule::Shape;
  if (name == "background") return ClassRule::Background;
  throw UsageError("unknown class rule '" + name + "' (expected shape|background)");
}

std::string to_string(Background b) { return b == Background::Uniform ? "uniform" : "noise"; }
std::string to_string(ClassRule r) { return r == ClassRule::Shape ? "shape" : "background"; }

}  // namespace regvit
