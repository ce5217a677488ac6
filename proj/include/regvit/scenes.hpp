#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "regvit/box.hpp"
#include "regvit/tensor.hpp"

namespace regvit {

enum class Background { Uniform, Noise };
enum class ObjectShape { Rect, Disk };
// Which scene property defines the label.
enum class ClassRule { Shape, Background };

// Synthetic single-object scenes. Object extents are in pixels: a rect side,
// or a disk diameter 2r+1.
struct SceneSpec {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  Background background = Background::Uniform;
  std::size_t min_size = 8;
  std::size_t max_size = 16;
  double noise_std = 0.1;
  ClassRule class_rule = ClassRule::Shape;

  void validate() const;
  std::size_t n_classes() const { return 2; }
};

struct Sample {
  Tensor image;  // C × H × W
  std::size_t label = 0;
  Box box;       // tight pixel box of the object
  Tensor mask;   // H × W, 1 on object pixels
};

using Dataset = std::vector<Sample>;

// Reproducible under seed; labels alternate so classes balance within ±1.
Dataset synth_dataset(std::uint64_t seed, std::size_t n, const SceneSpec& spec);

Background parse_background(const std::string& name);
ClassRule parse_class_rule(const std::string& name);
std::string to_string(Background b);
std::string to_string(ClassRule r);

}  // namespace regvit
