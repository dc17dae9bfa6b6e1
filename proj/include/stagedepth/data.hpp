#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "stagedepth/assignment.hpp"

namespace stagedepth {

enum class ShapeClass : int { Circle = 0, Square = 1, Triangle = 2 };
enum class SizeTier : int { Small = 0, Medium = 1, Large = 2 };

inline constexpr int kNumShapeClasses = 3;
std::string class_name(int category);
std::string to_string(SizeTier tier);

struct SceneObject {
  int category = 0;
  std::array<double, 4> box{};  // normalized cxcywh
  SizeTier tier = SizeTier::Medium;
};

struct Scene {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // H x W x 3, row-major
  std::vector<SceneObject> objects;
};

struct DatasetSpec {
  int hw = 96;
  std::array<double, 3> class_mix{1.0, 1.0, 1.0};  // relative weights
  // 0: one object; 1: 1-4 mostly separated objects; 2: 1-8 objects with occlusion.
  int clutter = 1;
  std::array<double, 3> tier_mix{0.4, 0.4, 0.2};
};

/// Side-length thresholds of the size tiers as fractions of the image side.
inline constexpr double kSmallSide = 0.1;
inline constexpr double kMediumSide = 0.25;
SizeTier size_tier(double box_area_px, int image_side);

/// Deterministic in (seed, index); scenes are independent of n.
Scene generate_scene(std::uint64_t seed, int index, const DatasetSpec& spec);
std::vector<Scene> generate_dataset(std::uint64_t seed, int n_images, const DatasetSpec& spec);

/// B x 3 x H x W float tensor in [0, 1].
torch::Tensor images_tensor(const std::vector<Scene>& scenes, const std::vector<int>& indices);
std::vector<ImageTargets> targets_of(const std::vector<Scene>& scenes, const std::vector<int>& indices);

/// images/NNNNNN.ppm + annotations.json (COCO-like: images, annotations, categories).
void save_dataset(const std::vector<Scene>& scenes, const std::filesystem::path& dir,
                  const DatasetSpec& spec, std::uint64_t seed);
std::vector<Scene> load_dataset(const std::filesystem::path& dir);

}  // namespace stagedepth
