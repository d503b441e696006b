// Synthetic shapes dataset and COCO-format annotation ingestion.
#pragma once

#include <string>
#include <vector>

#include "edetr/box.hpp"
#include "edetr/tensor.hpp"

namespace edetr {

struct GroundTruth {
  std::vector<BoxCXCYWH> boxes;
  std::vector<int> labels;  // class indices in [0, C)
};

struct ImageSample {
  Tensor pixels;  // [3,H,W] in [0,1]
  GroundTruth truth;
  std::string id;
};

struct ShapesConfig {
  std::uint64_t seed = 0;
  int count = 100;
  int image_size = 64;
  int max_objects = 3;
  int num_classes = 3;  // rectangle / disk / triangle
};

/// Deterministic synthetic dataset: colored shapes on a noise background
/// with tight boxes. Classes: 0=rectangle, 1=disk, 2=triangle (cycled when
/// num_classes < 3).
std::vector<ImageSample> generate_shapes(const ShapesConfig& cfg);

struct CocoDataset {
  std::vector<ImageSample> samples;        // pixels undefined unless loadable
  std::vector<std::string> category_names; // contiguous remap order
  int clamp_warnings = 0;                  // boxes clamped into the image
};

/// Parses COCO-style JSON annotations. Pixel xywh boxes become normalized
/// BoxCXCYWH; category ids are remapped to contiguous [0,C) in ascending
/// id order. Image pixels are not loaded (annotation-level ingestion).
CocoDataset load_coco_annotations(const std::string& path);

/// Dumps a dataset as PNG images plus a COCO-style JSON file.
void dump_dataset(const std::vector<ImageSample>& samples,
                  const std::string& dir);

/// Epoch-deterministic iteration order.
std::vector<int> epoch_order(int count, std::uint64_t seed, int epoch);

void write_png(const std::string& path, const Tensor& pixels);

/// Reads the 8-bit RGB stored-deflate PNGs this project writes -> [3,H,W].
Tensor read_png(const std::string& path);

/// Loads a dumped dataset directory: annotations.json plus its PNGs.
CocoDataset load_dataset(const std::string& dir);

}  // namespace edetr
