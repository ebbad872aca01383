#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "aatr/tensor.hpp"

namespace aatr {

/// Images [N, C, H, W] in [0, 1] with integer labels. source_index
/// identifies each image within its source pool (train indices first, then
/// test indices offset by the train pool size), so provenance survives
/// subsetting and attacking.
struct LabeledImages {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::uint32_t> source_index;

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample_shape() const;
  LabeledImages subset(std::span<const std::size_t> indices) const;
  /// Throws ConfigError if the three members disagree in length.
  void validate() const;
};

struct SourceData {
  std::string id;  // e.g. "mnist" or "synthetic-digits"
  LabeledImages train;
  LabeledImages test;
  std::size_t n_classes = 10;
};

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
/// gzip-compressed files are accepted transparently. Pixels are scaled to
/// [0, 1]. Throws IoError naming the path on any read or format failure.
LabeledImages read_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Writes uncompressed IDX files (pixels rounded to uint8).
void write_idx(const LabeledImages& data, const std::filesystem::path& images,
               const std::filesystem::path& labels);

/// Loads MNIST-layout IDX files from `dir` (train-images-idx3-ubyte[.gz], ...)
/// and draws seeded subsets of `n_train` / `n_test` samples.
SourceData load_mnist(const std::filesystem::path& dir, std::size_t n_train, std::size_t n_test,
                      std::uint64_t seed);

/// Procedural 10-class 1x28x28 digits-like data for offline tests: each class
/// is a fixed stroke template, jittered and noised per sample.
SourceData synthetic_digits(std::size_t n_train, std::size_t n_test, std::uint64_t seed);

}  // namespace aatr
