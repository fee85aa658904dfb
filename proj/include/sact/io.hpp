#pragma once

#include "sact/network.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sact {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint tensors that do not fit the expected network.
class CheckpointMismatch : public std::runtime_error {
 public:
  explicit CheckpointMismatch(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint64_t> dims;
  DType dtype = DType::f32;
  std::vector<std::byte> bytes;  // little-endian values

  std::uint64_t count() const;

  template <typename Scalar>
  static CheckpointEntry from_tensor(std::string name, const Tensor<Scalar>& tensor);
  /// Converts to the requested precision; ranks below 4 are left-padded with ones.
  template <typename Scalar>
  Tensor<Scalar> to_tensor() const;
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

template <typename Scalar>
Checkpoint make_checkpoint(const NetworkParams<Scalar>& params);

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> skipped;  // in the file, not expected by the network
  std::vector<std::string> missing;  // expected, absent from the file (left untouched)
};

/// Copies matching tensors into `params`. Shape mismatches always raise CheckpointMismatch; in
/// strict mode unexpected or missing tensors do too.
template <typename Scalar>
LoadReport load_into(NetworkParams<Scalar>& params, const Checkpoint& ckpt, bool strict);

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  Index height = 0, width = 0, channels = 0, classes = 0;
  std::vector<std::uint32_t> labels;
  std::vector<float> pixels;  // count x H x W x C

  Index size() const { return static_cast<Index>(labels.size()); }
  Index image_size() const { return height * width * channels; }

  template <typename Scalar>
  Tensor<Scalar> images(std::span<const Index> indices) const;
  std::vector<Index> labels_of(std::span<const Index> indices) const;
};

std::string encode_dataset(const Dataset& data);
Dataset decode_dataset(std::string_view bytes);
void save_dataset(const std::string& path, const Dataset& data);
Dataset load_dataset(const std::string& path);

/// One byte per pixel (0 or 1), images in dataset order.
struct ObjectMasks {
  Index height = 0, width = 0;
  std::vector<std::uint8_t> values;

  Index size() const { return height * width == 0 ? 0 : static_cast<Index>(values.size()) / (height * width); }
  Field<double> mask(Index image) const;
};

void save_masks(const std::string& path, const ObjectMasks& masks);
ObjectMasks load_masks(const std::string& path);
/// Companion path used by make-data for the masks of `dataset_path`.
std::string masks_path(const std::string& dataset_path);

struct SyntheticConfig {
  Index classes = 4;
  Index count = 100;
  Index height = 32;
  Index width = 32;
  Index channels = 3;
  std::uint64_t seed = 0;
  double min_side = 0.25;  // patch side as a fraction of the image side
  double max_side = 0.40;
  double noise = 0.1;      // background standard deviation
};

struct SyntheticData {
  Dataset data;
  ObjectMasks masks;
};

/// Noise background plus one class-textured square patch per image.
SyntheticData generate_synthetic_dataset(const SyntheticConfig& config);

// ---------------------------------------------------------------------------
// Plain-text and image maps

/// 8-bit binary PGM after an affine rescale of [min, max] to [0, 255] (constant fields map to 0).
void write_pgm(const std::string& path, const Field<double>& field);
/// Raw sample values (0..maxval).
Field<double> read_pgm(const std::string& path);

/// Row-major, comma separated, 17 significant digits.
void write_csv(const std::string& path, const Field<double>& field);
Field<double> read_csv(const std::string& path);

std::vector<std::pair<Index, Index>> read_fixations(const std::string& path);

}  // namespace sact
