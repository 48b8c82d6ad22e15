#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "ringmo/model.hpp"
#include "ringmo/tensor.hpp"

namespace ringmo::data {

/// Unreadable, malformed or missing input data. Messages carry the path.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageRecord {
  std::string path;
  Tensor<float> pixels;  // [3, H, W], values in [0, 1]
  std::optional<int> label;
};

struct Dataset {
  std::vector<ImageRecord> records;
  std::vector<std::string> class_names;  // empty for flat layouts
};

enum class Layout { Flat, ClassPerSubdir };

/// Per-channel normalization applied to network inputs.
struct Normalization {
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> std{0.5, 0.5, 0.5};
};

void to_json(nlohmann::json& j, const Normalization& n);
void from_json(const nlohmann::json& j, Normalization& n);

// ---------------------------------------------------------------------------
// images

/// True for extensions load_image understands (.png, .rawf).
bool is_supported_image(const std::filesystem::path& path);

/// PNG (8-bit gray/RGB/RGBA) or raw float image. Gray is replicated to 3 channels.
Tensor<float> load_image(const std::filesystem::path& path);

/// 8-bit RGB PNG; values are clamped to [0, 1] before quantization.
void save_png(const std::filesystem::path& path, const Tensor<float>& pixels);

/// Raw format: "RAWF", u32 channels, u32 height, u32 width, little-endian f32 payload.
void save_raw(const std::filesystem::path& path, const Tensor<float>& pixels);

/// Lexicographic, deterministic scan. Unsupported files are skipped with a
/// warning on stderr. Class-per-subdir labels follow sorted subdir names.
Dataset load_image_dir(const std::filesystem::path& root, Layout layout);

/// Throws DataError naming the first record whose extents differ.
void require_extents(const Dataset& ds, int height, int width);

// ---------------------------------------------------------------------------
// synthetic data

enum class SynthKind { Gradient, Blobs, Stripes, Checkerboard };

/// Low for gradients and blobs, high for stripes and checkerboards.
bool is_high_frequency(SynthKind kind);

Tensor<float> synth_image(SynthKind kind, int size, std::mt19937_64& rng);

/// Mixed corpus; each image has one dominant pattern plus a faint pattern of
/// the other band. Label is 1 for a high-frequency dominant band, else 0.
Dataset synth_corpus(int n, int size, std::uint64_t seed);

/// Separable classes: each class has its own colour and texture signature.
Dataset synth_classes(int per_class, int num_classes, int size, std::uint64_t seed);

/// Writes PNG files in the given layout (class subdirs named class_<k>).
void write_dataset(const std::filesystem::path& root, const Dataset& ds, Layout layout);

// ---------------------------------------------------------------------------
// checkpoints

enum class CheckpointErrorKind { Io, BadMagic, VersionMismatch, CrcMismatch, Malformed, ShapeMismatch };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json config;
  model::ParamStore<float> tensors;
};

/// Layout: "FIFB", u32 version, u32 config length, config JSON, u32 entry
/// count, entries (u32 name length, name, u8 dtype (0 = f32), u32 rank,
/// u64 extents, f32 payload), then CRC32 of every preceding byte.
/// All integers little-endian.
std::vector<std::uint8_t> encode_checkpoint(const model::ParamStore<float>& tensors, const nlohmann::json& config);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const model::ParamStore<float>& tensors,
                     const nlohmann::json& config);

/// Validates magic, version and CRC, then checks the tensors against the
/// shapes implied by the embedded config ("kind" + "model").
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Shapes a checkpoint with this config must hold.
model::ParamShapes expected_shapes(const nlohmann::json& config);

/// Throws CheckpointError(ShapeMismatch) listing every missing, unexpected
/// or differently shaped tensor.
void check_shapes(const model::ParamShapes& expected, const model::ParamStore<float>& tensors,
                  const std::string& context);

std::uint32_t crc32(const std::uint8_t* data, std::size_t size);

}  // namespace ringmo::data
