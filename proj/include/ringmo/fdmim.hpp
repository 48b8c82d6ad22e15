#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "ringmo/datakit.hpp"
#include "ringmo/freq.hpp"
#include "ringmo/model.hpp"

// Frequency-domain masked image modeling: pick patches, classify each by its
// spectrum, band-filter it, mask random pixels, reconstruct with an L1 loss.
namespace ringmo::fdmim {

struct MaskParams {
  int mask_patch_size = 32;
  double patch_select_ratio = 0.5;
  double pixel_mask_ratio = 0.5;
  double cutoff = freq::kDefaultCutoff;
  double threshold = freq::kDefaultThreshold;
  bool filter = true;  // false skips band filtering (plain pixel masking)

  /// Throws ConfigError naming the field.
  void validate() const;
  bool operator==(const MaskParams&) const = default;
};

void to_json(nlohmann::json& j, const MaskParams& p);
void from_json(const nlohmann::json& j, MaskParams& p);

struct PatchCoord {
  int row = 0;
  int col = 0;
  auto operator<=>(const PatchCoord&) const = default;
};

struct MaskPlan {
  std::string image_id;
  int height = 0;
  int width = 0;
  int mask_patch_size = 0;
  std::vector<PatchCoord> selected;  // ascending
  std::map<PatchCoord, freq::FreqClass> class_per_patch;
  std::vector<std::uint8_t> pixel_mask;  // [height * width], 1 = masked
  std::uint64_t rng_seed = 0;
  bool filter = true;
  double cutoff = freq::kDefaultCutoff;

  bool masked(int y, int x) const { return pixel_mask[static_cast<std::size_t>(y) * width + x] != 0; }
  std::int64_t masked_count() const;
  int patches_per_row() const { return width / mask_patch_size; }
  int total_patches() const { return (height / mask_patch_size) * (width / mask_patch_size); }

  bool operator==(const MaskPlan&) const;
};

nlohmann::json to_json(const MaskPlan& plan);

/// floor(total * ratio), guarded against representation error just below an integer.
std::int64_t selected_count(std::int64_t total, double ratio);

/// `image` is [3, H, W] in [0, 1]; classification uses raw intensities.
MaskPlan plan_mask(const Tensor<float>& image, const MaskParams& params, std::uint64_t seed,
                   std::string image_id = {});

/// Band-filters the selected patches (no pixel fill).
Tensor<float> filter_selected(const Tensor<float>& image, const MaskPlan& plan);

/// filter_selected, then masked pixels take the per-channel fill value.
Tensor<float> apply_mask(const Tensor<float>& image, const MaskPlan& plan, const std::array<float, 3>& fill);

/// Pixel mask as a [1, H, W] tensor of {0, 1}.
Tensor<float> mask_tensor(const MaskPlan& plan);

struct PretrainBatch {
  Tensor<float> filtered;  // [B,3,H,W] band-filtered, not yet filled
  Tensor<float> target;    // [B,3,H,W] original pixels
  Tensor<float> mask;      // [B,1,H,W]
};

PretrainBatch make_batch(const std::vector<const Tensor<float>*>& images, const std::vector<MaskPlan>& plans);

/// filtered * (1 - m) + m * fill, differentiable in `fill` ([3]).
template <typename T>
Var<T> fill_masked(const Tensor<T>& filtered, const Tensor<T>& mask, const Var<T>& fill);

/// (x - mean) / std per channel on [B,3,H,W].
template <typename T>
Var<T> normalize(const Var<T>& x, const data::Normalization& norm);

/// [B, h*w, C] tokens -> linear to 3*s*s -> [B, 3, h*s, w*s].
template <typename T>
Var<T> reconstruction_head(const Var<T>& features, const Var<T>& weight, const Var<T>& bias, int grid_h, int grid_w,
                           int stride);

/// sum(|pred - target| * mask) / max(sum(mask) * channels, 1).
template <typename T>
Var<T> l1_masked_loss(const Var<T>& pred, const Tensor<T>& target, const Tensor<T>& mask);

struct PretrainConfig {
  model::ModelConfig model;
  MaskParams mask;
  data::Normalization normalization;
  int steps = 100;
  int batch_size = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct PretrainResult {
  model::ParamStore<float> params;
  std::vector<double> losses;  // one per step
};

/// Seed of the mask plan for image `index` of step `step`.
std::uint64_t plan_seed(std::uint64_t seed, std::int64_t step, std::int64_t index);

/// Embedded checkpoint config for a pretraining run.
nlohmann::json checkpoint_config(const PretrainConfig& c);

/// Deterministic given config.seed. `on_step(step, loss)` is optional.
PretrainResult pretrain_loop(const PretrainConfig& config, const data::Dataset& dataset,
                             const std::function<void(int, double)>& on_step = {});

std::string loss_csv(const std::vector<double>& losses);

}  // namespace ringmo::fdmim
