#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ringmo/autodiff.hpp"

namespace ringmo::model {

enum class HfConvMode {
  Depthwise,  // per-channel 1x1 scales around a depthwise 3x3
  Full,       // dense 1x1, depthwise 3x3, dense 1x1
};

/// Architecture description of the hybrid backbone. Defaults reproduce the
/// 224x224 / 96-channel / (2,2,6,2) configuration.
struct ModelConfig {
  int embed_dim = 96;
  std::vector<int> depths{2, 2, 6, 2};
  std::vector<int> num_heads{3, 6, 12, 24};
  int window_size = 7;
  int mlp_ratio = 4;
  int patch_size = 4;
  int img_size = 224;
  int num_classes = 1000;
  bool hf_branch_enabled = true;
  HfConvMode hf_conv_mode = HfConvMode::Depthwise;
  double drop_path_rate = 0.0;
  double layer_norm_eps = 1e-5;

  int num_stages() const { return static_cast<int>(depths.size()); }
  int stage_channels(int stage) const { return embed_dim << stage; }
  int stage_grid(int stage) const { return (img_size / patch_size) >> stage; }
  int stage_window(int stage) const { return std::min(window_size, stage_grid(stage)); }
  /// Cyclic shift for odd blocks; zero once the window covers the whole grid.
  int stage_shift(int stage) const { return stage_grid(stage) <= window_size ? 0 : window_size / 2; }
  int num_features() const { return stage_channels(num_stages() - 1); }
  int total_stride() const { return patch_size << (num_stages() - 1); }

  /// Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
const char* to_string(HfConvMode mode);

using ParamShapes = std::vector<std::pair<std::string, Shape>>;

/// Every trainable tensor of the backbone plus classification head, in
/// forward order. Names are "<layer path>.<leaf>".
ParamShapes param_shapes(const ModelConfig& config, bool with_head = true);

/// Backbone without the classification head, plus the pixel reconstruction
/// head (decoder.weight [C_last, 3*s*s], decoder.bias, mask_fill [3]) where s
/// is the total backbone stride.
ParamShapes pretrain_param_shapes(const ModelConfig& config);

/// Layer path of a parameter name: everything before the last '.'.
std::string layer_of(const std::string& param_name);

template <typename T>
using ParamStore = std::map<std::string, Tensor<T>>;

/// Truncated normal (std 0.02, cut at 2 sigma) for conv and linear weights,
/// zero biases and relative-position tables, LayerNorm gamma=1 / beta=0.
template <typename T>
ParamStore<T> init_weights(const ModelConfig& config, std::uint64_t seed, bool with_head = true);

/// Fills `store[name]` for each (name, shape) using the same scheme.
template <typename T>
void init_params(ParamStore<T>& store, const ParamShapes& shapes, std::mt19937_64& rng);

/// Parameters exposed to a forward pass, either as tape leaves or constants.
template <typename T>
class Bound {
 public:
  static Bound constants(const ParamStore<T>& store);
  static Bound on_tape(Tape<T>& tape, const ParamStore<T>& store);

  const Var<T>& operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  const std::map<std::string, Var<T>>& vars() const { return vars_; }

 private:
  std::map<std::string, Var<T>> vars_;
};

/// Called with (stage index, grid side, channels) after each stage's blocks.
using StageObserver = std::function<void(int, int, int)>;

template <typename T>
using AttentionProbe = std::function<void(const Tensor<T>& weights)>;

template <typename T>
struct ForwardOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // drop-path sampling, training only
  StageObserver on_stage;
  AttentionProbe<T> on_attention;  // post-softmax [windows*B, heads, N, N]
};

// ---------------------------------------------------------------------------
// building blocks

/// 4x4 (patch_size) stride conv then LayerNorm: [B,3,H,W] -> [B, H/p * W/p, E].
template <typename T>
Var<T> patch_embed(const Bound<T>& p, const ModelConfig& config, const Var<T>& image);

/// [B, N, N, C] -> [B*(N/w)^2, w*w, C].
template <typename T>
Var<T> window_partition(const Var<T>& grid, int window);
/// Inverse of window_partition.
template <typename T>
Var<T> window_reverse(const Var<T>& windows, int window, int grid_side);

/// Relative offset table index for every (query, key) pair of a w x w window.
std::vector<std::int64_t> relative_position_index(int window);

/// Region ids of a grid after a cyclic shift, as in the shifted-window scheme.
std::vector<int> shift_region_ids(int grid_side, int window, int shift);

/// Additive attention mask [num_windows, w*w, w*w]: 0 within a region, -inf across.
template <typename T>
Tensor<T> shifted_window_mask(int grid_side, int window, int shift);

/// Multi-head self-attention inside each window with relative-position bias.
/// `x` is [windows*B, N, C]; `mask`, when present, is [windows, N, N].
template <typename T>
Var<T> window_attention(const Bound<T>& p, const std::string& prefix, const Var<T>& x, int heads, int window,
                        const std::optional<Tensor<T>>& mask, const AttentionProbe<T>& probe = {});

/// Windowed-attention residual block; odd blocks use the shifted windows.
template <typename T>
Var<T> lf_branch(const Bound<T>& p, const std::string& prefix, const ModelConfig& config, const Var<T>& x, int stage,
                 int block_index, const ForwardOptions<T>& opts = {});

/// Convolutional branch: split channels, conv path on one half, max-pool
/// path on the other, concatenate. Shape preserving on [B, N*N, C].
template <typename T>
Var<T> hf_branch(const Bound<T>& p, const std::string& prefix, const ModelConfig& config, const Var<T>& x,
                 int grid_side);

/// L + H, or L alone with the high-frequency branch disabled.
template <typename T>
Var<T> fifb(const Bound<T>& p, const std::string& prefix, const ModelConfig& config, const Var<T>& x, int stage,
            int block_index, const ForwardOptions<T>& opts = {});

/// [B, N*N, C] -> [B, N*N/4, 2C].
template <typename T>
Var<T> patch_merging(const Bound<T>& p, const std::string& prefix, const Var<T>& x, int grid_side, T eps);

/// All stages plus the final LayerNorm: [B,3,H,W] -> [B, tokens, C_last].
template <typename T>
Var<T> forward_features(const Bound<T>& p, const ModelConfig& config, const Var<T>& image,
                        const ForwardOptions<T>& opts = {});

/// Features, global average pool over tokens, linear head.
template <typename T>
Var<T> forward_cls(const Bound<T>& p, const ModelConfig& config, const Var<T>& image,
                   const ForwardOptions<T>& opts = {});

std::string block_prefix(int stage, int block);

}  // namespace ringmo::model
