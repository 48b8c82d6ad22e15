#include "ringmo/model.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "ringmo/ops.hpp"

namespace ringmo::model {

using ops::Conv2dParams;
using ops::Pool2dParams;

// ---------------------------------------------------------------------------
// configuration

namespace {

[[noreturn]] void bad_field(const std::string& field, const std::string& why) {
  throw ConfigError("model config field '" + field + "': " + why);
}

}  // namespace

void ModelConfig::validate() const {
  if (embed_dim < 2) bad_field("embed_dim", "must be >= 2");
  if (depths.empty()) bad_field("depths", "needs at least one stage");
  if (num_heads.size() != depths.size()) bad_field("num_heads", "needs one entry per stage in depths");
  for (int d : depths)
    if (d < 1) bad_field("depths", "every stage needs at least one block");
  if (window_size < 1) bad_field("window_size", "must be >= 1");
  if (mlp_ratio < 1) bad_field("mlp_ratio", "must be >= 1");
  if (patch_size < 1) bad_field("patch_size", "must be >= 1");
  if (num_classes < 1) bad_field("num_classes", "must be >= 1");
  if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) bad_field("drop_path_rate", "must lie in [0,1)");
  if (!(layer_norm_eps > 0.0)) bad_field("layer_norm_eps", "must be positive");
  if (img_size < 1 || img_size % patch_size != 0) bad_field("img_size", "must be divisible by patch_size");
  int grid = img_size / patch_size;
  for (int s = 0; s < num_stages(); ++s) {
    const int c = stage_channels(s);
    if (num_heads[s] < 1 || c % num_heads[s] != 0) {
      bad_field("num_heads", "stage " + std::to_string(s) + " width " + std::to_string(c) +
                                 " is not divisible by " + std::to_string(num_heads[s]) + " heads");
    }
    if (hf_branch_enabled && c % 2 != 0) {
      bad_field("embed_dim", "stage width " + std::to_string(c) + " cannot be split into two halves");
    }
    if (grid < 1) bad_field("img_size", "too small for " + std::to_string(num_stages()) + " stages");
    const int w = std::min(window_size, grid);
    if (grid % w != 0) {
      bad_field("window_size", "stage " + std::to_string(s) + " grid " + std::to_string(grid) +
                                   " is not divisible by window " + std::to_string(w));
    }
    if (s + 1 < num_stages()) {
      if (grid % 2 != 0) {
        bad_field("img_size", "stage " + std::to_string(s) + " grid " + std::to_string(grid) +
                                  " is odd and cannot be merged");
      }
      grid /= 2;
    }
  }
}

const char* to_string(HfConvMode mode) { return mode == HfConvMode::Full ? "Full" : "Depthwise"; }

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"embed_dim", c.embed_dim},
                     {"depths", c.depths},
                     {"num_heads", c.num_heads},
                     {"window_size", c.window_size},
                     {"mlp_ratio", c.mlp_ratio},
                     {"patch_size", c.patch_size},
                     {"img_size", c.img_size},
                     {"num_classes", c.num_classes},
                     {"hf_branch_enabled", c.hf_branch_enabled},
                     {"hf_conv_mode", to_string(c.hf_conv_mode)},
                     {"drop_path_rate", c.drop_path_rate},
                     {"layer_norm_eps", c.layer_norm_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "embed_dim") c.embed_dim = value.get<int>();
      else if (key == "depths") c.depths = value.get<std::vector<int>>();
      else if (key == "num_heads") c.num_heads = value.get<std::vector<int>>();
      else if (key == "window_size") c.window_size = value.get<int>();
      else if (key == "mlp_ratio") c.mlp_ratio = value.get<int>();
      else if (key == "patch_size") c.patch_size = value.get<int>();
      else if (key == "img_size") c.img_size = value.get<int>();
      else if (key == "num_classes") c.num_classes = value.get<int>();
      else if (key == "hf_branch_enabled") c.hf_branch_enabled = value.get<bool>();
      else if (key == "drop_path_rate") c.drop_path_rate = value.get<double>();
      else if (key == "layer_norm_eps") c.layer_norm_eps = value.get<double>();
      else if (key == "hf_conv_mode") {
        const auto s = value.get<std::string>();
        if (s == "Depthwise") c.hf_conv_mode = HfConvMode::Depthwise;
        else if (s == "Full") c.hf_conv_mode = HfConvMode::Full;
        else bad_field(key, "expected \"Depthwise\" or \"Full\", got \"" + s + "\"");
      } else {
        bad_field(key, "unknown field");
      }
    } catch (const nlohmann::json::exception& e) {
      bad_field(key, e.what());
    }
  }
}

// ---------------------------------------------------------------------------
// parameters

std::string block_prefix(int stage, int block) {
  return "layers." + std::to_string(stage) + ".blocks." + std::to_string(block);
}

std::string layer_of(const std::string& param_name) {
  const auto pos = param_name.rfind('.');
  return pos == std::string::npos ? param_name : param_name.substr(0, pos);
}

ParamShapes param_shapes(const ModelConfig& config, bool with_head) {
  config.validate();
  ParamShapes out;
  auto add = [&out](std::string name, Shape s) { out.emplace_back(std::move(name), std::move(s)); };
  const std::int64_t e = config.embed_dim, p = config.patch_size;
  add("patch_embed.proj.weight", {e, 3, p, p});
  add("patch_embed.proj.bias", {e});
  add("patch_embed.norm.weight", {e});
  add("patch_embed.norm.bias", {e});
  for (int s = 0; s < config.num_stages(); ++s) {
    const std::int64_t c = config.stage_channels(s);
    const std::int64_t hidden = c * config.mlp_ratio;
    const std::int64_t w = config.stage_window(s);
    for (int b = 0; b < config.depths[s]; ++b) {
      const auto pre = block_prefix(s, b);
      add(pre + ".norm1.weight", {c});
      add(pre + ".norm1.bias", {c});
      add(pre + ".attn.relative_position_bias_table", {(2 * w - 1) * (2 * w - 1), config.num_heads[s]});
      add(pre + ".attn.qkv.weight", {c, 3 * c});
      add(pre + ".attn.qkv.bias", {3 * c});
      add(pre + ".attn.proj.weight", {c, c});
      add(pre + ".attn.proj.bias", {c});
      add(pre + ".norm2.weight", {c});
      add(pre + ".norm2.bias", {c});
      add(pre + ".mlp.fc1.weight", {c, hidden});
      add(pre + ".mlp.fc1.bias", {hidden});
      add(pre + ".mlp.fc2.weight", {hidden, c});
      add(pre + ".mlp.fc2.bias", {c});
      if (config.hf_branch_enabled) {
        const std::int64_t half = c / 2;
        const std::int64_t in1 = config.hf_conv_mode == HfConvMode::Full ? half : 1;
        add(pre + ".hf.conv1.weight", {half, in1, 1, 1});
        add(pre + ".hf.conv1.bias", {half});
        add(pre + ".hf.conv3.weight", {half, 1, 3, 3});
        add(pre + ".hf.conv3.bias", {half});
        add(pre + ".hf.conv2.weight", {half, in1, 1, 1});
        add(pre + ".hf.conv2.bias", {half});
      }
    }
    if (s + 1 < config.num_stages()) {
      const auto pre = "layers." + std::to_string(s) + ".downsample";
      add(pre + ".norm.weight", {4 * c});
      add(pre + ".norm.bias", {4 * c});
      add(pre + ".reduction.weight", {4 * c, 2 * c});
    }
  }
  const std::int64_t f = config.num_features();
  add("norm.weight", {f});
  add("norm.bias", {f});
  if (with_head) {
    add("head.weight", {f, config.num_classes});
    add("head.bias", {config.num_classes});
  }
  return out;
}

ParamShapes pretrain_param_shapes(const ModelConfig& config) {
  auto out = param_shapes(config, false);
  const std::int64_t s = config.total_stride();
  out.emplace_back("decoder.weight", Shape{config.num_features(), 3 * s * s});
  out.emplace_back("decoder.bias", Shape{3 * s * s});
  out.emplace_back("mask_fill", Shape{3});
  return out;
}

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_norm(const std::string& name) {
  const auto layer = layer_of(name);
  const auto leaf = layer.substr(layer.rfind('.') + 1);
  return leaf.rfind("norm", 0) == 0;
}

}  // namespace

template <typename T>
void init_params(ParamStore<T>& store, const ParamShapes& shapes, std::mt19937_64& rng) {
  constexpr double kStd = 0.02;
  std::normal_distribution<double> normal(0.0, kStd);
  for (const auto& [name, shape] : shapes) {
    Tensor<T> t(shape);
    if (is_norm(name)) {
      if (ends_with(name, ".weight")) t = Tensor<T>(shape, T(1));
    } else if (ends_with(name, ".weight")) {
      for (auto& v : t.vec()) {
        double x;
        do {
          x = normal(rng);
        } while (std::abs(x) >= 2.0 * kStd);
        v = static_cast<T>(x);
      }
    }
    store[name] = std::move(t);
  }
}

template <typename T>
ParamStore<T> init_weights(const ModelConfig& config, std::uint64_t seed, bool with_head) {
  std::mt19937_64 rng(seed);
  ParamStore<T> store;
  init_params(store, param_shapes(config, with_head), rng);
  return store;
}

template <typename T>
Bound<T> Bound<T>::constants(const ParamStore<T>& store) {
  Bound b;
  for (const auto& [name, t] : store) b.vars_.emplace(name, Var<T>(t));
  return b;
}

template <typename T>
Bound<T> Bound<T>::on_tape(Tape<T>& tape, const ParamStore<T>& store) {
  Bound b;
  for (const auto& [name, t] : store) b.vars_.emplace(name, tape.leaf(t, true));
  return b;
}

template <typename T>
const Var<T>& Bound<T>::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// blocks

template <typename T>
Var<T> patch_embed(const Bound<T>& p, const ModelConfig& config, const Var<T>& image) {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw ShapeError("patch_embed: expected [B,3,H,W], got " + shape_str(image.shape()));
  }
  const auto H = image.dim(2), W = image.dim(3);
  if (H % config.patch_size != 0 || W % config.patch_size != 0) {
    throw ConfigError("patch_embed: image " + std::to_string(H) + "x" + std::to_string(W) +
                      " is not divisible by patch size " + std::to_string(config.patch_size));
  }
  auto x = ops::conv2d(image, p["patch_embed.proj.weight"], std::optional(p["patch_embed.proj.bias"]),
                       Conv2dParams{config.patch_size, 0, 1});
  const auto B = x.dim(0), C = x.dim(1), gh = x.dim(2), gw = x.dim(3);
  x = ops::reshape(ops::permute(x, {0, 2, 3, 1}), Shape{B, gh * gw, C});
  return ops::layer_norm(x, p["patch_embed.norm.weight"], p["patch_embed.norm.bias"],
                         static_cast<T>(config.layer_norm_eps));
}

template <typename T>
Var<T> window_partition(const Var<T>& grid, int window) {
  if (grid.rank() != 4 || grid.dim(1) != grid.dim(2)) {
    throw ShapeError("window_partition: expected square [B,N,N,C], got " + shape_str(grid.shape()));
  }
  const auto B = grid.dim(0), N = grid.dim(1), C = grid.dim(3);
  if (window < 1 || N % window != 0) {
    throw ConfigError("window_partition: grid " + std::to_string(N) + " not divisible by window " +
                      std::to_string(window));
  }
  const auto n = N / window;
  auto x = ops::reshape(grid, Shape{B, n, window, n, window, C});
  x = ops::permute(x, {0, 1, 3, 2, 4, 5});
  return ops::reshape(x, Shape{B * n * n, window * window, C});
}

template <typename T>
Var<T> window_reverse(const Var<T>& windows, int window, int grid_side) {
  if (window < 1 || grid_side % window != 0) {
    throw ConfigError("window_reverse: grid " + std::to_string(grid_side) + " not divisible by window " +
                      std::to_string(window));
  }
  const std::int64_t n = grid_side / window;
  if (windows.rank() != 3 || windows.dim(1) != window * window || windows.dim(0) % (n * n) != 0) {
    throw ShapeError("window_reverse: windows " + shape_str(windows.shape()) + " do not tile a " +
                     std::to_string(grid_side) + " grid with window " + std::to_string(window));
  }
  const auto B = windows.dim(0) / (n * n), C = windows.dim(2);
  auto x = ops::reshape(windows, Shape{B, n, n, window, window, C});
  x = ops::permute(x, {0, 1, 3, 2, 4, 5});
  return ops::reshape(x, Shape{B, grid_side, grid_side, C});
}

std::vector<std::int64_t> relative_position_index(int window) {
  const int n = window * window;
  const int span = 2 * window - 1;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const int dy = i / window - j / window + window - 1;
      const int dx = i % window - j % window + window - 1;
      idx[static_cast<std::size_t>(i) * n + j] = dy * span + dx;
    }
  return idx;
}

std::vector<int> shift_region_ids(int grid_side, int window, int shift) {
  // three bands per axis: [0, N-w), [N-w, N-s), [N-s, N)
  auto band = [&](int i) { return i < grid_side - window ? 0 : (i < grid_side - shift ? 1 : 2); };
  std::vector<int> ids(static_cast<std::size_t>(grid_side) * grid_side);
  for (int y = 0; y < grid_side; ++y)
    for (int x = 0; x < grid_side; ++x) ids[static_cast<std::size_t>(y) * grid_side + x] = band(y) * 3 + band(x);
  return ids;
}

template <typename T>
Tensor<T> shifted_window_mask(int grid_side, int window, int shift) {
  if (grid_side % window != 0) throw ConfigError("shifted_window_mask: grid not divisible by window");
  const auto ids = shift_region_ids(grid_side, window, shift);
  const int n = grid_side / window;
  const int N = window * window;
  Tensor<T> mask(Shape{static_cast<std::int64_t>(n) * n, N, N});
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (int wy = 0; wy < n; ++wy)
    for (int wx = 0; wx < n; ++wx) {
      std::vector<int> region(static_cast<std::size_t>(N));
      for (int t = 0; t < N; ++t) {
        const int y = wy * window + t / window, x = wx * window + t % window;
        region[t] = ids[static_cast<std::size_t>(y) * grid_side + x];
      }
      const std::int64_t base = (static_cast<std::int64_t>(wy) * n + wx) * N * N;
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) mask[base + i * N + j] = region[i] == region[j] ? T(0) : neg_inf;
    }
  return mask;
}

template <typename T>
Var<T> window_attention(const Bound<T>& p, const std::string& prefix, const Var<T>& x, int heads, int window,
                        const std::optional<Tensor<T>>& mask, const AttentionProbe<T>& probe) {
  if (x.rank() != 3) throw ShapeError("window_attention: expected [windows, N, C], got " + shape_str(x.shape()));
  const auto BW = x.dim(0), N = x.dim(1), C = x.dim(2);
  if (heads < 1 || C % heads != 0) {
    throw ConfigError("window_attention: " + std::to_string(heads) + " heads do not divide " + std::to_string(C) +
                      " channels");
  }
  if (N != static_cast<std::int64_t>(window) * window) {
    throw ShapeError("window_attention: " + std::to_string(N) + " tokens for window " + std::to_string(window));
  }
  const std::int64_t d = C / heads;
  auto qkv = ops::linear(x, p[prefix + ".qkv.weight"], std::optional(p[prefix + ".qkv.bias"]));
  qkv = ops::permute(ops::reshape(qkv, Shape{BW, N, 3, heads, d}), {2, 0, 3, 1, 4});
  auto parts = ops::split(qkv, 0, {1, 1, 1});
  const Shape head_shape{BW, heads, N, d};
  auto q = ops::scale(ops::reshape(parts[0], head_shape), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  auto k = ops::reshape(parts[1], head_shape);
  auto v = ops::reshape(parts[2], head_shape);

  auto attn = ops::matmul(q, ops::transpose(k, -2, -1));  // [BW, h, N, N]
  auto bias = ops::index_select(p[prefix + ".relative_position_bias_table"], relative_position_index(window));
  bias = ops::permute(ops::reshape(bias, Shape{N, N, heads}), {2, 0, 1});
  attn = ops::add(attn, bias);
  if (mask) {
    const auto nW = mask->dim(0);
    if (mask->shape() != Shape{nW, N, N} || BW % nW != 0) {
      throw ShapeError("window_attention: mask " + shape_str(mask->shape()) + " for input " + shape_str(x.shape()));
    }
    Tensor<T> expanded(Shape{nW, heads, N, N});
    for (std::int64_t w = 0; w < nW; ++w)
      for (std::int64_t h = 0; h < heads; ++h)
        std::copy_n(mask->data().data() + w * N * N, N * N, expanded.data().data() + (w * heads + h) * N * N);
    attn = ops::reshape(attn, Shape{BW / nW, nW, heads, N, N});
    attn = ops::reshape(ops::add(attn, Var<T>(std::move(expanded))), Shape{BW, heads, N, N});
  }
  attn = ops::softmax(attn, -1);
  if (probe) probe(attn.value());
  auto out = ops::matmul(attn, v);  // [BW, h, N, d]
  out = ops::reshape(ops::permute(out, {0, 2, 1, 3}), Shape{BW, N, C});
  return ops::linear(out, p[prefix + ".proj.weight"], std::optional(p[prefix + ".proj.bias"]));
}

namespace {

int block_ordinal(const ModelConfig& c, int stage, int block) {
  int k = block;
  for (int s = 0; s < stage; ++s) k += c.depths[s];
  return k;
}

int total_blocks(const ModelConfig& c) {
  int k = 0;
  for (int d : c.depths) k += d;
  return k;
}

template <typename T>
Var<T> drop_path(const Var<T>& x, double rate, const ForwardOptions<T>& opts) {
  if (!opts.training || rate <= 0.0 || !opts.rng) return x;
  const auto B = x.dim(0);
  const auto per = x.value().size() / B;
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor<T> m(x.shape());
  for (std::int64_t b = 0; b < B; ++b) {
    const T v = keep(*opts.rng) ? static_cast<T>(1.0 / (1.0 - rate)) : T(0);
    std::fill_n(m.data().data() + b * per, per, v);
  }
  return ops::mul(x, Var<T>(std::move(m)));
}

}  // namespace

template <typename T>
Var<T> lf_branch(const Bound<T>& p, const std::string& prefix, const ModelConfig& config, const Var<T>& x, int stage,
                 int block_index, const ForwardOptions<T>& opts) {
  const int N = config.stage_grid(stage);
  const int w = config.stage_window(stage);
  const int shift = block_index % 2 == 1 ? config.stage_shift(stage) : 0;
  const auto B = x.dim(0), C = x.dim(2);
  if (x.rank() != 3 || x.dim(1) != static_cast<std::int64_t>(N) * N) {
    throw ShapeError("lf_branch: expected [B," + std::to_string(N * N) + ",C], got " + shape_str(x.shape()));
  }
  const T eps = static_cast<T>(config.layer_norm_eps);
  const int total = total_blocks(config);
  const double rate =
      total > 1 ? config.drop_path_rate * block_ordinal(config, stage, block_index) / (total - 1) : 0.0;

  auto h = ops::layer_norm(x, p[prefix + ".norm1.weight"], p[prefix + ".norm1.bias"], eps);
  h = ops::reshape(h, Shape{B, N, N, C});
  std::optional<Tensor<T>> mask;
  if (shift > 0) {
    h = ops::roll(h, {-shift, -shift}, {1, 2});
    mask = shifted_window_mask<T>(N, w, shift);
  }
  auto windows = window_partition(h, w);
  windows = window_attention(p, prefix + ".attn", windows, config.num_heads[stage], w, mask, opts.on_attention);
  h = window_reverse(windows, w, N);
  if (shift > 0) h = ops::roll(h, {shift, shift}, {1, 2});
  h = ops::reshape(h, Shape{B, static_cast<std::int64_t>(N) * N, C});
  auto l_hat = ops::add(x, drop_path(h, rate, opts));

  auto m = ops::layer_norm(l_hat, p[prefix + ".norm2.weight"], p[prefix + ".norm2.bias"], eps);
  m = ops::linear(m, p[prefix + ".mlp.fc1.weight"], std::optional(p[prefix + ".mlp.fc1.bias"]));
  m = ops::gelu(m);
  m = ops::linear(m, p[prefix + ".mlp.fc2.weight"], std::optional(p[prefix + ".mlp.fc2.bias"]));
  return ops::add(l_hat, drop_path(m, rate, opts));
}

template <typename T>
Var<T> hf_branch(const Bound<T>& p, const std::string& prefix, const ModelConfig& config, const Var<T>& x,
                 int grid_side) {
  if (x.rank() != 3 || x.dim(1) != static_cast<std::int64_t>(grid_side) * grid_side) {
    throw ShapeError("hf_branch: expected [B," + std::to_string(grid_side * grid_side) + ",C], got " +
                     shape_str(x.shape()));
  }
  const auto B = x.dim(0), C = x.dim(2);
  if (C % 2 != 0) throw ConfigError("hf_branch: channel count " + std::to_string(C) + " is odd");
  const std::int64_t half = C / 2;
  const int pointwise_groups = config.hf_conv_mode == HfConvMode::Full ? 1 : static_cast<int>(half);

  auto grid = ops::permute(ops::reshape(x, Shape{B, grid_side, grid_side, C}), {0, 3, 1, 2});
  auto halves = ops::split(grid, 1, {half, half});

  auto f1 = ops::conv2d(halves[0], p[prefix + ".conv1.weight"], std::optional(p[prefix + ".conv1.bias"]),
                        Conv2dParams{1, 0, pointwise_groups});
  f1 = ops::gelu(f1);
  f1 = ops::conv2d(f1, p[prefix + ".conv3.weight"], std::optional(p[prefix + ".conv3.bias"]),
                   Conv2dParams{1, 1, static_cast<int>(half)});

  auto f2 = ops::maxpool2d(halves[1], Pool2dParams{3, 1, 1});
  f2 = ops::conv2d(f2, p[prefix + ".conv2.weight"], std::optional(p[prefix + ".conv2.bias"]),
                   Conv2dParams{1, 0, pointwise_groups});

  auto h = ops::concat(std::vector<Var<T>>{f1, f2}, 1);
  return ops::reshape(ops::permute(h, {0, 2, 3, 1}), Shape{B, static_cast<std::int64_t>(grid_side) * grid_side, C});
}

template <typename T>
Var<T> fifb(const Bound<T>& p, const std::string& prefix, const ModelConfig& config, const Var<T>& x, int stage,
            int block_index, const ForwardOptions<T>& opts) {
  auto l = lf_branch(p, prefix, config, x, stage, block_index, opts);
  if (!config.hf_branch_enabled) return l;
  auto h = hf_branch(p, prefix + ".hf", config, x, config.stage_grid(stage));
  if (h.shape() != l.shape()) {
    throw std::logic_error("fifb: branch shapes diverged: " + shape_str(l.shape()) + " vs " + shape_str(h.shape()));
  }
  return ops::add(l, h);
}

template <typename T>
Var<T> patch_merging(const Bound<T>& p, const std::string& prefix, const Var<T>& x, int grid_side, T eps) {
  if (grid_side % 2 != 0) {
    throw ConfigError("patch_merging: grid side " + std::to_string(grid_side) + " is odd");
  }
  if (x.rank() != 3 || x.dim(1) != static_cast<std::int64_t>(grid_side) * grid_side) {
    throw ShapeError("patch_merging: expected [B," + std::to_string(grid_side * grid_side) + ",C], got " +
                     shape_str(x.shape()));
  }
  const auto B = x.dim(0), C = x.dim(2);
  const std::int64_t n = grid_side / 2;
  // [B, i, dy, j, dx, C] -> [B, i, j, dx, dy, C] gives the (0,0),(1,0),(0,1),(1,1) neighbour order
  auto y = ops::reshape(x, Shape{B, n, 2, n, 2, C});
  y = ops::permute(y, {0, 1, 3, 4, 2, 5});
  y = ops::reshape(y, Shape{B, n * n, 4 * C});
  y = ops::layer_norm(y, p[prefix + ".norm.weight"], p[prefix + ".norm.bias"], eps);
  return ops::linear(y, p[prefix + ".reduction.weight"]);
}

template <typename T>
Var<T> forward_features(const Bound<T>& p, const ModelConfig& config, const Var<T>& image,
                        const ForwardOptions<T>& opts) {
  if (image.rank() != 4 || image.dim(2) != config.img_size || image.dim(3) != config.img_size) {
    throw ShapeError("forward: image " + shape_str(image.shape()) + " does not match img_size " +
                     std::to_string(config.img_size));
  }
  const T eps = static_cast<T>(config.layer_norm_eps);
  auto x = patch_embed(p, config, image);
  for (int s = 0; s < config.num_stages(); ++s) {
    for (int b = 0; b < config.depths[s]; ++b) x = fifb(p, block_prefix(s, b), config, x, s, b, opts);
    if (opts.on_stage) opts.on_stage(s, config.stage_grid(s), static_cast<int>(x.dim(2)));
    if (s + 1 < config.num_stages()) {
      x = patch_merging(p, "layers." + std::to_string(s) + ".downsample", x, config.stage_grid(s), eps);
    }
  }
  return ops::layer_norm(x, p["norm.weight"], p["norm.bias"], eps);
}

template <typename T>
Var<T> forward_cls(const Bound<T>& p, const ModelConfig& config, const Var<T>& image, const ForwardOptions<T>& opts) {
  auto feats = forward_features(p, config, image, opts);
  auto pooled = ops::mean(feats, 1);
  return ops::linear(pooled, p["head.weight"], std::optional(p["head.bias"]));
}

#define RINGMO_INSTANTIATE_MODEL(T)                                                                               \
  template void init_params(ParamStore<T>&, const ParamShapes&, std::mt19937_64&);                               \
  template ParamStore<T> init_weights<T>(const ModelConfig&, std::uint64_t, bool);                               \
  template class Bound<T>;                                                                                       \
  template Var<T> patch_embed(const Bound<T>&, const ModelConfig&, const Var<T>&);                               \
  template Var<T> window_partition(const Var<T>&, int);                                                          \
  template Var<T> window_reverse(const Var<T>&, int, int);                                                       \
  template Tensor<T> shifted_window_mask<T>(int, int, int);                                                      \
  template Var<T> window_attention(const Bound<T>&, const std::string&, const Var<T>&, int, int,                 \
                                   const std::optional<Tensor<T>>&, const AttentionProbe<T>&);                   \
  template Var<T> lf_branch(const Bound<T>&, const std::string&, const ModelConfig&, const Var<T>&, int, int,    \
                            const ForwardOptions<T>&);                                                           \
  template Var<T> hf_branch(const Bound<T>&, const std::string&, const ModelConfig&, const Var<T>&, int);        \
  template Var<T> fifb(const Bound<T>&, const std::string&, const ModelConfig&, const Var<T>&, int, int,         \
                       const ForwardOptions<T>&);                                                                \
  template Var<T> patch_merging(const Bound<T>&, const std::string&, const Var<T>&, int, T);                     \
  template Var<T> forward_features(const Bound<T>&, const ModelConfig&, const Var<T>&, const ForwardOptions<T>&); \
  template Var<T> forward_cls(const Bound<T>&, const ModelConfig&, const Var<T>&, const ForwardOptions<T>&);

RINGMO_INSTANTIATE_MODEL(float)
RINGMO_INSTANTIATE_MODEL(double)

}  // namespace ringmo::model
