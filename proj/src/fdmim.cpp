#include "ringmo/fdmim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "ringmo/ops.hpp"
#include "ringmo/optim.hpp"

namespace ringmo::fdmim {

namespace {

[[noreturn]] void bad_field(const std::string& context, const std::string& key, const std::string& why) {
  throw ConfigError(context + " field '" + key + "': " + why);
}

template <typename Fn>
void parse_fields(const nlohmann::json& j, const std::string& context, Fn&& fn) {
  if (!j.is_object()) throw ConfigError(context + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (!fn(key, value)) bad_field(context, key, "unknown field");
    } catch (const nlohmann::json::exception& e) {
      bad_field(context, key, e.what());
    }
  }
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

void MaskParams::validate() const {
  if (mask_patch_size < 1) bad_field("mask", "mask_patch_size", "must be positive");
  if (!(patch_select_ratio > 0.0 && patch_select_ratio <= 1.0)) bad_field("mask", "patch_select_ratio", "must lie in (0, 1]");
  if (!(pixel_mask_ratio > 0.0 && pixel_mask_ratio <= 1.0)) bad_field("mask", "pixel_mask_ratio", "must lie in (0, 1]");
  if (!(cutoff > 0.0 && cutoff < 1.0)) bad_field("mask", "cutoff", "must lie in (0, 1)");
  if (!(threshold > 0.0 && threshold < 1.0)) bad_field("mask", "threshold", "must lie in (0, 1)");
}

void to_json(nlohmann::json& j, const MaskParams& p) {
  j = nlohmann::json{{"mask_patch_size", p.mask_patch_size}, {"patch_select_ratio", p.patch_select_ratio},
                     {"pixel_mask_ratio", p.pixel_mask_ratio}, {"cutoff", p.cutoff},
                     {"threshold", p.threshold},           {"filter", p.filter}};
}

void from_json(const nlohmann::json& j, MaskParams& p) {
  parse_fields(j, "mask", [&](const std::string& key, const nlohmann::json& v) {
    if (key == "mask_patch_size") p.mask_patch_size = v.get<int>();
    else if (key == "patch_select_ratio") p.patch_select_ratio = v.get<double>();
    else if (key == "pixel_mask_ratio") p.pixel_mask_ratio = v.get<double>();
    else if (key == "cutoff") p.cutoff = v.get<double>();
    else if (key == "threshold") p.threshold = v.get<double>();
    else if (key == "filter") p.filter = v.get<bool>();
    else return false;
    return true;
  });
}

std::int64_t MaskPlan::masked_count() const {
  return std::count(pixel_mask.begin(), pixel_mask.end(), std::uint8_t{1});
}

bool MaskPlan::operator==(const MaskPlan& o) const {
  if (class_per_patch.size() != o.class_per_patch.size()) return false;
  for (auto a = class_per_patch.begin(), b = o.class_per_patch.begin(); a != class_per_patch.end(); ++a, ++b) {
    if (a->first != b->first || a->second.band != b->second.band || a->second.ratio != b->second.ratio) return false;
  }
  return image_id == o.image_id && height == o.height && width == o.width && mask_patch_size == o.mask_patch_size &&
         selected == o.selected && pixel_mask == o.pixel_mask && rng_seed == o.rng_seed && filter == o.filter &&
         cutoff == o.cutoff;
}

nlohmann::json to_json(const MaskPlan& plan) {
  nlohmann::json patches = nlohmann::json::array();
  for (const auto& pc : plan.selected) {
    const auto& cls = plan.class_per_patch.at(pc);
    patches.push_back({{"row", pc.row}, {"col", pc.col}, {"band", freq::to_string(cls.band)}, {"ratio", cls.ratio}});
  }
  return nlohmann::json{{"image_id", plan.image_id},
                        {"height", plan.height},
                        {"width", plan.width},
                        {"mask_patch_size", plan.mask_patch_size},
                        {"total_patches", plan.total_patches()},
                        {"selected_count", plan.selected.size()},
                        {"masked_pixels", plan.masked_count()},
                        {"rng_seed", plan.rng_seed},
                        {"filter", plan.filter},
                        {"cutoff", plan.cutoff},
                        {"selected", patches}};
}

std::int64_t selected_count(std::int64_t total, double ratio) {
  // 0.7 * 10 lands at 6.999...; nudge values within rounding of an integer
  const double exact = static_cast<double>(total) * ratio;
  return static_cast<std::int64_t>(std::floor(exact + 1e-9 * std::max(1.0, exact)));
}

MaskPlan plan_mask(const Tensor<float>& image, const MaskParams& params, std::uint64_t seed, std::string image_id) {
  params.validate();
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("plan_mask: expected a [3,H,W] image, got " + shape_str(image.shape()));
  }
  const int h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  const int s = params.mask_patch_size;
  if (h % s != 0 || w % s != 0) {
    throw ConfigError("mask field 'mask_patch_size': " + std::to_string(s) + " does not divide image extents " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  MaskPlan plan;
  plan.image_id = std::move(image_id);
  plan.height = h;
  plan.width = w;
  plan.mask_patch_size = s;
  plan.rng_seed = seed;
  plan.filter = params.filter;
  plan.cutoff = params.cutoff;
  plan.pixel_mask.assign(static_cast<std::size_t>(h) * w, 0);

  std::mt19937_64 rng(seed);
  const int per_row = w / s;
  const int total = plan.total_patches();
  std::vector<int> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(selected_count(total, params.patch_select_ratio)));
  std::sort(order.begin(), order.end());

  const std::int64_t area = static_cast<std::int64_t>(s) * s;
  const auto per_patch = selected_count(area, params.pixel_mask_ratio);
  std::vector<int> pixels(static_cast<std::size_t>(area));
  std::vector<freq::Patch> channels(3, freq::Patch(Shape{s, s}));
  for (int idx : order) {
    const PatchCoord pc{idx / per_row, idx % per_row};
    plan.selected.push_back(pc);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
          channels[c][y * s + x] = image[(static_cast<std::int64_t>(c) * h + pc.row * s + y) * w + pc.col * s + x];
    plan.class_per_patch[pc] = freq::classify_channels(channels, params.cutoff, params.threshold);

    std::iota(pixels.begin(), pixels.end(), 0);
    std::shuffle(pixels.begin(), pixels.end(), rng);
    for (std::int64_t k = 0; k < per_patch; ++k) {
      const int py = pixels[k] / s, px = pixels[k] % s;
      plan.pixel_mask[static_cast<std::size_t>(pc.row * s + py) * w + pc.col * s + px] = 1;
    }
  }
  return plan;
}

namespace {

void check_plan(const Tensor<float>& image, const MaskPlan& plan, const char* who) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != plan.height || image.dim(2) != plan.width) {
    throw ShapeError(std::string(who) + ": image " + shape_str(image.shape()) + " does not match plan extents " +
                     std::to_string(plan.height) + "x" + std::to_string(plan.width));
  }
}

}  // namespace

Tensor<float> filter_selected(const Tensor<float>& image, const MaskPlan& plan) {
  check_plan(image, plan, "filter_selected");
  Tensor<float> out = image;
  if (!plan.filter) return out;
  const int s = plan.mask_patch_size, h = plan.height, w = plan.width;
  freq::Patch patch(Shape{s, s});
  for (const auto& pc : plan.selected) {
    const auto kind = plan.class_per_patch.at(pc).band == freq::Band::High ? freq::FilterKind::HighPass
                                                                            : freq::FilterKind::LowPass;
    for (int c = 0; c < 3; ++c) {
      auto idx = [&](int y, int x) { return (static_cast<std::int64_t>(c) * h + pc.row * s + y) * w + pc.col * s + x; };
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) patch[y * s + x] = image[idx(y, x)];
      const auto filtered = freq::ideal_filter(patch, plan.cutoff, kind);
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) out[idx(y, x)] = static_cast<float>(filtered[y * s + x]);
    }
  }
  return out;
}

Tensor<float> apply_mask(const Tensor<float>& image, const MaskPlan& plan, const std::array<float, 3>& fill) {
  Tensor<float> out = filter_selected(image, plan);
  const std::int64_t plane = static_cast<std::int64_t>(plan.height) * plan.width;
  for (std::int64_t i = 0; i < plane; ++i) {
    if (!plan.pixel_mask[static_cast<std::size_t>(i)]) continue;
    for (int c = 0; c < 3; ++c) out[c * plane + i] = fill[c];
  }
  return out;
}

Tensor<float> mask_tensor(const MaskPlan& plan) {
  Tensor<float> m(Shape{1, plan.height, plan.width});
  for (std::size_t i = 0; i < plan.pixel_mask.size(); ++i) m[static_cast<std::int64_t>(i)] = plan.pixel_mask[i];
  return m;
}

PretrainBatch make_batch(const std::vector<const Tensor<float>*>& images, const std::vector<MaskPlan>& plans) {
  if (images.empty() || images.size() != plans.size()) throw ShapeError("make_batch: need one plan per image");
  const std::int64_t b = static_cast<std::int64_t>(images.size());
  const std::int64_t h = plans[0].height, w = plans[0].width;
  PretrainBatch batch{Tensor<float>(Shape{b, 3, h, w}), Tensor<float>(Shape{b, 3, h, w}),
                      Tensor<float>(Shape{b, 1, h, w})};
  const std::int64_t img = 3 * h * w;
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& plan = plans[static_cast<std::size_t>(i)];
    if (plan.height != h || plan.width != w) throw ShapeError("make_batch: plans disagree on extents");
    const auto filtered = filter_selected(*images[static_cast<std::size_t>(i)], plan);
    std::copy(filtered.vec().begin(), filtered.vec().end(), batch.filtered.vec().begin() + i * img);
    const auto& src = images[static_cast<std::size_t>(i)]->vec();
    std::copy(src.begin(), src.end(), batch.target.vec().begin() + i * img);
    for (std::int64_t k = 0; k < h * w; ++k) batch.mask[i * h * w + k] = plan.pixel_mask[static_cast<std::size_t>(k)];
  }
  return batch;
}

template <typename T>
Var<T> fill_masked(const Tensor<T>& filtered, const Tensor<T>& mask, const Var<T>& fill) {
  if (filtered.rank() != 4 || mask.rank() != 4 || mask.dim(1) != 1 || mask.dim(0) != filtered.dim(0) ||
      mask.dim(2) != filtered.dim(2) || mask.dim(3) != filtered.dim(3)) {
    throw ShapeError("fill_masked: image " + shape_str(filtered.shape()) + " vs mask " + shape_str(mask.shape()));
  }
  const std::int64_t b = filtered.dim(0), c = filtered.dim(1), h = filtered.dim(2), w = filtered.dim(3);
  if (fill.shape() != Shape{c}) throw ShapeError("fill_masked: fill must be [" + std::to_string(c) + "]");
  Tensor<T> keep = filtered;
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t k = 0; k < h * w; ++k) keep[(i * c + ch) * h * w + k] *= T(1) - mask[i * h * w + k];
  const Var<T> m(mask.reshaped(Shape{b * h * w, 1}));
  auto filled = ops::matmul(m, ops::reshape(fill, Shape{1, c}));
  filled = ops::permute(ops::reshape(filled, Shape{b, h, w, c}), {0, 3, 1, 2});
  return ops::add(Var<T>(std::move(keep)), filled);
}

template <typename T>
Var<T> normalize(const Var<T>& x, const data::Normalization& norm) {
  if (x.rank() != 4 || x.dim(1) != 3) throw ShapeError("normalize: expected [B,3,H,W], got " + shape_str(x.shape()));
  const std::int64_t h = x.dim(2), w = x.dim(3);
  Tensor<T> mean(Shape{3, h, w}), inv(Shape{3, h, w});
  for (int c = 0; c < 3; ++c)
    for (std::int64_t k = 0; k < h * w; ++k) {
      mean[c * h * w + k] = static_cast<T>(norm.mean[c]);
      inv[c * h * w + k] = static_cast<T>(1.0 / norm.std[c]);
    }
  return ops::mul(ops::sub(x, Var<T>(std::move(mean))), Var<T>(std::move(inv)));
}

template <typename T>
Var<T> reconstruction_head(const Var<T>& features, const Var<T>& weight, const Var<T>& bias, int grid_h, int grid_w,
                           int stride) {
  const std::int64_t footprint = 3ll * stride * stride;
  if (features.rank() != 3 || features.dim(1) != static_cast<std::int64_t>(grid_h) * grid_w) {
    throw ShapeError("reconstruction_head: expected [B," + std::to_string(grid_h * grid_w) + ",C] features, got " +
                     shape_str(features.shape()));
  }
  if (weight.rank() != 2 || weight.dim(0) != features.dim(2) || weight.dim(1) != footprint) {
    throw ShapeError("reconstruction_head: weight " + shape_str(weight.shape()) + " does not map " +
                     std::to_string(features.dim(2)) + " channels to " + std::to_string(footprint));
  }
  const std::int64_t b = features.dim(0);
  auto y = ops::linear(features, weight, std::optional<Var<T>>(bias));
  y = ops::reshape(y, Shape{b, grid_h, grid_w, 3, stride, stride});
  y = ops::permute(y, {0, 3, 1, 4, 2, 5});
  return ops::reshape(y, Shape{b, 3, static_cast<std::int64_t>(grid_h) * stride, static_cast<std::int64_t>(grid_w) * stride});
}

template <typename T>
Var<T> l1_masked_loss(const Var<T>& pred, const Tensor<T>& target, const Tensor<T>& mask) {
  if (pred.shape() != target.shape() || pred.rank() != 4) {
    throw ShapeError("l1_masked_loss: pred " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  const std::int64_t b = pred.dim(0), c = pred.dim(1), hw = pred.dim(2) * pred.dim(3);
  const bool shared = mask.shape() == Shape{b, 1, pred.dim(2), pred.dim(3)};
  if (!shared && mask.shape() != pred.shape()) {
    throw ShapeError("l1_masked_loss: mask " + shape_str(mask.shape()) + " does not fit " + shape_str(pred.shape()));
  }
  Tensor<T> full(pred.shape());
  double count = 0;
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t k = 0; k < hw; ++k) {
        const T m = shared ? mask[i * hw + k] : mask[(i * c + ch) * hw + k];
        full[(i * c + ch) * hw + k] = m;
        count += m;
      }
  const auto err = ops::mul(ops::abs(ops::sub(pred, Var<T>(target))), Var<T>(std::move(full)));
  return ops::scale(ops::sum(err), static_cast<T>(1.0 / std::max(count, 1.0)));
}

// ---------------------------------------------------------------------------
// pretraining

void PretrainConfig::validate() const {
  model.validate();
  mask.validate();
  if (steps < 1) bad_field("pretrain", "steps", "must be positive");
  if (batch_size < 1) bad_field("pretrain", "batch_size", "must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) bad_field("pretrain", "lr", "must be finite and non-negative");
  if (model.img_size % mask.mask_patch_size != 0) {
    bad_field("mask", "mask_patch_size", "does not divide model img_size " + std::to_string(model.img_size));
  }
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"model", c.model}, {"mask", c.mask},         {"normalization", c.normalization},
                     {"steps", c.steps}, {"batch_size", c.batch_size}, {"lr", c.lr},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  parse_fields(j, "pretrain", [&](const std::string& key, const nlohmann::json& v) {
    if (key == "model") c.model = v.get<model::ModelConfig>();
    else if (key == "mask") c.mask = v.get<MaskParams>();
    else if (key == "normalization") c.normalization = v.get<data::Normalization>();
    else if (key == "steps") c.steps = v.get<int>();
    else if (key == "batch_size") c.batch_size = v.get<int>();
    else if (key == "lr") c.lr = v.get<double>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else return false;
    return true;
  });
}

std::uint64_t plan_seed(std::uint64_t seed, std::int64_t step, std::int64_t index) {
  return splitmix(splitmix(splitmix(seed) ^ static_cast<std::uint64_t>(step)) ^ static_cast<std::uint64_t>(index));
}

nlohmann::json checkpoint_config(const PretrainConfig& c) {
  return nlohmann::json{{"kind", "pretrain"}, {"model", c.model}, {"pretrain", c}};
}

PretrainResult pretrain_loop(const PretrainConfig& config, const data::Dataset& dataset,
                             const std::function<void(int, double)>& on_step) {
  config.validate();
  if (dataset.records.empty()) throw data::DataError("pretraining dataset is empty");
  const int img = config.model.img_size;
  data::require_extents(dataset, img, img);

  PretrainResult res;
  std::mt19937_64 init_rng(config.seed);
  model::init_params(res.params, model::pretrain_param_shapes(config.model), init_rng);

  const int stride = config.model.total_stride();
  const int grid = img / stride;
  optim::Adam<float> adam(optim::AdamOptions{.lr = config.lr});
  std::mt19937_64 order_rng(splitmix(config.seed ^ 0x5eedull));
  std::mt19937_64 drop_rng(splitmix(config.seed ^ 0xd809ull));
  const auto n = static_cast<std::int64_t>(dataset.records.size());
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::size_t cursor = order.size();

  for (int step = 0; step < config.steps; ++step) {
    std::vector<const Tensor<float>*> images;
    std::vector<MaskPlan> plans;
    for (int k = 0; k < config.batch_size; ++k) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      const auto idx = order[cursor++];
      const auto& rec = dataset.records[static_cast<std::size_t>(idx)];
      images.push_back(&rec.pixels);
      plans.push_back(plan_mask(rec.pixels, config.mask, plan_seed(config.seed, step, k), rec.path));
    }
    const auto batch = make_batch(images, plans);

    Tape<float> tape;
    const auto p = model::Bound<float>::on_tape(tape, res.params);
    const auto corrupted = fill_masked(batch.filtered, batch.mask, p["mask_fill"]);
    model::ForwardOptions<float> opts;
    opts.training = true;
    opts.rng = &drop_rng;
    const auto feats = model::forward_features(p, config.model, normalize(corrupted, config.normalization), opts);
    const auto pred = reconstruction_head(feats, p["decoder.weight"], p["decoder.bias"], grid, grid, stride);
    const auto loss = l1_masked_loss(pred, batch.target, batch.mask);
    tape.backward(loss);

    adam.begin_step();
    for (auto& [name, t] : res.params) adam.update(name, t, tape.grad(p[name]));
    res.losses.push_back(loss.value().item());
    if (on_step) on_step(step, res.losses.back());
  }
  return res;
}

std::string loss_csv(const std::vector<double>& losses) {
  std::ostringstream os;
  os << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i + 1, losses[i]);
    os << buf;
  }
  return os.str();
}

#define RINGMO_FDMIM_INSTANTIATE(T)                                                                       \
  template Var<T> fill_masked(const Tensor<T>&, const Tensor<T>&, const Var<T>&);                         \
  template Var<T> normalize(const Var<T>&, const data::Normalization&);                                   \
  template Var<T> reconstruction_head(const Var<T>&, const Var<T>&, const Var<T>&, int, int, int);        \
  template Var<T> l1_masked_loss(const Var<T>&, const Tensor<T>&, const Tensor<T>&);

RINGMO_FDMIM_INSTANTIATE(float)
RINGMO_FDMIM_INSTANTIATE(double)

}  // namespace ringmo::fdmim
