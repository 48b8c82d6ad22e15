#include "ringmo/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ringmo/fdmim.hpp"
#include "ringmo/ops.hpp"
#include "ringmo/optim.hpp"

namespace ringmo::finetune {

namespace {

[[noreturn]] void bad_field(const std::string& key, const std::string& why) {
  throw ConfigError("train-cls field '" + key + "': " + why);
}

template <typename T>
Tensor<T> stack(const data::Dataset& ds, const std::vector<std::int64_t>& idx) {
  const auto& first = ds.records[static_cast<std::size_t>(idx[0])].pixels;
  const std::int64_t per = first.size();
  Shape shape{static_cast<std::int64_t>(idx.size())};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& src = ds.records[static_cast<std::size_t>(idx[i])].pixels.vec();
    std::copy(src.begin(), src.end(), out.vec().begin() + static_cast<std::int64_t>(i) * per);
  }
  return out;
}

void check_labels(const data::Dataset& ds, int classes, const char* what) {
  for (const auto& r : ds.records) {
    if (!r.label) throw data::DataError(std::string(what) + " image '" + r.path + "' has no label");
    if (*r.label < 0 || *r.label >= classes) {
      throw ConfigError("train-cls field 'classes': " + std::string(what) + " image '" + r.path + "' has label " +
                        std::to_string(*r.label) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

}  // namespace

void ClassifyConfig::validate() const {
  model.validate();
  if (epochs < 1) bad_field("epochs", "must be positive");
  if (batch_size < 1) bad_field("batch_size", "must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) bad_field("lr", "must be finite and non-negative");
}

void to_json(nlohmann::json& j, const ClassifyConfig& c) {
  j = nlohmann::json{{"model", c.model}, {"normalization", c.normalization}, {"epochs", c.epochs},
                     {"batch_size", c.batch_size}, {"lr", c.lr}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ClassifyConfig& c) {
  if (!j.is_object()) throw ConfigError("train-cls config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "model") c.model = v.get<model::ModelConfig>();
      else if (key == "normalization") c.normalization = v.get<data::Normalization>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else bad_field(key, "unknown field");
    } catch (const nlohmann::json::exception& e) {
      bad_field(key, e.what());
    }
  }
}

nlohmann::json checkpoint_config(const ClassifyConfig& c) {
  return nlohmann::json{{"kind", "classifier"}, {"model", c.model}, {"train_cls", c}};
}

model::ParamStore<float> backbone_from(const data::Checkpoint& ck, const model::ModelConfig& config) {
  model::ParamStore<float> backbone;
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("head.", 0) == 0 || name.rfind("decoder.", 0) == 0 || name == "mask_fill") continue;
    backbone[name] = t;
  }
  data::check_shapes(model::param_shapes(config, false), backbone, "init checkpoint backbone vs model config");
  return backbone;
}

double accuracy(const model::ParamStore<float>& params, const model::ModelConfig& config,
                const data::Normalization& norm, const data::Dataset& ds) {
  if (ds.records.empty()) return 0.0;
  const auto p = model::Bound<float>::constants(params);
  constexpr std::int64_t kChunk = 16;
  const auto n = static_cast<std::int64_t>(ds.records.size());
  std::int64_t correct = 0;
  for (std::int64_t start = 0; start < n; start += kChunk) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(std::min(kChunk, n - start)));
    std::iota(idx.begin(), idx.end(), start);
    const auto x = fdmim::normalize(Var<float>(stack<float>(ds, idx)), norm);
    const auto logits = model::forward_cls(p, config, x).value();
    const std::int64_t k = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto row = logits.data().subspan(i * static_cast<std::size_t>(k), static_cast<std::size_t>(k));
      const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
      correct += ds.records[static_cast<std::size_t>(idx[i])].label == static_cast<int>(pred);
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

ClassifyResult train_classifier(const ClassifyConfig& config, const data::Dataset& train, const data::Dataset* val,
                                const model::ParamStore<float>* init,
                                const std::function<void(const EpochStats&)>& on_epoch) {
  config.validate();
  if (train.records.empty()) throw data::DataError("training dataset is empty");
  const int img = config.model.img_size;
  data::require_extents(train, img, img);
  check_labels(train, config.model.num_classes, "training");
  if (val) {
    data::require_extents(*val, img, img);
    check_labels(*val, config.model.num_classes, "validation");
  }

  ClassifyResult res;
  res.params = model::init_weights<float>(config.model, config.seed, true);
  if (init) {
    for (const auto& [name, t] : *init) {
      auto it = res.params.find(name);
      if (it == res.params.end() || name.rfind("head.", 0) == 0) continue;
      if (it->second.shape() != t.shape()) {
        throw data::CheckpointError(data::CheckpointErrorKind::ShapeMismatch,
                                    "init tensor '" + name + "' is " + shape_str(t.shape()) + ", model expects " +
                                        shape_str(it->second.shape()));
      }
      it->second = t;
    }
  }

  optim::Adam<float> adam(optim::AdamOptions{.lr = config.lr});
  std::mt19937_64 order_rng(config.seed ^ 0xc1a55ull);
  std::mt19937_64 drop_rng(config.seed ^ 0xd809ull);
  const auto n = static_cast<std::int64_t>(train.records.size());
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0;
    int batches = 0;
    for (std::int64_t start = 0; start < n; start += config.batch_size) {
      const std::vector<std::int64_t> idx(order.begin() + start, order.begin() + std::min<std::int64_t>(n, start + config.batch_size));
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(*train.records[static_cast<std::size_t>(i)].label);
      Tape<float> tape;
      const auto p = model::Bound<float>::on_tape(tape, res.params);
      model::ForwardOptions<float> opts;
      opts.training = true;
      opts.rng = &drop_rng;
      const auto x = fdmim::normalize(Var<float>(stack<float>(train, idx)), config.normalization);
      const auto loss = ops::cross_entropy(model::forward_cls(p, config.model, x, opts), labels);
      tape.backward(loss);
      adam.begin_step();
      for (auto& [name, t] : res.params) adam.update(name, t, tape.grad(p[name]));
      loss_sum += loss.value().item();
      ++batches;
    }
    EpochStats st;
    st.epoch = epoch;
    st.loss = loss_sum / batches;
    st.train_acc = accuracy(res.params, config.model, config.normalization, train);
    if (val) st.val_acc = accuracy(res.params, config.model, config.normalization, *val);
    res.log.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return res;
}

}  // namespace ringmo::finetune
