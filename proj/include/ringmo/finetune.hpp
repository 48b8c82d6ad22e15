#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "json.hpp"
#include "ringmo/datakit.hpp"
#include "ringmo/model.hpp"

// Supervised classification on top of the backbone.
namespace ringmo::finetune {

struct ClassifyConfig {
  model::ModelConfig model;
  data::Normalization normalization;
  int epochs = 20;
  int batch_size = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const ClassifyConfig& c);
void from_json(const nlohmann::json& j, ClassifyConfig& c);

struct EpochStats {
  int epoch = 0;
  double loss = 0;       // mean training loss over the epoch
  double train_acc = 0;  // measured after the epoch's updates
  double val_acc = -1;   // negative without a validation set
};

struct ClassifyResult {
  model::ParamStore<float> params;
  std::vector<EpochStats> log;
};

/// Backbone tensors of a checkpoint (head and pretraining-only tensors
/// dropped), checked against `config`. Throws data::CheckpointError.
model::ParamStore<float> backbone_from(const data::Checkpoint& ck, const model::ModelConfig& config);

/// Fraction of records whose argmax prediction equals the label.
double accuracy(const model::ParamStore<float>& params, const model::ModelConfig& config,
                const data::Normalization& norm, const data::Dataset& ds);

/// Cross-entropy training with Adam. `init` replaces the backbone weights;
/// the head is always freshly initialized.
ClassifyResult train_classifier(const ClassifyConfig& config, const data::Dataset& train,
                                const data::Dataset* val = nullptr, const model::ParamStore<float>* init = nullptr,
                                const std::function<void(const EpochStats&)>& on_epoch = {});

nlohmann::json checkpoint_config(const ClassifyConfig& c);

}  // namespace ringmo::finetune
