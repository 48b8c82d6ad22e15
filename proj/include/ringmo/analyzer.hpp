#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "ringmo/model.hpp"

namespace ringmo::analyzer {

/// Printed with every report.
inline constexpr const char* kCountingConvention =
    "FLOPs are multiply-accumulates (1 MAC = 1 FLOP): conv = Cout*Cin/groups*kh*kw*H'*W', "
    "linear = in*out*tokens, window attention = QKV and output projections plus 2*N*N*d per window per head; "
    "bias additions, LayerNorm, softmax, GELU, residual additions and max-pool comparisons count as 0. "
    "Parameters include relative-position-bias tables; relative-position index maps are buffers and not counted.";

struct CostRow {
  std::string layer;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct CostReport {
  std::vector<CostRow> rows;
  std::int64_t total_params = 0;
  std::int64_t total_flops = 0;
  int img_size = 0;
  std::string counting_convention = kCountingConvention;

  const CostRow* find(const std::string& layer) const;
};

/// Closed-form per-layer costs at `img_size` (0 means config.img_size).
CostReport analyze(const model::ModelConfig& config, int img_size = 0);
CostReport count_params(const model::ModelConfig& config);
CostReport count_flops(const model::ModelConfig& config, int img_size = 0);

/// Single dense/grouped conv cost, exposed for direct checks.
std::int64_t conv_macs(std::int64_t cin, std::int64_t cout, int groups, int kh, int kw, std::int64_t out_h,
                       std::int64_t out_w);

struct Mismatch {
  std::string layer;
  std::int64_t expected = 0;  // analyzer
  std::int64_t actual = 0;    // instantiated weights
};

struct VerifyResult {
  std::vector<Mismatch> mismatches;
  std::int64_t expected_total = 0;
  std::int64_t actual_total = 0;
  bool ok() const { return mismatches.empty(); }
};

/// Compares analyzer rows against element totals grouped by layer path.
VerifyResult verify_against_counts(const CostReport& report, const std::map<std::string, std::int64_t>& actual);

/// Instantiates the weights for `config` and compares them with count_params.
VerifyResult verify_against_model(const model::ModelConfig& config);

/// Element totals grouped by layer path of an instantiated parameter set.
template <typename T>
std::map<std::string, std::int64_t> layer_totals(const model::ParamStore<T>& params);

nlohmann::json to_json(const CostReport& report);
std::string to_table(const CostReport& report);

/// Parameter overhead of the high-frequency branch over the same config with
/// the branch disabled.
struct FifbDelta {
  std::int64_t baseline_params = 0;
  std::int64_t hybrid_params = 0;
  std::int64_t delta() const { return hybrid_params - baseline_params; }
};

FifbDelta fifb_delta(const model::ModelConfig& config);

/// Parameter overhead stated for the reference model: 28.294M - 28.288M.
inline constexpr std::int64_t kReportedFifbDelta = 6000;

}  // namespace ringmo::analyzer
