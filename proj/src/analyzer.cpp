#include "ringmo/analyzer.hpp"

#include <iomanip>
#include <set>
#include <sstream>

namespace ringmo::analyzer {

using model::HfConvMode;
using model::ModelConfig;

const CostRow* CostReport::find(const std::string& layer) const {
  for (const auto& r : rows)
    if (r.layer == layer) return &r;
  return nullptr;
}

std::int64_t conv_macs(std::int64_t cin, std::int64_t cout, int groups, int kh, int kw, std::int64_t out_h,
                       std::int64_t out_w) {
  return cout * (cin / groups) * kh * kw * out_h * out_w;
}

CostReport analyze(const ModelConfig& base, int img_size) {
  ModelConfig c = base;
  if (img_size > 0) c.img_size = img_size;
  c.validate();

  CostReport rep;
  rep.img_size = c.img_size;
  auto row = [&rep](std::string layer, std::int64_t params, std::int64_t flops) {
    rep.rows.push_back(CostRow{std::move(layer), params, flops});
  };

  const std::int64_t e = c.embed_dim, p = c.patch_size;
  const std::int64_t g0 = c.stage_grid(0);
  row("patch_embed.proj", e * 3 * p * p + e, conv_macs(3, e, 1, c.patch_size, c.patch_size, g0, g0));
  row("patch_embed.norm", 2 * e, 0);

  for (int s = 0; s < c.num_stages(); ++s) {
    const std::int64_t ch = c.stage_channels(s);
    const std::int64_t grid = c.stage_grid(s);
    const std::int64_t tokens = grid * grid;
    const std::int64_t w = c.stage_window(s);
    const std::int64_t n = w * w;
    const std::int64_t windows = (grid / w) * (grid / w);
    const std::int64_t heads = c.num_heads[s];
    const std::int64_t hidden = ch * c.mlp_ratio;
    for (int b = 0; b < c.depths[s]; ++b) {
      const auto pre = model::block_prefix(s, b);
      row(pre + ".norm1", 2 * ch, 0);
      row(pre + ".attn.qkv", ch * 3 * ch + 3 * ch, tokens * ch * 3 * ch);
      // QK^T and attention-weighted V: two N x N x d products per head per window
      row(pre + ".attn", (2 * w - 1) * (2 * w - 1) * heads, windows * heads * 2 * n * n * (ch / heads));
      row(pre + ".attn.proj", ch * ch + ch, tokens * ch * ch);
      row(pre + ".norm2", 2 * ch, 0);
      row(pre + ".mlp.fc1", ch * hidden + hidden, tokens * ch * hidden);
      row(pre + ".mlp.fc2", hidden * ch + ch, tokens * hidden * ch);
      if (c.hf_branch_enabled) {
        const std::int64_t half = ch / 2;
        const int pw_groups = c.hf_conv_mode == HfConvMode::Full ? 1 : static_cast<int>(half);
        const std::int64_t pw_params = half * (half / pw_groups) + half;
        row(pre + ".hf.conv1", pw_params, conv_macs(half, half, pw_groups, 1, 1, grid, grid));
        row(pre + ".hf.conv3", half * 9 + half, conv_macs(half, half, static_cast<int>(half), 3, 3, grid, grid));
        row(pre + ".hf.pool", 0, 0);
        row(pre + ".hf.conv2", pw_params, conv_macs(half, half, pw_groups, 1, 1, grid, grid));
      }
    }
    if (s + 1 < c.num_stages()) {
      const auto pre = "layers." + std::to_string(s) + ".downsample";
      row(pre + ".norm", 8 * ch, 0);
      row(pre + ".reduction", 4 * ch * 2 * ch, (tokens / 4) * 4 * ch * 2 * ch);
    }
  }
  const std::int64_t f = c.num_features();
  row("norm", 2 * f, 0);
  row("head", f * c.num_classes + c.num_classes, f * c.num_classes);

  for (const auto& r : rep.rows) {
    rep.total_params += r.params;
    rep.total_flops += r.flops;
  }
  return rep;
}

CostReport count_params(const ModelConfig& config) { return analyze(config); }

CostReport count_flops(const ModelConfig& config, int img_size) { return analyze(config, img_size); }

template <typename T>
std::map<std::string, std::int64_t> layer_totals(const model::ParamStore<T>& params) {
  std::map<std::string, std::int64_t> out;
  for (const auto& [name, t] : params) out[model::layer_of(name)] += t.size();
  return out;
}

template std::map<std::string, std::int64_t> layer_totals(const model::ParamStore<float>&);
template std::map<std::string, std::int64_t> layer_totals(const model::ParamStore<double>&);

VerifyResult verify_against_counts(const CostReport& report, const std::map<std::string, std::int64_t>& actual) {
  VerifyResult res;
  std::set<std::string> seen;
  for (const auto& r : report.rows) {
    seen.insert(r.layer);
    auto it = actual.find(r.layer);
    const std::int64_t got = it == actual.end() ? 0 : it->second;
    res.expected_total += r.params;
    if (got != r.params) res.mismatches.push_back(Mismatch{r.layer, r.params, got});
  }
  for (const auto& [layer, n] : actual) {
    res.actual_total += n;
    if (!seen.count(layer)) res.mismatches.push_back(Mismatch{layer, 0, n});
  }
  return res;
}

VerifyResult verify_against_model(const ModelConfig& config) {
  const auto weights = model::init_weights<float>(config, 0);
  return verify_against_counts(count_params(config), layer_totals(weights));
}

FifbDelta fifb_delta(const ModelConfig& config) {
  ModelConfig base = config;
  base.hf_branch_enabled = false;
  ModelConfig hybrid = config;
  hybrid.hf_branch_enabled = true;
  return FifbDelta{count_params(base).total_params, count_params(hybrid).total_params};
}

nlohmann::json to_json(const CostReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) rows.push_back({{"layer", r.layer}, {"params", r.params}, {"flops", r.flops}});
  return nlohmann::json{{"img_size", report.img_size},
                        {"counting_convention", report.counting_convention},
                        {"rows", rows},
                        {"total", {{"layer", "total"}, {"params", report.total_params}, {"flops", report.total_flops}}}};
}

std::string to_table(const CostReport& report) {
  std::size_t width = 5;
  for (const auto& r : report.rows) width = std::max(width, r.layer.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width)) << "layer" << std::right << std::setw(14) << "params"
     << std::setw(16) << "flops" << '\n';
  os << std::string(width + 30, '-') << '\n';
  for (const auto& r : report.rows) {
    os << std::left << std::setw(static_cast<int>(width)) << r.layer << std::right << std::setw(14) << r.params
       << std::setw(16) << r.flops << '\n';
  }
  os << std::string(width + 30, '-') << '\n';
  os << std::left << std::setw(static_cast<int>(width)) << "total" << std::right << std::setw(14)
     << report.total_params << std::setw(16) << report.total_flops << '\n';
  os << std::fixed << std::setprecision(3) << "params (M): " << report.total_params / 1e6
     << "   FLOPs (G): " << report.total_flops / 1e9 << "   at " << report.img_size << "x" << report.img_size << '\n';
  os << "convention: " << report.counting_convention << '\n';
  return os.str();
}

}  // namespace ringmo::analyzer
