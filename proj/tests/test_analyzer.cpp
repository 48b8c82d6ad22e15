#include "doctest.h"

#include <sstream>

#include "ringmo/analyzer.hpp"

using namespace ringmo;
using namespace ringmo::analyzer;
using model::HfConvMode;
using model::ModelConfig;

namespace {

struct Totals {
  std::int64_t params = 0, flops = 0;
};

// Hand-derived closed form for the plain windowed-attention backbone.
Totals plain_oracle(const ModelConfig& c, int img) {
  Totals t;
  const std::int64_t e = c.embed_dim, p = c.patch_size;
  std::int64_t grid = img / p;
  t.params += 3 * e * p * p + e + 2 * e;
  t.flops += 3 * e * p * p * grid * grid;
  for (int s = 0; s < c.num_stages(); ++s) {
    const std::int64_t C = e << s, w = std::min<std::int64_t>(c.window_size, grid), L = grid * grid;
    const std::int64_t hid = C * c.mlp_ratio, h = c.num_heads[s];
    for (int b = 0; b < c.depths[s]; ++b) {
      t.params += 2 * C + (2 * w - 1) * (2 * w - 1) * h + 3 * C * C + 3 * C + C * C + C + 2 * C + 2 * C * hid + hid + C;
      t.flops += 3 * L * C * C + L * C * C + 2 * L * w * w * C + 2 * L * C * hid;
    }
    if (s + 1 < c.num_stages()) {
      t.params += 8 * C + 8 * C * C;
      t.flops += (L / 4) * 8 * C * C;
      grid /= 2;
    }
  }
  const std::int64_t f = e << (c.num_stages() - 1);
  t.params += 2 * f + f * c.num_classes + c.num_classes;
  t.flops += f * c.num_classes;
  return t;
}

std::int64_t hf_params_oracle(const ModelConfig& c) {
  std::int64_t n = 0;
  for (int s = 0; s < c.num_stages(); ++s) {
    const std::int64_t half = (c.embed_dim << s) / 2;
    const std::int64_t per = c.hf_conv_mode == HfConvMode::Full ? 2 * half * half + 12 * half : 14 * half;
    n += per * c.depths[s];
  }
  return n;
}

}  // namespace

TEST_CASE("plain backbone matches the closed form") {
  ModelConfig c;
  c.hf_branch_enabled = false;
  const auto r = analyze(c);
  const auto o = plain_oracle(c, 224);
  CHECK(r.total_params == o.params);
  CHECK(r.total_flops == o.flops);
  CHECK(r.total_params == 28288354);
  CHECK(r.total_flops == 4490566656);
}

TEST_CASE("HF branch overhead matches the closed form in both modes") {
  for (auto mode : {HfConvMode::Depthwise, HfConvMode::Full}) {
    ModelConfig c;
    c.hf_conv_mode = mode;
    const auto d = fifb_delta(c);
    CHECK(d.delta() == hf_params_oracle(c));
    CHECK(d.hybrid_params == analyze(c).total_params);
  }
  ModelConfig dw, full;
  full.hf_conv_mode = HfConvMode::Full;
  CHECK(fifb_delta(full).delta() > fifb_delta(dw).delta());
  CHECK(fifb_delta(dw).delta() > 0);
  CHECK(fifb_delta(dw).delta() == 30912);
  ModelConfig plain;
  plain.hf_branch_enabled = false;
  CHECK(analyze(dw).total_flops > analyze(plain).total_flops);
}

TEST_CASE("analyzer agrees with instantiated weights") {
  for (auto mode : {HfConvMode::Depthwise, HfConvMode::Full})
    for (bool hf : {true, false}) {
      ModelConfig c;
      c.hf_conv_mode = mode;
      c.hf_branch_enabled = hf;
      const auto v = verify_against_model(c);
      CHECK(v.ok());
      CHECK(v.expected_total == v.actual_total);
    }
}

TEST_CASE("verification reports a mismatching layer") {
  ModelConfig c;
  c.depths = {1, 1, 1, 1};
  auto report = count_params(c);
  auto actual = layer_totals(model::init_weights<float>(c, 0));
  actual["head"] += 1;
  const auto v = verify_against_counts(report, actual);
  REQUIRE(v.mismatches.size() == 1u);
  CHECK(v.mismatches[0].layer == "head");
  CHECK(v.mismatches[0].actual == v.mismatches[0].expected + 1);
}

TEST_CASE("token FLOPs scale with area") {
  ModelConfig c;
  c.hf_branch_enabled = false;
  // every grid stays divisible by 7 at 448, so per-token cost is unchanged
  const auto big = analyze(c, 448), small = analyze(c, 224);
  CHECK(big.total_params == small.total_params);
  const std::int64_t head = static_cast<std::int64_t>(c.num_features()) * c.num_classes;
  CHECK(big.total_flops - head == 4 * (small.total_flops - head));
  CHECK(big.img_size == 448);
}

TEST_CASE("json and table agree") {
  ModelConfig c;
  const auto r = analyze(c);
  const auto j = to_json(r);
  CHECK(j["total"]["params"] == r.total_params);
  CHECK(j["total"]["flops"] == r.total_flops);
  std::int64_t sp = 0, sf = 0;
  for (const auto& row : j["rows"]) {
    sp += row["params"].get<std::int64_t>();
    sf += row["flops"].get<std::int64_t>();
  }
  CHECK(sp == r.total_params);
  CHECK(sf == r.total_flops);
  const auto table = to_table(r);
  CHECK(table.find(std::to_string(r.total_params)) != std::string::npos);
  CHECK(table.find("1 MAC = 1 FLOP") != std::string::npos);
  CHECK(r.find("head") != nullptr);
  CHECK(r.find("nope") == nullptr);
}

TEST_CASE("conv cost") {
  CHECK(conv_macs(3, 96, 1, 4, 4, 56, 56) == 3LL * 96 * 16 * 56 * 56);
  CHECK(conv_macs(48, 48, 48, 3, 3, 7, 7) == 48LL * 9 * 49);
}

TEST_CASE("invalid config is rejected") {
  ModelConfig c;
  c.num_heads = {3, 6};
  CHECK_THROWS_AS(analyze(c), ConfigError);
}

TEST_CASE("params ignore image size and grow with every width knob") {
  ModelConfig c;
  CHECK(count_params(c).total_params == analyze(c, 448).total_params);
  const auto base = count_params(c).total_params;
  auto deeper = c;
  deeper.depths = {2, 2, 8, 2};
  deeper.num_heads = {3, 6, 12, 24};
  auto wider = c;
  wider.embed_dim = 192;
  auto more = c;
  more.num_classes = 1001;
  for (const auto& v : {deeper, wider, more}) CHECK(count_params(v).total_params > base);
}
