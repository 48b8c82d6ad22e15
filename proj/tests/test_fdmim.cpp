#include "doctest.h"

#include <cmath>
#include <algorithm>
#include <random>
#include <set>

#include "oracles.hpp"
#include "ringmo/datakit.hpp"
#include "ringmo/fdmim.hpp"

using namespace ringmo;
using namespace ringmo::fdmim;

namespace {

Tensor<float> random_image(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return oracle::random_tensor<float>({3, size, size}, rng, 0, 1);
}

PretrainConfig small_pretrain() {
  PretrainConfig c;
  c.model.img_size = 32;
  c.model.patch_size = 4;
  c.model.embed_dim = 8;
  c.model.depths = {1, 1};
  c.model.num_heads = {1, 2};
  c.model.window_size = 4;
  c.mask.mask_patch_size = 8;
  c.steps = 3;
  c.batch_size = 2;
  return c;
}

}  // namespace

TEST_CASE("selected count is the floor of total times ratio") {
  CHECK(selected_count(49, 0.5) == 24);
  CHECK(selected_count(10, 0.3) == 3);  // 0.3 * 10 is 2.9999... in binary
  CHECK(selected_count(4, 0.01) == 0);
  CHECK(selected_count(4, 1.0) == 4);
}

TEST_CASE("plan sizes follow the ratios") {
  MaskParams p;
  p.mask_patch_size = 8;
  p.patch_select_ratio = 0.5;
  p.pixel_mask_ratio = 0.3;
  auto plan = plan_mask(random_image(32, 1), p, 7, "img");
  CHECK(plan.total_patches() == 16);
  CHECK(plan.selected.size() == 8u);
  CHECK(std::is_sorted(plan.selected.begin(), plan.selected.end()));
  CHECK(plan.class_per_patch.size() == 8u);
  CHECK(plan.masked_count() == 8 * static_cast<std::int64_t>(std::floor(64 * 0.3)));
  const auto j = to_json(plan);
  CHECK(j["selected_count"] == 8);
  CHECK(j["image_id"] == "img");
}

TEST_CASE("same seed gives the same plan") {
  MaskParams p;
  p.mask_patch_size = 8;
  auto img = random_image(32, 2);
  CHECK(plan_mask(img, p, 42) == plan_mask(img, p, 42));
  CHECK_FALSE(plan_mask(img, p, 42) == plan_mask(img, p, 43));
}

TEST_CASE("corruption stays inside selected patches") {
  MaskParams p;
  p.mask_patch_size = 8;
  auto img = random_image(32, 3);
  auto plan = plan_mask(img, p, 5);
  const auto filtered = filter_selected(img, plan);
  const auto out = apply_mask(img, plan, {0.1f, 0.2f, 0.3f});
  std::set<PatchCoord> sel(plan.selected.begin(), plan.selected.end());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const bool inside = sel.count({y / 8, x / 8}) != 0;
        if (!inside) {
          CHECK_FALSE(plan.masked(y, x));
          CHECK(out.at({c, y, x}) == img.at({c, y, x}));
          CHECK(filtered.at({c, y, x}) == img.at({c, y, x}));
        } else if (plan.masked(y, x)) {
          CHECK(out.at({c, y, x}) == doctest::Approx(0.1f * (c + 1)));
        } else {
          CHECK(out.at({c, y, x}) == filtered.at({c, y, x}));
        }
      }
}

TEST_CASE("filter follows the patch class") {
  MaskParams p;
  p.mask_patch_size = 8;
  p.patch_select_ratio = 1.0;
  Tensor<float> img(Shape{3, 16, 16});
  // left half checkerboard (high), right half a flat colour (low)
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) img.at({c, y, x}) = x < 8 ? ((x + y) % 2 ? 0.9f : 0.1f) : 0.4f;
  auto plan = plan_mask(img, p, 1);
  CHECK(plan.class_per_patch.at({0, 0}).band == freq::Band::High);
  CHECK(plan.class_per_patch.at({0, 1}).band == freq::Band::Low);
  auto f = filter_selected(img, plan);
  // high-pass removes the mean; low-pass keeps a constant
  CHECK(std::abs(f.at({0, 0, 0}) + 0.4f) < 1e-4);
  CHECK(std::abs(f.at({0, 0, 0}) + f.at({0, 0, 1})) < 1e-4);
  CHECK(f.at({1, 3, 12}) == doctest::Approx(0.4f).epsilon(1e-5));
  p.filter = false;
  CHECK(filter_selected(img, plan_mask(img, p, 1)) == img);
}

TEST_CASE("vanishing ratios leave the image untouched") {
  MaskParams p;
  p.mask_patch_size = 8;
  p.patch_select_ratio = 0.01;
  auto img = random_image(32, 4);
  auto plan = plan_mask(img, p, 9);
  CHECK(plan.selected.empty());
  CHECK(apply_mask(img, plan, {0, 0, 0}) == img);
  p.patch_select_ratio = 1.0;
  p.pixel_mask_ratio = 0.01;
  plan = plan_mask(img, p, 9);
  CHECK(plan.masked_count() == 0);
}

TEST_CASE("full ratios mask every pixel") {
  MaskParams p;
  p.mask_patch_size = 8;
  p.patch_select_ratio = 1.0;
  p.pixel_mask_ratio = 1.0;
  auto img = random_image(16, 5);
  auto plan = plan_mask(img, p, 1);
  CHECK(plan.masked_count() == 256);
  CHECK(apply_mask(img, plan, {0.5f, 0.5f, 0.5f}) == Tensor<float>(Shape{3, 16, 16}, 0.5f));
}

TEST_CASE("mask parameters are validated") {
  MaskParams p;
  p.patch_select_ratio = 0.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.pixel_mask_ratio = 1.5;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.cutoff = 1.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.mask_patch_size = 5;
  CHECK_THROWS_AS(plan_mask(random_image(16, 1), p, 0), ConfigError);
  CHECK_THROWS_AS(nlohmann::json({{"ratio", 0.5}}).get<MaskParams>(), ConfigError);
  MaskParams q;
  q.cutoff = 0.3;
  nlohmann::json j = q;
  CHECK(j.get<MaskParams>() == q);
}

TEST_CASE("constant-bias reconstruction head tiles the bias") {
  const int s = 2;
  Tensor<double> w(Shape{4, 3 * s * s}, 0.0);
  Tensor<double> b(Shape{3 * s * s});
  for (int i = 0; i < 12; ++i) b[i] = i;
  std::mt19937_64 rng(1);
  auto feats = oracle::random_tensor<double>({1, 6, 4}, rng);
  auto out = reconstruction_head(Var<double>(feats), Var<double>(w), Var<double>(b), 2, 3, s).value();
  CHECK(out.shape() == Shape{1, 3, 4, 6});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 6; ++x) CHECK(out.at({0, c, y, x}) == c * 4 + (y % 2) * 2 + x % 2);
}

TEST_CASE("reconstruction head places each token's pixels in its cell") {
  const int s = 2;
  // identity weights: token value k appears as its own s*s block
  Tensor<double> w(Shape{12, 12}, 0.0);
  for (int i = 0; i < 12; ++i) w.at({i, i}) = 1;
  Tensor<double> feats(Shape{1, 4, 12});
  for (int t = 0; t < 4; ++t)
    for (int i = 0; i < 12; ++i) feats.at({0, t, i}) = 100 * t + i;
  auto out = reconstruction_head(Var<double>(feats), Var<double>(w), Var<double>(Tensor<double>(Shape{12}, 0.0)), 2, 2,
                                 s)
                 .value();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        CHECK(out.at({0, c, y, x}) == 100 * ((y / 2) * 2 + x / 2) + c * 4 + (y % 2) * 2 + x % 2);
}

TEST_CASE("masked L1 averages over masked pixels only") {
  Tensor<double> pred(Shape{1, 3, 2, 2}, 1.0), target(Shape{1, 3, 2, 2}, 0.0);
  Tensor<double> mask(Shape{1, 1, 2, 2}, std::vector<double>{1, 0, 0, 1});
  target.at({0, 0, 1, 0}) = 50;  // unmasked, ignored
  CHECK(l1_masked_loss(Var<double>(pred), target, mask).value().item() == doctest::Approx(1.0));
  target.at({0, 2, 1, 1}) = 4;  // masked error 3 instead of 1
  CHECK(l1_masked_loss(Var<double>(pred), target, mask).value().item() == doctest::Approx(8.0 / 6.0));
  CHECK(l1_masked_loss(Var<double>(pred), target, Tensor<double>(Shape{1, 1, 2, 2}, 0.0)).value().item() == 0.0);
}

TEST_CASE("fill_masked blends the fill colour in") {
  Tensor<double> filtered(Shape{1, 3, 1, 2}, 0.25);
  Tensor<double> mask(Shape{1, 1, 1, 2}, std::vector<double>{1, 0});
  Tensor<double> fill(Shape{3}, std::vector<double>{7, 8, 9});
  auto out = fill_masked(filtered, mask, Var<double>(fill)).value();
  CHECK(out.vec() == std::vector<double>{7, 0.25, 8, 0.25, 9, 0.25});
}

TEST_CASE("pretraining trace and zero learning rate") {
  auto cfg = small_pretrain();
  auto ds = data::synth_corpus(4, 32, 1);
  int calls = 0;
  auto r = pretrain_loop(cfg, ds, [&](int, double) { ++calls; });
  CHECK(r.losses.size() == 3u);
  CHECK(calls == 3);
  for (double l : r.losses) CHECK(std::isfinite(l));
  CHECK(r.params.count("decoder.weight"));
  CHECK(r.params.count("mask_fill"));
  CHECK_FALSE(r.params.count("head.weight"));

  auto again = pretrain_loop(cfg, ds);
  CHECK(again.losses == r.losses);
  CHECK(again.params == r.params);

  cfg.lr = 0.0;
  auto frozen3 = pretrain_loop(cfg, ds);
  cfg.steps = 1;
  auto frozen1 = pretrain_loop(cfg, ds);
  CHECK(frozen3.params == frozen1.params);
  CHECK(frozen3.params != r.params);

  const auto csv = loss_csv({0.5, 0.25});
  CHECK(csv == "step,loss\n1,0.5\n2,0.25\n");
}

TEST_CASE("pretraining rejects wrong extents") {
  auto cfg = small_pretrain();
  auto ds = data::synth_corpus(2, 32, 1);
  ds.records[1].path = "odd_one.png";
  ds.records[1].pixels = Tensor<float>(Shape{3, 24, 24}, 0.5f);
  try {
    pretrain_loop(cfg, ds);
    FAIL("no error");
  } catch (const data::DataError& e) {
    CHECK(std::string(e.what()).find("odd_one.png") != std::string::npos);
  }
  cfg.mask.mask_patch_size = 12;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("pretrain config json is strict and round-trips") {
  auto cfg = small_pretrain();
  nlohmann::json j = cfg;
  auto back = j.get<PretrainConfig>();
  CHECK(back.model == cfg.model);
  CHECK(back.mask == cfg.mask);
  CHECK(back.steps == cfg.steps);
  j["stepz"] = 3;
  CHECK_THROWS_AS(j.get<PretrainConfig>(), ConfigError);
}

TEST_CASE("plan seeds differ per step and index") {
  CHECK(plan_seed(0, 0, 0) != plan_seed(0, 0, 1));
  CHECK(plan_seed(0, 1, 0) != plan_seed(0, 0, 1));
  CHECK(plan_seed(3, 2, 1) == plan_seed(3, 2, 1));
}
