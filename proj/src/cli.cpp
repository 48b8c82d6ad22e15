#include "ringmo/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "json.hpp"
#include "ringmo/analyzer.hpp"
#include "ringmo/datakit.hpp"
#include "ringmo/fdmim.hpp"
#include "ringmo/finetune.hpp"
#include "ringmo/freq.hpp"
#include "ringmo/gradcheck.hpp"

namespace ringmo::cli {

namespace fs = std::filesystem;
using nlohmann::json;

model::ModelConfig miniature_model() {
  model::ModelConfig c;
  c.img_size = 64;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.depths = {2, 2, 2, 2};
  c.num_heads = {1, 2, 4, 8};
  c.window_size = 4;
  c.mlp_ratio = 2;
  c.num_classes = 3;
  return c;
}

namespace {

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("field 'config': cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("field 'config': '" + path + "' is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data::DataError("cannot write '" + path.string() + "'");
  out << text;
}

void write_run_json(const fs::path& dir, const std::string& command, const json& config, const json& outputs) {
  write_text(dir / "run.json", json{{"command", command}, {"config", config}, {"outputs", outputs}}.dump(2) + "\n");
}

std::string require(const std::string& value, const std::string& command, const std::string& field) {
  if (value.empty()) throw ConfigError(command + " field '" + field + "': required");
  return value;
}

// Model overrides shared by every subcommand that builds a network.
struct ModelFlags {
  std::optional<int> img_size, embed_dim, window, patch_size, mlp_ratio;
  std::vector<int> depths, heads;
  std::optional<std::string> hf_mode;
  bool no_hf = false;
  std::string preset = "default";

  void add(CLI::App* app, bool with_img = true) {
    if (with_img) app->add_option("--img-size", img_size, "Input side length");
    app->add_option("--embed-dim", embed_dim, "Stage-1 channels");
    app->add_option("--depths", depths, "Blocks per stage")->expected(1, 8);
    app->add_option("--heads", heads, "Attention heads per stage")->expected(1, 8);
    app->add_option("--window", window, "Attention window side");
    app->add_option("--patch-size", patch_size, "Patch embedding stride");
    app->add_option("--mlp-ratio", mlp_ratio, "MLP hidden expansion");
    app->add_option("--hf-mode", hf_mode, "High-frequency branch 1x1 convs: Depthwise or Full");
    app->add_flag("--no-hf", no_hf, "Disable the high-frequency branch");
    app->add_option("--preset", preset, "Starting model: default or mini")->check(CLI::IsMember({"default", "mini"}));
  }

  model::ModelConfig base() const { return preset == "mini" ? miniature_model() : model::ModelConfig{}; }

  void apply(model::ModelConfig& c) const {
    if (img_size) c.img_size = *img_size;
    if (embed_dim) c.embed_dim = *embed_dim;
    if (window) c.window_size = *window;
    if (patch_size) c.patch_size = *patch_size;
    if (mlp_ratio) c.mlp_ratio = *mlp_ratio;
    if (!depths.empty()) c.depths = depths;
    if (!heads.empty()) c.num_heads = heads;
    if (hf_mode) {
      if (*hf_mode == "Depthwise") c.hf_conv_mode = model::HfConvMode::Depthwise;
      else if (*hf_mode == "Full") c.hf_conv_mode = model::HfConvMode::Full;
      else throw ConfigError("model config field 'hf_conv_mode': expected Depthwise or Full, got " + *hf_mode);
    }
    if (no_hf) c.hf_branch_enabled = false;
  }
};

struct MaskFlags {
  std::optional<int> patch;
  std::optional<double> select_ratio, pixel_ratio, cutoff, threshold;
  bool no_filter = false;

  void add(CLI::App* app) {
    app->add_option("--mask-patch,--patch", patch, "Masking patch side in pixels");
    app->add_option("--select-ratio", select_ratio, "Fraction of patches selected");
    app->add_option("--pixel-ratio", pixel_ratio, "Fraction of pixels masked in a selected patch");
    app->add_option("--cutoff", cutoff, "Normalized cutoff radius");
    app->add_option("--threshold", threshold, "High-band energy ratio threshold");
    app->add_flag("--no-filter", no_filter, "Skip band filtering");
  }

  void apply(fdmim::MaskParams& m) const {
    if (patch) m.mask_patch_size = *patch;
    if (select_ratio) m.patch_select_ratio = *select_ratio;
    if (pixel_ratio) m.pixel_mask_ratio = *pixel_ratio;
    if (cutoff) m.cutoff = *cutoff;
    if (threshold) m.threshold = *threshold;
    if (no_filter) m.filter = false;
  }
};

// ---------------------------------------------------------------------------
// pretrain

struct PretrainArgs {
  std::string config, data, out;
  std::optional<int> synthetic, steps, batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  ModelFlags model;
  MaskFlags mask;
};

int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  fdmim::PretrainConfig cfg;
  cfg.model = a.model.base();
  if (!a.config.empty()) cfg = load_json(a.config).get<fdmim::PretrainConfig>();
  a.model.apply(cfg.model);
  a.mask.apply(cfg.mask);
  if (a.steps) cfg.steps = *a.steps;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.lr) cfg.lr = *a.lr;
  if (a.seed) cfg.seed = *a.seed;
  if (a.data.empty() && !a.synthetic) throw ConfigError("pretrain field 'data': required (or --synthetic N)");
  const fs::path dir = require(a.out, "pretrain", "out");
  cfg.validate();

  json resolved = cfg;
  resolved["data"] = a.data.empty() ? json("synthetic:" + std::to_string(*a.synthetic)) : json(a.data);
  out << resolved.dump(2) << '\n';

  const auto ds = a.data.empty() ? data::synth_corpus(*a.synthetic, cfg.model.img_size, cfg.seed)
                                 : data::load_image_dir(a.data, data::Layout::Flat);
  const auto res = fdmim::pretrain_loop(cfg, ds, [&](int step, double loss) {
    if ((step + 1) % 10 == 0 || step == 0) out << "step " << step + 1 << "/" << cfg.steps << " loss " << loss << '\n';
  });
  data::save_checkpoint(dir / "checkpoint.fifb", res.params, fdmim::checkpoint_config(cfg));
  write_text(dir / "loss.csv", fdmim::loss_csv(res.losses));
  write_run_json(dir, "pretrain", resolved, {{"checkpoint", "checkpoint.fifb"}, {"loss_trace", "loss.csv"}});
  out << "wrote " << (dir / "checkpoint.fifb").string() << " and " << (dir / "loss.csv").string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train-cls

struct TrainArgs {
  std::string config, data, val, init, out;
  std::optional<int> classes, synthetic_per_class, epochs, batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  ModelFlags model;
};

int cmd_train_cls(const TrainArgs& a, std::ostream& out) {
  finetune::ClassifyConfig cfg;
  cfg.model = a.model.base();
  std::optional<int> config_classes;
  if (!a.config.empty()) {
    const auto j = load_json(a.config);
    cfg = j.get<finetune::ClassifyConfig>();
    if (j.contains("model") && j["model"].contains("num_classes")) config_classes = cfg.model.num_classes;
  }
  a.model.apply(cfg.model);
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.lr) cfg.lr = *a.lr;
  if (a.seed) cfg.seed = *a.seed;
  if (a.data.empty() && !a.synthetic_per_class) throw ConfigError("train-cls field 'data': required (or --synthetic-per-class N)");
  const fs::path dir = require(a.out, "train-cls", "out");

  data::Dataset train;
  if (a.data.empty()) {
    const int k = a.classes.value_or(config_classes.value_or(3));
    if (k < 1) throw ConfigError("train-cls field 'classes': must be positive");
    train = data::synth_classes(*a.synthetic_per_class, k, cfg.model.img_size, cfg.seed);
  } else {
    train = data::load_image_dir(a.data, data::Layout::ClassPerSubdir);
  }
  const int found = static_cast<int>(train.class_names.size());
  const int wanted = a.classes.value_or(config_classes.value_or(found));
  if (wanted != found) {
    throw ConfigError("train-cls field 'classes': " + std::to_string(wanted) + " requested but the data has " +
                      std::to_string(found) + " class folders");
  }
  cfg.model.num_classes = found;
  cfg.validate();

  std::optional<data::Dataset> val;
  if (!a.val.empty()) {
    val = data::load_image_dir(a.val, data::Layout::ClassPerSubdir);
    if (val->class_names != train.class_names) {
      throw ConfigError("train-cls field 'val': class folders differ from the training data");
    }
  }
  std::optional<model::ParamStore<float>> init;
  if (!a.init.empty()) init = finetune::backbone_from(data::load_checkpoint(a.init), cfg.model);

  json resolved = cfg;
  resolved["data"] = a.data.empty() ? json("synthetic:" + std::to_string(*a.synthetic_per_class)) : json(a.data);
  resolved["val"] = a.val;
  resolved["init"] = a.init;
  resolved["class_names"] = train.class_names;
  out << resolved.dump(2) << '\n';

  std::ostringstream log;
  log << "epoch,loss,train_acc,val_acc\n";
  const auto res = finetune::train_classifier(cfg, train, val ? &*val : nullptr, init ? &*init : nullptr,
                                              [&](const finetune::EpochStats& st) {
                                                char buf[128];
                                                std::snprintf(buf, sizeof buf, "%d,%.9g,%.6f,%.6f\n", st.epoch, st.loss,
                                                              st.train_acc, st.val_acc);
                                                log << buf;
                                                out << "epoch " << buf;
                                              });
  data::save_checkpoint(dir / "classifier.fifb", res.params, finetune::checkpoint_config(cfg));
  write_text(dir / "accuracy.csv", log.str());
  write_run_json(dir, "train-cls", resolved, {{"checkpoint", "classifier.fifb"}, {"accuracy_log", "accuracy.csv"}});
  return kOk;
}

// ---------------------------------------------------------------------------
// mask-dump

struct MaskDumpArgs {
  std::string image, out, config;
  std::uint64_t seed = 0;
  MaskFlags mask;
};

// Log-magnitude spectrum of each selected patch (channel mean), scaled to
// [0, 1] per patch and placed at the patch's position.
Tensor<float> spectrum_mosaic(const Tensor<float>& image, const fdmim::MaskPlan& plan) {
  const int s = plan.mask_patch_size, h = plan.height, w = plan.width;
  Tensor<float> mosaic(Shape{1, h, w});
  freq::Patch patch(Shape{s, s});
  for (const auto& pc : plan.selected) {
    std::vector<double> acc(static_cast<std::size_t>(s) * s, 0.0);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
          patch[y * s + x] = image[(static_cast<std::int64_t>(c) * h + pc.row * s + y) * w + pc.col * s + x];
      const auto mag = freq::log_magnitude(freq::centered(freq::dft2(patch)));
      for (std::int64_t k = 0; k < mag.size(); ++k) acc[static_cast<std::size_t>(k)] += mag[k] / 3.0;
    }
    const double peak = *std::max_element(acc.begin(), acc.end());
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        mosaic[static_cast<std::int64_t>(pc.row * s + y) * w + pc.col * s + x] =
            peak > 0 ? static_cast<float>(acc[static_cast<std::size_t>(y) * s + x] / peak) : 0.0f;
  }
  return mosaic;
}

int cmd_mask_dump(const MaskDumpArgs& a, std::ostream& out) {
  fdmim::MaskParams params;
  if (!a.config.empty()) params = load_json(a.config).get<fdmim::MaskParams>();
  a.mask.apply(params);
  params.validate();
  const fs::path image_path = require(a.image, "mask-dump", "image");
  const fs::path dir = require(a.out, "mask-dump", "out");

  json resolved = params;
  resolved["image"] = a.image;
  resolved["seed"] = a.seed;
  out << resolved.dump(2) << '\n';

  const auto image = data::load_image(image_path);
  const auto plan = fdmim::plan_mask(image, params, a.seed, image_path.filename().string());
  const auto corrupted = fdmim::apply_mask(image, plan, {0.0f, 0.0f, 0.0f});
  data::save_png(dir / "corrupted.png", corrupted);
  data::save_raw(dir / "corrupted.rawf", corrupted);
  data::save_png(dir / "mask.png", fdmim::mask_tensor(plan));
  data::save_png(dir / "spectrum.png", spectrum_mosaic(image, plan));
  write_text(dir / "plan.json", fdmim::to_json(plan).dump(2) + "\n");
  write_run_json(dir, "mask-dump", resolved,
                 {{"corrupted", "corrupted.png"}, {"corrupted_raw", "corrupted.rawf"}, {"mask", "mask.png"},
                  {"spectrum", "spectrum.png"}, {"plan", "plan.json"}});
  int high = 0;
  for (const auto& [pc, cls] : plan.class_per_patch) high += cls.band == freq::Band::High;
  out << plan.selected.size() << " of " << plan.total_patches() << " patches selected (" << high << " high, "
      << plan.selected.size() - high << " low), " << plan.masked_count() << " pixels masked\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
  std::string config, out;
  std::optional<int> img_size, classes;
  bool baseline = false, as_json = false, verify = false;
  ModelFlags model;
};

std::string delta_line(const model::ModelConfig& c, model::HfConvMode mode, bool verify) {
  auto m = c;
  m.hf_conv_mode = mode;
  const auto d = analyzer::fifb_delta(m);
  char buf[200];
  std::snprintf(buf, sizeof buf, "FIFB parameter delta (%s): %+lld (%+.4fM)", model::to_string(mode),
                static_cast<long long>(d.delta()), d.delta() / 1e6);
  std::string line = buf;
  if (verify) {
    auto base = m, hybrid = m;
    base.hf_branch_enabled = false;
    hybrid.hf_branch_enabled = true;
    const auto vb = analyzer::verify_against_model(base);
    const auto vh = analyzer::verify_against_model(hybrid);
    const bool same = vb.ok() && vh.ok() && vh.actual_total - vb.actual_total == d.delta();
    line += same ? ", instantiated model agrees" : ", instantiated model DISAGREES";
  }
  return line;
}

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  model::ModelConfig cfg = a.model.base();
  if (!a.config.empty()) {
    const auto j = load_json(a.config);
    cfg = (j.contains("model") ? j.at("model") : j).get<model::ModelConfig>();
  }
  a.model.apply(cfg);
  if (a.img_size) cfg.img_size = *a.img_size;
  if (a.classes) cfg.num_classes = *a.classes;
  if (a.baseline) cfg.hf_branch_enabled = false;
  cfg.validate();

  const auto report = analyzer::analyze(cfg);
  auto j = analyzer::to_json(report);
  j["model"] = cfg;
  std::vector<std::string> notes;
  for (auto mode : {model::HfConvMode::Depthwise, model::HfConvMode::Full}) notes.push_back(delta_line(cfg, mode, a.verify));
  char buf[200];
  std::snprintf(buf, sizeof buf, "reported FIFB delta %+.3fM is NOT reproduced by either conv mode",
                analyzer::kReportedFifbDelta / 1e6);
  notes.emplace_back(buf);
  j["fifb_delta"] = notes;

  if (a.as_json) out << j.dump(2) << '\n';
  else {
    out << "model: " << json(cfg).dump() << '\n' << analyzer::to_table(report);
    for (const auto& n : notes) out << n << '\n';
  }
  if (!a.out.empty()) {
    const fs::path dir = a.out;
    write_text(dir / "report.json", j.dump(2) + "\n");
    write_text(dir / "report.txt", analyzer::to_table(report));
    write_run_json(dir, "analyze", json{{"model", cfg}, {"baseline", a.baseline}},
                   {{"report", "report.json"}, {"table", "report.txt"}});
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  std::string size = "small";
  std::uint64_t seed = 0;
  std::string fault;
  bool no_model = false;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  gradcheck::SuiteOptions opt;
  opt.seed = a.seed;
  opt.include_model = !a.no_model;
  if (!a.fault.empty()) opt.fault = gradcheck::Fault{a.fault, 2.0};
  const auto rows = gradcheck::run_suite(opt);
  out << gradcheck::format_table(rows);
  for (const auto& r : rows)
    if (!r.passed) return kInternalError;
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hybrid frequency-aware vision backbone: pretraining, fine-tuning and analysis", "ringmo"};
  app.require_subcommand(1);

  PretrainArgs pa;
  auto* pre = app.add_subcommand("pretrain", "Frequency-domain masked image modeling pretraining");
  pre->add_option("--config", pa.config, "JSON config (flags override it)");
  pre->add_option("--data", pa.data, "Directory of training images");
  pre->add_option("--synthetic", pa.synthetic, "Use N generated images instead of --data");
  pre->add_option("--out", pa.out, "Output directory");
  pre->add_option("--steps", pa.steps, "Optimizer steps");
  pre->add_option("--batch-size", pa.batch_size, "Images per step");
  pre->add_option("--lr", pa.lr, "Adam learning rate");
  pre->add_option("--seed", pa.seed, "Random seed");
  pa.model.add(pre);
  pa.mask.add(pre);

  TrainArgs ta;
  auto* tr = app.add_subcommand("train-cls", "Classification fine-tuning");
  tr->add_option("--config", ta.config, "JSON config (flags override it)");
  tr->add_option("--data", ta.data, "Directory with one subdirectory per class");
  tr->add_option("--val", ta.val, "Optional validation directory, same layout");
  tr->add_option("--synthetic-per-class", ta.synthetic_per_class, "Use N generated images per class");
  tr->add_option("--classes", ta.classes, "Number of classes");
  tr->add_option("--init", ta.init, "Pretraining checkpoint to initialize the backbone");
  tr->add_option("--out", ta.out, "Output directory");
  tr->add_option("--epochs", ta.epochs, "Training epochs");
  tr->add_option("--batch-size", ta.batch_size, "Images per step");
  tr->add_option("--lr", ta.lr, "Adam learning rate");
  tr->add_option("--seed", ta.seed, "Random seed");
  ta.model.add(tr);

  MaskDumpArgs ma;
  auto* md = app.add_subcommand("mask-dump", "Write the masked input, class map and spectra of one image");
  md->add_option("--image", ma.image, "Input image (.png or .rawf)");
  md->add_option("--out", ma.out, "Output directory");
  md->add_option("--config", ma.config, "JSON mask parameters (flags override them)");
  md->add_option("--seed", ma.seed, "Random seed");
  ma.mask.add(md);

  AnalyzeArgs aa;
  auto* an = app.add_subcommand("analyze", "Per-layer parameter and FLOP report");
  an->add_option("--config", aa.config, "JSON model config");
  an->add_option("--classes", aa.classes, "Classification head width");
  an->add_flag("--baseline", aa.baseline, "Disable the high-frequency branch");
  an->add_flag("--json", aa.as_json, "Print JSON instead of a table");
  an->add_flag("--verify", aa.verify, "Also instantiate the weights and compare counts");
  an->add_option("--out", aa.out, "Directory for report.json / report.txt");
  aa.model.add(an, false);
  an->add_option("--img-size", aa.img_size, "Input side length");

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every backward rule");
  gc->add_option("--size", ga.size, "Suite size")->check(CLI::IsMember({"small"}));
  gc->add_option("--seed", ga.seed, "Random seed");
  gc->add_option("--inject-fault", ga.fault, "Scale the named op's gradients by 2 (checker self-test)");
  gc->add_flag("--no-model", ga.no_model, "Skip the end-to-end model check");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*pre) return cmd_pretrain(pa, out);
    if (*tr) return cmd_train_cls(ta, out);
    if (*md) return cmd_mask_dump(ma, out);
    if (*an) return cmd_analyze(aa, out);
    if (*gc) return cmd_gradcheck(ga, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const data::CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kDataError;
  } catch (const data::DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const json::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternalError;
  }
  return kInternalError;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace ringmo::cli
