#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "ringmo/datakit.hpp"

using namespace ringmo;
using namespace ringmo::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int n = 0;
    path = fs::temp_directory_path() / ("ringmo_datakit_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

CheckpointErrorKind kind_of(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  FAIL("decode accepted corrupt bytes");
  return CheckpointErrorKind::Io;
}

model::ModelConfig small_model() {
  model::ModelConfig c;
  c.img_size = 32;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depths = {1, 1};
  c.num_heads = {1, 2};
  c.window_size = 4;
  c.num_classes = 2;
  return c;
}

}  // namespace

TEST_CASE("raw images round-trip exactly") {
  TempDir tmp;
  std::mt19937_64 rng(1);
  auto img = oracle::random_tensor<float>({3, 5, 7}, rng, 0, 1);
  save_raw(tmp.path / "a.rawf", img);
  CHECK(load_image(tmp.path / "a.rawf") == img);
}

TEST_CASE("png round-trips to 8-bit precision") {
  TempDir tmp;
  std::mt19937_64 rng(2);
  auto img = oracle::random_tensor<float>({3, 6, 4}, rng, 0, 1);
  save_png(tmp.path / "a.png", img);
  auto back = load_image(tmp.path / "a.png");
  CHECK(back.shape() == img.shape());
  CHECK(oracle::max_abs_diff(back, img) <= 0.5 / 255 + 1e-6);
}

TEST_CASE("single-channel raw is replicated") {
  TempDir tmp;
  Tensor<float> g(Shape{1, 2, 2}, std::vector<float>{0, 0.25f, 0.5f, 1});
  save_raw(tmp.path / "g.rawf", g);
  auto back = load_image(tmp.path / "g.rawf");
  CHECK(back.shape() == Shape{3, 2, 2});
  CHECK(back.at({2, 1, 1}) == 1.0f);
}

TEST_CASE("bad image files raise DataError naming the path") {
  TempDir tmp;
  write_bytes(tmp.path / "junk.png", {1, 2, 3});
  write_bytes(tmp.path / "short.rawf", {'R', 'A', 'W', 'F', 3, 0});
  for (auto name : {"junk.png", "short.rawf", "missing.png"}) {
    try {
      load_image(tmp.path / name);
      FAIL("accepted " << name);
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(name) != std::string::npos);
    }
  }
  CHECK(is_supported_image("x.PNG") == is_supported_image("x.png"));
  CHECK_FALSE(is_supported_image("x.jpg"));
}

TEST_CASE("directory layouts") {
  TempDir tmp;
  auto ds = synth_classes(2, 3, 16, 5);
  write_dataset(tmp.path / "cls", ds, Layout::ClassPerSubdir);
  write_bytes(tmp.path / "cls" / "class_0" / "notes.txt", {'h', 'i'});
  auto back = load_image_dir(tmp.path / "cls", Layout::ClassPerSubdir);
  CHECK(back.class_names == std::vector<std::string>{"class_0", "class_1", "class_2"});
  REQUIRE(back.records.size() == 6u);
  // the scan groups by class; generation order may interleave
  std::stable_sort(ds.records.begin(), ds.records.end(), [](auto& a, auto& b) { return *a.label < *b.label; });
  for (std::size_t i = 0; i < back.records.size(); ++i) CHECK(back.records[i].label == ds.records[i].label);
  CHECK(oracle::max_abs_diff(back.records[3].pixels, ds.records[3].pixels) <= 0.5 / 255 + 1e-6);

  auto flat = synth_corpus(4, 16, 1);
  write_dataset(tmp.path / "flat", flat, Layout::Flat);
  auto fb = load_image_dir(tmp.path / "flat", Layout::Flat);
  CHECK(fb.records.size() == 4u);
  CHECK(fb.class_names.empty());
  CHECK_FALSE(fb.records[0].label.has_value());

  CHECK_THROWS_AS(load_image_dir(tmp.path / "absent", Layout::Flat), DataError);
}

TEST_CASE("extent check names the offending file") {
  Dataset ds;
  ds.records.push_back({"ok.png", Tensor<float>(Shape{3, 8, 8}), {}});
  ds.records.push_back({"wide.png", Tensor<float>(Shape{3, 8, 9}), {}});
  CHECK_NOTHROW(require_extents(Dataset{{ds.records[0]}, {}}, 8, 8));
  try {
    require_extents(ds, 8, 8);
    FAIL("no error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("wide.png") != std::string::npos);
  }
}

TEST_CASE("synthetic data is deterministic and labelled by band") {
  auto a = synth_corpus(8, 32, 3), b = synth_corpus(8, 32, 3);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(a.records[i].pixels == b.records[i].pixels);
    CHECK(a.records[i].label.has_value());
    for (auto v : a.records[i].pixels.vec()) CHECK((v >= 0.0f && v <= 1.0f));
  }
  CHECK(is_high_frequency(SynthKind::Checkerboard));
  CHECK_FALSE(is_high_frequency(SynthKind::Gradient));
  auto cls = synth_classes(3, 4, 16, 0);
  CHECK(cls.records.size() == 12u);
  CHECK(cls.class_names.size() == 4u);
}

TEST_CASE("crc32 matches the standard check value") {
  const std::string s = "123456789";
  CHECK(crc32(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()) == 0xCBF43926u);
}

TEST_CASE("checkpoint round trip is bit exact") {
  auto cfg = small_model();
  auto params = model::init_weights<float>(cfg, 4);
  nlohmann::json meta{{"kind", "classifier"}, {"model", cfg}};
  const auto bytes = encode_checkpoint(params, meta);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "FIFB");
  auto ck = decode_checkpoint(bytes);
  CHECK(ck.tensors == params);
  CHECK(ck.config == meta);
  CHECK(encode_checkpoint(ck.tensors, ck.config) == bytes);

  TempDir tmp;
  save_checkpoint(tmp.path / "c.fifb", params, meta);
  CHECK(load_checkpoint(tmp.path / "c.fifb").tensors == params);
}

TEST_CASE("checkpoint corruption is classified") {
  auto cfg = small_model();
  auto params = model::init_weights<float>(cfg, 4);
  const auto good = encode_checkpoint(params, {{"kind", "classifier"}, {"model", cfg}});

  auto flipped = good;
  flipped[good.size() / 2] ^= 0x10;
  CHECK(kind_of(flipped) == CheckpointErrorKind::CrcMismatch);

  auto truncated = std::vector<std::uint8_t>(good.begin(), good.end() - 9);
  CHECK(kind_of(truncated) == CheckpointErrorKind::CrcMismatch);
  CHECK(kind_of({'F', 'I'}) == CheckpointErrorKind::CrcMismatch);

  auto magic = good;
  magic[0] = 'X';
  CHECK(kind_of(magic) == CheckpointErrorKind::BadMagic);

  // bump the version and re-seal the CRC so only the version is wrong
  auto version = good;
  version[4] = 2;
  const auto c = crc32(version.data(), version.size() - 4);
  for (int i = 0; i < 4; ++i) version[version.size() - 4 + i] = static_cast<std::uint8_t>(c >> (8 * i));
  CHECK(kind_of(version) == CheckpointErrorKind::VersionMismatch);
}

TEST_CASE("loading checks tensor shapes against the embedded config") {
  TempDir tmp;
  auto cfg = small_model();
  auto params = model::init_weights<float>(cfg, 4);
  params["head.weight"] = Tensor<float>(Shape{16, 3});
  params.erase("norm.bias");
  params["stray"] = Tensor<float>(Shape{1});
  save_checkpoint(tmp.path / "bad.fifb", params, {{"kind", "classifier"}, {"model", cfg}});
  try {
    load_checkpoint(tmp.path / "bad.fifb");
    FAIL("no error");
  } catch (const CheckpointError& e) {
    CHECK(e.kind() == CheckpointErrorKind::ShapeMismatch);
    const std::string msg = e.what();
    CHECK(msg.find("head.weight") != std::string::npos);
    CHECK(msg.find("norm.bias") != std::string::npos);
    CHECK(msg.find("stray") != std::string::npos);
  }
  try {
    load_checkpoint(tmp.path / "nothing.fifb");
    FAIL("no error");
  } catch (const CheckpointError& e) {
    CHECK(e.kind() == CheckpointErrorKind::Io);
  }
}

TEST_CASE("normalization json") {
  Normalization n;
  n.mean = {0.1, 0.2, 0.3};
  nlohmann::json j = n;
  auto back = j.get<Normalization>();
  CHECK(back.mean == n.mean);
  CHECK(back.std == n.std);
}
