#include "ringmo/datakit.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

namespace ringmo::data {

namespace fs = std::filesystem;

void to_json(nlohmann::json& j, const Normalization& n) { j = nlohmann::json{{"mean", n.mean}, {"std", n.std}}; }

void from_json(const nlohmann::json& j, Normalization& n) {
  for (const auto& [key, value] : j.items()) {
    if (key == "mean") n.mean = value.get<std::array<double, 3>>();
    else if (key == "std") n.std = value.get<std::array<double, 3>>();
    else throw ConfigError("normalization field '" + key + "': unknown field");
  }
  for (double s : n.std)
    if (!(s > 0.0)) throw ConfigError("normalization field 'std': entries must be positive");
}

// ---------------------------------------------------------------------------
// little-endian byte helpers

namespace {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size, std::string context)
      : data_(data), size_(size), context_(std::move(context)) {}

  void need(std::size_t n) const {
    if (pos_ + n > size_) throw DataError(context_ + ": unexpected end of data");
  }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string context_;
};

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to '" + path.string() + "'");
}

std::string lower_ext(const fs::path& p) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

Tensor<float> load_png(const fs::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw DataError("cannot decode PNG '" + path.string() + "': " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("cannot decode PNG '" + path.string() + "': " + image.message);
  }
  const std::int64_t h = image.height, w = image.width;
  Tensor<float> t(Shape{3, h, w});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) t[(c * h + y) * w + x] = buf[static_cast<std::size_t>((y * w + x) * 3 + c)] / 255.0f;
  return t;
}

Tensor<float> load_raw(const fs::path& path) {
  const auto bytes = read_file(path);
  Reader r(bytes.data(), bytes.size(), "raw image '" + path.string() + "'");
  if (r.str(4) != "RAWF") throw DataError("raw image '" + path.string() + "': bad magic");
  const std::int64_t c = r.u32(), h = r.u32(), w = r.u32();
  if ((c != 1 && c != 3) || h < 1 || w < 1) throw DataError("raw image '" + path.string() + "': bad header");
  Tensor<float> t(Shape{3, h, w});
  std::vector<float> plane(static_cast<std::size_t>(c * h * w));
  for (auto& v : plane) v = r.f32();
  for (int ch = 0; ch < 3; ++ch) {
    const std::int64_t src = c == 1 ? 0 : ch;
    std::copy_n(plane.begin() + src * h * w, h * w, t.data().begin() + ch * h * w);
  }
  for (auto v : t.vec()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError("raw image '" + path.string() + "': pixel outside [0,1]");
  }
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// images

bool is_supported_image(const fs::path& path) {
  const auto e = lower_ext(path);
  return e == ".png" || e == ".rawf";
}

Tensor<float> load_image(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw DataError("cannot read '" + path.string() + "': not a file");
  const auto e = lower_ext(path);
  if (e == ".png") return load_png(path);
  if (e == ".rawf") return load_raw(path);
  throw DataError("unsupported image format '" + path.string() + "'");
}

void save_png(const fs::path& path, const Tensor<float>& pixels) {
  if (pixels.rank() != 3 || (pixels.dim(0) != 3 && pixels.dim(0) != 1)) {
    throw ShapeError("save_png: expected [3,H,W] or [1,H,W], got " + shape_str(pixels.shape()));
  }
  const std::int64_t c = pixels.dim(0), h = pixels.dim(1), w = pixels.dim(2);
  std::vector<png_byte> buf(static_cast<std::size_t>(h * w * 3));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const float v = std::clamp(pixels[((c == 1 ? 0 : ch) * h + y) * w + x], 0.0f, 1.0f);
        buf[static_cast<std::size_t>((y * w + x) * 3 + ch)] = static_cast<png_byte>(std::lround(v * 255.0f));
      }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw DataError("cannot write PNG '" + path.string() + "': " + image.message);
  }
}

void save_raw(const fs::path& path, const Tensor<float>& pixels) {
  if (pixels.rank() != 3) throw ShapeError("save_raw: expected [C,H,W], got " + shape_str(pixels.shape()));
  std::vector<std::uint8_t> out{'R', 'A', 'W', 'F'};
  for (int a = 0; a < 3; ++a) put_u32(out, static_cast<std::uint32_t>(pixels.dim(a)));
  for (auto v : pixels.vec()) put_f32(out, v);
  write_file(path, out);
}

Dataset load_image_dir(const fs::path& root, Layout layout) {
  if (!fs::is_directory(root)) throw DataError("dataset root '" + root.string() + "' is not a directory");
  Dataset ds;
  auto sorted_entries = [](const fs::path& dir) {
    std::vector<fs::path> entries;
    for (const auto& e : fs::directory_iterator(dir)) entries.push_back(e.path());
    std::sort(entries.begin(), entries.end());
    return entries;
  };
  auto load_files = [&](const fs::path& dir, std::optional<int> label) {
    for (const auto& p : sorted_entries(dir)) {
      if (fs::is_directory(p)) continue;
      if (!is_supported_image(p)) {
        std::cerr << "warning: skipping unsupported file " << p.string() << '\n';
        continue;
      }
      ds.records.push_back(ImageRecord{p.string(), load_image(p), label});
    }
  };
  if (layout == Layout::Flat) {
    load_files(root, std::nullopt);
  } else {
    for (const auto& p : sorted_entries(root)) {
      if (!fs::is_directory(p)) {
        std::cerr << "warning: skipping non-directory " << p.string() << '\n';
        continue;
      }
      const int label = static_cast<int>(ds.class_names.size());
      ds.class_names.push_back(p.filename().string());
      load_files(p, label);
    }
  }
  if (ds.records.empty()) throw DataError("dataset '" + root.string() + "' contains no images");
  return ds;
}

void require_extents(const Dataset& ds, int height, int width) {
  for (const auto& r : ds.records) {
    if (r.pixels.dim(1) != height || r.pixels.dim(2) != width) {
      throw DataError("image '" + r.path + "' is " + std::to_string(r.pixels.dim(1)) + "x" +
                      std::to_string(r.pixels.dim(2)) + ", expected " + std::to_string(height) + "x" +
                      std::to_string(width));
    }
  }
}

// ---------------------------------------------------------------------------
// synthetic data

bool is_high_frequency(SynthKind kind) { return kind == SynthKind::Stripes || kind == SynthKind::Checkerboard; }

namespace {

// Single-channel pattern in [0, 1].
std::vector<double> pattern(SynthKind kind, int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(size) * size);
  auto at = [&](int y, int x) -> double& { return v[static_cast<std::size_t>(y) * size + x]; };
  switch (kind) {
    case SynthKind::Gradient: {
      const double angle = u(rng) * 2.0 * std::numbers::pi;
      const double dx = std::cos(angle), dy = std::sin(angle);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) at(y, x) = 0.5 + 0.5 * (dx * (x - size / 2.0) + dy * (y - size / 2.0)) / size;
      break;
    }
    case SynthKind::Blobs: {
      const int n = 2 + static_cast<int>(u(rng) * 3);
      for (int b = 0; b < n; ++b) {
        const double cy = u(rng) * size, cx = u(rng) * size;
        const double sigma = size * (0.25 + 0.15 * u(rng));
        const double amp = 0.3 + 0.4 * u(rng);
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) {
            const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            at(y, x) += amp * std::exp(-r2 / (2 * sigma * sigma));
          }
      }
      for (auto& p : v) p = std::min(p, 1.0);
      break;
    }
    case SynthKind::Stripes: {
      const int period = 2 + static_cast<int>(u(rng) * 2);  // 2 or 3 pixels
      const bool vertical = u(rng) < 0.5;
      const int phase = static_cast<int>(u(rng) * period);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) at(y, x) = ((vertical ? x : y) + phase) % period == 0 ? 1.0 : 0.0;
      break;
    }
    case SynthKind::Checkerboard: {
      const int phase = u(rng) < 0.5 ? 0 : 1;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) at(y, x) = (x + y + phase) % 2 == 0 ? 1.0 : 0.0;
      break;
    }
  }
  return v;
}

Tensor<float> colourize(const std::vector<double>& p, int size, const std::array<double, 3>& lo,
                        const std::array<double, 3>& hi) {
  Tensor<float> t(Shape{3, size, size});
  const std::int64_t plane = static_cast<std::int64_t>(size) * size;
  for (int c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < plane; ++i)
      t[c * plane + i] = static_cast<float>(std::clamp(lo[c] + (hi[c] - lo[c]) * p[i], 0.0, 1.0));
  return t;
}

}  // namespace

Tensor<float> synth_image(SynthKind kind, int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::array<double, 3> lo{}, hi{};
  for (int c = 0; c < 3; ++c) {
    lo[c] = 0.1 * u(rng);
    hi[c] = 0.6 + 0.4 * u(rng);
  }
  return colourize(pattern(kind, size, rng), size, lo, hi);
}

Dataset synth_corpus(int n, int size, std::uint64_t seed) {
  if (n < 1 || size < 1) throw ConfigError("synth_corpus: n and size must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Dataset ds;
  for (int i = 0; i < n; ++i) {
    const auto kind = static_cast<SynthKind>(pick(rng));
    const bool high = is_high_frequency(kind);
    // faint companion from the other band
    const auto other = high ? (u(rng) < 0.5 ? SynthKind::Gradient : SynthKind::Blobs)
                            : (u(rng) < 0.5 ? SynthKind::Stripes : SynthKind::Checkerboard);
    auto main = synth_image(kind, size, rng);
    auto faint = synth_image(other, size, rng);
    const float w = static_cast<float>(0.1 + 0.1 * u(rng));
    for (std::int64_t k = 0; k < main.size(); ++k) main[k] = std::clamp((1 - w) * main[k] + w * faint[k], 0.0f, 1.0f);
    ds.records.push_back(ImageRecord{"synthetic/" + std::to_string(i), std::move(main), high ? 1 : 0});
  }
  return ds;
}

Dataset synth_classes(int per_class, int num_classes, int size, std::uint64_t seed) {
  if (per_class < 1 || num_classes < 1 || size < 1) throw ConfigError("synth_classes: arguments must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  static constexpr SynthKind kKinds[] = {SynthKind::Gradient, SynthKind::Checkerboard, SynthKind::Blobs,
                                         SynthKind::Stripes};
  Dataset ds;
  for (int k = 0; k < num_classes; ++k) ds.class_names.push_back("class_" + std::to_string(k));
  for (int i = 0; i < per_class; ++i)
    for (int k = 0; k < num_classes; ++k) {
      // class k: dominant colour channel k % 3 and its own texture
      std::array<double, 3> lo{}, hi{};
      for (int c = 0; c < 3; ++c) {
        lo[c] = 0.05 * u(rng);
        hi[c] = c == k % 3 ? 0.8 + 0.2 * u(rng) : 0.15 + 0.1 * u(rng);
      }
      auto img = colourize(pattern(kKinds[k % 4], size, rng), size, lo, hi);
      ds.records.push_back(ImageRecord{"synthetic/class_" + std::to_string(k) + "/" + std::to_string(i),
                                       std::move(img), k});
    }
  return ds;
}

void write_dataset(const fs::path& root, const Dataset& ds, Layout layout) {
  fs::create_directories(root);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    char name[32];
    std::snprintf(name, sizeof name, "img_%05zu.png", i);
    fs::path dir = root;
    if (layout == Layout::ClassPerSubdir) {
      if (!r.label) throw DataError("write_dataset: record '" + r.path + "' has no label");
      dir /= ds.class_names.empty() ? "class_" + std::to_string(*r.label) : ds.class_names[*r.label];
    }
    save_png(dir / name, r.pixels);
  }
}

// ---------------------------------------------------------------------------
// checkpoints

std::uint32_t crc32(const std::uint8_t* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_checkpoint(const model::ParamStore<float>& tensors, const nlohmann::json& config) {
  std::vector<std::uint8_t> out{'F', 'I', 'F', 'B'};
  put_u32(out, kCheckpointVersion);
  const std::string cfg = config.dump();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u8(out, 0);  // f32
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_u64(out, static_cast<std::uint64_t>(e));
    for (auto v : t.vec()) put_f32(out, v);
  }
  put_u32(out, crc32(out.data(), out.size()));
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  using K = CheckpointErrorKind;
  if (bytes.size() < 12) throw CheckpointError(K::CrcMismatch, "checkpoint truncated: too short to hold a CRC");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  if (std::memcmp(bytes.data(), "FIFB", 4) != 0) throw CheckpointError(K::BadMagic, "not a checkpoint: bad magic");
  if (crc32(bytes.data(), body) != stored) {
    throw CheckpointError(K::CrcMismatch, "checkpoint CRC mismatch (file corrupt or truncated)");
  }
  try {
    Reader r(bytes.data(), body, "checkpoint");
    r.str(4);
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
      throw CheckpointError(K::VersionMismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                                    std::to_string(kCheckpointVersion));
    }
    Checkpoint ck;
    ck.config = nlohmann::json::parse(r.str(r.u32()));
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      auto name = r.str(r.u32());
      const auto dtype = r.u8();
      if (dtype != 0) throw CheckpointError(K::Malformed, "tensor '" + name + "': unknown dtype tag");
      const auto rank = r.u32();
      Shape shape(rank);
      for (auto& e : shape) e = static_cast<std::int64_t>(r.u64());
      for (auto e : shape)
        if (e < 1) throw CheckpointError(K::Malformed, "tensor '" + name + "': non-positive extent");
      std::vector<float> data(static_cast<std::size_t>(numel(shape)));
      r.need(data.size() * 4);
      for (auto& v : data) v = r.f32();
      if (!ck.tensors.emplace(name, Tensor<float>(std::move(shape), std::move(data))).second) {
        throw CheckpointError(K::Malformed, "duplicate tensor '" + name + "'");
      }
    }
    if (r.pos() != body) throw CheckpointError(K::Malformed, "trailing bytes after last tensor");
    return ck;
  } catch (const DataError& e) {
    throw CheckpointError(K::Malformed, e.what());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(K::Malformed, std::string("checkpoint config is not valid JSON: ") + e.what());
  }
}

void save_checkpoint(const fs::path& path, const model::ParamStore<float>& tensors, const nlohmann::json& config) {
  try {
    write_file(path, encode_checkpoint(tensors, config));
  } catch (const DataError& e) {
    throw CheckpointError(CheckpointErrorKind::Io, e.what());
  }
}

model::ParamShapes expected_shapes(const nlohmann::json& config) {
  if (!config.contains("kind") || !config.contains("model")) {
    throw CheckpointError(CheckpointErrorKind::Malformed, "checkpoint config lacks 'kind' or 'model'");
  }
  const auto mc = config.at("model").get<model::ModelConfig>();
  const auto kind = config.at("kind").get<std::string>();
  if (kind == "classifier") return model::param_shapes(mc, true);
  if (kind == "pretrain") return model::pretrain_param_shapes(mc);
  throw CheckpointError(CheckpointErrorKind::Malformed, "unknown checkpoint kind '" + kind + "'");
}

void check_shapes(const model::ParamShapes& expected, const model::ParamStore<float>& tensors,
                  const std::string& context) {
  std::ostringstream diff;
  int problems = 0;
  std::set<std::string> names;
  for (const auto& [name, shape] : expected) {
    names.insert(name);
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      diff << "\n  missing   " << name << " " << shape_str(shape);
      ++problems;
    } else if (it->second.shape() != shape) {
      diff << "\n  shape     " << name << " expected " << shape_str(shape) << " got " << shape_str(it->second.shape());
      ++problems;
    }
  }
  for (const auto& [name, t] : tensors) {
    if (!names.count(name)) {
      diff << "\n  unexpected " << name << " " << shape_str(t.shape());
      ++problems;
    }
  }
  if (problems) {
    throw CheckpointError(CheckpointErrorKind::ShapeMismatch,
                          context + ": " + std::to_string(problems) + " tensor(s) disagree:" + diff.str());
  }
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const DataError& e) {
    throw CheckpointError(CheckpointErrorKind::Io, e.what());
  }
  Checkpoint ck;
  try {
    ck = decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.kind(), path.string() + ": " + e.what());
  }
  model::ParamShapes shapes;
  try {
    shapes = expected_shapes(ck.config);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.kind(), path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrorKind::Malformed, path.string() + ": checkpoint config: " + e.what());
  }
  check_shapes(shapes, ck.tensors, "checkpoint '" + path.string() + "' vs its embedded config");
  return ck;
}

}  // namespace ringmo::data
