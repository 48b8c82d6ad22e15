#include "ringmo/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "ringmo/fdmim.hpp"
#include "ringmo/model.hpp"
#include "ringmo/ops.hpp"

namespace ringmo::gradcheck {

namespace {

template <typename T>
using Eval = std::function<double(const std::vector<Tensor<T>>&)>;
template <typename T>
using Grads = std::function<std::vector<Tensor<T>>(const std::vector<Tensor<T>>&)>;

template <typename T>
double compare(const std::vector<Tensor<T>>& inputs, const Eval<T>& eval, const Grads<T>& grads,
               const CheckOptions& opt) {
  std::mt19937_64 rng(opt.seed ^ 0xfdull);
  const auto analytic = grads(inputs);
  const double h = Tolerance<T>::step;
  double diff2 = 0, a2 = 0, n2 = 0;
  auto work = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::int64_t> coords(static_cast<std::size_t>(inputs[i].size()));
    std::iota(coords.begin(), coords.end(), 0);
    if (static_cast<int>(coords.size()) > opt.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(opt.max_coords));
    }
    for (auto k : coords) {
      const T orig = work[i][k];
      work[i][k] = static_cast<T>(orig + h);
      const double up = eval(work);
      work[i][k] = static_cast<T>(orig - h);
      const double down = eval(work);
      work[i][k] = orig;
      // divide by the step actually taken after rounding to T
      const double taken = static_cast<double>(static_cast<T>(orig + h)) - static_cast<double>(static_cast<T>(orig - h));
      const double num = (up - down) / taken;
      const double an = analytic[i][k];
      diff2 += (an - num) * (an - num);
      a2 += an * an;
      n2 += num * num;
    }
  }
  const double denom = std::sqrt(std::max(a2, n2));
  return denom < 1e-300 ? 0.0 : std::sqrt(diff2) / denom;
}

template <typename T>
Tensor<T> randn(Shape shape, std::mt19937_64& rng, double std = 1.0) {
  std::normal_distribution<double> d(0.0, std);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(d(rng));
  return t;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

}  // namespace

template <typename T>
double relative_error(const Builder<T>& build, const std::vector<Tensor<T>>& inputs, const CheckOptions& opt) {
  std::vector<Var<T>> constants(inputs.begin(), inputs.end());
  const auto probe = build(constants).value();
  std::mt19937_64 rng(opt.seed);
  const auto proj = randn<T>(probe.shape(), rng);

  Eval<T> eval = [&](const std::vector<Tensor<T>>& xs) {
    std::vector<Var<T>> vs(xs.begin(), xs.end());
    return dot(build(vs).value(), proj);
  };
  Grads<T> grads = [&](const std::vector<Tensor<T>>& xs) {
    Tape<T> tape;
    if (opt.fault) tape.inject_fault(opt.fault->op, static_cast<T>(opt.fault->scale));
    std::vector<Var<T>> leaves;
    for (const auto& x : xs) leaves.push_back(tape.leaf(x));
    tape.backward(ops::sum(ops::mul(build(leaves), Var<T>(proj))));
    std::vector<Tensor<T>> out;
    for (const auto& l : leaves) out.push_back(tape.grad(l));
    return out;
  };
  return compare<T>(inputs, eval, grads, opt);
}

template double relative_error(const Builder<float>&, const std::vector<Tensor<float>>&, const CheckOptions&);
template double relative_error(const Builder<double>&, const std::vector<Tensor<double>>&, const CheckOptions&);

namespace {

template <typename T>
struct Case {
  std::string name;
  Builder<T> build;
  std::function<std::vector<Tensor<T>>(std::mt19937_64&)> make;
};

template <typename T>
Tensor<T> away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.5, 1.5);
  std::bernoulli_distribution sign(0.5);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(sign(rng) ? u(rng) : -u(rng));
  return t;
}

// Distinct values spaced 0.1 apart so no perturbation changes an argmax.
template <typename T>
Tensor<T> distinct(Shape shape, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::vector<int> perm(static_cast<std::size_t>(t.size()));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(0.1 * perm[static_cast<std::size_t>(i)] - 1.0);
  return t;
}

template <typename T>
std::vector<Case<T>> op_cases() {
  using ops::Conv2dParams;
  using ops::Pool2dParams;
  using V = std::vector<Var<T>>;
  using In = std::vector<Tensor<T>>;
  auto rn = [](std::vector<Shape> shapes) {
    return [shapes](std::mt19937_64& r) {
      In out;
      for (const auto& s : shapes) out.push_back(randn<T>(s, r));
      return out;
    };
  };
  std::vector<Case<T>> c;
  c.push_back({"add", [](const V& v) { return ops::add(v[0], v[1]); }, rn({{2, 3, 4}, {3, 4}})});
  c.push_back({"sub", [](const V& v) { return ops::sub(v[0], v[1]); }, rn({{3, 4}, {2, 3, 4}})});
  c.push_back({"mul", [](const V& v) { return ops::mul(v[0], v[1]); }, rn({{2, 3, 4}, {4}})});
  c.push_back({"scale", [](const V& v) { return ops::scale(v[0], T(-1.7)); }, rn({{3, 5}})});
  c.push_back({"add_scalar", [](const V& v) { return ops::mul(ops::add_scalar(v[0], T(0.3)), v[0]); }, rn({{3, 5}})});
  c.push_back({"abs", [](const V& v) { return ops::abs(v[0]); },
               [](std::mt19937_64& r) { return In{away_from_zero<T>({4, 5}, r)}; }});
  c.push_back({"gelu", [](const V& v) { return ops::gelu(v[0]); }, rn({{4, 6}})});
  c.push_back({"matmul", [](const V& v) { return ops::matmul(v[0], v[1]); }, rn({{2, 3, 4}, {4, 5}})});
  c.push_back({"matmul_batched", [](const V& v) { return ops::matmul(v[0], v[1]); }, rn({{2, 3, 4}, {2, 4, 2}})});
  c.push_back({"linear", [](const V& v) { return ops::linear(v[0], v[1], std::optional<Var<T>>(v[2])); },
               rn({{2, 3, 4}, {4, 5}, {5}})});
  c.push_back({"reshape", [](const V& v) { return ops::mul(ops::reshape(v[0], {4, 6}), v[1]); },
               rn({{2, 3, 4}, {4, 6}})});
  c.push_back({"permute", [](const V& v) { return ops::permute(v[0], {2, 0, 1}); }, rn({{2, 3, 4}})});
  c.push_back({"transpose", [](const V& v) { return ops::transpose(v[0], 0, 2); }, rn({{2, 3, 4}})});
  c.push_back({"concat", [](const V& v) { return ops::concat(V{v[0], v[1], v[0]}, 1); }, rn({{2, 3, 4}, {2, 1, 4}})});
  c.push_back({"split", [](const V& v) {
                 auto parts = ops::split(v[0], 2, {1, 3});
                 return ops::mul(parts[1], parts[1]);
               },
               rn({{2, 3, 4}})});
  c.push_back({"roll", [](const V& v) { return ops::roll(v[0], {-1, 2}, {1, 2}); }, rn({{2, 4, 5}})});
  c.push_back({"index_select", [](const V& v) { return ops::index_select(v[0], {2, 0, 2, 1, 2}); }, rn({{3, 4}})});
  c.push_back({"softmax", [](const V& v) { return ops::softmax(v[0], -1); }, rn({{3, 5}})});
  c.push_back({"softmax_axis0", [](const V& v) { return ops::softmax(v[0], 0); }, rn({{3, 5}})});
  c.push_back({"layer_norm", [](const V& v) { return ops::layer_norm(v[0], v[1], v[2], T(1e-5)); },
               rn({{3, 6}, {6}, {6}})});
  c.push_back({"conv2d", [](const V& v) {
                 return ops::conv2d(v[0], v[1], std::optional<Var<T>>(v[2]), Conv2dParams{.stride = 2, .padding = 1, .groups = 2});
               },
               rn({{2, 4, 5, 5}, {6, 2, 3, 3}, {6}})});
  c.push_back({"conv2d_depthwise", [](const V& v) {
                 return ops::conv2d(v[0], v[1], std::optional<Var<T>>(), Conv2dParams{.stride = 1, .padding = 1, .groups = 3});
               },
               rn({{1, 3, 4, 4}, {3, 1, 3, 3}})});
  c.push_back({"maxpool2d", [](const V& v) { return ops::maxpool2d(v[0], Pool2dParams{.kernel = 3, .stride = 1, .padding = 1}); },
               [](std::mt19937_64& r) { return In{distinct<T>({2, 2, 4, 4}, r)}; }});
  c.push_back({"maxpool2d_strided", [](const V& v) { return ops::maxpool2d(v[0], Pool2dParams{.kernel = 2, .stride = 2, .padding = 0}); },
               [](std::mt19937_64& r) { return In{distinct<T>({1, 2, 4, 6}, r)}; }});
  c.push_back({"sum", [](const V& v) { return ops::sum(ops::mul(v[0], v[0])); }, rn({{3, 4}})});
  c.push_back({"mean", [](const V& v) { return ops::mean(v[0], 1); }, rn({{2, 3, 4}})});
  c.push_back({"cross_entropy", [](const V& v) { return ops::cross_entropy(v[0], {2, 0, 3}); }, rn({{3, 4}})});
  c.push_back({"fdmim.reconstruction_head", [](const V& v) { return fdmim::reconstruction_head(v[0], v[1], v[2], 2, 1, 2); },
               rn({{2, 2, 5}, {5, 12}, {12}})});
  c.push_back({"fdmim.l1_masked_loss", [](const V& v) {
                 Tensor<T> target(Shape{2, 3, 2, 2});
                 Tensor<T> mask(Shape{2, 1, 2, 2});
                 for (std::int64_t i = 0; i < mask.size(); ++i) mask[i] = T(i % 3 == 0 ? 1 : 0);
                 return fdmim::l1_masked_loss(v[0], target, mask);
               },
               [](std::mt19937_64& r) { return In{away_from_zero<T>({2, 3, 2, 2}, r)}; }});
  c.push_back({"fdmim.fill_masked", [](const V& v) {
                 Tensor<T> filtered(Shape{2, 3, 2, 2}, T(0.25));
                 Tensor<T> mask(Shape{2, 1, 2, 2});
                 for (std::int64_t i = 0; i < mask.size(); ++i) mask[i] = T(i % 2);
                 const auto y = fdmim::fill_masked(filtered, mask, v[0]);
                 return ops::mul(y, y);
               },
               rn({{3}})});
  return c;
}

template <typename T>
double run_case(const Case<T>& c, const CheckOptions& opt) {
  std::mt19937_64 rng(opt.seed * 7919 + 17);
  return relative_error<T>(c.build, c.make(rng), opt);
}

// ---------------------------------------------------------------------------
// whole-model checks

model::ModelConfig mini_config() {
  model::ModelConfig c;
  c.embed_dim = 8;
  c.depths = {1, 1, 1, 1};
  c.num_heads = {1, 2, 2, 4};
  c.window_size = 2;
  c.mlp_ratio = 2;
  c.patch_size = 7;
  c.img_size = 56;
  c.num_classes = 2;
  return c;
}

// Weights drawn well away from the tiny init so every path carries gradient.
template <typename T>
model::ParamStore<T> jittered(const model::ModelConfig& c, std::uint64_t seed, bool with_head) {
  auto store = model::init_weights<T>(c, seed, with_head);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> d(0.0, 0.2);
  for (auto& [name, t] : store)
    for (auto& v : t.vec()) v = static_cast<T>(v + d(rng));
  return store;
}

template <typename T>
double store_check(const model::ParamStore<T>& base, const std::function<Var<T>(const model::Bound<T>&)>& loss_fn,
                   const CheckOptions& opt) {
  std::vector<std::string> names;
  std::vector<Tensor<T>> inputs;
  for (const auto& [name, t] : base) {
    names.push_back(name);
    inputs.push_back(t);
  }
  auto to_store = [&](const std::vector<Tensor<T>>& xs) {
    model::ParamStore<T> s;
    for (std::size_t i = 0; i < xs.size(); ++i) s[names[i]] = xs[i];
    return s;
  };
  Eval<T> eval = [&](const std::vector<Tensor<T>>& xs) {
    return static_cast<double>(loss_fn(model::Bound<T>::constants(to_store(xs))).value().item());
  };
  Grads<T> grads = [&](const std::vector<Tensor<T>>& xs) {
    Tape<T> tape;
    if (opt.fault) tape.inject_fault(opt.fault->op, static_cast<T>(opt.fault->scale));
    const auto store = to_store(xs);
    const auto p = model::Bound<T>::on_tape(tape, store);
    tape.backward(loss_fn(p));
    std::vector<Tensor<T>> out;
    for (const auto& n : names) out.push_back(tape.grad(p[n]));
    return out;
  };
  return compare<T>(inputs, eval, grads, opt);
}

template <typename T>
double end_to_end(const CheckOptions& opt) {
  const auto c = mini_config();
  const auto params = jittered<T>(c, opt.seed, true);
  std::mt19937_64 rng(opt.seed + 2);
  const auto image = randn<T>({2, 3, c.img_size, c.img_size}, rng, 0.5);
  return store_check<T>(params, [&](const model::Bound<T>& p) {
    return ops::cross_entropy(model::forward_cls(p, c, Var<T>(image)), {0, 1});
  }, opt);
}

// A shifted-window block: depth one never reaches the odd (shifted) block.
template <typename T>
double shifted_block(const CheckOptions& opt) {
  auto c = mini_config();
  c.depths = {2, 1, 1, 1};
  const auto all = jittered<T>(c, opt.seed, false);
  model::ParamStore<T> params;
  const auto prefix = model::block_prefix(0, 1);
  for (const auto& [name, t] : all)
    if (name.rfind(prefix + ".", 0) == 0) params[name] = t;
  std::mt19937_64 rng(opt.seed + 3);
  const int grid = c.stage_grid(0);
  const auto x = randn<T>({1, static_cast<std::int64_t>(grid) * grid, c.embed_dim}, rng);
  const auto proj = randn<T>({1, static_cast<std::int64_t>(grid) * grid, c.embed_dim}, rng);
  return store_check<T>(params, [&](const model::Bound<T>& p) {
    return ops::sum(ops::mul(model::fifb(p, prefix, c, Var<T>(x), 0, 1), Var<T>(proj)));
  }, opt);
}

template <typename T>
double merging(const CheckOptions& opt) {
  const auto c = mini_config();
  const auto all = jittered<T>(c, opt.seed, false);
  model::ParamStore<T> params;
  for (const auto& [name, t] : all)
    if (name.rfind("layers.0.downsample.", 0) == 0) params[name] = t;
  std::mt19937_64 rng(opt.seed + 4);
  const int grid = c.stage_grid(0);
  const auto x = randn<T>({1, static_cast<std::int64_t>(grid) * grid, c.embed_dim}, rng);
  const auto proj = randn<T>({1, static_cast<std::int64_t>(grid) * grid / 4, 2 * c.embed_dim}, rng);
  return store_check<T>(params, [&](const model::Bound<T>& p) {
    return ops::sum(ops::mul(model::patch_merging(p, "layers.0.downsample", Var<T>(x), grid, T(1e-5)), Var<T>(proj)));
  }, opt);
}

}  // namespace

std::vector<CheckRow> run_suite(const SuiteOptions& sopt) {
  CheckOptions opt;
  opt.seed = sopt.seed;
  opt.fault = sopt.fault;
  struct Row {
    std::string name;
    std::function<double(const CheckOptions&)> f32, f64;
  };
  std::vector<Row> cases;
  const auto c32 = op_cases<float>();
  const auto c64 = op_cases<double>();
  for (std::size_t i = 0; i < c32.size(); ++i) {
    cases.push_back(Row{c32[i].name, [&, i](const CheckOptions& o) { return run_case(c32[i], o); },
                        [&, i](const CheckOptions& o) { return run_case(c64[i], o); }});
  }
  cases.push_back(Row{"model.patch_merging", merging<float>, merging<double>});
  cases.push_back(Row{"model.fifb_shifted", shifted_block<float>, shifted_block<double>});
  if (sopt.include_model) {
    cases.push_back(Row{"model.end_to_end", end_to_end<float>, end_to_end<double>});
  }
  std::vector<CheckRow> rows;
  for (const auto& c : cases) {
    CheckRow r;
    r.name = c.name;
    r.err_f32 = c.f32 ? c.f32(opt) : -1.0;
    r.err_f64 = c.f64 ? c.f64(opt) : -1.0;
    r.passed = r.err_f32 < Tolerance<float>::max_rel && r.err_f64 < Tolerance<double>::max_rel;
    rows.push_back(r);
  }
  return rows;
}

std::string format_table(const std::vector<CheckRow>& rows) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-28s %12s %12s  %s\n", "check", "rel_err_f32", "rel_err_f64", "result");
  os << buf;
  auto cell = [](double e) {
    char b[32];
    if (e < 0) std::snprintf(b, sizeof b, "%12s", "-");
    else std::snprintf(b, sizeof b, "%12.3e", e);
    return std::string(b);
  };
  int failed = 0;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-28s %s %s  %s\n", r.name.c_str(), cell(r.err_f32).c_str(), cell(r.err_f64).c_str(),
                  r.passed ? "PASS" : "FAIL");
    os << buf;
    failed += !r.passed;
  }
  os << rows.size() - failed << "/" << rows.size() << " checks passed (tolerance " << Tolerance<float>::max_rel
     << " f32, " << Tolerance<double>::max_rel << " f64)\n";
  return os.str();
}

}  // namespace ringmo::gradcheck
