#include "acal/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "acal/nets.hpp"
#include "acal/rng.hpp"

namespace acal {

bool CheckReport::pass() const {
  for (const ParamCheck& p : params) {
    if (!p.pass) return false;
  }
  return true;
}

double CheckReport::max_rel_err() const {
  double m = 0.0;
  for (const ParamCheck& p : params) m = std::max(m, p.max_rel_err);
  return m;
}

std::string CheckReport::summary() const {
  std::ostringstream os;
  for (const ParamCheck& p : params) {
    os << (p.pass ? "ok  " : "FAIL") << "  " << p.name << "  max_rel_err=" << p.max_rel_err
       << "  coords=" << p.coords_checked << "  kinks=" << p.kinks << "\n";
  }
  return os.str();
}

namespace {

ParamMap plain_params(const ParamMap& params) {
  ParamMap out;
  for (const auto& [name, t] : params) out[name] = t.detach();
  return out;
}

double eval_scalar(const std::function<Tensor(const ParamMap&)>& f, const ParamMap& p) {
  const Tensor t = f(p);
  if (t.size() != 1) {
    throw ContractError("finite_diff_check: f must return a scalar tensor");
  }
  return t.item();
}

std::vector<double> with_coord(const Tensor& t, std::size_t i, double v) {
  std::vector<double> vals(t.values().begin(), t.values().end());
  vals[i] = v;
  return vals;
}

}  // namespace

namespace {

// Scalar evaluation plus the discrete branch pattern it took.
std::pair<double, std::uint64_t> eval_traced(const std::function<Tensor(const ParamMap&)>& f,
                                             const ParamMap& p) {
  kink_trace::set_enabled(true);
  kink_trace::reset();
  double v;
  try {
    v = eval_scalar(f, p);
  } catch (...) {
    kink_trace::set_enabled(false);
    throw;
  }
  const std::uint64_t trace = kink_trace::value();
  kink_trace::set_enabled(false);
  return {v, trace};
}

}  // namespace

CheckReport finite_diff_check(const std::function<Tensor(const ParamMap&)>& f,
                              const ParamMap& params, const FdOptions& opts) {
  if (!(opts.h > 0.0)) throw ValueError("finite_diff_check: h must be positive");

  const ParamMap plain = plain_params(params);
  const auto [base, base_trace] = eval_traced(f, plain);
  const double base_again = eval_scalar(f, plain);
  if (base != base_again) {
    throw ContractError("finite_diff_check: f is not deterministic (" +
                        std::to_string(base) + " vs " + std::to_string(base_again) + ")");
  }

  // Analytic side: rebuild the graph once with differentiable leaves.
  ParamMap grad_params;
  for (const auto& [name, t] : params) grad_params[name] = t.with_grad();
  const Tensor loss = f(grad_params);
  if (loss.size() != 1) {
    throw ContractError("finite_diff_check: f must return a scalar tensor");
  }
  GradientMap grads;
  if (loss.tracked()) grads = backward(loss);

  CheckReport report;
  report.tol = opts.tol;
  for (const auto& [name, t] : grad_params) {
    ParamCheck pc;
    pc.name = name;

    std::vector<std::size_t> coords(t.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opts.max_coords_per_param > 0 && coords.size() > opts.max_coords_per_param) {
      rng::Stream s(rng::derive(opts.coord_seed, "fd-coords", rng::fnv1a64(name)));
      rng::shuffle(coords, s);
      coords.resize(opts.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }

    const std::optional<Tensor> g = grads.find(t);
    for (std::size_t i : coords) {
      const double x0 = t.at(i);
      ParamMap p_plus = plain;
      p_plus[name] = Tensor::from(t.shape(), with_coord(t, i, x0 + opts.h));
      const auto [f_plus, trace_plus] = eval_traced(f, p_plus);
      ParamMap p_minus = plain;
      p_minus[name] = Tensor::from(t.shape(), with_coord(t, i, x0 - opts.h));
      const auto [f_minus, trace_minus] = eval_traced(f, p_minus);

      // the step crossed a relu corner / pool switch / clamp edge / l1 tie
      if (trace_plus != trace_minus || trace_plus != base_trace) {
        ++pc.kinks;
        continue;
      }

      const double central = (f_plus - f_minus) / (2.0 * opts.h);
      const double left = (base - f_minus) / opts.h;
      const double right = (f_plus - base) / opts.h;
      if (std::abs(left - right) >
          opts.kink_abs + opts.kink_rel * std::max(std::abs(left), std::abs(right))) {
        ++pc.kinks;
        continue;
      }

      const double analytic = g ? g->at(i) : 0.0;
      const double denom =
          std::max({std::abs(analytic), std::abs(central), opts.denom_floor});
      const double rel = std::abs(analytic - central) / denom;
      ++pc.coords_checked;
      if (rel > pc.max_rel_err) {
        pc.max_rel_err = rel;
        pc.worst_coord = i;
      }
    }
    pc.pass = pc.max_rel_err <= opts.tol;
    report.params.push_back(std::move(pc));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Registered-operation scenarios
// ---------------------------------------------------------------------------

namespace {

Tensor random_tensor(Shape shape, rng::Stream& s, double lo = -1.5, double hi = 1.5) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = s.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Weighted mean turns any tensor into an asymmetric scalar so that every
// output coordinate influences the loss differently.
std::function<Tensor(const Tensor&)> weighted_mean(const Shape& shape, rng::Stream& s) {
  Tensor w = random_tensor(shape, s, 0.2, 1.3);
  return [w](const Tensor& t) { return mean_all(mul(t, w)); };
}

}  // namespace

std::vector<OpCase> standard_op_cases(std::uint64_t seed) {
  std::vector<OpCase> cases;
  auto add_case = [&cases](std::string name, ParamMap params,
                           std::function<Tensor(const ParamMap&)> f) {
    cases.push_back({std::move(name), std::move(params), std::move(f)});
  };
  rng::Stream s(rng::derive(seed, "op-cases"));

  {
    auto wm = weighted_mean({3, 2}, s);
    add_case("matmul", {{"a", random_tensor({3, 4}, s)}, {"b", random_tensor({4, 2}, s)}},
             [wm](const ParamMap& p) { return wm(matmul(p.at("a"), p.at("b"))); });
  }
  {
    auto wm = weighted_mean({3, 3, 3}, s);
    add_case("conv2d_s1p0",
             {{"x", random_tensor({2, 5, 5}, s)}, {"k", random_tensor({3, 2, 3, 3}, s)}},
             [wm](const ParamMap& p) { return wm(conv2d(p.at("x"), p.at("k"), 1, 0)); });
  }
  {
    auto wm = weighted_mean({1, 2, 3, 3}, s);
    add_case("conv2d_s2p1",
             {{"x", random_tensor({1, 3, 6, 6}, s)}, {"k", random_tensor({2, 3, 3, 3}, s)}},
             [wm](const ParamMap& p) { return wm(conv2d(p.at("x"), p.at("k"), 2, 1)); });
  }
  {
    auto wm = weighted_mean({4, 3}, s);
    add_case("add", {{"a", random_tensor({4, 3}, s)}, {"b", random_tensor({4, 3}, s)}},
             [wm](const ParamMap& p) { return wm(add(p.at("a"), p.at("b"))); });
    auto wm2 = weighted_mean({4, 3}, s);
    add_case("sub", {{"a", random_tensor({4, 3}, s)}, {"b", random_tensor({4, 3}, s)}},
             [wm2](const ParamMap& p) { return wm2(sub(p.at("a"), p.at("b"))); });
    auto wm3 = weighted_mean({4, 3}, s);
    add_case("mul", {{"a", random_tensor({4, 3}, s)}, {"b", random_tensor({4, 3}, s)}},
             [wm3](const ParamMap& p) { return wm3(mul(p.at("a"), p.at("b"))); });
    auto wm4 = weighted_mean({4, 3}, s);
    add_case("neg", {{"a", random_tensor({4, 3}, s)}},
             [wm4](const ParamMap& p) { return wm4(neg(p.at("a"))); });
  }
  {
    auto wm = weighted_mean({5, 5}, s);
    add_case("relu", {{"a", random_tensor({5, 5}, s)}},
             [wm](const ParamMap& p) { return wm(relu(p.at("a"))); });
    auto wm2 = weighted_mean({5, 5}, s);
    add_case("sigmoid", {{"a", random_tensor({5, 5}, s)}},
             [wm2](const ParamMap& p) { return wm2(sigmoid(p.at("a"))); });
    auto wm3 = weighted_mean({5, 5}, s);
    add_case("tanh", {{"a", random_tensor({5, 5}, s)}},
             [wm3](const ParamMap& p) { return wm3(tanh(p.at("a"))); });
    auto wm4 = weighted_mean({5, 5}, s);
    add_case("log", {{"a", random_tensor({5, 5}, s, 0.2, 3.0)}},
             [wm4](const ParamMap& p) { return wm4(log(p.at("a"))); });
  }
  {
    add_case("softmax_cross_entropy", {{"logits", random_tensor({4, 5}, s)}},
             [](const ParamMap& p) {
               return softmax_cross_entropy(p.at("logits"), {0, 3, 1, 4});
             });
  }
  {
    add_case("l1_distance",
             {{"a", random_tensor({3, 4}, s)}, {"b", random_tensor({3, 4}, s)}},
             [](const ParamMap& p) { return l1_distance(p.at("a"), p.at("b")); });
  }
  {
    auto wm = weighted_mean({1, 2, 3, 3}, s);
    add_case("max_pool2d", {{"x", random_tensor({1, 2, 6, 6}, s)}},
             [wm](const ParamMap& p) { return wm(max_pool2d(p.at("x"), 2)); });
  }
  {
    auto wm = weighted_mean({2, 6, 6}, s);
    add_case("upsample_nearest", {{"x", random_tensor({2, 3, 3}, s)}},
             [wm](const ParamMap& p) { return wm(upsample_nearest(p.at("x"), 2)); });
  }
  {
    auto wm = weighted_mean({6, 4}, s);
    add_case("reshape", {{"x", random_tensor({2, 3, 4}, s)}},
             [wm](const ParamMap& p) { return wm(reshape(p.at("x"), {6, 4})); });
  }
  {
    auto wm = weighted_mean({3, 5}, s);
    add_case("tile", {{"x", random_tensor({5}, s)}},
             [wm](const ParamMap& p) { return wm(tile(p.at("x"), 3)); });
  }
  {
    auto wm = weighted_mean({2, 3, 4, 4}, s);
    add_case("bias_add_channels",
             {{"x", random_tensor({2, 3, 4, 4}, s)}, {"b", random_tensor({3}, s)}},
             [wm](const ParamMap& p) {
               return wm(bias_add_channels(p.at("x"), p.at("b")));
             });
  }
  {
    add_case("mean_all", {{"x", random_tensor({4, 4}, s)}},
             [](const ParamMap& p) { return scale(mean_all(p.at("x")), 2.5); });
  }
  {
    auto wm = weighted_mean({4, 4}, s);
    add_case("scale", {{"x", random_tensor({4, 4}, s)}},
             [wm](const ParamMap& p) { return wm(scale(p.at("x"), 1.7)); });
  }
  {
    auto wm = weighted_mean({4, 4}, s);
    add_case("clamp", {{"x", random_tensor({4, 4}, s, -2.0, 2.0)}},
             [wm](const ParamMap& p) { return wm(clamp(p.at("x"), -1.0, 1.0)); });
  }
  {
    // conv -> relu -> flatten -> dense -> cross-entropy, all through one graph
    Tensor x = random_tensor({2, 1, 6, 6}, s);
    add_case("composite_conv_relu_ce",
             {{"k", random_tensor({3, 1, 3, 3}, s)},
              {"w", random_tensor({48, 4}, s, -0.5, 0.5)},
              {"b", random_tensor({4}, s, -0.5, 0.5)}},
             [x](const ParamMap& p) {
               Tensor h = relu(conv2d(x, p.at("k"), 1, 0));
               h = reshape(h, {2, h.size() / 2});
               h = add(matmul(h, p.at("w")), tile(p.at("b"), 2));
               return softmax_cross_entropy(h, {1, 3});
             });
  }
  return cases;
}

std::vector<OpCase> network_topology_cases(std::uint64_t seed) {
  std::vector<OpCase> cases;
  rng::Stream s(rng::derive(seed, "net-cases"));
  const Shape image{1, 16, 16};

  {
    Network net = build_classifier(image, 10, {rng::derive(seed, "gc-cls"), {}, 1.0});
    Tensor x = random_tensor({2, 1, 16, 16}, s, -1.0, 1.0);
    cases.push_back(
        {"classifier_topology", net.params, [net, x](const ParamMap& p) {
           return softmax_cross_entropy(forward(net.with_params(p), x), {3, 7});
         }});
  }
  {
    Network net = build_generator(image, {rng::derive(seed, "gc-gen"), {}, 1.0});
    Tensor x = random_tensor({2, 1, 16, 16}, s, -1.0, 1.0);
    Tensor target = random_tensor({2, 1, 16, 16}, s, -0.9, 0.9);
    cases.push_back({"generator_topology", net.params, [net, x, target](const ParamMap& p) {
                       return l1_distance(forward(net.with_params(p), x), target);
                     }});
  }
  {
    Network net = build_discriminator(image, {rng::derive(seed, "gc-dis"), {}, 1.0});
    Tensor x = random_tensor({2, 1, 16, 16}, s, -1.0, 1.0);
    rng::Stream s2(rng::derive(seed, "gc-dis-w"));
    auto wm = weighted_mean({2}, s2);
    cases.push_back({"discriminator_topology", net.params, [net, x, wm](const ParamMap& p) {
                       return wm(forward(net.with_params(p), x));
                     }});
  }
  return cases;
}

bool SweepResult::pass() const {
  for (const Entry& e : entries) {
    if (!e.report.pass()) return false;
  }
  return true;
}

SweepResult run_gradcheck_sweep(const std::vector<OpCase>& cases, const FdOptions& opts) {
  SweepResult result;
  for (const OpCase& c : cases) {
    result.entries.push_back({c.name, finite_diff_check(c.f, c.params, opts)});
  }
  return result;
}

}  // namespace acal
