#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "acal/datasets.hpp"
#include "acal/objectives.hpp"
#include "acal/rng.hpp"
#include "acal/trainer.hpp"

using namespace acal;

namespace {

const Shape kImg{1, 16, 16};

Batch glyph_batch(const GlyphStyle& style, std::uint64_t seed, std::size_t n = 6,
                  bool labeled = true) {
  const DomainDataset ds = gen_glyph_domain(style, 2, seed, Split::train);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i) idx.push_back((i * 7) % ds.size());
  Batch b = make_batch(ds, idx);
  if (!labeled) {
    for (auto& l : b.labels) l = std::nullopt;
  }
  return b;
}

GlyphStyle target_style() {
  GlyphStyle s;
  s.invert = true;
  s.stroke_dilate = 1;
  s.noise_sigma = 0.15;
  return s;
}

struct Fixture {
  Network g_st = build_generator(kImg, {101, {}, 1.0});
  Network g_ts = build_generator(kImg, {102, {}, 1.0});
  Network d_s = build_discriminator(kImg, {103, {}, 1.0});
  Network d_t = build_discriminator(kImg, {104, {}, 1.0});
  Network m_s = build_classifier(kImg, 10, {105, {}, 1.0});
  Network m_t = build_classifier(kImg, 10, {106, {}, 1.0});
  Batch batch_s = glyph_batch({}, 11);
  Batch batch_t = glyph_batch(target_style(), 12);

  Nets nets() const { return {&g_st, &g_ts, &d_s, &d_t, &m_s, &m_t}; }
};

// A classifier driven to near-zero loss on one small batch; the fixture for
// the perfect-classifier identities.
Network overfit_classifier(const Batch& batch, std::uint64_t seed, int steps = 400) {
  Network net = build_classifier(kImg, 10, {seed, {}, 1.0});
  OptimizerConfig ocfg{OptimizerKind::adam, 0.9, 0.999, 1e-8};
  OptMoments mom;
  const std::vector<int> labels = batch.labels_or_throw("overfit");
  for (int i = 0; i < steps; ++i) {
    const Tensor loss = softmax_cross_entropy(forward(net, batch.images), labels);
    auto [params, next] = optimizer_step(net.params, backward(loss), std::move(mom),
                                         ocfg, 2e-3);
    net.params = std::move(params);
    mom = std::move(next);
    if (loss.item() < 5e-5) break;
  }
  return net;
}

}  // namespace

TEST_CASE("discriminator adversarial loss fixed points") {
  const Tensor half = Tensor::full({4}, 0.5);
  CHECK(adv_d_loss(half, half).item() ==
        doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));

  // a perfect discriminator drives the loss toward zero
  const Tensor hi = Tensor::full({4}, 1.0 - 1e-9);
  const Tensor lo = Tensor::full({4}, 1e-9);
  CHECK(adv_d_loss(hi, lo).item() == doctest::Approx(0.0).epsilon(1e-6));

  // symmetric outputs are minimised at 1/2
  const double at_half = adv_d_loss(half, half).item();
  for (double p : {0.1, 0.3, 0.7, 0.9}) {
    const Tensor t = Tensor::full({4}, p);
    CHECK(adv_d_loss(t, t).item() > at_half);
  }
}

TEST_CASE("probabilities at the boundary clamp and count") {
  std::size_t events = 0;
  const Tensor bad = Tensor::from({2}, {0.0, 1.0});
  const double v = adv_d_loss(bad, Tensor::full({2}, 0.5), &events).item();
  CHECK(std::isfinite(v));
  CHECK(events == 2);
}

TEST_CASE("generator adversarial loss, non-saturating by default") {
  CHECK(adv_g_loss(Tensor::full({3}, 0.5)).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(adv_g_loss(Tensor::full({3}, 1.0 - 1e-9)).item() ==
        doctest::Approx(0.0).epsilon(1e-6));

  // non-saturating form keeps gradient alive when the discriminator wins
  const Tensor probs = Tensor::param({3}, {1e-5, 2e-5, 3e-5});
  const GradientMap g = backward(adv_g_loss(probs));
  bool nonzero = false;
  for (double x : g.at(probs).values()) nonzero = nonzero || x != 0.0;
  CHECK(nonzero);

  // saturating flag flips to log(1 - d)
  CHECK(adv_g_loss(Tensor::full({3}, 0.5), true).item() ==
        doctest::Approx(std::log(0.5)).epsilon(1e-12));
}

TEST_CASE("reconstruction cycle loss behaves like mean L1") {
  const Batch b = glyph_batch({}, 21);
  CHECK(recon_cycle_loss(b.images, b.images).item() == 0.0);
  const Tensor shifted = add(b.images, Tensor::full(b.images.shape(), 0.5));
  CHECK(recon_cycle_loss(b.images, shifted).item() == doctest::Approx(0.5));
  CHECK(recon_cycle_loss(shifted, b.images).item() ==
        recon_cycle_loss(b.images, shifted).item());
}

TEST_CASE("relaxed cycle loss equals task loss on the cycled batch") {
  const Batch b = glyph_batch({}, 31);
  const std::vector<int> y = b.labels_or_throw("test");

  // uniform logits: zeroed classifier head gives exactly ln K
  Network uniform = build_classifier(kImg, 10, {55, {}, 1.0});
  auto params = uniform.params;
  std::string last_w, last_b;
  for (const auto& [name, t] : params) {
    if (name.ends_with(".w")) last_w = std::max(last_w, name);
    if (name.ends_with(".b")) last_b = std::max(last_b, name);
  }
  params[last_w] = Tensor::zeros(params[last_w].shape()).with_grad();
  params[last_b] = Tensor::zeros(params[last_b].shape()).with_grad();
  uniform = uniform.with_params(params);
  CHECK(relaxed_cycle_loss(uniform, b.images, y).item() ==
        doctest::Approx(std::log(10.0)).epsilon(1e-12));

  // near-perfect classifier: loss collapses toward zero
  const Network sharp = overfit_classifier(b, 77);
  CHECK(relaxed_cycle_loss(sharp, b.images, y).item() < 1e-3);

  // identity generators compose to the classifier's plain loss on x
  const Network id = identity_generator(kImg);
  const Tensor cycled = forward(id, forward(id, b.images));
  CHECK(relaxed_cycle_loss(sharp, cycled, y).item() ==
        doctest::Approx(relaxed_cycle_loss(sharp, b.images, y).item()));

  CHECK_THROWS_AS(relaxed_cycle_loss(sharp, b.images, {0, 1}), ShapeError);
}

TEST_CASE("relaxed cycle loss is non-negative under random nets") {
  rng::Stream s(41);
  for (int trial = 0; trial < 5; ++trial) {
    const Network m = build_classifier(kImg, 10, {s.next_u64(), {}, 1.0});
    const Batch b = glyph_batch(target_style(), s.next_u64());
    CHECK(relaxed_cycle_loss(m, b.images, b.labels_or_throw("t")).item() >= 0.0);
  }
}

TEST_CASE("augmented task terms split gradients by design") {
  const Batch real = glyph_batch({}, 51);
  const Batch src = glyph_batch({}, 52);
  const Network m = build_classifier(kImg, 10, {61, {}, 1.0});
  Network g = build_generator(kImg, {62, {}, 1.0});

  const Tensor mapped = forward(g, src.images);  // attached to g's params
  const auto [m_loss, g_feedback] =
      augmented_task_terms(m, real.images, real.labels_or_throw("t"), mapped,
                           src.labels_or_throw("t"));

  const GradientMap gm = backward(m_loss);
  for (const auto& [name, p] : g.params) CHECK_FALSE(gm.contains(p));
  bool m_touched = false;
  for (const auto& [name, p] : m.params) m_touched = m_touched || gm.contains(p);
  CHECK(m_touched);

  const GradientMap gg = backward(g_feedback);
  for (const auto& [name, p] : m.params) CHECK_FALSE(gg.contains(p));
  bool g_touched = false;
  for (const auto& [name, p] : g.params) g_touched = g_touched || gg.contains(p);
  CHECK(g_touched);
}

TEST_CASE("augmented task terms at the uniform and perfect extremes") {
  const Batch b = glyph_batch({}, 53);
  const std::vector<int> y = b.labels_or_throw("t");

  const Network sharp = overfit_classifier(b, 63);
  const auto [m_loss, g_loss] = augmented_task_terms(sharp, b.images, y, b.images, y);
  CHECK(m_loss.item() < 2e-3);
  CHECK(g_loss.item() < 1e-3);

  Network uniform = build_classifier(kImg, 10, {64, {}, 1.0});
  auto params = uniform.params;
  std::string last_w, last_b;
  for (const auto& [name, t] : params) {
    if (name.ends_with(".w")) last_w = std::max(last_w, name);
    if (name.ends_with(".b")) last_b = std::max(last_b, name);
  }
  params[last_w] = Tensor::zeros(params[last_w].shape()).with_grad();
  params[last_b] = Tensor::zeros(params[last_b].shape()).with_grad();
  uniform = uniform.with_params(params);
  const auto [mu, gu] = augmented_task_terms(uniform, b.images, y, b.images, y);
  CHECK(mu.item() == doctest::Approx(2.0 * std::log(10.0)).epsilon(1e-12));
  CHECK(gu.item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("pseudo labels take the argmax with ties to the lowest index") {
  const Batch b = glyph_batch(target_style(), 71, 4);
  const Network id = identity_generator(kImg);

  // classifier fit exactly on this batch reproduces the true labels
  const Network sharp = overfit_classifier(b, 72);
  const std::vector<int> y = pseudo_label(sharp, id, b.images);
  CHECK(y == b.labels_or_throw("t"));

  // zeroed head ties every class; the rule picks class 0
  Network uniform = build_classifier(kImg, 10, {73, {}, 1.0});
  auto params = uniform.params;
  std::string last_w, last_b;
  for (const auto& [name, t] : params) {
    if (name.ends_with(".w")) last_w = std::max(last_w, name);
    if (name.ends_with(".b")) last_b = std::max(last_b, name);
  }
  params[last_w] = Tensor::zeros(params[last_w].shape()).with_grad();
  params[last_b] = Tensor::zeros(params[last_b].shape()).with_grad();
  uniform = uniform.with_params(params);
  for (int label : pseudo_label(uniform, id, b.images)) CHECK(label == 0);
}

TEST_CASE("pseudo labels are invariant under monotone logit transforms") {
  // scaling the classifier head scales all logits by a positive factor
  const Batch b = glyph_batch(target_style(), 74, 8);
  const Network id = identity_generator(kImg);
  Network m = build_classifier(kImg, 10, {75, {}, 1.0});
  const std::vector<int> before = pseudo_label(m, id, b.images);

  std::string last_w, last_b;
  for (const auto& [name, t] : m.params) {
    if (name.ends_with(".w")) last_w = std::max(last_w, name);
    if (name.ends_with(".b")) last_b = std::max(last_b, name);
  }
  auto params = m.params;
  params[last_w] = scale(params[last_w], 3.0).detach().with_grad();
  params[last_b] = scale(params[last_b], 3.0).detach().with_grad();
  const Network scaled = m.with_params(params);
  CHECK(pseudo_label(scaled, id, b.images) == before);
}

TEST_CASE("every variant activates exactly its documented terms") {
  Fixture fx;
  for (VariantName name : variant_registry()) {
    VariantSpec spec;
    spec.name = name;
    const LossBundle bundle = compose_variant(spec, fx.batch_s, fx.batch_t, fx.nets());
    std::vector<std::string> keys;
    for (const auto& [k, v] : bundle.diagnostics) keys.push_back(k);
    std::vector<std::string> expected = active_terms(spec, true);
    std::sort(expected.begin(), expected.end());
    INFO("variant ", variant_str(name));
    CHECK(keys == expected);
    for (const auto& [k, v] : bundle.diagnostics) CHECK(std::isfinite(v));
  }
}

TEST_CASE("unsupervised composition pseudo-labels and drops label-bound terms") {
  Fixture fx;
  VariantSpec spec;
  spec.name = VariantName::acal;
  spec.supervision = SupervisionMode::unsupervised;
  Batch unlabeled = fx.batch_t;
  for (auto& l : unlabeled.labels) l = std::nullopt;

  const LossBundle bundle = compose_variant(spec, fx.batch_s, unlabeled, fx.nets());
  std::vector<std::string> keys;
  for (const auto& [k, v] : bundle.diagnostics) keys.push_back(k);
  std::vector<std::string> expected = active_terms(spec, false);
  std::sort(expected.begin(), expected.end());
  CHECK(keys == expected);
  CHECK(bundle.diagnostics.count("task_m_t_pseudo") == 1);
  CHECK(bundle.diagnostics.count("task_m_s_mapped") == 0);
  CHECK(bundle.diagnostics.count("task_g_ts") == 0);

  // the pseudo-labeled target-real term trains only M_T
  const TaskLosses tl = build_task_losses(spec, fx.batch_s, unlabeled, fx.nets(), {});
  REQUIRE(tl.m_t.has_value());
  const GradientMap g = backward(*tl.m_t);
  for (const auto& [name, p] : fx.m_s.params) CHECK_FALSE(g.contains(p));
  for (const auto& [name, p] : fx.g_ts.params) CHECK_FALSE(g.contains(p));
  for (const auto& [name, p] : fx.g_st.params) CHECK_FALSE(g.contains(p));
}

TEST_CASE("only the full augmented variant defines unsupervised objectives") {
  Fixture fx;
  Batch unlabeled = fx.batch_t;
  for (auto& l : unlabeled.labels) l = std::nullopt;
  for (VariantName name : {VariantName::cyclegan, VariantName::rcal,
                           VariantName::target_only, VariantName::rcal_one_cycle_sts}) {
    VariantSpec spec;
    spec.name = name;
    spec.supervision = SupervisionMode::unsupervised;
    CHECK_THROWS_AS(compose_variant(spec, fx.batch_s, unlabeled, fx.nets()), ConfigError);
  }
}

TEST_CASE("supervised variants reject unlabeled target batches") {
  Fixture fx;
  Batch unlabeled = fx.batch_t;
  for (auto& l : unlabeled.labels) l = std::nullopt;
  VariantSpec spec;
  spec.name = VariantName::rcal;
  CHECK_THROWS_WITH_AS(
      static_cast<void>(compose_variant(spec, fx.batch_s, unlabeled, fx.nets())),
      doctest::Contains("target labels"), ConfigError);
}

TEST_CASE("missing networks are named") {
  Fixture fx;
  Nets nets = fx.nets();
  nets.g_st = nullptr;
  VariantSpec spec;
  spec.name = VariantName::cyclegan;
  CHECK_THROWS_WITH_AS(
      static_cast<void>(compose_variant(spec, fx.batch_s, fx.batch_t, nets)),
      doctest::Contains("g_st"), ConfigError);
}

TEST_CASE("identity generators zero the reconstruction cycle") {
  Fixture fx;
  const Network id = identity_generator(kImg);
  Nets nets = fx.nets();
  nets.g_st = &id;
  nets.g_ts = &id;
  VariantSpec spec;
  spec.name = VariantName::cyclegan;
  const LossBundle bundle =
      compose_variant(spec, fx.batch_s, fx.batch_s, nets);
  CHECK(bundle.diagnostics.at("cyc_sts") == 0.0);
  CHECK(bundle.diagnostics.at("cyc_tst") == 0.0);
}

TEST_CASE("relaxed and reconstruction variants differ only in cycle terms") {
  Fixture fx;
  VariantSpec cyc;
  cyc.name = VariantName::cyclegan;
  VariantSpec rcal;
  rcal.name = VariantName::rcal;
  const LossBundle a = compose_variant(cyc, fx.batch_s, fx.batch_t, fx.nets());
  const LossBundle b = compose_variant(rcal, fx.batch_s, fx.batch_t, fx.nets());
  for (const auto& [k, v] : a.diagnostics) {
    if (k.rfind("cyc_", 0) == 0) {
      CHECK(b.diagnostics.count(k) == 0);
      CHECK(b.diagnostics.count("r" + k) == 1);
    } else {
      CHECK(b.diagnostics.at(k) == v);
    }
  }
}

TEST_CASE("augmentation leaves the adversarial sub-terms untouched") {
  Fixture fx;
  VariantSpec acal;
  acal.name = VariantName::acal;
  VariantSpec cyc;
  cyc.name = VariantName::cyclegan;
  const LossBundle a = compose_variant(acal, fx.batch_s, fx.batch_t, fx.nets());
  const LossBundle c = compose_variant(cyc, fx.batch_s, fx.batch_t, fx.nets());
  for (const char* key : {"adv_d_s", "adv_d_t", "adv_g_st", "adv_g_ts"}) {
    CHECK(std::abs(a.diagnostics.at(key) - c.diagnostics.at(key)) <= 1e-12);
  }
}

TEST_CASE("domain-swap symmetry of the symmetric variants") {
  Fixture fx;
  VariantSpec spec;
  spec.name = VariantName::cyclegan;
  const LossBundle ab = compose_variant(spec, fx.batch_s, fx.batch_t, fx.nets());

  Nets swapped;
  swapped.g_st = &fx.g_ts;
  swapped.g_ts = &fx.g_st;
  swapped.d_s = &fx.d_t;
  swapped.d_t = &fx.d_s;
  swapped.m_s = &fx.m_t;
  swapped.m_t = &fx.m_s;
  const LossBundle ba = compose_variant(spec, fx.batch_t, fx.batch_s, swapped);

  auto mirror = [](const std::string& key) {
    if (key == "adv_d_s") return std::string("adv_d_t");
    if (key == "adv_d_t") return std::string("adv_d_s");
    if (key == "adv_g_st") return std::string("adv_g_ts");
    if (key == "adv_g_ts") return std::string("adv_g_st");
    if (key == "cyc_sts") return std::string("cyc_tst");
    if (key == "cyc_tst") return std::string("cyc_sts");
    if (key == "task_m_s_real") return std::string("task_m_t_real");
    if (key == "task_m_t_real") return std::string("task_m_s_real");
    if (key == "task_m_s_mapped") return std::string("task_m_t_mapped");
    if (key == "task_m_t_mapped") return std::string("task_m_s_mapped");
    return key;
  };
  for (const auto& [k, v] : ab.diagnostics) {
    CHECK(ba.diagnostics.at(mirror(k)) == v);
  }
}

TEST_CASE("semi composition follows the batch's labels") {
  Fixture fx;
  VariantSpec spec;
  spec.name = VariantName::acal;
  spec.supervision = SupervisionMode::semi;
  spec.labeled_fraction = 0.5;

  const LossBundle sup = compose_variant(spec, fx.batch_s, fx.batch_t, fx.nets());
  CHECK(sup.diagnostics.count("task_m_t_real") == 1);

  Batch unlabeled = fx.batch_t;
  for (auto& l : unlabeled.labels) l = std::nullopt;
  const LossBundle unsup = compose_variant(spec, fx.batch_s, unlabeled, fx.nets());
  CHECK(unsup.diagnostics.count("task_m_t_pseudo") == 1);

  Batch mixed = fx.batch_t;
  mixed.labels[0] = std::nullopt;
  CHECK_THROWS_AS(compose_variant(spec, fx.batch_s, mixed, fx.nets()), ConfigError);
}
