#include "acal/objectives.hpp"

#include <algorithm>

#include "acal/rng.hpp"

namespace acal {

namespace {

const std::vector<std::pair<VariantName, const char*>>& variant_names() {
  static const std::vector<std::pair<VariantName, const char*>> names = {
      {VariantName::no_adaptation, "no_adaptation"},
      {VariantName::target_only, "target_only"},
      {VariantName::source_plus_target, "source_plus_target"},
      {VariantName::s2t_only, "s2t_only"},
      {VariantName::one_cycle_sts, "one_cycle_sts"},
      {VariantName::one_cycle_tst, "one_cycle_tst"},
      {VariantName::rcal_one_cycle_sts, "rcal_one_cycle_sts"},
      {VariantName::rcal_one_cycle_tst, "rcal_one_cycle_tst"},
      {VariantName::acal_one_cycle_sts, "acal_one_cycle_sts"},
      {VariantName::acal_one_cycle_tst, "acal_one_cycle_tst"},
      {VariantName::cyclegan, "cyclegan"},
      {VariantName::rcal, "rcal"},
      {VariantName::acal, "acal"},
  };
  return names;
}

}  // namespace

std::string variant_str(VariantName name) {
  for (const auto& [v, s] : variant_names()) {
    if (v == name) return s;
  }
  return "?";
}

VariantName variant_from_string(const std::string& name) {
  for (const auto& [v, s] : variant_names()) {
    if (name == s) return v;
  }
  throw ConfigError("unknown variant '" + name + "'");
}

const std::vector<VariantName>& variant_registry() {
  static const std::vector<VariantName> all = [] {
    std::vector<VariantName> v;
    for (const auto& [name, s] : variant_names()) v.push_back(name);
    return v;
  }();
  return all;
}

std::string supervision_str(SupervisionMode mode) {
  switch (mode) {
    case SupervisionMode::supervised: return "supervised";
    case SupervisionMode::unsupervised: return "unsupervised";
    case SupervisionMode::semi: return "semi";
  }
  return "?";
}

SupervisionMode supervision_from_string(const std::string& mode) {
  if (mode == "supervised") return SupervisionMode::supervised;
  if (mode == "unsupervised") return SupervisionMode::unsupervised;
  if (mode == "semi") return SupervisionMode::semi;
  throw ConfigError("unknown supervision mode '" + mode + "'");
}

bool variant_needs_pretrained_source(VariantName name) {
  switch (name) {
    case VariantName::no_adaptation:
    case VariantName::target_only:
    case VariantName::source_plus_target:
    case VariantName::s2t_only:
      return false;
    default:
      return true;
  }
}

bool variant_supports_unsupervised(VariantName name) {
  return name == VariantName::acal;
}

bool variant_uses_adversarial(VariantName name) {
  switch (name) {
    case VariantName::no_adaptation:
    case VariantName::target_only:
    case VariantName::source_plus_target:
      return false;
    default:
      return true;
  }
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

Tensor adv_d_loss(const Tensor& d_real, const Tensor& d_fake, std::size_t* clamp_events) {
  Tensor r = clamp(d_real, kProbEps, 1.0 - kProbEps, clamp_events);
  Tensor f = clamp(d_fake, kProbEps, 1.0 - kProbEps, clamp_events);
  Tensor one_minus_f = sub(Tensor::full(f.shape(), 1.0), f);
  return neg(add(mean_all(log(r)), mean_all(log(one_minus_f))));
}

Tensor adv_g_loss(const Tensor& d_fake, bool saturating, std::size_t* clamp_events) {
  Tensor f = clamp(d_fake, kProbEps, 1.0 - kProbEps, clamp_events);
  if (saturating) {
    return mean_all(log(sub(Tensor::full(f.shape(), 1.0), f)));
  }
  return neg(mean_all(log(f)));
}

Tensor recon_cycle_loss(const Tensor& x, const Tensor& x_cyc) {
  return l1_distance(x, x_cyc);
}

namespace {

// Task loss through a frozen-parameter classifier; gradient reaches only
// whatever produced x.
Tensor task_term_frozen_m(const Network& m, const Tensor& x, const std::vector<int>& y,
                          const ForwardCtx& ctx) {
  return softmax_cross_entropy(forward(m.detached(), x, ctx), y);
}

// Task loss training the classifier on a fixed input.
Tensor task_term_frozen_x(const Network& m, const Tensor& x, const std::vector<int>& y,
                          const ForwardCtx& ctx) {
  return softmax_cross_entropy(forward(m, x.detach(), ctx), y);
}

}  // namespace

Tensor relaxed_cycle_loss(const Network& m, const Tensor& x_cyc,
                          const std::vector<int>& labels, const ForwardCtx& ctx) {
  return task_term_frozen_m(m, x_cyc, labels, ctx);
}

std::pair<Tensor, Tensor> augmented_task_terms(const Network& m, const Tensor& x_real,
                                               const std::vector<int>& y_real,
                                               const Tensor& x_mapped,
                                               const std::vector<int>& y_mapped,
                                               const ForwardCtx& ctx) {
  const ForwardCtx c1{ctx.train, rng::derive(ctx.dropout_seed, "aug-real")};
  const ForwardCtx c2{ctx.train, rng::derive(ctx.dropout_seed, "aug-mapped")};
  const ForwardCtx c3{ctx.train, rng::derive(ctx.dropout_seed, "aug-feedback")};
  Tensor m_loss = add(task_term_frozen_x(m, x_real, y_real, c1),
                      task_term_frozen_x(m, x_mapped, y_mapped, c2));
  Tensor g_feedback = task_term_frozen_m(m, x_mapped, y_mapped, c3);
  return {m_loss, g_feedback};
}

std::vector<int> pseudo_label(const Network& m_s, const Network& g_ts, const Tensor& x_t) {
  const Tensor mapped = forward(g_ts.detached(), x_t.detach(), {});
  const Tensor logits = forward(m_s.detached(), mapped, {});
  const std::size_t B = logits.shape()[0], K = logits.shape()[1];
  std::vector<int> labels(B);
  for (std::size_t i = 0; i < B; ++i) {
    std::size_t best = 0;
    double best_v = logits.at(i * K);
    for (std::size_t j = 1; j < K; ++j) {
      const double v = logits.at(i * K + j);
      if (v > best_v) {
        best_v = v;
        best = j;
      }
    }
    labels[i] = static_cast<int>(best);
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Variant plans
// ---------------------------------------------------------------------------

TermPlan term_plan(const VariantSpec& spec, bool supervised_branch) {
  TermPlan p;
  switch (spec.name) {
    case VariantName::no_adaptation:
      p.m_t_source = true;
      break;
    case VariantName::target_only:
      p.m_t_real = true;
      break;
    case VariantName::source_plus_target:
      p.m_t_real = true;
      p.m_t_source = true;
      break;
    case VariantName::s2t_only:
      p.adv_t = true;
      p.task_g_st = true;
      p.m_t_real = true;
      p.m_t_mapped = true;
      break;
    case VariantName::one_cycle_sts:
      p.adv_t = true;
      p.cyc_sts = true;
      p.m_s_real = true;
      p.m_t_real = true;
      p.m_t_mapped = true;
      break;
    case VariantName::one_cycle_tst:
      p.adv_s = true;
      p.cyc_tst = true;
      p.m_s_real = true;
      p.m_s_mapped = true;
      p.m_t_real = true;
      break;
    case VariantName::rcal_one_cycle_sts:
      p.adv_t = true;
      p.rcyc_sts = true;
      p.m_s_real = true;
      p.m_t_real = true;
      p.m_t_mapped = true;
      break;
    case VariantName::rcal_one_cycle_tst:
      p.adv_s = true;
      p.rcyc_tst = true;
      p.m_s_real = true;
      p.m_s_mapped = true;
      p.m_t_real = true;
      break;
    case VariantName::acal_one_cycle_sts:
      p.adv_t = true;
      p.rcyc_sts = true;
      p.task_g_st = true;
      p.m_s_real = true;
      p.m_t_real = true;
      p.m_t_mapped = true;
      break;
    case VariantName::acal_one_cycle_tst:
      p.adv_s = true;
      p.rcyc_tst = true;
      p.task_g_ts = true;
      p.m_s_real = true;
      p.m_s_mapped = true;
      p.m_t_real = true;
      break;
    case VariantName::cyclegan:
      p.adv_s = p.adv_t = true;
      p.cyc_sts = p.cyc_tst = true;
      p.m_s_real = p.m_s_mapped = true;
      p.m_t_real = p.m_t_mapped = true;
      break;
    case VariantName::rcal:
      p.adv_s = p.adv_t = true;
      p.rcyc_sts = p.rcyc_tst = true;
      p.m_s_real = p.m_s_mapped = true;
      p.m_t_real = p.m_t_mapped = true;
      break;
    case VariantName::acal:
      p.adv_s = p.adv_t = true;
      p.rcyc_sts = p.rcyc_tst = true;
      p.task_g_st = p.task_g_ts = true;
      p.m_s_real = p.m_s_mapped = true;
      p.m_t_real = p.m_t_mapped = true;
      break;
  }
  if (!supervised_branch) {
    // No real target labels: the source model touches only real source
    // pairs, the target model pseudo-labels its real-data term, and
    // feedback through mapped target samples is dropped.
    p.m_s_mapped = false;
    p.task_g_ts = false;
    p.pseudo_target_labels = true;
  }
  return p;
}

std::vector<std::string> active_terms(const VariantSpec& spec, bool supervised_branch) {
  const TermPlan p = term_plan(spec, supervised_branch);
  std::vector<std::string> keys;
  if (p.adv_s) keys.push_back("adv_d_s");
  if (p.adv_t) keys.push_back("adv_d_t");
  if (p.adv_t) keys.push_back("adv_g_st");
  if (p.adv_s) keys.push_back("adv_g_ts");
  if (p.cyc_sts) keys.push_back("cyc_sts");
  if (p.cyc_tst) keys.push_back("cyc_tst");
  if (p.rcyc_sts) keys.push_back("rcyc_sts");
  if (p.rcyc_tst) keys.push_back("rcyc_tst");
  if (p.task_g_st) keys.push_back("task_g_st");
  if (p.task_g_ts) keys.push_back("task_g_ts");
  if (p.m_s_real) keys.push_back("task_m_s_real");
  if (p.m_s_mapped) keys.push_back("task_m_s_mapped");
  if (p.m_t_real) {
    keys.push_back(p.pseudo_target_labels ? "task_m_t_pseudo" : "task_m_t_real");
  }
  if (p.m_t_mapped) keys.push_back("task_m_t_mapped");
  if (p.m_t_source) keys.push_back("task_m_t_source");
  return keys;
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

namespace {

bool resolve_supervised_branch(const VariantSpec& spec, const Batch& batch_t) {
  switch (spec.supervision) {
    case SupervisionMode::supervised:
      return true;
    case SupervisionMode::unsupervised:
      return false;
    case SupervisionMode::semi: {
      if (batch_t.fully_labeled()) return true;
      bool any = false;
      for (const auto& l : batch_t.labels) any = any || l.has_value();
      if (any) {
        throw ConfigError(
            "semi-supervised batch mixes labeled and unlabeled items; draw the "
            "batch from one branch pool (strict per-item mode splits it upstream)");
      }
      return false;
    }
  }
  return true;
}

void require_net(const Network* net, const char* slot, const VariantSpec& spec) {
  if (!net) {
    throw ConfigError("variant '" + variant_str(spec.name) + "' requires network " + slot);
  }
}

void validate_plan(const VariantSpec& spec, const TermPlan& p, const Batch& batch_s,
                   const Batch& batch_t, const Nets& nets, bool supervised_branch) {
  if (!supervised_branch && !variant_supports_unsupervised(spec.name)) {
    throw ConfigError("variant '" + variant_str(spec.name) +
                      "' requires target labels; only 'acal' defines an unsupervised "
                      "objective");
  }
  if (p.adv_t || p.cyc_sts || p.rcyc_sts || p.task_g_st || p.m_t_mapped) {
    require_net(nets.g_st, "g_st", spec);
  }
  if (p.adv_s || p.cyc_sts || p.cyc_tst || p.rcyc_sts || p.rcyc_tst || p.m_s_mapped ||
      p.pseudo_target_labels) {
    require_net(nets.g_ts, "g_ts", spec);
  }
  if (p.adv_s) require_net(nets.d_s, "d_s", spec);
  if (p.adv_t) require_net(nets.d_t, "d_t", spec);
  if (p.rcyc_sts || p.m_s_real || p.m_s_mapped || p.task_g_ts || p.pseudo_target_labels) {
    require_net(nets.m_s, "m_s", spec);
  }
  if (p.rcyc_tst || p.task_g_st || p.any_m_t_term()) require_net(nets.m_t, "m_t", spec);

  const bool needs_source_labels = p.m_s_real || p.m_t_mapped || p.m_t_source ||
                                   p.rcyc_sts || p.task_g_st;
  if (needs_source_labels && !batch_s.fully_labeled()) {
    throw ConfigError("variant '" + variant_str(spec.name) +
                      "' requires source labels, but the source batch has unlabeled items");
  }
  const bool needs_target_labels =
      supervised_branch && (p.m_t_real || p.m_s_mapped || p.rcyc_tst || p.task_g_ts);
  if (needs_target_labels && !batch_t.fully_labeled()) {
    throw ConfigError("variant '" + variant_str(spec.name) +
                      "' requires target labels, but the target batch has unlabeled items");
  }
}

ForwardCtx fwd_ctx(const ComposeCtx& ctx, const char* tag) {
  return {ctx.train, rng::derive(ctx.seed, tag)};
}

// Target-side labels for the branch: real labels on the supervised branch,
// pseudo-labels from the source classifier otherwise.
std::vector<int> target_labels(const TermPlan& p, const VariantSpec& spec,
                               const Batch& batch_t, const Nets& nets) {
  if (!p.pseudo_target_labels) {
    return batch_t.labels_or_throw("variant '" + variant_str(spec.name) + "'");
  }
  return pseudo_label(*nets.m_s, *nets.g_ts, batch_t.images);
}

}  // namespace

DiscriminatorLosses build_discriminator_losses(const VariantSpec& spec,
                                               const Batch& batch_s, const Batch& batch_t,
                                               const Nets& nets, const ComposeCtx& ctx) {
  const bool sup = resolve_supervised_branch(spec, batch_t);
  const TermPlan p = term_plan(spec, sup);
  validate_plan(spec, p, batch_s, batch_t, nets, sup);

  DiscriminatorLosses out;
  if (p.adv_t) {
    const Tensor fake = forward(nets.g_st->detached(), batch_s.images.detach());
    const Tensor d_real = forward(*nets.d_t, batch_t.images.detach());
    const Tensor d_fake = forward(*nets.d_t, fake);
    out.d_t = adv_d_loss(d_real, d_fake, &out.clamp_events);
    out.diagnostics["adv_d_t"] = out.d_t->item();
  }
  if (p.adv_s) {
    const Tensor fake = forward(nets.g_ts->detached(), batch_t.images.detach());
    const Tensor d_real = forward(*nets.d_s, batch_s.images.detach());
    const Tensor d_fake = forward(*nets.d_s, fake);
    out.d_s = adv_d_loss(d_real, d_fake, &out.clamp_events);
    out.diagnostics["adv_d_s"] = out.d_s->item();
  }
  return out;
}

GeneratorLoss build_generator_loss(const VariantSpec& spec, const Batch& batch_s,
                                   const Batch& batch_t, const Nets& nets,
                                   const ComposeCtx& ctx) {
  const bool sup = resolve_supervised_branch(spec, batch_t);
  const TermPlan p = term_plan(spec, sup);
  validate_plan(spec, p, batch_s, batch_t, nets, sup);

  GeneratorLoss out;
  if (!p.any_g_term()) return out;

  Tensor total;
  auto add_term = [&](const Tensor& t, double w, const char* key) {
    out.diagnostics[key] = t.item();
    const Tensor weighted = w == 1.0 ? t : scale(t, w);
    total = total.defined() ? add(total, weighted) : weighted;
  };

  const bool need_st = p.adv_t || p.cyc_sts || p.rcyc_sts || p.task_g_st;
  const bool need_ts = p.adv_s || p.cyc_tst || p.rcyc_tst || p.task_g_ts;
  Tensor x_st, x_ts, x_sts, x_tst;
  if (need_st) x_st = forward(*nets.g_st, batch_s.images);
  if (need_ts) x_ts = forward(*nets.g_ts, batch_t.images);
  if (p.cyc_sts || p.rcyc_sts) x_sts = forward(*nets.g_ts, x_st);
  if (p.cyc_tst || p.rcyc_tst) x_tst = forward(*nets.g_st, x_ts);

  std::vector<int> y_s, y_t;
  if (p.rcyc_sts || p.task_g_st) {
    y_s = batch_s.labels_or_throw("variant '" + variant_str(spec.name) + "'");
  }
  if (p.rcyc_tst || p.task_g_ts) y_t = target_labels(p, spec, batch_t, nets);

  if (p.adv_t) {
    add_term(adv_g_loss(forward(*nets.d_t, x_st), spec.saturating_g_loss,
                        &out.clamp_events),
             spec.adv_w, "adv_g_st");
  }
  if (p.adv_s) {
    add_term(adv_g_loss(forward(*nets.d_s, x_ts), spec.saturating_g_loss,
                        &out.clamp_events),
             spec.adv_w, "adv_g_ts");
  }
  if (p.cyc_sts) add_term(recon_cycle_loss(batch_s.images, x_sts), spec.cyc_w, "cyc_sts");
  if (p.cyc_tst) add_term(recon_cycle_loss(batch_t.images, x_tst), spec.cyc_w, "cyc_tst");
  if (p.rcyc_sts) {
    add_term(relaxed_cycle_loss(*nets.m_s, x_sts, y_s, fwd_ctx(ctx, "rcyc_sts")),
             spec.task_w, "rcyc_sts");
  }
  if (p.rcyc_tst) {
    add_term(relaxed_cycle_loss(*nets.m_t, x_tst, y_t, fwd_ctx(ctx, "rcyc_tst")),
             spec.task_w, "rcyc_tst");
  }
  if (p.task_g_st) {
    add_term(task_term_frozen_m(*nets.m_t, x_st, y_s, fwd_ctx(ctx, "task_g_st")),
             spec.task_w, "task_g_st");
  }
  if (p.task_g_ts) {
    add_term(task_term_frozen_m(*nets.m_s, x_ts, y_t, fwd_ctx(ctx, "task_g_ts")),
             spec.task_w, "task_g_ts");
  }
  out.loss = total;
  return out;
}

TaskLosses build_task_losses(const VariantSpec& spec, const Batch& batch_s,
                             const Batch& batch_t, const Nets& nets,
                             const ComposeCtx& ctx) {
  const bool sup = resolve_supervised_branch(spec, batch_t);
  const TermPlan p = term_plan(spec, sup);
  validate_plan(spec, p, batch_s, batch_t, nets, sup);

  TaskLosses out;
  std::vector<int> y_s;
  if (p.m_s_real || p.m_t_mapped || p.m_t_source) {
    y_s = batch_s.labels_or_throw("variant '" + variant_str(spec.name) + "'");
  }

  if (p.any_m_s_term()) {
    Tensor m_s_loss;
    auto add_term = [&](const Tensor& t, const char* key) {
      out.diagnostics[key] = t.item();
      m_s_loss = m_s_loss.defined() ? add(m_s_loss, t) : t;
    };
    if (p.m_s_real) {
      add_term(task_term_frozen_x(*nets.m_s, batch_s.images, y_s,
                                  fwd_ctx(ctx, "task_m_s_real")),
               "task_m_s_real");
    }
    if (p.m_s_mapped) {
      const std::vector<int> y_t =
          batch_t.labels_or_throw("variant '" + variant_str(spec.name) + "'");
      const Tensor x_ts = forward(nets.g_ts->detached(), batch_t.images.detach());
      add_term(task_term_frozen_x(*nets.m_s, x_ts, y_t, fwd_ctx(ctx, "task_m_s_mapped")),
               "task_m_s_mapped");
    }
    out.m_s = m_s_loss;
  }

  if (p.any_m_t_term()) {
    Tensor m_t_loss;
    auto add_term = [&](const Tensor& t, const char* key) {
      out.diagnostics[key] = t.item();
      m_t_loss = m_t_loss.defined() ? add(m_t_loss, t) : t;
    };
    if (p.m_t_real) {
      if (p.pseudo_target_labels) {
        const std::vector<int> y_hat = pseudo_label(*nets.m_s, *nets.g_ts, batch_t.images);
        add_term(task_term_frozen_x(*nets.m_t, batch_t.images, y_hat,
                                    fwd_ctx(ctx, "task_m_t_pseudo")),
                 "task_m_t_pseudo");
      } else {
        const std::vector<int> y_t =
            batch_t.labels_or_throw("variant '" + variant_str(spec.name) + "'");
        add_term(task_term_frozen_x(*nets.m_t, batch_t.images, y_t,
                                    fwd_ctx(ctx, "task_m_t_real")),
                 "task_m_t_real");
      }
    }
    if (p.m_t_mapped) {
      const Tensor x_st = forward(nets.g_st->detached(), batch_s.images.detach());
      add_term(task_term_frozen_x(*nets.m_t, x_st, y_s, fwd_ctx(ctx, "task_m_t_mapped")),
               "task_m_t_mapped");
    }
    if (p.m_t_source) {
      add_term(task_term_frozen_x(*nets.m_t, batch_s.images, y_s,
                                  fwd_ctx(ctx, "task_m_t_source")),
               "task_m_t_source");
    }
    out.m_t = m_t_loss;
  }
  return out;
}

LossBundle compose_variant(const VariantSpec& spec, const Batch& batch_s,
                           const Batch& batch_t, const Nets& nets, const ComposeCtx& ctx) {
  LossBundle bundle;
  DiscriminatorLosses d = build_discriminator_losses(spec, batch_s, batch_t, nets, ctx);
  GeneratorLoss g = build_generator_loss(spec, batch_s, batch_t, nets, ctx);
  TaskLosses m = build_task_losses(spec, batch_s, batch_t, nets, ctx);

  bundle.d_s_loss = d.d_s;
  bundle.d_t_loss = d.d_t;
  bundle.g_loss = g.loss;
  bundle.m_s_loss = m.m_s;
  bundle.m_t_loss = m.m_t;
  bundle.clamp_events = d.clamp_events + g.clamp_events;
  for (const auto& [k, v] : d.diagnostics) bundle.diagnostics[k] = v;
  for (const auto& [k, v] : g.diagnostics) bundle.diagnostics[k] = v;
  for (const auto& [k, v] : m.diagnostics) bundle.diagnostics[k] = v;
  return bundle;
}

}  // namespace acal
