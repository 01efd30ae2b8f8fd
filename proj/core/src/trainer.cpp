#include "acal/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>

#include "acal/evalsuite.hpp"
#include "acal/rng.hpp"
#include "binio.hpp"
#include "json.hpp"
#include "nets_io.hpp"

namespace acal {

std::string optimizer_str(OptimizerKind kind) {
  return kind == OptimizerKind::sgd ? "sgd" : "adam";
}

OptimizerKind optimizer_from_string(const std::string& kind) {
  if (kind == "sgd") return OptimizerKind::sgd;
  if (kind == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + kind + "'");
}

std::string phase_str(Phase phase) {
  switch (phase) {
    case Phase::discriminator: return "discriminator";
    case Phase::generator: return "generator";
    case Phase::task: return "task";
  }
  return "?";
}

Branch select_branch(const std::optional<int>& target_label) {
  return target_label.has_value() ? Branch::supervised : Branch::unsupervised;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

std::pair<std::map<std::string, Tensor>, OptMoments> optimizer_step(
    const std::map<std::string, Tensor>& params, const GradientMap& grads,
    OptMoments moments, const OptimizerConfig& cfg, double lr) {
  if (!(lr > 0.0)) throw ConfigError("optimizer_step: learning rate must be positive");
  std::map<std::string, Tensor> out;
  moments.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(moments.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(moments.t));
  for (const auto& [name, p] : params) {
    const std::optional<Tensor> g = grads.find(p);
    if (!g) {
      out[name] = p;
      continue;
    }
    if (g->shape() != p.shape()) {
      throw ShapeError("optimizer_step: gradient shape " + shape_str(g->shape()) +
                       " does not match parameter " + name + " " + shape_str(p.shape()));
    }
    const std::size_t n = p.size();
    std::vector<double> next(n);
    if (cfg.kind == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < n; ++i) next[i] = p.at(i) - lr * g->at(i);
    } else {
      auto mit = moments.m.find(name);
      auto vit = moments.v.find(name);
      std::vector<double> m(n, 0.0), v(n, 0.0);
      if (mit != moments.m.end()) {
        m.assign(mit->second.values().begin(), mit->second.values().end());
      }
      if (vit != moments.v.end()) {
        v.assign(vit->second.values().begin(), vit->second.values().end());
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = g->at(i);
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        next[i] = p.at(i) - lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
      }
      moments.m[name] = Tensor::from(p.shape(), std::move(m));
      moments.v[name] = Tensor::from(p.shape(), std::move(v));
    }
    out[name] = Tensor::param(p.shape(), std::move(next));
  }
  return {std::move(out), std::move(moments)};
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

std::string metric_record_jsonl(const MetricRecord& rec) {
  nlohmann::json j;
  j["step"] = rec.step;
  j["terms"] = rec.terms;
  j["clamp_events"] = rec.clamp_events;
  j["target_val_acc"] =
      rec.target_val_acc ? nlohmann::json(*rec.target_val_acc) : nlohmann::json(nullptr);
  j["source_val_acc"] =
      rec.source_val_acc ? nlohmann::json(*rec.source_val_acc) : nlohmann::json(nullptr);
  return j.dump();
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

namespace {

struct BranchPart {
  Batch batch;
  VariantSpec spec;
  double weight = 1.0;
};

Batch sub_batch(const Batch& batch, const std::vector<std::size_t>& idx) {
  const Shape& full = batch.images.shape();
  const std::size_t elems = shape_size(Shape(full.begin() + 1, full.end()));
  std::vector<double> data(idx.size() * elems);
  Batch out;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src = batch.images.values().subspan(idx[i] * elems, elems);
    std::copy(src.begin(), src.end(), data.begin() + i * elems);
    out.labels.push_back(batch.labels[idx[i]]);
  }
  Shape shape{idx.size()};
  shape.insert(shape.end(), full.begin() + 1, full.end());
  out.images = Tensor::from(std::move(shape), std::move(data));
  return out;
}

std::vector<BranchPart> branch_parts(const VariantSpec& spec, const Batch& batch_t,
                                     bool strict) {
  if (spec.supervision != SupervisionMode::semi || !strict) {
    return {{batch_t, spec, 1.0}};
  }
  std::vector<std::size_t> labeled, unlabeled;
  for (std::size_t i = 0; i < batch_t.labels.size(); ++i) {
    (select_branch(batch_t.labels[i]) == Branch::supervised ? labeled : unlabeled)
        .push_back(i);
  }
  const double n = static_cast<double>(batch_t.labels.size());
  std::vector<BranchPart> parts;
  if (!labeled.empty()) {
    VariantSpec sup = spec;
    sup.supervision = SupervisionMode::supervised;
    parts.push_back({sub_batch(batch_t, labeled), sup, labeled.size() / n});
  }
  if (!unlabeled.empty()) {
    VariantSpec unsup = spec;
    unsup.supervision = SupervisionMode::unsupervised;
    parts.push_back({sub_batch(batch_t, unlabeled), unsup, unlabeled.size() / n});
  }
  return parts;
}

void update_net(TrainState& st, Network& net, const std::string& slot,
                const GradientMap& grads, double lr, const OptimizerConfig& cfg) {
  for (const auto& [name, param] : net.params) {
    const std::optional<Tensor> g = grads.find(param);
    if (!g) continue;
    for (double v : g->values()) {
      if (!std::isfinite(v)) {
        throw NumericError("non-finite gradient for " + slot + "/" + name + " at step " +
                           std::to_string(st.step));
      }
    }
  }
  auto [params, mom] = optimizer_step(net.params, grads, std::move(st.moments[slot]), cfg, lr);
  net.params = std::move(params);
  st.moments[slot] = std::move(mom);
}

void ensure_finite(const std::map<std::string, double>& diag, int step) {
  for (const auto& [key, value] : diag) {
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss term '" + key + "' at step " +
                         std::to_string(step));
    }
  }
}

Tensor weighted_accumulate(Tensor total, const Tensor& term, double w) {
  const Tensor scaled = w == 1.0 ? term : scale(term, w);
  return total.defined() ? add(total, scaled) : scaled;
}

MetricRecord step_in_place(TrainState& st, const Batch& batch_s, const Batch& batch_t,
                           const TrainConfig& cfg, const PhaseObserver& observer) {
  MetricRecord rec;
  rec.step = st.step;
  const std::uint64_t step_seed =
      rng::derive(cfg.seed, "step", static_cast<std::uint64_t>(st.step));
  const auto parts = branch_parts(cfg.variant, batch_t, cfg.strict_branching);
  const bool gan = variant_uses_adversarial(cfg.variant.name);

  auto merge_terms = [&rec](const std::map<std::string, double>& diag, double w) {
    for (const auto& [k, v] : diag) rec.terms[k] += w * v;
  };

  // Phase 1: discriminators; generators provide detached fakes only.
  if (gan) {
    for (int k = 0; k < cfg.d_steps_per_g_step; ++k) {
      Tensor d_s_total, d_t_total;
      std::map<std::string, double> diag;
      std::size_t clamps = 0;
      for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const ComposeCtx cctx{true, rng::derive(step_seed, "d-phase",
                                                static_cast<std::uint64_t>(k), pi)};
        auto d = build_discriminator_losses(parts[pi].spec, batch_s, parts[pi].batch,
                                            st.nets(), cctx);
        if (d.d_s) d_s_total = weighted_accumulate(d_s_total, *d.d_s, parts[pi].weight);
        if (d.d_t) d_t_total = weighted_accumulate(d_t_total, *d.d_t, parts[pi].weight);
        for (const auto& [key, v] : d.diagnostics) diag[key] += parts[pi].weight * v;
        clamps += d.clamp_events;
      }
      ensure_finite(diag, st.step);
      if (k + 1 == cfg.d_steps_per_g_step) {
        merge_terms(diag, 1.0);
        rec.clamp_events += clamps;
      }
      if (d_t_total.defined()) {
        update_net(st, st.d_t, "d_t", backward(d_t_total), cfg.lr_d, cfg.optimizer);
      }
      if (d_s_total.defined()) {
        update_net(st, st.d_s, "d_s", backward(d_s_total), cfg.lr_d, cfg.optimizer);
      }
    }
  }
  if (observer) observer(Phase::discriminator, st);

  // Phase 2: generators; discriminator and task-model parameters receive no
  // updates from this loss.
  if (gan) {
    Tensor g_total;
    std::map<std::string, double> diag;
    std::size_t clamps = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const ComposeCtx cctx{true, rng::derive(step_seed, "g-phase", pi)};
      auto g = build_generator_loss(parts[pi].spec, batch_s, parts[pi].batch, st.nets(),
                                    cctx);
      if (g.loss) g_total = weighted_accumulate(g_total, *g.loss, parts[pi].weight);
      for (const auto& [key, v] : g.diagnostics) diag[key] += parts[pi].weight * v;
      clamps += g.clamp_events;
    }
    ensure_finite(diag, st.step);
    merge_terms(diag, 1.0);
    rec.clamp_events += clamps;
    if (g_total.defined()) {
      const GradientMap grads = backward(g_total);
      update_net(st, st.g_st, "g_st", grads, cfg.lr_g, cfg.optimizer);
      update_net(st, st.g_ts, "g_ts", grads, cfg.lr_g, cfg.optimizer);
    }
  }
  if (observer) observer(Phase::generator, st);

  // Phase 3: task models on the branch each part implies.
  {
    Tensor m_s_total, m_t_total;
    std::map<std::string, double> diag;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const ComposeCtx cctx{true, rng::derive(step_seed, "m-phase", pi)};
      auto m = build_task_losses(parts[pi].spec, batch_s, parts[pi].batch, st.nets(), cctx);
      if (m.m_s) m_s_total = weighted_accumulate(m_s_total, *m.m_s, parts[pi].weight);
      if (m.m_t) m_t_total = weighted_accumulate(m_t_total, *m.m_t, parts[pi].weight);
      for (const auto& [key, v] : m.diagnostics) diag[key] += parts[pi].weight * v;
    }
    ensure_finite(diag, st.step);
    merge_terms(diag, 1.0);
    if (m_s_total.defined() && !cfg.freeze_source_model) {
      update_net(st, st.m_s, "m_s", backward(m_s_total),
                 cfg.lr_m * cfg.source_finetune_lr_scale, cfg.optimizer);
    }
    if (m_t_total.defined()) {
      update_net(st, st.m_t, "m_t", backward(m_t_total), cfg.lr_m, cfg.optimizer);
    }
  }
  if (observer) observer(Phase::task, st);

  st.step += 1;
  return rec;
}

}  // namespace

std::pair<TrainState, MetricRecord> train_step(const TrainState& state,
                                               const Batch& batch_s, const Batch& batch_t,
                                               const TrainConfig& cfg,
                                               const PhaseObserver& observer) {
  TrainState next = state;
  MetricRecord rec = step_in_place(next, batch_s, batch_t, cfg, observer);
  return {std::move(next), std::move(rec)};
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

Network pretrain_source(const Network& m_s, const DomainDataset& source,
                        const PretrainConfig& cfg) {
  if (m_s.role != Role::classifier) {
    throw ContractError("pretrain_source expects a classifier network");
  }
  if (source.labeled_count() != source.size() || source.size() == 0) {
    throw ConfigError("pretrain_source: source dataset must be fully labeled");
  }
  const std::size_t bs = std::min<std::size_t>(cfg.batch_size, source.size());
  Network net = m_s;
  OptMoments mom;
  std::vector<std::vector<std::size_t>> epoch_batches;
  std::size_t epoch = 0, bpe = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    if (bpe == 0 || static_cast<std::size_t>(step) / bpe != epoch ||
        epoch_batches.empty()) {
      epoch = bpe == 0 ? 0 : static_cast<std::size_t>(step) / bpe;
      epoch_batches = batch_iter(source, bs, rng::derive(cfg.seed, "pretrain-data"), epoch);
      bpe = epoch_batches.size();
    }
    const Batch batch = make_batch(source, epoch_batches[step % bpe]);
    const ForwardCtx fctx{true, rng::derive(cfg.seed, "pretrain-dropout",
                                            static_cast<std::uint64_t>(step))};
    const Tensor loss = softmax_cross_entropy(forward(net, batch.images, fctx),
                                              batch.labels_or_throw("pretrain_source"));
    if (!std::isfinite(loss.item())) {
      throw NumericError("non-finite pretraining loss at step " + std::to_string(step));
    }
    auto [params, next_mom] =
        optimizer_step(net.params, backward(loss), std::move(mom), cfg.optimizer, cfg.lr);
    net.params = std::move(params);
    mom = std::move(next_mom);
  }
  return net;
}

// ---------------------------------------------------------------------------
// Full runs
// ---------------------------------------------------------------------------

TrainState init_train_state(const TrainConfig& cfg, const Shape& image_shape,
                            int num_classes,
                            const std::optional<Network>& pretrained_m_s) {
  TrainState st;
  st.seed = cfg.seed;
  st.g_st = build_generator(image_shape, {rng::derive(cfg.seed, "init-g_st"), {}, 1.0});
  st.g_ts = build_generator(image_shape, {rng::derive(cfg.seed, "init-g_ts"), {}, 1.0});
  st.d_s = build_discriminator(image_shape, {rng::derive(cfg.seed, "init-d_s"), {}, 1.0});
  st.d_t = build_discriminator(image_shape, {rng::derive(cfg.seed, "init-d_t"), {}, 1.0});
  st.m_t =
      build_classifier(image_shape, num_classes, {rng::derive(cfg.seed, "init-m_t"), {}, 1.0});
  if (pretrained_m_s) {
    if (pretrained_m_s->role != Role::classifier) {
      throw ContractError("pretrained source model must be a classifier");
    }
    st.m_s = *pretrained_m_s;
  } else {
    st.m_s = build_classifier(image_shape, num_classes,
                              {rng::derive(cfg.seed, "init-m_s"), {}, 1.0});
  }
  return st;
}

namespace {

// Deterministic per-pool batch cursor; order is a pure function of
// (seed, tag, epoch), which makes resumed runs land on identical batches.
struct PoolCursor {
  std::vector<std::size_t> pool;
  std::string tag;
  std::size_t batch_size = 0;
  std::vector<std::vector<std::size_t>> epoch_batches;
  std::size_t epoch = 0;
  bool primed = false;

  std::vector<std::size_t> batch_for(std::uint64_t seed, std::size_t step) {
    const std::size_t bpe = (pool.size() + batch_size - 1) / batch_size;
    const std::size_t want_epoch = step / bpe;
    if (!primed || want_epoch != epoch) {
      epoch = want_epoch;
      primed = true;
      std::vector<std::size_t> order = pool;
      rng::Stream s(rng::derive(seed, tag, epoch));
      rng::shuffle(order, s);
      epoch_batches.clear();
      for (std::size_t at = 0; at < order.size(); at += batch_size) {
        const std::size_t end = std::min(order.size(), at + batch_size);
        epoch_batches.emplace_back(order.begin() + at, order.begin() + end);
      }
    }
    return epoch_batches[step % epoch_batches.size()];
  }
};

Batch strip_batch_labels(Batch batch) {
  for (auto& l : batch.labels) l = std::nullopt;
  return batch;
}

}  // namespace

RunResult run_training(const TrainConfig& cfg, const DomainPair& data,
                       const std::optional<Network>& pretrained_m_s,
                       std::ostream* metrics_out, const PhaseObserver& observer,
                       std::optional<TrainState> resume_from) {
  const VariantSpec& spec = cfg.variant;
  if (spec.supervision != SupervisionMode::supervised &&
      !variant_supports_unsupervised(spec.name)) {
    throw ConfigError("variant '" + variant_str(spec.name) +
                      "' defines no unsupervised objective; target labels are required");
  }
  if (variant_needs_pretrained_source(spec.name) && !pretrained_m_s && !resume_from) {
    throw ConfigError("variant '" + variant_str(spec.name) +
                      "' requires a pretrained source classifier");
  }

  std::vector<std::size_t> labeled_idx, unlabeled_idx;
  for (std::size_t i = 0; i < data.tgt_train.size(); ++i) {
    (data.tgt_train.labels[i] ? labeled_idx : unlabeled_idx).push_back(i);
  }
  if (spec.supervision == SupervisionMode::supervised && labeled_idx.empty()) {
    throw ConfigError("variant '" + variant_str(spec.name) +
                      "' is supervised but the target training set has no labels");
  }

  const auto t0 = std::chrono::steady_clock::now();
  TrainState st = resume_from ? std::move(*resume_from)
                              : init_train_state(cfg, data.src_train.image_shape,
                                                 data.src_train.class_count,
                                                 pretrained_m_s);

  PoolCursor src_cursor{.pool = {}, .tag = "src-order"};
  src_cursor.pool.resize(data.src_train.size());
  for (std::size_t i = 0; i < src_cursor.pool.size(); ++i) src_cursor.pool[i] = i;
  src_cursor.batch_size = std::min<std::size_t>(cfg.batch_size, src_cursor.pool.size());

  auto make_cursor = [&](std::vector<std::size_t> pool, const char* tag) {
    PoolCursor c{.pool = std::move(pool), .tag = tag};
    c.batch_size = std::min<std::size_t>(cfg.batch_size, c.pool.size());
    return c;
  };
  std::vector<std::size_t> all_idx(data.tgt_train.size());
  for (std::size_t i = 0; i < all_idx.size(); ++i) all_idx[i] = i;
  PoolCursor tgt_labeled = make_cursor(labeled_idx, "tgt-labeled-order");
  PoolCursor tgt_unlabeled = make_cursor(unlabeled_idx, "tgt-unlabeled-order");
  PoolCursor tgt_all = make_cursor(all_idx, "tgt-all-order");

  const double labeled_fraction =
      data.tgt_train.size() == 0
          ? 0.0
          : static_cast<double>(labeled_idx.size()) / data.tgt_train.size();

  while (st.step < cfg.steps) {
    const std::size_t step = static_cast<std::size_t>(st.step);
    const Batch batch_s = make_batch(data.src_train, src_cursor.batch_for(cfg.seed, step));

    Batch batch_t;
    switch (spec.supervision) {
      case SupervisionMode::supervised:
        batch_t = make_batch(data.tgt_train, tgt_labeled.batch_for(cfg.seed, step));
        break;
      case SupervisionMode::unsupervised:
        batch_t = strip_batch_labels(
            make_batch(data.tgt_train, tgt_all.batch_for(cfg.seed, step)));
        break;
      case SupervisionMode::semi: {
        if (cfg.strict_branching) {
          batch_t = make_batch(data.tgt_train, tgt_all.batch_for(cfg.seed, step));
          break;
        }
        rng::Stream s(rng::derive(cfg.seed, "branch", step));
        const bool sup_draw = s.bernoulli(labeled_fraction);
        if (sup_draw && !labeled_idx.empty()) {
          batch_t = make_batch(data.tgt_train, tgt_labeled.batch_for(cfg.seed, step));
        } else if (!unlabeled_idx.empty()) {
          batch_t = strip_batch_labels(
              make_batch(data.tgt_train, tgt_unlabeled.batch_for(cfg.seed, step)));
        } else {
          batch_t = make_batch(data.tgt_train, tgt_labeled.batch_for(cfg.seed, step));
        }
        break;
      }
    }

    MetricRecord rec = step_in_place(st, batch_s, batch_t, cfg, observer);

    const bool last = st.step == cfg.steps;
    const bool eval_now = (cfg.eval_every > 0 && st.step % cfg.eval_every == 0) || last;
    if (eval_now) {
      rec.target_val_acc = accuracy(st.m_t, data.tgt_val);
      rec.source_val_acc = accuracy(st.m_s, data.src_val);
      if (*rec.target_val_acc > st.best_val_acc) {
        st.best_val_acc = *rec.target_val_acc;
        st.best_step = st.step;
        st.best_m_t_params = st.m_t.params;
      }
    }
    st.history.push_back(rec);
    if (metrics_out) *metrics_out << metric_record_jsonl(rec) << '\n';
  }

  RunResult result;
  result.row.variant = variant_str(spec.name);
  result.row.seed = cfg.seed;
  result.row.final_acc = accuracy(st.m_t, data.tgt_test);
  result.row.best_acc = st.best_m_t_params.empty()
                            ? result.row.final_acc
                            : accuracy(st.m_t.with_params(st.best_m_t_params),
                                       data.tgt_test);
  result.row.wall_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  result.state = std::move(st);
  return result;
}

// ---------------------------------------------------------------------------
// State persistence
// ---------------------------------------------------------------------------

namespace {

constexpr char kStateMagic[4] = {'A', 'C', 'S', 'T'};
constexpr std::uint8_t kStateVersion = 1;

void write_named_tensors(binio::ByteWriter& w, const std::map<std::string, Tensor>& ts) {
  w.u32(static_cast<std::uint32_t>(ts.size()));
  for (const auto& [name, t] : ts) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : t.values()) w.f64(v);
  }
}

std::map<std::string, Tensor> read_named_tensors(binio::ByteReader& r, bool as_params) {
  const std::uint32_t count = r.u32();
  if (count > 65536) throw ParseError("implausible tensor count", r.pos - 4);
  std::map<std::string, Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const std::uint8_t rank = r.u8();
    if (rank > 8) throw ParseError("implausible tensor rank", r.pos - 1);
    Shape shape;
    std::size_t n = 1;
    for (int k = 0; k < rank; ++k) {
      const std::uint32_t e = r.u32();
      if (e == 0 || e > (1u << 24)) throw ParseError("implausible extent", r.pos - 4);
      shape.push_back(e);
      n *= e;
    }
    std::vector<double> values(n);
    for (std::size_t k = 0; k < n; ++k) values[k] = r.f64();
    out[name] = as_params ? Tensor::param(std::move(shape), std::move(values))
                          : Tensor::from(std::move(shape), std::move(values));
  }
  return out;
}

}  // namespace

void save_state(const TrainState& state, const std::filesystem::path& path) {
  binio::ByteWriter w;
  w.raw(kStateMagic, 4);
  w.u8(kStateVersion);
  w.i32(state.step);
  w.u64(state.seed);
  w.f64(state.best_val_acc);
  w.i32(state.best_step);
  for (const Network* net :
       {&state.g_st, &state.g_ts, &state.d_s, &state.d_t, &state.m_s, &state.m_t}) {
    net_io::write_network(w, *net);
  }
  w.u32(static_cast<std::uint32_t>(state.moments.size()));
  for (const auto& [slot, mom] : state.moments) {
    w.str(slot);
    w.i64(mom.t);
    write_named_tensors(w, mom.m);
    write_named_tensors(w, mom.v);
  }
  write_named_tensors(w, state.best_m_t_params);
  w.u32(static_cast<std::uint32_t>(state.history.size()));
  for (const MetricRecord& rec : state.history) {
    w.i32(rec.step);
    w.u32(static_cast<std::uint32_t>(rec.terms.size()));
    for (const auto& [k, v] : rec.terms) {
      w.str(k);
      w.f64(v);
    }
    w.u64(rec.clamp_events);
    w.u8(rec.target_val_acc ? 1 : 0);
    w.f64(rec.target_val_acc.value_or(0.0));
    w.u8(rec.source_val_acc ? 1 : 0);
    w.f64(rec.source_val_acc.value_or(0.0));
  }
  w.u64(rng::fnv1a64(w.bytes.data(), w.bytes.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(w.bytes.data()),
            static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

TrainState load_state(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 13) throw ParseError("file too short for a train state", bytes.size());
  if (std::memcmp(bytes.data(), kStateMagic, 4) != 0) throw ParseError("bad magic", 0);
  const std::uint64_t stored = [&] {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
    return v;
  }();
  if (stored != rng::fnv1a64(bytes.data(), bytes.size() - 8)) {
    throw ParseError("checksum mismatch", bytes.size() - 8);
  }

  binio::ByteReader r{bytes, 4};
  if (r.u8() != kStateVersion) throw ParseError("unsupported version", 4);
  TrainState st;
  st.step = r.i32();
  st.seed = r.u64();
  st.best_val_acc = r.f64();
  st.best_step = r.i32();
  st.g_st = net_io::read_network(r);
  st.g_ts = net_io::read_network(r);
  st.d_s = net_io::read_network(r);
  st.d_t = net_io::read_network(r);
  st.m_s = net_io::read_network(r);
  st.m_t = net_io::read_network(r);
  const std::uint32_t mom_count = r.u32();
  if (mom_count > 64) throw ParseError("implausible moment-group count", r.pos - 4);
  for (std::uint32_t i = 0; i < mom_count; ++i) {
    const std::string slot = r.str();
    OptMoments mom;
    mom.t = r.i64();
    mom.m = read_named_tensors(r, false);
    mom.v = read_named_tensors(r, false);
    st.moments[slot] = std::move(mom);
  }
  st.best_m_t_params = read_named_tensors(r, false);
  const std::uint32_t hist_count = r.u32();
  if (hist_count > (1u << 24)) throw ParseError("implausible history length", r.pos - 4);
  for (std::uint32_t i = 0; i < hist_count; ++i) {
    MetricRecord rec;
    rec.step = r.i32();
    const std::uint32_t terms = r.u32();
    for (std::uint32_t k = 0; k < terms; ++k) {
      const std::string key = r.str();
      rec.terms[key] = r.f64();
    }
    rec.clamp_events = r.u64();
    const bool has_t = r.u8() != 0;
    const double tv = r.f64();
    if (has_t) rec.target_val_acc = tv;
    const bool has_s = r.u8() != 0;
    const double sv = r.f64();
    if (has_s) rec.source_val_acc = sv;
    st.history.push_back(std::move(rec));
  }
  if (r.pos != bytes.size() - 8) throw ParseError("trailing bytes", r.pos);
  return st;
}

}  // namespace acal
