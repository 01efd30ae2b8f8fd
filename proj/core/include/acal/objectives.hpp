#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "acal/datasets.hpp"
#include "acal/nets.hpp"
#include "acal/tensor.hpp"

namespace acal {

// Ablation registry. The *_one_cycle_* variants keep only the named
// round-trip direction; s2t_only drops cycles entirely.
enum class VariantName {
  no_adaptation,
  target_only,
  source_plus_target,
  s2t_only,
  one_cycle_sts,
  one_cycle_tst,
  rcal_one_cycle_sts,
  rcal_one_cycle_tst,
  acal_one_cycle_sts,
  acal_one_cycle_tst,
  cyclegan,
  rcal,
  acal,
};

std::string variant_str(VariantName name);
VariantName variant_from_string(const std::string& name);
const std::vector<VariantName>& variant_registry();

enum class SupervisionMode { supervised, unsupervised, semi };
std::string supervision_str(SupervisionMode mode);
SupervisionMode supervision_from_string(const std::string& mode);

struct VariantSpec {
  VariantName name = VariantName::acal;
  double adv_w = 1.0;
  double cyc_w = 10.0;
  double task_w = 1.0;
  SupervisionMode supervision = SupervisionMode::supervised;
  double labeled_fraction = 1.0;  // used by semi only
  // Literal log(1-D(G)) generator objective instead of the default
  // non-saturating -log(D(G)).
  bool saturating_g_loss = false;
};

// Probability floor/ceiling inside adversarial log terms. Clamp events are
// counted, never silent.
inline constexpr double kProbEps = 1e-7;

// Discriminator objective as a minimisation loss:
// -mean(log d_real) - mean(log(1 - d_fake)).
Tensor adv_d_loss(const Tensor& d_real, const Tensor& d_fake,
                  std::size_t* clamp_events = nullptr);

// Generator adversarial objective; non-saturating -mean(log d_fake) by
// default, mean(log(1 - d_fake)) when saturating.
Tensor adv_g_loss(const Tensor& d_fake, bool saturating = false,
                  std::size_t* clamp_events = nullptr);

// L1 round-trip reconstruction penalty.
Tensor recon_cycle_loss(const Tensor& x, const Tensor& x_cyc);

// Task-model loss on round-tripped samples; replaces reconstruction in the
// relaxed variants. The classifier's parameters are treated as constants
// here: this term trains whatever produced x_cyc, not the classifier.
Tensor relaxed_cycle_loss(const Network& m, const Tensor& x_cyc,
                          const std::vector<int>& labels, const ForwardCtx& ctx = {});

// Task terms of the augmented adversarial objective. Returns
//   m_loss:          CE(M(x_real), y_real) + CE(M(detach(x_mapped)), y_mapped)
//                    -- trains M, never reaches the producing generator;
//   g_feedback_loss: CE(M(x_mapped), y_mapped) with M's parameters held
//                    constant -- trains the producing generator.
std::pair<Tensor, Tensor> augmented_task_terms(const Network& m, const Tensor& x_real,
                                               const std::vector<int>& y_real,
                                               const Tensor& x_mapped,
                                               const std::vector<int>& y_mapped,
                                               const ForwardCtx& ctx = {});

// argmax of M_S(G_TS(x_t)) per example, ties to the lowest class index.
// Evaluation mode, no gradients.
std::vector<int> pseudo_label(const Network& m_s, const Network& g_ts, const Tensor& x_t);

// Which loss terms a variant activates. The two boolean families mirror the
// branch split: supervised batches use true target labels, unsupervised
// batches pseudo-label the target side and drop terms that need real target
// labels.
struct TermPlan {
  bool adv_s = false, adv_t = false;
  bool cyc_sts = false, cyc_tst = false;
  bool rcyc_sts = false, rcyc_tst = false;
  bool task_g_st = false, task_g_ts = false;
  bool m_s_real = false, m_s_mapped = false;
  bool m_t_real = false, m_t_mapped = false, m_t_source = false;
  bool pseudo_target_labels = false;

  bool any_adv() const { return adv_s || adv_t; }
  bool any_g_term() const {
    return adv_s || adv_t || cyc_sts || cyc_tst || rcyc_sts || rcyc_tst || task_g_st ||
           task_g_ts;
  }
  bool any_m_s_term() const { return m_s_real || m_s_mapped; }
  bool any_m_t_term() const { return m_t_real || m_t_mapped || m_t_source; }
};

TermPlan term_plan(const VariantSpec& spec, bool supervised_branch);

// Golden list of diagnostics keys the variant emits on the given branch.
std::vector<std::string> active_terms(const VariantSpec& spec, bool supervised_branch);

// Variants whose target-side objectives require a pretrained source
// classifier before step 0.
bool variant_needs_pretrained_source(VariantName name);
// Only the full augmented variant defines unsupervised / semi objectives.
bool variant_supports_unsupervised(VariantName name);
bool variant_uses_adversarial(VariantName name);

struct Nets {
  const Network* g_st = nullptr;
  const Network* g_ts = nullptr;
  const Network* d_s = nullptr;
  const Network* d_t = nullptr;
  const Network* m_s = nullptr;
  const Network* m_t = nullptr;
};

struct ComposeCtx {
  bool train = false;
  std::uint64_t seed = 0;
};

struct LossBundle {
  std::optional<Tensor> d_s_loss, d_t_loss;
  std::optional<Tensor> g_loss;
  std::optional<Tensor> m_s_loss, m_t_loss;
  // Raw value of every active term, before weighting.
  std::map<std::string, double> diagnostics;
  std::size_t clamp_events = 0;
};

// Phase-scoped builders. The trainer recomputes each family against the
// freshest parameters inside one step; compose_variant assembles all three
// on a single graph for contract checks and diagnostics.
struct DiscriminatorLosses {
  std::optional<Tensor> d_s, d_t;
  std::map<std::string, double> diagnostics;
  std::size_t clamp_events = 0;
};
DiscriminatorLosses build_discriminator_losses(const VariantSpec& spec,
                                               const Batch& batch_s, const Batch& batch_t,
                                               const Nets& nets, const ComposeCtx& ctx);

struct GeneratorLoss {
  std::optional<Tensor> loss;
  std::map<std::string, double> diagnostics;
  std::size_t clamp_events = 0;
};
GeneratorLoss build_generator_loss(const VariantSpec& spec, const Batch& batch_s,
                                   const Batch& batch_t, const Nets& nets,
                                   const ComposeCtx& ctx);

struct TaskLosses {
  std::optional<Tensor> m_s, m_t;
  std::map<std::string, double> diagnostics;
};
TaskLosses build_task_losses(const VariantSpec& spec, const Batch& batch_s,
                             const Batch& batch_t, const Nets& nets,
                             const ComposeCtx& ctx);

// Assembles exactly the terms the variant prescribes for the branch implied
// by the supervision mode and the target batch's labels. Throws ConfigError
// when required networks or labels are missing.
LossBundle compose_variant(const VariantSpec& spec, const Batch& batch_s,
                           const Batch& batch_t, const Nets& nets,
                           const ComposeCtx& ctx = {});

}  // namespace acal
