#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "acal/datasets.hpp"
#include "acal/nets.hpp"
#include "acal/objectives.hpp"

namespace acal {

enum class OptimizerKind { sgd, adam };
std::string optimizer_str(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string& kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  VariantSpec variant;
  int steps = 2000;
  int batch_size = 16;
  double lr_g = 2e-4;
  double lr_d = 2e-4;
  double lr_m = 1e-3;
  OptimizerConfig optimizer;
  int d_steps_per_g_step = 1;
  std::uint64_t seed = 1;
  int eval_every = 100;
  bool freeze_source_model = false;
  // Source-model fine-tuning runs at lr_m * this scale.
  double source_finetune_lr_scale = 0.1;
  // Per-item branch handling for semi supervision: target batches come from
  // the whole pool and are split by label presence, instead of drawing the
  // whole batch from one branch pool.
  bool strict_branching = false;
};

// First/second adversarial-style moment estimates per parameter name plus
// the shared step counter for bias correction.
struct OptMoments {
  std::map<std::string, Tensor> m, v;
  std::int64_t t = 0;
};

// Parameters without an entry in `grads` are carried over untouched.
std::pair<std::map<std::string, Tensor>, OptMoments> optimizer_step(
    const std::map<std::string, Tensor>& params, const GradientMap& grads,
    OptMoments moments, const OptimizerConfig& cfg, double lr);

struct MetricRecord {
  int step = 0;
  std::map<std::string, double> terms;
  std::size_t clamp_events = 0;
  std::optional<double> target_val_acc;
  std::optional<double> source_val_acc;
};

// One line-delimited JSON record of the metrics stream.
std::string metric_record_jsonl(const MetricRecord& rec);

enum class Phase { discriminator, generator, task };
std::string phase_str(Phase phase);

struct TrainState {
  Network g_st, g_ts, d_s, d_t, m_s, m_t;
  std::map<std::string, OptMoments> moments;  // keyed by net slot name
  int step = 0;
  std::uint64_t seed = 0;
  std::vector<MetricRecord> history;
  // Parameters of the best-by-validation target classifier seen so far.
  std::map<std::string, Tensor> best_m_t_params;
  double best_val_acc = -1.0;
  int best_step = -1;

  Nets nets() const { return {&g_st, &g_ts, &d_s, &d_t, &m_s, &m_t}; }
};

// Called after each update phase of a step with the post-phase state.
using PhaseObserver = std::function<void(Phase, const TrainState&)>;

enum class Branch { supervised, unsupervised };

// Supervised iff the drawn target item carries a label.
Branch select_branch(const std::optional<int>& target_label);

struct PretrainConfig {
  int steps = 1000;
  int batch_size = 16;
  double lr = 1e-3;
  OptimizerConfig optimizer;
  std::uint64_t seed = 1;
};

// Plain cross-entropy training of the source classifier. Deterministic
// under the seed; zero steps returns the input parameters unchanged.
Network pretrain_source(const Network& m_s, const DomainDataset& source,
                        const PretrainConfig& cfg);

// Fresh networks for a run; m_s comes from `pretrained_m_s` when given.
TrainState init_train_state(const TrainConfig& cfg, const Shape& image_shape,
                            int num_classes,
                            const std::optional<Network>& pretrained_m_s);

// One alternation of Algorithm-style updates: discriminators (generators
// frozen), then generators (discriminators and task models frozen), then
// task models on the branch implied by the target batch's labels. Each
// phase updates exactly the parameter sets it owns.
std::pair<TrainState, MetricRecord> train_step(const TrainState& state,
                                               const Batch& batch_s, const Batch& batch_t,
                                               const TrainConfig& cfg,
                                               const PhaseObserver& observer = {});

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double final_acc = 0.0;
  double best_acc = 0.0;
  double wall_s = 0.0;
};

struct RunResult {
  TrainState state;
  AblationRow row;
};

// Full training run with periodic evaluation, metric streaming and
// best-checkpoint tracking. Configuration contradictions (missing labels,
// missing pretrained source model) are rejected before step 0.
RunResult run_training(const TrainConfig& cfg, const DomainPair& data,
                       const std::optional<Network>& pretrained_m_s,
                       std::ostream* metrics_out = nullptr,
                       const PhaseObserver& observer = {},
                       std::optional<TrainState> resume_from = std::nullopt);

// Bit-exact train-state snapshots (resume produces the identical remaining
// history).
void save_state(const TrainState& state, const std::filesystem::path& path);
TrainState load_state(const std::filesystem::path& path);

}  // namespace acal
