#include "acal/evalsuite.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "acal/rng.hpp"
#include "binio.hpp"
#include "json.hpp"

namespace acal {

double accuracy(const Network& classifier, const DomainDataset& ds) {
  if (classifier.role != Role::classifier) {
    throw ContractError("accuracy expects a classifier network");
  }
  if (ds.size() == 0) throw ConfigError("accuracy: empty dataset");
  if (ds.labeled_count() != ds.size()) {
    throw ConfigError("accuracy: dataset has unlabeled items");
  }
  const Network net = classifier.detached();
  const std::size_t bs = std::min<std::size_t>(64, ds.size());
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t at = 0; at < ds.size(); at += bs) {
    idx.clear();
    for (std::size_t i = at; i < std::min(ds.size(), at + bs); ++i) idx.push_back(i);
    const Batch batch = make_batch(ds, idx);
    const Tensor logits = forward(net, batch.images);
    const std::size_t B = logits.shape()[0], K = logits.shape()[1];
    for (std::size_t i = 0; i < B; ++i) {
      std::size_t best = 0;
      double best_v = logits.at(i * K);
      for (std::size_t j = 1; j < K; ++j) {
        if (logits.at(i * K + j) > best_v) {
          best_v = logits.at(i * K + j);
          best = j;
        }
      }
      if (static_cast<int>(best) == *batch.labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

namespace {

void write_style(binio::ByteWriter& w, const GlyphStyle& s) {
  w.u8(s.invert ? 1 : 0);
  w.i32(s.stroke_dilate);
  w.f64(s.noise_sigma);
  w.f64(s.max_shift);
  w.f64(s.max_rotate);
  w.f64(s.background_level);
  w.i32(s.canvas);
}

}  // namespace

std::uint64_t ablation_fingerprint(const AblationSetup& setup) {
  binio::ByteWriter w;
  write_style(w, setup.data.source_style);
  write_style(w, setup.data.target_style);
  w.i32(setup.data.source_per_class);
  w.i32(setup.data.target_pool_per_class);
  w.i32(setup.data.val_per_class);
  w.i32(setup.data.test_per_class);
  w.u64(setup.data.seed);
  w.i32(setup.target_per_class);
  const TrainConfig& t = setup.trainer;
  w.str(variant_str(t.variant.name));
  w.f64(t.variant.adv_w);
  w.f64(t.variant.cyc_w);
  w.f64(t.variant.task_w);
  w.str(supervision_str(t.variant.supervision));
  w.f64(t.variant.labeled_fraction);
  w.u8(t.variant.saturating_g_loss ? 1 : 0);
  w.i32(t.steps);
  w.i32(t.batch_size);
  w.f64(t.lr_g);
  w.f64(t.lr_d);
  w.f64(t.lr_m);
  w.str(optimizer_str(t.optimizer.kind));
  w.f64(t.optimizer.beta1);
  w.f64(t.optimizer.beta2);
  w.f64(t.optimizer.eps);
  w.i32(t.d_steps_per_g_step);
  w.i32(t.eval_every);
  w.u8(t.freeze_source_model ? 1 : 0);
  w.f64(t.source_finetune_lr_scale);
  w.u8(t.strict_branching ? 1 : 0);
  w.i32(setup.pretrain.steps);
  w.i32(setup.pretrain.batch_size);
  w.f64(setup.pretrain.lr);
  for (const VariantSpec& v : setup.variants) {
    w.str(variant_str(v.name));
    w.f64(v.adv_w);
    w.f64(v.cyc_w);
    w.f64(v.task_w);
    w.str(supervision_str(v.supervision));
    w.f64(v.labeled_fraction);
    w.u8(v.saturating_g_loss ? 1 : 0);
  }
  for (std::uint64_t s : setup.seeds) w.u64(s);
  return rng::fnv1a64(w.bytes.data(), w.bytes.size());
}

AblationRow run_ablation_cell(const AblationSetup& setup, const VariantSpec& variant,
                              std::uint64_t seed) {
  DomainPair pair = make_glyph_pair(setup.data);
  if (setup.target_per_class > 0) {
    pair.tgt_train = subsample_per_class(pair.tgt_train, setup.target_per_class,
                                         rng::derive(seed, "target-subsample"));
  }
  if (variant.supervision == SupervisionMode::semi) {
    pair.tgt_train =
        strip_labels(pair.tgt_train, variant.labeled_fraction, rng::derive(seed, "strip"));
  }

  TrainConfig cfg = setup.trainer;
  cfg.variant = variant;
  cfg.seed = seed;

  std::optional<Network> pretrained;
  if (variant_needs_pretrained_source(variant.name)) {
    Network fresh = build_classifier(pair.src_train.image_shape,
                                     pair.src_train.class_count,
                                     {rng::derive(seed, "pretrain-init"), {}, 1.0});
    PretrainConfig pcfg = setup.pretrain;
    pcfg.seed = rng::derive(seed, "pretrain");
    pretrained = pretrain_source(fresh, pair.src_train, pcfg);
  }

  return run_training(cfg, pair, pretrained).row;
}

void run_ablation(const AblationSetup& setup, AblationReport& out) {
  if (setup.seeds.empty()) throw ConfigError("run_ablation: at least one seed required");
  if (setup.variants.empty()) throw ConfigError("run_ablation: no variants requested");
  out = AblationReport{};
  out.config_fingerprint = ablation_fingerprint(setup);

  struct Task {
    std::size_t vi, si;
  };
  std::vector<Task> tasks;
  for (std::size_t vi = 0; vi < setup.variants.size(); ++vi) {
    for (std::size_t si = 0; si < setup.seeds.size(); ++si) tasks.push_back({vi, si});
  }

  std::vector<std::optional<AblationRow>> cells(tasks.size());
  std::vector<std::string> errors;
  std::mutex err_mu;
  std::atomic<std::size_t> next{0};
  const int jobs = std::max(1, setup.jobs);

  auto worker = [&] {
    while (true) {
      const std::size_t k = next.fetch_add(1);
      if (k >= tasks.size()) return;
      const Task& task = tasks[k];
      try {
        cells[k] = run_ablation_cell(setup, setup.variants[task.vi], setup.seeds[task.si]);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(err_mu);
        errors.push_back("variant=" + variant_str(setup.variants[task.vi].name) +
                         " seed=" + std::to_string(setup.seeds[task.si]) + ": " + e.what());
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  // Serial reduction in (variant, seed) order keeps output order-stable
  // regardless of completion order.
  for (std::size_t vi = 0; vi < setup.variants.size(); ++vi) {
    AblationReport::Row row;
    row.variant = variant_str(setup.variants[vi].name);
    for (std::size_t si = 0; si < setup.seeds.size(); ++si) {
      const auto& cell = cells[vi * setup.seeds.size() + si];
      if (!cell) continue;
      row.seeds.push_back(setup.seeds[si]);
      row.final_acc.push_back(cell->final_acc);
      row.best_acc.push_back(cell->best_acc);
      row.wall_s.push_back(cell->wall_s);
    }
    auto mean_of = [](const std::vector<double>& xs) {
      double acc = 0.0;
      for (double x : xs) acc += x;
      return xs.empty() ? 0.0 : acc / static_cast<double>(xs.size());
    };
    auto std_of = [](const std::vector<double>& xs, double mu) {
      if (xs.size() < 2) return 0.0;
      double acc = 0.0;
      for (double x : xs) acc += (x - mu) * (x - mu);
      return std::sqrt(acc / static_cast<double>(xs.size() - 1));
    };
    row.mean_final = mean_of(row.final_acc);
    row.std_final = std_of(row.final_acc, row.mean_final);
    row.mean_best = mean_of(row.best_acc);
    row.std_best = std_of(row.best_acc, row.mean_best);
    out.rows.push_back(std::move(row));
  }

  if (!errors.empty()) {
    out.complete = false;
    std::string what = "ablation aborted: " + errors.front();
    if (errors.size() > 1) {
      what += " (and " + std::to_string(errors.size() - 1) + " more)";
    }
    throw NumericError(what);
  }
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::string report_csv(const AblationReport& report) {
  std::ostringstream os;
  os << "variant,seed,final_acc,best_acc\n";
  for (const auto& row : report.rows) {
    for (std::size_t i = 0; i < row.seeds.size(); ++i) {
      os << row.variant << ',' << row.seeds[i] << ',' << fmt6(row.final_acc[i]) << ','
         << fmt6(row.best_acc[i]) << '\n';
    }
    os << row.variant << ",mean," << fmt6(row.mean_final) << ',' << fmt6(row.mean_best)
       << '\n';
    os << row.variant << ",std," << fmt6(row.std_final) << ',' << fmt6(row.std_best)
       << '\n';
  }
  return os.str();
}

std::string report_json(const AblationReport& report) {
  nlohmann::json j;
  j["schema_version"] = report.schema_version;
  j["config_fingerprint"] = hex64(report.config_fingerprint);
  j["complete"] = report.complete;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : report.rows) {
    nlohmann::json r;
    r["variant"] = row.variant;
    r["seeds"] = row.seeds;
    r["final_acc"] = row.final_acc;
    r["best_acc"] = row.best_acc;
    r["wall_s"] = row.wall_s;
    r["mean_final"] = row.mean_final;
    r["std_final"] = row.std_final;
    r["mean_best"] = row.mean_best;
    r["std_best"] = row.std_best;
    rows.push_back(std::move(r));
  }
  j["rows"] = std::move(rows);
  return j.dump(2) + "\n";
}

std::string report_svg(const AblationReport& report) {
  const int bar_w = 64, gap = 28, margin_l = 70, margin_r = 30;
  const int height = 360, plot_top = 30, plot_bottom = 300;
  const int n = static_cast<int>(report.rows.size());
  const int width = margin_l + margin_r + n * bar_w + std::max(0, n - 1) * gap;
  const double plot_h = plot_bottom - plot_top;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  os << "  <rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
     << "\" fill=\"white\"/>\n";
  // y axis with 0..1 ticks
  os << "  <line x1=\"" << margin_l - 8 << "\" y1=\"" << plot_top << "\" x2=\""
     << margin_l - 8 << "\" y2=\"" << plot_bottom << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double frac = tick / 4.0;
    const double y = plot_bottom - frac * plot_h;
    os << "  <line x1=\"" << margin_l - 12 << "\" y1=\"" << y << "\" x2=\"" << margin_l - 8
       << "\" y2=\"" << y << "\" stroke=\"black\"/>\n";
    os << "  <text x=\"" << margin_l - 16 << "\" y=\"" << y + 4
       << "\" font-size=\"11\" text-anchor=\"end\">" << fmt6(frac).substr(0, 4)
       << "</text>\n";
  }
  for (int i = 0; i < n; ++i) {
    const auto& row = report.rows[static_cast<std::size_t>(i)];
    const double v = std::clamp(row.mean_final, 0.0, 1.0);
    const double hgt = v * plot_h;
    const int x = margin_l + i * (bar_w + gap);
    const double y = plot_bottom - hgt;
    os << "  <rect class=\"bar\" x=\"" << x << "\" y=\"" << y << "\" width=\"" << bar_w
       << "\" height=\"" << hgt << "\" fill=\"#4878a8\"/>\n";
    const double lo = std::clamp(row.mean_final - row.std_final, 0.0, 1.0);
    const double hi = std::clamp(row.mean_final + row.std_final, 0.0, 1.0);
    const int cx = x + bar_w / 2;
    os << "  <line x1=\"" << cx << "\" y1=\"" << plot_bottom - lo * plot_h << "\" x2=\""
       << cx << "\" y2=\"" << plot_bottom - hi * plot_h
       << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    os << "  <text x=\"" << cx << "\" y=\"" << plot_bottom + 16
       << "\" font-size=\"10\" text-anchor=\"middle\">" << row.variant << "</text>\n";
    os << "  <text x=\"" << cx << "\" y=\"" << y - 6
       << "\" font-size=\"10\" text-anchor=\"middle\">" << fmt6(row.mean_final).substr(0, 5)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

AblationReport report_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("report is not valid JSON: ") + e.what());
  }
  try {
    AblationReport report;
    report.schema_version = j.at("schema_version").get<int>();
    report.config_fingerprint =
        std::stoull(j.at("config_fingerprint").get<std::string>(), nullptr, 16);
    report.complete = j.at("complete").get<bool>();
    for (const auto& r : j.at("rows")) {
      AblationReport::Row row;
      row.variant = r.at("variant").get<std::string>();
      row.seeds = r.at("seeds").get<std::vector<std::uint64_t>>();
      row.final_acc = r.at("final_acc").get<std::vector<double>>();
      row.best_acc = r.at("best_acc").get<std::vector<double>>();
      row.wall_s = r.at("wall_s").get<std::vector<double>>();
      row.mean_final = r.at("mean_final").get<double>();
      row.std_final = r.at("std_final").get<double>();
      row.mean_best = r.at("mean_best").get<double>();
      row.std_best = r.at("std_best").get<double>();
      report.rows.push_back(std::move(row));
    }
    return report;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("report JSON is missing fields: ") + e.what());
  }
}

void emit_report(const AblationReport& report, ReportFormat format,
                 const std::filesystem::path& path) {
  std::string body;
  switch (format) {
    case ReportFormat::csv: body = report_csv(report); break;
    case ReportFormat::json: body = report_json(report); break;
    case ReportFormat::svg: body = report_svg(report); break;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << body;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace acal
