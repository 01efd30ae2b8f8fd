#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "acal/config.hpp"
#include "acal/evalsuite.hpp"
#include "acal/gradcheck.hpp"
#include "acal/rng.hpp"
#include "acal/trainer.hpp"

namespace fs = std::filesystem;
using namespace acal;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Every run leaves a run.json with the canonical config, the seed, and the
// fingerprints of what it produced, enough to reproduce the run bit-exactly.
void write_run_json(const RunConfig& cfg, const std::string& command,
                    const std::vector<std::pair<std::string, fs::path>>& artifacts) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["command"] = command;
  j["seed"] = cfg.trainer.seed;
  j["config"] = nlohmann::json::parse(cfg.canonical_text);
  nlohmann::json fp;
  fp["config"] = hex64(config_fingerprint(cfg));
  nlohmann::json arts;
  for (const auto& [name, path] : artifacts) {
    arts[name] = path.string();
    std::ifstream in(path, std::ios::binary);
    if (in) {
      std::string bytes((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
      fp[name] = hex64(rng::fnv1a64(bytes.data(), bytes.size()));
    }
  }
  j["fingerprints"] = std::move(fp);
  j["artifacts"] = std::move(arts);
  const fs::path out_dir = cfg.output.dir;
  fs::create_directories(out_dir);
  std::ofstream out(out_dir / "run.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (out_dir / "run.json").string());
  out << j.dump(2) << "\n";
}

RunConfig assemble_config(const std::string& config_path,
                          const std::vector<std::string>& overrides) {
  std::string text = config_path.empty() ? std::string("{}") : read_text(config_path);
  for (const std::string& o : overrides) text = apply_override_text(text, o);
  return parse_config_text(text);
}

fs::path ensure_out_dir(const RunConfig& cfg) {
  fs::path dir = cfg.output.dir;
  fs::create_directories(dir);
  return dir;
}

int cmd_gen_data(const RunConfig& cfg, bool export_images) {
  const fs::path dir = ensure_out_dir(cfg) / "data";
  fs::create_directories(dir);
  const DomainPair pair = make_glyph_pair(cfg.data);
  std::vector<std::pair<std::string, fs::path>> artifacts;
  auto dump = [&](const DomainDataset& ds, const std::string& name) {
    const fs::path images = dir / (name + "-images.idx3");
    const fs::path labels = dir / (name + "-labels.idx1");
    save_idx(ds, images, labels);
    artifacts.emplace_back(name + "_images", images);
    artifacts.emplace_back(name + "_labels", labels);
    if (export_images) export_pgm(ds, dir / "pgm", name);
  };
  dump(pair.src_train, "source-train");
  dump(pair.src_val, "source-val");
  dump(pair.src_test, "source-test");
  dump(pair.tgt_train, "target-train");
  dump(pair.tgt_val, "target-val");
  dump(pair.tgt_test, "target-test");
  write_run_json(cfg, "gen-data", artifacts);
  std::cout << "wrote glyph corpora to " << dir.string() << "\n";
  return 0;
}

int cmd_pretrain(const RunConfig& cfg) {
  const fs::path dir = ensure_out_dir(cfg);
  const DomainPair pair = build_data(cfg);
  Network fresh = build_classifier(pair.src_train.image_shape, pair.src_train.class_count,
                                   {rng::derive(cfg.trainer.seed, "pretrain-init"), {}, 1.0});
  PretrainConfig pcfg = cfg.pretrain;
  pcfg.seed = rng::derive(cfg.trainer.seed, "pretrain");
  const Network m_s = pretrain_source(fresh, pair.src_train, pcfg);
  const double val_acc = accuracy(m_s, pair.src_val);
  const fs::path ckpt = dir / "m_s.ckpt";
  save_checkpoint(m_s, ckpt);
  write_run_json(cfg, "pretrain", {{"m_s_checkpoint", ckpt}});
  std::cout << "pretrained source classifier: val accuracy " << val_acc << ", checkpoint "
            << ckpt.string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& pretrained_path) {
  const fs::path dir = ensure_out_dir(cfg);
  const DomainPair pair = build_data(cfg);

  std::optional<Network> pretrained;
  if (!pretrained_path.empty()) {
    pretrained = load_checkpoint(pretrained_path, Role::classifier);
  } else if (variant_needs_pretrained_source(cfg.trainer.variant.name)) {
    Network fresh = build_classifier(pair.src_train.image_shape,
                                     pair.src_train.class_count,
                                     {rng::derive(cfg.trainer.seed, "pretrain-init"), {}, 1.0});
    PretrainConfig pcfg = cfg.pretrain;
    pcfg.seed = rng::derive(cfg.trainer.seed, "pretrain");
    pretrained = pretrain_source(fresh, pair.src_train, pcfg);
  }

  const fs::path metrics_path = dir / "metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + metrics_path.string());

  const RunResult result = run_training(cfg.trainer, pair, pretrained, &metrics);
  metrics.close();

  const fs::path m_t_ckpt = dir / "m_t.ckpt";
  save_checkpoint(result.state.m_t, m_t_ckpt);
  const fs::path m_t_best_ckpt = dir / "m_t_best.ckpt";
  save_checkpoint(result.state.best_m_t_params.empty()
                      ? result.state.m_t
                      : result.state.m_t.with_params(result.state.best_m_t_params),
                  m_t_best_ckpt);
  const fs::path g_st_ckpt = dir / "g_st.ckpt";
  save_checkpoint(result.state.g_st, g_st_ckpt);
  const fs::path g_ts_ckpt = dir / "g_ts.ckpt";
  save_checkpoint(result.state.g_ts, g_ts_ckpt);
  const fs::path state_path = dir / "train_state.bin";
  save_state(result.state, state_path);

  nlohmann::json summary;
  summary["variant"] = result.row.variant;
  summary["seed"] = result.row.seed;
  summary["final_acc"] = result.row.final_acc;
  summary["best_acc"] = result.row.best_acc;
  summary["wall_s"] = result.row.wall_s;
  const fs::path summary_path = dir / "summary.json";
  std::ofstream sum(summary_path, std::ios::trunc);
  sum << summary.dump(2) << "\n";
  sum.close();

  write_run_json(cfg, "train",
                 {{"metrics", metrics_path},
                  {"m_t_checkpoint", m_t_ckpt},
                  {"m_t_best_checkpoint", m_t_best_ckpt},
                  {"g_st_checkpoint", g_st_ckpt},
                  {"g_ts_checkpoint", g_ts_ckpt},
                  {"train_state", state_path},
                  {"summary", summary_path}});
  std::cout << result.row.variant << " seed=" << result.row.seed
            << " final_acc=" << result.row.final_acc
            << " best_acc=" << result.row.best_acc << "\n";
  return 0;
}

void emit_configured_formats(const RunConfig& cfg, const AblationReport& report,
                             const fs::path& dir,
                             std::vector<std::pair<std::string, fs::path>>& artifacts) {
  for (const std::string& fmt : cfg.output.formats) {
    const fs::path path = dir / ("report." + fmt);
    if (fmt == "csv") emit_report(report, ReportFormat::csv, path);
    if (fmt == "json") emit_report(report, ReportFormat::json, path);
    if (fmt == "svg") emit_report(report, ReportFormat::svg, path);
    artifacts.emplace_back("report_" + fmt, path);
  }
}

int cmd_ablate(const RunConfig& cfg) {
  const fs::path dir = ensure_out_dir(cfg);
  const AblationSetup setup = ablation_setup(cfg);
  AblationReport report;
  std::vector<std::pair<std::string, fs::path>> artifacts;
  try {
    run_ablation(setup, report);
  } catch (...) {
    // keep the partial report next to the error
    emit_configured_formats(cfg, report, dir, artifacts);
    write_run_json(cfg, "ablate", artifacts);
    throw;
  }
  emit_configured_formats(cfg, report, dir, artifacts);
  write_run_json(cfg, "ablate", artifacts);
  for (const auto& row : report.rows) {
    std::cout << row.variant << ": mean final " << row.mean_final << " (std "
              << row.std_final << "), mean best " << row.mean_best << "\n";
  }
  std::cout << "report fingerprint " << hex64(report.config_fingerprint) << " in "
            << dir.string() << "\n";
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, const std::string& scope) {
  const auto t0 = std::chrono::steady_clock::now();
  FdOptions op_opts;
  op_opts.coord_seed = cfg.trainer.seed;
  FdOptions net_opts = op_opts;
  net_opts.max_coords_per_param = 128;

  bool all_pass = true;
  auto print = [&](const SweepResult& sweep) {
    for (const auto& e : sweep.entries) {
      std::size_t kinks = 0, coords = 0;
      for (const auto& p : e.report.params) {
        kinks += p.kinks;
        coords += p.coords_checked;
      }
      std::printf("%-26s %s  max_rel_err=%.3e  coords=%zu  kinks=%zu\n", e.name.c_str(),
                  e.report.pass() ? "ok  " : "FAIL", e.report.max_rel_err(), coords,
                  kinks);
      all_pass = all_pass && e.report.pass();
    }
  };
  if (scope == "all" || scope == "ops") {
    print(run_gradcheck_sweep(standard_op_cases(cfg.trainer.seed), op_opts));
  }
  if (scope == "all" || scope == "nets") {
    print(run_gradcheck_sweep(network_topology_cases(cfg.trainer.seed), net_opts));
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("gradcheck %s in %.1fs (tolerance %.1e, h=%.1e)\n",
              all_pass ? "passed" : "FAILED", secs, op_opts.tol, op_opts.h);
  if (!all_pass) throw NumericError("gradient check failed");
  return 0;
}

int cmd_report(const RunConfig& cfg, const std::string& input) {
  if (input.empty()) throw ConfigError("report needs --input pointing at a report.json");
  const fs::path dir = ensure_out_dir(cfg);
  const AblationReport report = report_from_json(read_text(input));
  std::vector<std::pair<std::string, fs::path>> artifacts;
  emit_configured_formats(cfg, report, dir, artifacts);
  write_run_json(cfg, "report", artifacts);
  std::cout << "rendered " << artifacts.size() << " report file(s) in " << dir.string()
            << "\n";
  return 0;
}

int cmd_dump_samples(const RunConfig& cfg, const std::string& checkpoint_dir) {
  const fs::path dir = ensure_out_dir(cfg) / "samples";
  const DomainPair pair = build_data(cfg);
  Network g_st, g_ts;
  if (!checkpoint_dir.empty()) {
    g_st = load_checkpoint(fs::path(checkpoint_dir) / "g_st.ckpt", Role::generator);
    g_ts = load_checkpoint(fs::path(checkpoint_dir) / "g_ts.ckpt", Role::generator);
  } else {
    g_st = build_generator(pair.src_train.image_shape,
                           {rng::derive(cfg.trainer.seed, "init-g_st"), {}, 1.0});
    g_ts = build_generator(pair.src_train.image_shape,
                           {rng::derive(cfg.trainer.seed, "init-g_ts"), {}, 1.0});
  }

  auto triplet = [&](const DomainDataset& ds, const Network& fwd, const Network& bwd,
                     const std::string& prefix) {
    const std::size_t n =
        std::min<std::size_t>(static_cast<std::size_t>(cfg.output.dump_count), ds.size());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const Batch batch = make_batch(ds, idx);
    const Tensor mapped = forward_nograd(fwd, batch.images);
    const Tensor cycled = forward_nograd(bwd, mapped);
    auto as_dataset = [&](const Tensor& t, Split split) {
      DomainDataset out;
      out.domain_id = ds.domain_id;
      out.image_shape = ds.image_shape;
      out.class_count = ds.class_count;
      out.split = split;
      out.pixels.assign(t.values().begin(), t.values().end());
      out.labels.assign(batch.labels.begin(), batch.labels.end());
      return out;
    };
    export_pgm(as_dataset(batch.images, ds.split), dir, prefix + "_real");
    export_pgm(as_dataset(mapped, ds.split), dir, prefix + "_mapped");
    export_pgm(as_dataset(cycled, ds.split), dir, prefix + "_cycled");
  };
  triplet(pair.src_train, g_st, g_ts, "source");
  triplet(pair.tgt_train, g_ts, g_st, "target");
  write_run_json(cfg, "dump-samples", {});
  std::cout << "wrote sample triplets to " << dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acal - cyclic adversarial domain-adaptation lab"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "JSON configuration file");
  app.add_option("--set", overrides, "override a config field, path.to.key=value");

  auto add_common = [&](CLI::App* sub) {
    sub->fallthrough();  // --config / --set may follow the subcommand
    sub->add_option_function<std::string>(
        "--variant", [&](const std::string& v) { overrides.push_back("variant.name=" + v); },
        "adaptation variant name");
    sub->add_option_function<std::int64_t>(
        "--steps",
        [&](std::int64_t v) { overrides.push_back("trainer.steps=" + std::to_string(v)); },
        "training steps");
    sub->add_option_function<std::int64_t>(
        "--seed",
        [&](std::int64_t v) { overrides.push_back("trainer.seed=" + std::to_string(v)); },
        "run seed");
    sub->add_option_function<std::string>(
        "--out", [&](const std::string& v) { overrides.push_back("output.dir=" + v); },
        "output directory");
  };

  auto* gen = app.add_subcommand("gen-data", "write the procedural glyph corpora");
  bool export_images = false;
  gen->add_flag("--export", export_images, "also export PGM images with a CSV manifest");
  add_common(gen);

  auto* pre = app.add_subcommand("pretrain", "train and checkpoint the source classifier");
  add_common(pre);

  auto* train = app.add_subcommand("train", "run one adaptation variant");
  std::string pretrained_path;
  train->add_option("--pretrained", pretrained_path, "source classifier checkpoint");
  add_common(train);

  auto* ablate = app.add_subcommand("ablate", "run the variant x seed ablation grid");
  ablate->add_option_function<std::int64_t>(
      "--jobs",
      [&](std::int64_t v) { overrides.push_back("ablation.jobs=" + std::to_string(v)); },
      "parallel runs");
  add_common(ablate);

  auto* grad = app.add_subcommand("gradcheck",
                                  "finite-difference sweep over all registered operations "
                                  "and network topologies");
  std::string scope = "all";
  grad->add_option("--scope", scope, "all|ops|nets")
      ->check(CLI::IsMember({"all", "ops", "nets"}));
  add_common(grad);

  auto* rep = app.add_subcommand("report", "re-render a JSON ablation report");
  std::string report_input;
  rep->add_option("--input", report_input, "existing report.json");
  add_common(rep);

  auto* dump = app.add_subcommand("dump-samples",
                                  "write real/mapped/cycled image triplets for inspection");
  std::string checkpoint_dir;
  dump->add_option("--checkpoints", checkpoint_dir,
                   "directory holding g_st.ckpt and g_ts.ckpt");
  add_common(dump);

  auto* print = app.add_subcommand("print-config", "echo the canonical configuration");
  add_common(print);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // fold CLI11's error-code zoo into exit code 1, with usage on stderr
    const int code = app.exit(e);
    if (code == 0) return 0;
    std::cerr << app.help() << "\n";
    return 1;
  }

  try {
    const RunConfig cfg = assemble_config(config_path, overrides);
    if (gen->parsed()) return cmd_gen_data(cfg, export_images);
    if (pre->parsed()) return cmd_pretrain(cfg);
    if (train->parsed()) return cmd_train(cfg, pretrained_path);
    if (ablate->parsed()) return cmd_ablate(cfg);
    if (grad->parsed()) return cmd_gradcheck(cfg, scope);
    if (rep->parsed()) return cmd_report(cfg, report_input);
    if (dump->parsed()) return cmd_dump_samples(cfg, checkpoint_dir);
    if (print->parsed()) {
      std::cout << cfg.canonical_text;
      return 0;
    }
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
