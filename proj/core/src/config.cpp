#include "acal/config.hpp"

#include <fstream>

#include "acal/rng.hpp"
#include "json.hpp"

namespace acal {

namespace {

using nlohmann::json;

json style_json(const GlyphStyle& s) {
  return json{{"invert", s.invert},
              {"stroke_dilate", s.stroke_dilate},
              {"noise_sigma", s.noise_sigma},
              {"max_shift", s.max_shift},
              {"max_rotate", s.max_rotate},
              {"background_level", s.background_level},
              {"canvas", s.canvas}};
}

json default_json() {
  const GlyphPairConfig data{};
  json j;
  j["data"] = {
      {"seed", 1},
      {"source_per_class", data.source_per_class},
      {"target_pool_per_class", data.target_pool_per_class},
      {"val_per_class", data.val_per_class},
      {"test_per_class", data.test_per_class},
      {"source_style", style_json(data.source_style)},
      {"target_style", style_json(data.target_style)},
      {"target_per_class", 10},
      {"source_idx_images", ""},
      {"source_idx_labels", ""},
      {"target_idx_images", ""},
      {"target_idx_labels", ""},
  };
  j["variant"] = {
      {"name", "acal"},          {"adv_w", 1.0},
      {"cyc_w", 10.0},           {"task_w", 1.0},
      {"supervision", "supervised"}, {"labeled_fraction", 1.0},
      {"saturating_g_loss", false},
  };
  j["trainer"] = {
      {"steps", 2000},
      {"batch_size", 16},
      {"lr_g", 2e-4},
      {"lr_d", 2e-4},
      {"lr_m", 1e-3},
      {"optimizer", "adam"},
      {"beta1", 0.5},
      {"beta2", 0.999},
      {"eps", 1e-8},
      {"d_steps_per_g_step", 1},
      {"seed", 1},
      {"eval_every", 100},
      {"freeze_source_model", false},
      {"source_finetune_lr_scale", 0.1},
      {"strict_branching", false},
  };
  j["pretrain"] = {
      {"steps", 1000},
      {"batch_size", 16},
      {"lr", 1e-3},
  };
  j["ablation"] = {
      {"variants", json::array({"no_adaptation", "target_only", "source_plus_target",
                                "cyclegan", "rcal", "acal"})},
      {"seeds", json::array({1, 2, 3})},
      {"jobs", 1},
  };
  j["output"] = {
      {"dir", "runs/out"},
      {"pgm_export", false},
      {"formats", json::array({"csv", "json", "svg"})},
      {"dump_count", 8},
  };
  return j;
}

std::string type_name(const json& v) {
  if (v.is_object()) return "object";
  if (v.is_array()) return "array";
  if (v.is_string()) return "string";
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer() || v.is_number_unsigned()) return "integer";
  if (v.is_number_float()) return "number";
  if (v.is_null()) return "null";
  return "value";
}

bool type_compatible(const json& def, const json& user) {
  if (def.is_object()) return user.is_object();
  if (def.is_array()) return user.is_array();
  if (def.is_string()) return user.is_string();
  if (def.is_boolean()) return user.is_boolean();
  if (def.is_number_float()) return user.is_number();
  if (def.is_number_integer() || def.is_number_unsigned()) {
    return user.is_number_integer() || user.is_number_unsigned();
  }
  return true;
}

// Deep merge of `user` into `def`, rejecting keys absent from the defaults.
void merge_checked(json& def, const json& user, const std::string& path) {
  if (!user.is_object()) {
    throw ConfigError("expected object at " + (path.empty() ? "$" : path));
  }
  for (const auto& [key, value] : user.items()) {
    const std::string here = (path.empty() ? "$." : path + ".") + key;
    if (!def.contains(key)) {
      throw ConfigError("unknown key '" + key + "' at " + here);
    }
    json& slot = def[key];
    if (slot.is_object()) {
      merge_checked(slot, value, here);
      continue;
    }
    if (!type_compatible(slot, value)) {
      throw ConfigError("type mismatch at " + here + ": expected " + type_name(slot) +
                        ", got " + type_name(value));
    }
    slot = value;
  }
}

GlyphStyle style_from(const json& j) {
  GlyphStyle s;
  s.invert = j.at("invert").get<bool>();
  s.stroke_dilate = j.at("stroke_dilate").get<int>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.max_shift = j.at("max_shift").get<double>();
  s.max_rotate = j.at("max_rotate").get<double>();
  s.background_level = j.at("background_level").get<double>();
  s.canvas = j.at("canvas").get<int>();
  return s;
}

void require_positive(double v, const char* path) {
  if (!(v > 0.0)) throw ConfigError(std::string("expected a positive value at ") + path);
}

RunConfig config_from_merged(json merged) {
  RunConfig cfg;
  const json& d = merged.at("data");
  cfg.data.seed = d.at("seed").get<std::uint64_t>();
  cfg.data.source_per_class = d.at("source_per_class").get<int>();
  cfg.data.target_pool_per_class = d.at("target_pool_per_class").get<int>();
  cfg.data.val_per_class = d.at("val_per_class").get<int>();
  cfg.data.test_per_class = d.at("test_per_class").get<int>();
  cfg.data.source_style = style_from(d.at("source_style"));
  cfg.data.target_style = style_from(d.at("target_style"));
  cfg.target_per_class = d.at("target_per_class").get<int>();
  cfg.source_idx_images = d.at("source_idx_images").get<std::string>();
  cfg.source_idx_labels = d.at("source_idx_labels").get<std::string>();
  cfg.target_idx_images = d.at("target_idx_images").get<std::string>();
  cfg.target_idx_labels = d.at("target_idx_labels").get<std::string>();

  const json& v = merged.at("variant");
  VariantSpec spec;
  spec.name = variant_from_string(v.at("name").get<std::string>());
  spec.adv_w = v.at("adv_w").get<double>();
  spec.cyc_w = v.at("cyc_w").get<double>();
  spec.task_w = v.at("task_w").get<double>();
  spec.supervision = supervision_from_string(v.at("supervision").get<std::string>());
  spec.labeled_fraction = v.at("labeled_fraction").get<double>();
  spec.saturating_g_loss = v.at("saturating_g_loss").get<bool>();
  if (spec.adv_w < 0 || spec.cyc_w < 0 || spec.task_w < 0) {
    throw ConfigError("loss weights must be non-negative at $.variant");
  }
  if (spec.labeled_fraction < 0.0 || spec.labeled_fraction > 1.0) {
    throw ConfigError("labeled_fraction must lie in [0,1] at $.variant.labeled_fraction");
  }

  const json& t = merged.at("trainer");
  cfg.trainer.variant = spec;
  cfg.trainer.steps = t.at("steps").get<int>();
  cfg.trainer.batch_size = t.at("batch_size").get<int>();
  cfg.trainer.lr_g = t.at("lr_g").get<double>();
  cfg.trainer.lr_d = t.at("lr_d").get<double>();
  cfg.trainer.lr_m = t.at("lr_m").get<double>();
  cfg.trainer.optimizer.kind = optimizer_from_string(t.at("optimizer").get<std::string>());
  cfg.trainer.optimizer.beta1 = t.at("beta1").get<double>();
  cfg.trainer.optimizer.beta2 = t.at("beta2").get<double>();
  cfg.trainer.optimizer.eps = t.at("eps").get<double>();
  cfg.trainer.d_steps_per_g_step = t.at("d_steps_per_g_step").get<int>();
  cfg.trainer.seed = t.at("seed").get<std::uint64_t>();
  cfg.trainer.eval_every = t.at("eval_every").get<int>();
  cfg.trainer.freeze_source_model = t.at("freeze_source_model").get<bool>();
  cfg.trainer.source_finetune_lr_scale = t.at("source_finetune_lr_scale").get<double>();
  cfg.trainer.strict_branching = t.at("strict_branching").get<bool>();
  if (cfg.trainer.steps < 0) throw ConfigError("steps must be >= 0 at $.trainer.steps");
  if (cfg.trainer.batch_size < 1) {
    throw ConfigError("batch_size must be >= 1 at $.trainer.batch_size");
  }
  if (cfg.trainer.d_steps_per_g_step < 1) {
    throw ConfigError("d_steps_per_g_step must be >= 1 at $.trainer.d_steps_per_g_step");
  }
  require_positive(cfg.trainer.lr_g, "$.trainer.lr_g");
  require_positive(cfg.trainer.lr_d, "$.trainer.lr_d");
  require_positive(cfg.trainer.lr_m, "$.trainer.lr_m");

  const json& p = merged.at("pretrain");
  cfg.pretrain.steps = p.at("steps").get<int>();
  cfg.pretrain.batch_size = p.at("batch_size").get<int>();
  cfg.pretrain.lr = p.at("lr").get<double>();
  cfg.pretrain.optimizer = OptimizerConfig{OptimizerKind::adam, 0.9, 0.999, 1e-8};
  if (cfg.pretrain.steps < 0) throw ConfigError("steps must be >= 0 at $.pretrain.steps");
  require_positive(cfg.pretrain.lr, "$.pretrain.lr");

  const json& a = merged.at("ablation");
  for (const auto& name : a.at("variants")) {
    if (!name.is_string()) {
      throw ConfigError("expected variant names (strings) at $.ablation.variants");
    }
    variant_from_string(name.get<std::string>());  // validate
    cfg.ablation_variants.push_back(name.get<std::string>());
  }
  for (const auto& s : a.at("seeds")) {
    if (!s.is_number_integer() && !s.is_number_unsigned()) {
      throw ConfigError("expected integer seeds at $.ablation.seeds");
    }
    cfg.ablation_seeds.push_back(s.get<std::uint64_t>());
  }
  cfg.ablation_jobs = a.at("jobs").get<int>();
  if (cfg.ablation_jobs < 1) throw ConfigError("jobs must be >= 1 at $.ablation.jobs");

  const json& o = merged.at("output");
  cfg.output.dir = o.at("dir").get<std::string>();
  cfg.output.pgm_export = o.at("pgm_export").get<bool>();
  cfg.output.formats.clear();
  for (const auto& f : o.at("formats")) {
    const std::string fmt = f.get<std::string>();
    if (fmt != "csv" && fmt != "json" && fmt != "svg") {
      throw ConfigError("unknown report format '" + fmt + "' at $.output.formats");
    }
    cfg.output.formats.push_back(fmt);
  }
  cfg.output.dump_count = o.at("dump_count").get<int>();

  cfg.canonical_text = merged.dump(2) + "\n";
  return cfg;
}

}  // namespace

RunConfig default_config() { return parse_config_text("{}"); }

RunConfig parse_config_text(const std::string& json_text) {
  json user;
  try {
    user = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  json merged = default_json();
  merge_checked(merged, user, "");
  return config_from_merged(std::move(merged));
}

RunConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

std::string apply_override_text(const std::string& json_text,
                                const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must look like path.to.key=value, got '" + assignment +
                      "'");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string literal = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(literal);
  } catch (const json::parse_error&) {
    value = literal;  // bare strings are allowed
  }

  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  json* at = &doc;
  std::size_t begin = 0;
  while (true) {
    const std::size_t dot = path.find('.', begin);
    const std::string key = path.substr(begin, dot - begin);
    if (key.empty()) throw ConfigError("empty key segment in override path '" + path + "'");
    if (dot == std::string::npos) {
      (*at)[key] = value;
      break;
    }
    at = &(*at)[key];
    if (!at->is_object() && !at->is_null()) {
      throw ConfigError("override path '" + path + "' crosses a non-object value");
    }
    if (at->is_null()) *at = json::object();
    begin = dot + 1;
  }
  return doc.dump();
}

std::uint64_t config_fingerprint(const RunConfig& cfg) {
  return rng::fnv1a64(cfg.canonical_text);
}

DomainPair build_data(const RunConfig& cfg) {
  DomainPair pair;
  const bool src_idx = !cfg.source_idx_images.empty() || !cfg.source_idx_labels.empty();
  const bool tgt_idx = !cfg.target_idx_images.empty() || !cfg.target_idx_labels.empty();
  if (src_idx || tgt_idx) {
    if (!src_idx || !tgt_idx || cfg.source_idx_labels.empty() ||
        cfg.target_idx_labels.empty() || cfg.source_idx_images.empty() ||
        cfg.target_idx_images.empty()) {
      throw ConfigError(
          "IDX ingestion needs all four of data.{source,target}_idx_{images,labels}");
    }
    DomainDataset src = load_idx(cfg.source_idx_images, cfg.source_idx_labels, "source");
    DomainDataset tgt = load_idx(cfg.target_idx_images, cfg.target_idx_labels, "target");
    // carve val/test off the tails, deterministically
    auto carve = [](const DomainDataset& ds, DomainDataset& train, DomainDataset& val,
                    DomainDataset& test) {
      const std::size_t n = ds.size();
      const std::size_t held = std::min<std::size_t>(n / 4, 512);
      std::vector<std::size_t> tr, va, te;
      for (std::size_t i = 0; i < n - 2 * held; ++i) tr.push_back(i);
      for (std::size_t i = n - 2 * held; i < n - held; ++i) va.push_back(i);
      for (std::size_t i = n - held; i < n; ++i) te.push_back(i);
      train = ds;
      if (held > 0) {
        auto take = [&ds](const std::vector<std::size_t>& idx, Split split) {
          DomainDataset out;
          out.domain_id = ds.domain_id;
          out.image_shape = ds.image_shape;
          out.class_count = ds.class_count;
          out.split = split;
          const std::size_t elems = ds.image_elems();
          out.pixels.resize(idx.size() * elems);
          for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto img = ds.image(idx[i]);
            std::copy(img.begin(), img.end(), out.pixels.begin() + i * elems);
            out.labels.push_back(ds.labels[idx[i]]);
          }
          return out;
        };
        train = take(tr, Split::train);
        val = take(va, Split::val);
        test = take(te, Split::test);
      } else {
        val = ds;
        test = ds;
      }
    };
    carve(src, pair.src_train, pair.src_val, pair.src_test);
    carve(tgt, pair.tgt_train, pair.tgt_val, pair.tgt_test);
  } else {
    pair = make_glyph_pair(cfg.data);
  }

  if (cfg.target_per_class > 0) {
    pair.tgt_train = subsample_per_class(pair.tgt_train, cfg.target_per_class,
                                         rng::derive(cfg.trainer.seed, "target-subsample"));
  }
  if (cfg.trainer.variant.supervision == SupervisionMode::semi) {
    pair.tgt_train = strip_labels(pair.tgt_train, cfg.trainer.variant.labeled_fraction,
                                  rng::derive(cfg.trainer.seed, "strip"));
  }
  return pair;
}

AblationSetup ablation_setup(const RunConfig& cfg) {
  AblationSetup setup;
  setup.data = cfg.data;
  setup.target_per_class = cfg.target_per_class;
  setup.trainer = cfg.trainer;
  setup.pretrain = cfg.pretrain;
  for (const std::string& name : cfg.ablation_variants) {
    VariantSpec spec = cfg.trainer.variant;
    spec.name = variant_from_string(name);
    setup.variants.push_back(spec);
  }
  setup.seeds = cfg.ablation_seeds;
  setup.jobs = cfg.ablation_jobs;
  return setup;
}

}  // namespace acal
