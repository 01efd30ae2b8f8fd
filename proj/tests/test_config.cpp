#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "acal/config.hpp"

using namespace acal;

TEST_CASE("the empty config is all defaults with variant acal") {
  const RunConfig cfg = parse_config_text("{}");
  CHECK(cfg.trainer.variant.name == VariantName::acal);
  CHECK(cfg.trainer.steps == 2000);
  CHECK(cfg.trainer.batch_size == 16);
  CHECK(cfg.trainer.lr_g == 2e-4);
  CHECK(cfg.trainer.lr_m == 1e-3);
  CHECK(cfg.trainer.optimizer.beta1 == 0.5);
  CHECK(cfg.trainer.seed == 1);
  CHECK(cfg.target_per_class == 10);
  CHECK(cfg.data.source_per_class == 200);
  CHECK(cfg.data.target_style.invert);
  CHECK(cfg.data.target_style.noise_sigma == 0.15);
  CHECK(cfg.ablation_seeds == std::vector<std::uint64_t>{1, 2, 3});
  CHECK(cfg.output.formats == std::vector<std::string>{"csv", "json", "svg"});
}

TEST_CASE("overrides win and everything else stays default") {
  const RunConfig cfg = parse_config_text(R"({"trainer":{"seed":7}})");
  CHECK(cfg.trainer.seed == 7);
  CHECK(cfg.trainer.steps == 2000);
  CHECK(cfg.trainer.variant.name == VariantName::acal);
}

TEST_CASE("unknown keys are rejected by name") {
  CHECK_THROWS_WITH_AS(static_cast<void>(parse_config_text(R"({"varant":{}})")),
                       doctest::Contains("unknown key 'varant'"), ConfigError);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(parse_config_text(R"({"trainer":{"sed":1}})")),
      doctest::Contains("unknown key 'sed'"), ConfigError);
}

TEST_CASE("type mismatches name the path") {
  CHECK_THROWS_WITH_AS(
      static_cast<void>(parse_config_text(R"({"trainer":{"steps":"many"}})")),
      doctest::Contains("$.trainer.steps"), ConfigError);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(parse_config_text(R"({"variant":{"name":3}})")),
      doctest::Contains("$.variant.name"), ConfigError);
}

TEST_CASE("invalid values are rejected with context") {
  CHECK_THROWS_AS(parse_config_text(R"({"variant":{"name":"nope"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config_text(R"({"trainer":{"lr_g":0.0}})"), ConfigError);
  CHECK_THROWS_AS(parse_config_text(R"({"trainer":{"batch_size":0}})"), ConfigError);
  CHECK_THROWS_AS(parse_config_text(R"({"variant":{"labeled_fraction":1.5}})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config_text(R"({"ablation":{"variants":["acal","spam"]}})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config_text(R"({"output":{"formats":["pdf"]}})"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("not json"), ConfigError);
}

TEST_CASE("print-config round trips byte-identically") {
  const RunConfig first = parse_config_text(
      R"({"trainer":{"seed":9,"lr_g":0.00037},"variant":{"name":"rcal","cyc_w":5.5}})");
  const RunConfig second = parse_config_text(first.canonical_text);
  CHECK(first.canonical_text == second.canonical_text);
  CHECK(second.trainer.variant.name == VariantName::rcal);
  CHECK(second.trainer.lr_g == 0.00037);
  CHECK(config_fingerprint(first) == config_fingerprint(second));
}

TEST_CASE("dot-path overrides parse JSON literals with string fallback") {
  std::string text = "{}";
  text = apply_override_text(text, "trainer.seed=42");
  text = apply_override_text(text, "variant.name=cyclegan");
  text = apply_override_text(text, "trainer.freeze_source_model=true");
  text = apply_override_text(text, "ablation.seeds=[4,5]");
  const RunConfig cfg = parse_config_text(text);
  CHECK(cfg.trainer.seed == 42);
  CHECK(cfg.trainer.variant.name == VariantName::cyclegan);
  CHECK(cfg.trainer.freeze_source_model);
  CHECK(cfg.ablation_seeds == std::vector<std::uint64_t>{4, 5});

  CHECK_THROWS_AS(apply_override_text("{}", "no-equals-sign"), ConfigError);
}

TEST_CASE("ablation setup inherits weights and lists the registry names") {
  const RunConfig cfg = parse_config_text(
      R"({"variant":{"cyc_w":3.0},"ablation":{"variants":["cyclegan","acal"],"seeds":[11],"jobs":2}})");
  const AblationSetup setup = ablation_setup(cfg);
  REQUIRE(setup.variants.size() == 2);
  CHECK(setup.variants[0].name == VariantName::cyclegan);
  CHECK(setup.variants[0].cyc_w == 3.0);
  CHECK(setup.variants[1].name == VariantName::acal);
  CHECK(setup.seeds == std::vector<std::uint64_t>{11});
  CHECK(setup.jobs == 2);
}

TEST_CASE("build_data applies subsampling and label stripping") {
  const RunConfig cfg = parse_config_text(
      R"({"data":{"source_per_class":12,"target_pool_per_class":8,"val_per_class":4,
          "test_per_class":4,"target_per_class":4},
          "variant":{"supervision":"semi","labeled_fraction":0.5}})");
  const DomainPair pair = build_data(cfg);
  CHECK(pair.tgt_train.size() == 40);
  CHECK(pair.tgt_train.labeled_count() == 20);
  CHECK(pair.src_train.size() == 120);
}

TEST_CASE("IDX ingestion demands all four paths") {
  CHECK_THROWS_WITH_AS(
      static_cast<void>(build_data(
          parse_config_text(R"({"data":{"source_idx_images":"x.idx3"}})"))),
      doctest::Contains("IDX"), ConfigError);
}
