#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "moekit/arch.hpp"

using namespace moekit;

namespace {

BaseArch backbone_s() { return BaseArch{768, 3072, 12, 4, 64, 20, 128256, 500000.0}; }
BaseArch backbone_m() { return BaseArch{1024, 4096, 16, 4, 64, 26, 128256, 500000.0}; }
BaseArch backbone_l() { return BaseArch{1280, 5120, 20, 4, 64, 32, 128256, 500000.0}; }

MoeSpec production_moe() { return MoeSpec::with_shared(8, 8, 1, 4); }

}  // namespace

TEST_CASE("published configurations hit the released totals") {
  struct Row {
    BaseArch base;
    int64_t n_act, n_total;       // exact under the counting scheme
    double pub_act, pub_total;    // released values
  };
  const Row rows[] = {
      {backbone_s(), 272468736, 1263373056, 272e6, 1.26e9},
      {backbone_m(), 528299008, 2818388992, 528e6, 2.82e9},
      {backbone_l(), 921683200, 5325702400, 922e6, 5.33e9},
  };
  for (const Row& row : rows) {
    const ParamCounts c = count_params(row.base, production_moe());
    CHECK(c.n_act == row.n_act);
    CHECK(c.n_total == row.n_total);
    CHECK(std::abs(c.n_act - row.pub_act) / row.pub_act < 0.01);
    CHECK(std::abs(c.n_total - row.pub_total) / row.pub_total < 0.01);
    int64_t sum = 0;
    for (const auto& [name, v] : c.breakdown) {
      CHECK(v >= 0);
      sum += v;
    }
    CHECK(sum == c.n_total);
  }
}

TEST_CASE("dense spec collapses to n_act == n_total") {
  const ParamCounts c = count_params(backbone_s(), MoeSpec::dense());
  CHECK(c.n_act == c.n_total);
  CHECK(c.breakdown.at("shared_expert") == 0);
}

TEST_CASE("n_total grows strictly with E, n_act does not move") {
  int64_t prev_total = -1;
  int64_t act_ex_router = -1;
  for (int64_t e : {1, 2, 4, 8, 16, 32}) {
    MoeSpec m;
    m.e = e;
    const ParamCounts c = count_params(backbone_s(), m);
    CHECK(c.n_total > prev_total);
    prev_total = c.n_total;
    // the router matrix widens with E; everything else activated is fixed
    const int64_t ex_router = c.n_act - c.breakdown.at("router");
    if (act_ex_router < 0) {
      act_ex_router = ex_router;
    } else {
      CHECK(ex_router == act_ex_router);
    }
    CHECK(c.breakdown.at("router") * 250 < c.n_act);  // under 0.4% of n_act
    CHECK(c.n_act <= c.n_total);
  }
}

TEST_CASE("granularity preserves both totals") {
  MoeSpec base_moe;
  base_moe.e = 8;
  base_moe.k = 1;
  const ParamCounts ref = count_params(backbone_s(), base_moe);
  for (int64_t g : {2, 4, 8, 16}) {
    MoeSpec m = base_moe;
    m.g = g;
    const ParamCounts c = count_params(backbone_s(), m);
    // fine splitting multiplies expert count and divides width; only the
    // router matrix (negligible) changes
    CHECK(c.breakdown.at("routed_experts") == ref.breakdown.at("routed_experts"));
    CHECK(c.breakdown.at("shared_expert") == ref.breakdown.at("shared_expert"));
    const int64_t router_diff = c.breakdown.at("router") - ref.breakdown.at("router");
    CHECK(c.n_total - router_diff == ref.n_total);
    CHECK(c.n_act - router_diff == ref.n_act);
  }
}

TEST_CASE("shared expert swap is parameter neutral") {
  // 60 routed + shared(4 units) top-4 versus 64 routed top-8
  const MoeSpec with = MoeSpec::with_shared(8, 8, 1, 4);
  MoeSpec without;
  without.e = 8;
  without.g = 8;
  without.k = 1;

  CHECK(with.routed_count() == 60);
  CHECK(with.routed_topk() == 4);
  CHECK(without.routed_count() == 64);
  CHECK(without.routed_topk() == 8);

  const ParamCounts a = count_params(backbone_s(), with);
  const ParamCounts b = count_params(backbone_s(), without);

  // expert block matches exactly
  const int64_t block_a = a.breakdown.at("routed_experts") + a.breakdown.at("shared_expert");
  const int64_t block_b = b.breakdown.at("routed_experts") + b.breakdown.at("shared_expert");
  CHECK(block_a == block_b);

  // whole model within 0.1%; the residual is the router width (4 * d_model per layer)
  CHECK(b.breakdown.at("router") - a.breakdown.at("router") == 4 * 768 * 20);
  CHECK(std::abs(a.n_total - b.n_total) <= b.n_total / 1000);
  CHECK(std::abs(a.n_act - b.n_act) <= b.n_act / 1000);
}

TEST_CASE("flops accounting") {
  ParamCounts c;
  c.n_act = 272500000;
  CHECK(inference_flops(c) == doctest::Approx(0.545e9).epsilon(1e-9));
  c.n_act = 0;
  CHECK(inference_flops(c) == 0.0);
  c.n_act = 922000000;
  CHECK(inference_flops(c) == doctest::Approx(1.844e9).epsilon(1e-9));

  c.n_act = 300000000;
  CHECK(training_flops(c, 500e9) == doctest::Approx(9.0e20).epsilon(1e-12));
  CHECK(training_flops(c, 0.0) == 0.0);
  CHECK(training_flops(c, 2.78e11) == doctest::Approx(5.004e20).epsilon(1e-12));
  CHECK_THROWS_AS(training_flops(c, -1.0), DomainError);
}

TEST_CASE("memory proxy") {
  const BaseArch s = backbone_s();
  const ParamCounts c = count_params(s, production_moe());

  MemoryBudget weights_only{4, 8, 0, 5.0};
  MemoryReport r = memory_proxy(c, s, weights_only);
  CHECK(r.total_gb == doctest::Approx(0.631686528).epsilon(1e-12));
  CHECK(r.kv_cache_gb == 0.0);
  CHECK(r.total_gb == r.weight_gb);

  MemoryBudget ctx{4, 8, 8192, 5.0};
  r = memory_proxy(c, s, ctx);
  CHECK(r.weight_gb == doctest::Approx(0.631686528).epsilon(1e-12));
  CHECK(r.kv_cache_gb == doctest::Approx(0.083886080).epsilon(1e-12));
  CHECK(r.total_gb == doctest::Approx(0.715572608).epsilon(1e-12));
  CHECK(r.feasible);

  ParamCounts one_b;
  one_b.n_total = 1000000000;
  MemoryBudget fp16{16, 8, 0, 5.0};
  CHECK(memory_proxy(one_b, s, fp16).total_gb == doctest::Approx(2.0).epsilon(1e-12));

  // linear in n_total and in T
  ParamCounts half = c;
  half.n_total = c.n_total / 2;
  const double w_full = memory_proxy(c, s, weights_only).total_gb;
  const double w_half = memory_proxy(half, s, weights_only).total_gb;
  CHECK(w_half == doctest::Approx(w_full / 2).epsilon(1e-9));
  MemoryBudget ctx2{4, 8, 16384, 5.0};
  const double kv1 = memory_proxy(c, s, ctx).kv_cache_gb;
  const double kv2 = memory_proxy(c, s, ctx2).kv_cache_gb;
  CHECK(kv2 == doctest::Approx(2.0 * kv1).epsilon(1e-12));

  MemoryBudget tiny{4, 8, 8192, 0.1};
  CHECK_FALSE(memory_proxy(c, s, tiny).feasible);
  MemoryBudget bad{5, 8, 8192, 5.0};
  CHECK_THROWS_AS(memory_proxy(c, s, bad), DomainError);
}

TEST_CASE("validation rejects malformed specs") {
  BaseArch bad = backbone_s();
  bad.d_h = 32;
  CHECK_THROWS_AS(count_params(bad, MoeSpec::dense()), DomainError);

  MoeSpec odd_g;
  odd_g.e = 8;
  odd_g.g = 7;  // 3072 % 7 != 0
  CHECK_THROWS_AS(count_params(backbone_s(), odd_g), DomainError);

  MoeSpec starved = MoeSpec::with_shared(8, 8, 1, 9);  // topk would be < 1
  CHECK_THROWS_AS(count_params(backbone_s(), starved), DomainError);

  BaseArch gqa = backbone_s();
  gqa.n_h = 10;
  gqa.d_model = 640;
  gqa.d_ff = 2560;
  gqa.n_kv = 4;  // 10 % 4 != 0
  CHECK_THROWS_AS(gqa.validate(), DomainError);
}

TEST_CASE("config json round trip") {
  ModelConfig cfg;
  cfg.backbone = backbone_m();
  cfg.moe = production_moe();
  cfg.moe.dispatch = DispatchMode::kDropAndPad;

  const nlohmann::json j = to_json(cfg);
  const ModelConfig back = model_config_from_json(j);
  CHECK(back.backbone.d_model == cfg.backbone.d_model);
  CHECK(back.backbone.vocab_size == cfg.backbone.vocab_size);
  CHECK(back.backbone.rope_theta == cfg.backbone.rope_theta);
  CHECK(back.moe.e == cfg.moe.e);
  CHECK(back.moe.shared == cfg.moe.shared);
  CHECK(back.moe.shared_units == cfg.moe.shared_units);
  CHECK(back.moe.dispatch == DispatchMode::kDropAndPad);

  const ParamCounts c1 = count_params(cfg.backbone, cfg.moe);
  const ParamCounts c2 = count_params(back.backbone, back.moe);
  CHECK(c1.n_total == c2.n_total);
}
