#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "moekit/quant.hpp"
#include "moekit/rng.hpp"

using namespace moekit;

TEST_CASE("all-zero group quantizes exactly") {
  std::vector<double> w(32, 0.0);
  const QuantizedTensor q = quantize_weights(w, 1, 32);
  CHECK(q.scale_at(0, 0) == 0.0f);
  for (int c = 0; c < 32; ++c) CHECK(q.code_at(0, c) == 0);
  const auto back = dequantize(q);
  for (double v : back) CHECK(v == 0.0);
}

TEST_CASE("unit-max group gets scale 2/15 and saturates at s/2") {
  std::vector<double> w(32, 0.0);
  w[0] = 1.0;
  w[5] = -0.4;
  const QuantizedTensor q = quantize_weights(w, 1, 32);
  CHECK(q.scale_at(0, 0) == doctest::Approx(2.0 / 15.0).epsilon(1e-7));
  CHECK(q.code_at(0, 0) == 7);  // the max element clamps to the top code
  const auto back = dequantize(q);
  CHECK(back[0] == doctest::Approx(14.0 / 15.0).epsilon(1e-7));
  CHECK(std::abs(1.0 - back[0]) == doctest::Approx(1.0 / 15.0).epsilon(1e-6));
}

TEST_CASE("representable multiples of the scale round trip exactly") {
  // w = k * s for k in [-7, 7]; with max |w| = 7s the derived scale is
  // 14s/15 < s, so representability means codes reproduce the grid values
  std::vector<double> w(32, 0.0);
  const double s = 0.125;  // power of two keeps products exact
  for (int k = -7; k <= 7; ++k) w[k + 7] = k * s;
  w[15] = 7.5 * s;   // forces max so that scale is exactly s
  w[16] = -7.5 * s;  // negative extreme
  const QuantizedTensor q = quantize_weights(w, 1, 32);
  CHECK(q.scale_at(0, 0) == doctest::Approx(s).epsilon(1e-7));
  for (int k = -7; k <= 7; ++k) CHECK(q.code_at(0, k + 7) == k);
  const auto back = dequantize(q);
  for (int k = -7; k <= 7; ++k) {
    CHECK(back[k + 7] == doctest::Approx(k * s).epsilon(1e-6));
  }
}

TEST_CASE("quantize-dequantize-quantize is idempotent on codes") {
  Rng rng(7);
  for (int trial = 0; trial < 10000; ++trial) {
    const int64_t n = 1 + static_cast<int64_t>(rng.uniform_index(64));
    std::vector<double> w(n);
    const double scale = std::exp(rng.uniform(-6.0, 6.0));
    for (double& v : w) v = rng.normal() * scale;
    const QuantizedTensor q1 = quantize_weights(w, 1, n);
    const QuantizedTensor q2 = quantize_weights(dequantize(q1), 1, n);
    REQUIRE(q1.codes == q2.codes);
  }
}

TEST_CASE("round-trip error stays within half a scale step") {
  Rng rng(11);
  double worst_ratio = 0.0;
  for (int trial = 0; trial < 100000; ++trial) {
    const int64_t n = 32;
    std::vector<double> w(n);
    for (double& v : w) v = rng.normal();
    const QuantizedTensor q = quantize_weights(w, 1, n);
    const auto back = dequantize(q);
    const double s = q.scale_at(0, 0);
    for (int64_t i = 0; i < n; ++i) {
      const double err = std::abs(w[i] - back[i]);
      // f32 scale storage costs a few ulps on top of the exact s/2 bound
      REQUIRE(err <= 0.5 * s * (1.0 + 1e-6));
      worst_ratio = std::max(worst_ratio, err / s);
    }
  }
  // the max-magnitude element saturates the bound
  CHECK(worst_ratio == doctest::Approx(0.5).epsilon(1e-5));
}

TEST_CASE("codes are scale equivariant") {
  Rng rng(13);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> w(32);
    for (double& v : w) v = rng.normal();
    const double c = std::exp(rng.uniform(-3.0, 3.0));
    std::vector<double> scaled(32);
    for (int i = 0; i < 32; ++i) scaled[i] = c * w[i];
    const QuantizedTensor q1 = quantize_weights(w, 1, 32);
    const QuantizedTensor q2 = quantize_weights(scaled, 1, 32);
    REQUIRE(q1.codes == q2.codes);
    CHECK(static_cast<double>(q2.scale_at(0, 0)) ==
          doctest::Approx(c * q1.scale_at(0, 0)).epsilon(1e-6));
  }
}

TEST_CASE("partial trailing group uses its actual extent") {
  std::vector<double> w(40, 0.0);  // 32 + 8
  w[35] = 2.0;
  const QuantizedTensor q = quantize_weights(w, 1, 40);
  CHECK(q.groups_per_row() == 2);
  CHECK(q.scale_at(0, 0) == 0.0f);
  CHECK(q.scale_at(0, 1) == doctest::Approx(4.0 / 15.0).epsilon(1e-7));
  CHECK(q.code_at(0, 35) == 7);
}

TEST_CASE("non-finite input is rejected") {
  std::vector<double> w(32, 0.0);
  w[3] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(quantize_weights(w, 1, 32), DomainError);
}

TEST_CASE("int8 activations: scale max/127") {
  std::vector<double> x = {127.0, -32.0, 64.5, 0.0};
  const QuantizedActivations q = quantize_activations_int8(x, 1, 4);
  CHECK(q.scales[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(q.codes[0] == 127);
  CHECK(q.codes[1] == -32);
  CHECK(q.codes[2] == 65);  // round half away from zero
  CHECK(q.codes[3] == 0);

  std::vector<double> zero(8, 0.0);
  const QuantizedActivations qz = quantize_activations_int8(zero, 2, 4);
  CHECK(qz.scales[0] == 0.0);
  for (int8_t c : qz.codes) CHECK(c == 0);
}

TEST_CASE("int8 round trip error within half a step") {
  Rng rng(17);
  for (int trial = 0; trial < 5000; ++trial) {
    std::vector<double> x(16);
    for (double& v : x) v = rng.normal() * 3.0;
    const QuantizedActivations q = quantize_activations_int8(x, 1, 16);
    for (int i = 0; i < 16; ++i) {
      const double back = q.codes[i] * q.scales[0];
      REQUIRE(std::abs(x[i] - back) <= 0.5 * q.scales[0] * (1.0 + 1e-9));
    }
  }
}

TEST_CASE("fake quant: straight-through with recomputed scales") {
  Rng rng(19);
  std::vector<double> w(64);
  for (double& v : w) v = rng.normal();
  const FakeQuantResult r = fake_quant_ste(w, 2, 32);
  // recomputed scales never clamp, so every gradient passes
  for (uint8_t m : r.pass_through) CHECK(m == 1);
  const auto ref = dequantize(quantize_weights(w, 2, 32));
  CHECK(r.values == ref);
}

TEST_CASE("fake quant: frozen scales mask saturated weights") {
  std::vector<double> w(32, 0.0);
  w[0] = 1.0;
  const QuantizedTensor q = quantize_weights(w, 1, 32);
  std::vector<float> frozen = q.scales;

  std::vector<double> moved = w;
  moved[0] = 3.0;    // beyond the frozen code range
  moved[1] = 0.05;   // still representable
  const FakeQuantResult r = fake_quant_ste(moved, 1, 32, 32, 4, &frozen);
  CHECK(r.pass_through[0] == 0);
  CHECK(r.pass_through[1] == 1);
  CHECK(r.values[0] == doctest::Approx(7.0 * frozen[0]).epsilon(1e-7));
}

TEST_CASE("packed footprint accounting") {
  const PackedFootprint f = packed_footprint(1263373056);
  CHECK(f.total_f32_gb == doctest::Approx(0.79).epsilon(0.01));
  CHECK(f.total_f16_gb == doctest::Approx(0.71).epsilon(0.01));
}
