#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "moekit/arch.hpp"

namespace moekit {

// Symmetric group-wise low-bit weights:
//   s_g = 2 * max|W_g| / (2^b - 1)
//   q   = clamp(round(W / s_g), -2^(b-1), 2^(b-1) - 1)
// Groups of 32 run along the input (column) dimension. Codes are packed two
// per byte as code+8, low nibble = even column. Scales are one f32 per group.
//
// Rounding at the half-way points is toward zero. The max-magnitude element
// of a group sits exactly at ratio +-(2^b - 1)/2, and toward-zero keeps the
// emitted codes inside [-(2^(b-1)-1), 2^(b-1)-1], which is what makes
// quantize(dequantize(q)) reproduce q's codes bit-exactly.
struct QuantizedTensor {
  int64_t rows = 0;
  int64_t cols = 0;
  int group_size = 32;
  int bits = 4;
  std::vector<uint8_t> codes;  // rows * ceil(cols/2)
  std::vector<float> scales;   // rows * ceil(cols/group_size)

  int64_t row_code_bytes() const { return (cols + 1) / 2; }
  int64_t groups_per_row() const { return (cols + group_size - 1) / group_size; }

  int code_at(int64_t r, int64_t c) const {
    const uint8_t byte = codes[r * row_code_bytes() + c / 2];
    const int nibble = (c % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
    return nibble - 8;
  }

  void set_code(int64_t r, int64_t c, int code) {
    uint8_t& byte = codes[r * row_code_bytes() + c / 2];
    const uint8_t nibble = static_cast<uint8_t>(code + 8) & 0x0F;
    if (c % 2 == 0) {
      byte = static_cast<uint8_t>((byte & 0xF0) | nibble);
    } else {
      byte = static_cast<uint8_t>((byte & 0x0F) | (nibble << 4));
    }
  }

  float scale_at(int64_t r, int64_t group) const {
    return scales[r * groups_per_row() + group];
  }
};

namespace quantdetail {

inline double round_ties_toward_zero(double x) {
  const double ax = std::abs(x);
  double r = std::floor(ax + 0.5);
  if (r - ax == 0.5) r -= 1.0;
  return x < 0.0 ? -r : r;
}

inline double round_half_away(double x) {
  const double ax = std::abs(x);
  const double r = std::floor(ax + 0.5);
  return x < 0.0 ? -r : r;
}

}  // namespace quantdetail

inline QuantizedTensor quantize_weights(const std::vector<double>& w,
                                        int64_t rows, int64_t cols,
                                        int group_size = 32, int bits = 4) {
  if (rows < 0 || cols < 0 || static_cast<int64_t>(w.size()) != rows * cols) {
    throw DomainError("weight buffer does not match shape");
  }
  if (bits < 2 || bits > 8) throw DomainError("bits must be in [2, 8]");
  if (group_size < 1) throw DomainError("group_size must be >= 1");

  QuantizedTensor q;
  q.rows = rows;
  q.cols = cols;
  q.group_size = group_size;
  q.bits = bits;
  q.codes.assign(rows * q.row_code_bytes(), 0x88);  // code 0 in both nibbles
  q.scales.assign(rows * q.groups_per_row(), 0.0f);

  const int q_hi = (1 << (bits - 1)) - 1;
  const int q_lo = -(1 << (bits - 1));
  const double levels = static_cast<double>((1 << bits) - 1);
  const double q_mid = levels / 2.0;  // max element lands exactly here

  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t g = 0; g < q.groups_per_row(); ++g) {
      const int64_t c0 = g * group_size;
      const int64_t c1 = std::min<int64_t>(cols, c0 + group_size);
      double g_max = 0.0;
      for (int64_t c = c0; c < c1; ++c) {
        const double v = w[r * cols + c];
        if (!std::isfinite(v)) throw DomainError("non-finite weight");
        g_max = std::max(g_max, std::abs(v));
      }
      if (g_max == 0.0) continue;  // scale 0, codes 0, dequantizes exactly
      q.scales[r * q.groups_per_row() + g] =
          static_cast<float>(2.0 * g_max / levels);
      for (int64_t c = c0; c < c1; ++c) {
        const double ratio = w[r * cols + c] / g_max * q_mid;
        int code = static_cast<int>(quantdetail::round_ties_toward_zero(ratio));
        code = std::clamp(code, q_lo, q_hi);
        q.set_code(r, c, code);
      }
    }
  }
  return q;
}

inline std::vector<double> dequantize(const QuantizedTensor& q) {
  std::vector<double> out(q.rows * q.cols, 0.0);
  for (int64_t r = 0; r < q.rows; ++r) {
    for (int64_t c = 0; c < q.cols; ++c) {
      const double s = q.scale_at(r, c / q.group_size);
      out[r * q.cols + c] = q.code_at(r, c) * s;
    }
  }
  return out;
}

// INT8 dynamic per-row activation quantization: scale = max|x| / 127.
struct QuantizedActivations {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<int8_t> codes;
  std::vector<double> scales;  // one per row
};

inline QuantizedActivations quantize_activations_int8(
    const std::vector<double>& x, int64_t rows, int64_t cols) {
  if (static_cast<int64_t>(x.size()) != rows * cols) {
    throw DomainError("activation buffer does not match shape");
  }
  QuantizedActivations q;
  q.rows = rows;
  q.cols = cols;
  q.codes.assign(rows * cols, 0);
  q.scales.assign(rows, 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    double r_max = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      const double v = x[r * cols + c];
      if (!std::isfinite(v)) throw DomainError("non-finite activation");
      r_max = std::max(r_max, std::abs(v));
    }
    if (r_max == 0.0) continue;
    q.scales[r] = r_max / 127.0;
    for (int64_t c = 0; c < cols; ++c) {
      const double ratio = x[r * cols + c] / r_max * 127.0;
      const int code = static_cast<int>(quantdetail::round_half_away(ratio));
      q.codes[r * cols + c] = static_cast<int8_t>(std::clamp(code, -127, 127));
    }
  }
  return q;
}

inline int8_t quantize_row_value(double v, double scale) {
  if (scale == 0.0) return 0;
  const int code = static_cast<int>(quantdetail::round_half_away(v / scale));
  return static_cast<int8_t>(std::clamp(code, -127, 127));
}

// Straight-through fake quantization. Forward applies
// dequantize(quantize(w)); backward passes gradients through where the code
// did not clamp and zeroes them where it did. With per-step recomputed
// scales the clamp never fires; freezing the scales makes saturation
// possible, which is what the mask is for.
struct FakeQuantResult {
  std::vector<double> values;
  std::vector<uint8_t> pass_through;  // 1 where gradient flows
  QuantizedTensor quantized;
};

inline FakeQuantResult fake_quant_ste(
    const std::vector<double>& w, int64_t rows, int64_t cols,
    int group_size = 32, int bits = 4,
    const std::vector<float>* frozen_scales = nullptr) {
  FakeQuantResult out;
  out.pass_through.assign(rows * cols, 1);
  if (frozen_scales == nullptr) {
    out.quantized = quantize_weights(w, rows, cols, group_size, bits);
    out.values = dequantize(out.quantized);
    return out;
  }

  QuantizedTensor q;
  q.rows = rows;
  q.cols = cols;
  q.group_size = group_size;
  q.bits = bits;
  q.codes.assign(rows * q.row_code_bytes(), 0x88);
  q.scales = *frozen_scales;
  if (static_cast<int64_t>(q.scales.size()) != rows * q.groups_per_row()) {
    throw DomainError("frozen scale count does not match shape");
  }
  const int q_hi = (1 << (bits - 1)) - 1;
  const int q_lo = -(1 << (bits - 1));
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      const double s = q.scale_at(r, c / group_size);
      if (s == 0.0) {
        out.pass_through[r * cols + c] = w[r * cols + c] == 0.0 ? 1 : 0;
        continue;
      }
      const double ratio = w[r * cols + c] / s;
      const double rounded = quantdetail::round_ties_toward_zero(ratio);
      int code = static_cast<int>(rounded);
      if (rounded < q_lo || rounded > q_hi) {
        out.pass_through[r * cols + c] = 0;
        code = std::clamp(code, q_lo, q_hi);
      }
      q.set_code(r, c, code);
    }
  }
  out.quantized = q;
  out.values = dequantize(q);
  return out;
}

// Packed container footprint: ceil(n/2) code bytes + one scale per 32
// elements. Reported at both f32 and f16 scale widths.
struct PackedFootprint {
  double codes_gb = 0.0;
  double scales_f32_gb = 0.0;
  double scales_f16_gb = 0.0;
  double total_f32_gb = 0.0;
  double total_f16_gb = 0.0;
};

inline PackedFootprint packed_footprint(int64_t n_params, int group_size = 32) {
  PackedFootprint f;
  const double n = static_cast<double>(n_params);
  f.codes_gb = (n + 1) / 2.0 / 1e9;
  const double groups = std::ceil(n / static_cast<double>(group_size));
  f.scales_f32_gb = groups * 4.0 / 1e9;
  f.scales_f16_gb = groups * 2.0 / 1e9;
  f.total_f32_gb = f.codes_gb + f.scales_f32_gb;
  f.total_f16_gb = f.codes_gb + f.scales_f16_gb;
  return f;
}

}  // namespace moekit
