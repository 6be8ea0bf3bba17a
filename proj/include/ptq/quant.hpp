#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "ptq/mat.hpp"
#include "ptq/saliency.hpp"

namespace ptq {

// Min-max affine parameters of one salient row.
struct AffineRowParams {
    double scale = 1.0;  // > 0
    int zero_point = 0;  // in [0, 2^bits - 1]
    int bits = 4;
};

// The three learnable scaling vectors of a quantized layer. magnitude and
// row_angular have one entry per input channel (row); col_angular has one per
// output feature. magnitude is meaningful on binarized rows only; the angular
// vectors start at all-ones.
struct ScalingVectors {
    std::vector<double> magnitude;    // length m
    std::vector<double> row_angular;  // length m
    std::vector<double> col_angular;  // length n
};

// Mixed-precision quantized layer: salient rows carry 4-bit affine codes,
// remaining rows carry a sign bit per element plus the scaling vectors.
struct QuantizedLayer {
    std::size_t rows = 0;
    std::size_t cols = 0;
    ChannelMask mask;
    std::vector<std::uint32_t> salient_rows;  // ascending row indices, size k
    std::vector<std::uint32_t> binary_rows;   // ascending row indices, size m - k
    std::vector<std::uint8_t> codes;          // k x cols affine codes
    std::vector<AffineRowParams> affine;      // k entries, aligned with salient_rows
    std::vector<std::uint8_t> signs;          // (m - k) x cols, 1 means +1
    ScalingVectors scales;
    int salient_bits = 4;

    std::size_t salient_count() const noexcept { return salient_rows.size(); }
};

// Min-max affine quantization of a row: scale = (max - min) / (2^bits - 1)
// (1 if the row is constant), zero point = clamp(round(-min/scale)), code =
// clamp(round(w/scale) + zero, 0, 2^bits - 1). Decode is (code - zero) * scale.
std::pair<std::vector<std::uint8_t>, AffineRowParams> affine_quantize_row(std::span<const double> w,
                                                                          int bits);

double affine_dequantize(std::uint8_t code, const AffineRowParams& p);

// Sign binarization: bit = 1 iff w >= 0 (zero maps to +1). The returned scale
// is mean |w|, the exact minimizer of || w - a*sign(w) ||_2 over a.
std::pair<std::vector<std::uint8_t>, double> binarize_row(std::span<const double> w);

// Routes each row by the mask: salient rows get affine codes, the rest get
// sign bits. magnitude scales start at mean |w| per row, angular scales at 1.
QuantizedLayer quantize_layer(const Matrix& w, const ChannelMask& mask, int salient_bits = 4);

// Dense reconstruction. Salient row i: (code - zero) * scale. Binarized row i,
// column j: magnitude[i] * row_angular[i] * col_angular[j] * sign(i,j).
Matrix dequantize(const QuantizedLayer& q);

// Same, with the scaling vectors overridden (used while they are being learned).
Matrix dequantize_with(const QuantizedLayer& q, const ScalingVectors& scales);

void validate(const QuantizedLayer& q);

}  // namespace ptq
