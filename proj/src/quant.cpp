#include "ptq/quant.hpp"

#include <algorithm>
#include <cmath>

#include "ptq/error.hpp"

namespace ptq {

namespace {

double mean_abs(std::span<const double> w) {
    double acc = 0.0;
    for (double v : w) acc += std::fabs(v);
    return acc / static_cast<double>(w.size());
}

}  // namespace

std::pair<std::vector<std::uint8_t>, AffineRowParams> affine_quantize_row(std::span<const double> w,
                                                                          int bits) {
    require(bits == 2 || bits == 3 || bits == 4 || bits == 8, ErrorKind::config,
            "affine bit-width must be one of 2, 3, 4, 8");
    require(!w.empty(), ErrorKind::data, "affine_quantize_row on empty row");
    for (double v : w)
        require(std::isfinite(v), ErrorKind::data, "affine_quantize_row on non-finite input");

    const auto [mn_it, mx_it] = std::minmax_element(w.begin(), w.end());
    const double mn = *mn_it;
    const double mx = *mx_it;
    const int qmax = (1 << bits) - 1;

    AffineRowParams p;
    p.bits = bits;
    p.scale = (mx > mn) ? (mx - mn) / static_cast<double>(qmax) : 1.0;
    p.zero_point = static_cast<int>(std::clamp<long>(std::lround(-mn / p.scale), 0, qmax));

    std::vector<std::uint8_t> codes(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const long c = std::lround(w[i] / p.scale) + p.zero_point;
        codes[i] = static_cast<std::uint8_t>(std::clamp<long>(c, 0, qmax));
    }
    return {std::move(codes), p};
}

double affine_dequantize(std::uint8_t code, const AffineRowParams& p) {
    return (static_cast<double>(code) - static_cast<double>(p.zero_point)) * p.scale;
}

std::pair<std::vector<std::uint8_t>, double> binarize_row(std::span<const double> w) {
    require(!w.empty(), ErrorKind::data, "binarize_row on empty row");
    std::vector<std::uint8_t> bits(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) bits[i] = w[i] >= 0.0 ? 1 : 0;
    return {std::move(bits), mean_abs(w)};
}

QuantizedLayer quantize_layer(const Matrix& w, const ChannelMask& mask, int salient_bits) {
    require(mask.size() == w.rows(), ErrorKind::data, "mask length does not match weight rows");
    require(w.all_finite(), ErrorKind::data, "quantize_layer on non-finite weights");

    QuantizedLayer q;
    q.rows = w.rows();
    q.cols = w.cols();
    q.mask = mask;
    q.salient_bits = salient_bits;
    q.scales.magnitude.resize(w.rows());
    q.scales.row_angular.assign(w.rows(), 1.0);
    q.scales.col_angular.assign(w.cols(), 1.0);

    for (std::size_t i = 0; i < w.rows(); ++i) {
        const std::span<const double> row(w.row(i), w.cols());
        q.scales.magnitude[i] = mean_abs(row);
        if (mask.is_salient(i)) {
            auto [codes, params] = affine_quantize_row(row, salient_bits);
            q.salient_rows.push_back(static_cast<std::uint32_t>(i));
            q.codes.insert(q.codes.end(), codes.begin(), codes.end());
            q.affine.push_back(params);
        } else {
            auto [bits, alpha] = binarize_row(row);
            (void)alpha;  // same value as q.scales.magnitude[i]
            q.binary_rows.push_back(static_cast<std::uint32_t>(i));
            q.signs.insert(q.signs.end(), bits.begin(), bits.end());
        }
    }
    return q;
}

void validate(const QuantizedLayer& q) {
    const std::size_t k = q.salient_rows.size();
    require(q.rows >= 1 && q.cols >= 1, ErrorKind::data, "quantized layer: empty shape");
    require(q.mask.size() == q.rows, ErrorKind::data, "quantized layer: mask length mismatch");
    require(k + q.binary_rows.size() == q.rows, ErrorKind::data,
            "quantized layer: rows not covered by exactly one branch");
    require(q.codes.size() == k * q.cols, ErrorKind::data, "quantized layer: code plane size mismatch");
    require(q.affine.size() == k, ErrorKind::data, "quantized layer: affine parameter count mismatch");
    require(q.signs.size() == (q.rows - k) * q.cols, ErrorKind::data,
            "quantized layer: sign plane size mismatch");
    require(q.scales.magnitude.size() == q.rows && q.scales.row_angular.size() == q.rows &&
                q.scales.col_angular.size() == q.cols,
            ErrorKind::data, "quantized layer: scaling vector length mismatch");
    for (const auto& p : q.affine) {
        require(p.scale > 0.0 && std::isfinite(p.scale), ErrorKind::data,
                "quantized layer: non-positive affine scale");
        require(p.zero_point >= 0 && p.zero_point <= (1 << p.bits) - 1, ErrorKind::data,
                "quantized layer: zero point out of range");
    }
}

Matrix dequantize_with(const QuantizedLayer& q, const ScalingVectors& scales) {
    validate(q);
    require(scales.magnitude.size() == q.rows && scales.row_angular.size() == q.rows &&
                scales.col_angular.size() == q.cols,
            ErrorKind::data, "dequantize: scaling vector length mismatch");

    Matrix w(q.rows, q.cols);
    for (std::size_t s = 0; s < q.salient_rows.size(); ++s) {
        const std::size_t i = q.salient_rows[s];
        const AffineRowParams& p = q.affine[s];
        const std::uint8_t* codes = q.codes.data() + s * q.cols;
        double* out = w.row(i);
        for (std::size_t b = 0; b < q.cols; ++b) out[b] = affine_dequantize(codes[b], p);
    }
    for (std::size_t s = 0; s < q.binary_rows.size(); ++s) {
        const std::size_t i = q.binary_rows[s];
        const double row_scale = scales.magnitude[i] * scales.row_angular[i];
        const std::uint8_t* bits = q.signs.data() + s * q.cols;
        double* out = w.row(i);
        for (std::size_t b = 0; b < q.cols; ++b) {
            const double sign = bits[b] ? 1.0 : -1.0;
            out[b] = row_scale * scales.col_angular[b] * sign;
        }
    }
    require(w.all_finite(), ErrorKind::numeric, "dequantize produced non-finite values");
    return w;
}

Matrix dequantize(const QuantizedLayer& q) { return dequantize_with(q, q.scales); }

}  // namespace ptq
