#include "ptq/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ptq/error.hpp"

namespace ptq {

SaliencyKind saliency_kind_from_string(const std::string& s) {
    if (s == "mean_abs") return SaliencyKind::mean_abs;
    if (s == "max_abs") return SaliencyKind::max_abs;
    if (s == "l2") return SaliencyKind::l2;
    throw_config("unknown saliency statistic: " + s);
}

std::string to_string(SaliencyKind k) {
    switch (k) {
        case SaliencyKind::mean_abs: return "mean_abs";
        case SaliencyKind::max_abs: return "max_abs";
        case SaliencyKind::l2: return "l2";
    }
    return "mean_abs";
}

ChannelSaliency channel_saliency(const Matrix& x, SaliencyKind kind) {
    require(!x.empty(), ErrorKind::data, "channel_saliency on empty batch");
    const std::size_t t = x.rows();
    const std::size_t m = x.cols();
    ChannelSaliency s;
    s.kind = kind;
    s.scores.assign(m, 0.0);
    for (std::size_t a = 0; a < t; ++a) {
        const double* row = x.row(a);
        for (std::size_t i = 0; i < m; ++i) {
            const double v = std::fabs(row[i]);
            switch (kind) {
                case SaliencyKind::mean_abs: s.scores[i] += v; break;
                case SaliencyKind::max_abs: s.scores[i] = std::max(s.scores[i], v); break;
                case SaliencyKind::l2: s.scores[i] += v * v; break;
            }
        }
    }
    if (kind == SaliencyKind::mean_abs) {
        for (double& v : s.scores) v /= static_cast<double>(t);
    } else if (kind == SaliencyKind::l2) {
        for (double& v : s.scores) v = std::sqrt(v);
    }
    return s;
}

namespace {

// Indices of the k largest scores, ties toward the lower index.
std::vector<std::size_t> top_k_indices(const std::vector<double>& scores, std::size_t k) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(k);
    return order;
}

}  // namespace

ChannelMask build_mask(const ChannelSaliency& s, double ratio) {
    require(ratio > 0.0 && ratio < 1.0, ErrorKind::config, "salient ratio must be in (0, 1)");
    const std::size_t m = s.scores.size();
    require(m >= 2, ErrorKind::data, "build_mask needs at least 2 channels");
    auto k = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(m)));
    k = std::clamp<std::size_t>(k, 1, m - 1);

    ChannelMask mask;
    mask.ratio = ratio;
    mask.salient = k;
    mask.bits.assign(m, 0);
    for (std::size_t i : top_k_indices(s.scores, k)) mask.bits[i] = 1;
    return mask;
}

std::vector<std::uint8_t> weight_saliency_map(const Matrix& w, double ratio) {
    require(ratio > 0.0 && ratio < 1.0, ErrorKind::config, "saliency ratio must be in (0, 1)");
    const std::size_t total = w.size();
    const auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(total)));

    std::vector<double> mag(total);
    for (std::size_t i = 0; i < total; ++i) mag[i] = std::fabs(w.values()[i]);

    std::vector<std::uint8_t> map(total, 0);
    for (std::size_t i : top_k_indices(mag, k)) map[i] = 1;
    return map;
}

std::pair<Matrix, Matrix> layer_error_and_bound(const Matrix& x, const Matrix& w, const Matrix& wq) {
    require(w.rows() == wq.rows() && w.cols() == wq.cols(), ErrorKind::data,
            "layer_error_and_bound: weight shapes differ");
    require(x.cols() == w.rows(), ErrorKind::data, "layer_error_and_bound: activation/weight mismatch");

    const std::size_t t = x.rows();
    const std::size_t m = w.rows();
    const std::size_t n = w.cols();
    Matrix err(t, n);
    Matrix bound(t, n);
    for (std::size_t a = 0; a < t; ++a) {
        double* er = err.row(a);
        double* br = bound.row(a);
        for (std::size_t i = 0; i < m; ++i) {
            const double xv = x(a, i);
            const double xa = std::fabs(xv);
            const double* wr = w.row(i);
            const double* qr = wq.row(i);
            for (std::size_t b = 0; b < n; ++b) {
                const double dw = qr[b] - wr[b];
                er[b] += xv * dw;
                br[b] += xa * std::fabs(dw);
            }
        }
        for (std::size_t b = 0; b < n; ++b) er[b] = std::fabs(er[b]);
    }
    return {std::move(err), std::move(bound)};
}

}  // namespace ptq
