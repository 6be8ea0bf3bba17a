#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ptq/mat.hpp"

namespace ptq {

enum class SaliencyKind {
    mean_abs,  // default: mean over tokens of |x|
    max_abs,
    l2,
};

SaliencyKind saliency_kind_from_string(const std::string& s);
std::string to_string(SaliencyKind k);

struct ChannelSaliency {
    std::vector<double> scores;  // one non-negative score per input channel
    SaliencyKind kind = SaliencyKind::mean_abs;
};

// Row mask over input channels. 1 = salient (kept at higher precision).
struct ChannelMask {
    std::vector<std::uint8_t> bits;  // length m, values 0/1
    double ratio = 0.0;              // requested salient ratio p
    std::size_t salient = 0;         // popcount of bits

    std::size_t size() const noexcept { return bits.size(); }
    bool is_salient(std::size_t i) const noexcept { return bits[i] != 0; }
};

// Per-channel magnitude statistics of a calibration batch (tokens x channels).
ChannelSaliency channel_saliency(const Matrix& x, SaliencyKind kind = SaliencyKind::mean_abs);

// Marks the k = round(p * m) highest-scoring channels, k clamped to [1, m-1].
// Ties break toward the lower channel index.
ChannelMask build_mask(const ChannelSaliency& s, double ratio);

// Global top-q fraction of |W| entries, ceil(q*m*n) of them, ties toward the
// lower flat index. Diagnostic input to the row-concentration metric.
std::vector<std::uint8_t> weight_saliency_map(const Matrix& w, double ratio);

// Elementwise |X (Wq - W)| together with its channel-magnitude upper bound
// sum_i |X[a,i]| * |Wq[i,b] - W[i,b]|. The bound dominates the error entrywise.
std::pair<Matrix, Matrix> layer_error_and_bound(const Matrix& x, const Matrix& w, const Matrix& wq);

}  // namespace ptq
