#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ptq/blockopt.hpp"
#include "ptq/mat.hpp"

namespace ptq {

// Low-rank weight compensation for one layer: merged weights are W + down * up.
struct LowRankAdapter {
    Matrix down;  // m x r
    Matrix up;    // r x n
};

struct RestorationConfig {
    int steps = 200;  // 20000 at full scale; desk-scale default keeps runs fast
    double learning_rate = 1e-2;
    int rank = 4;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Parameters of the frozen initial quantizer the restoration trains against:
// structured mask plus analytic binarization, no scale optimization.
struct InitialQuantizer {
    double salient_ratio = 0.2;
    int salient_bits = 4;
    SaliencyKind saliency = SaliencyKind::mean_abs;
};

struct RestoreResult {
    std::vector<std::vector<LowRankAdapter>> adapters;  // per block, per layer
    std::vector<Block> merged;                          // original weights + down*up
    std::vector<double> loss_trace;                     // mean squared output gap per step
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

// Exact W + down * up.
Matrix merge(const LowRankAdapter& adapter, const Matrix& w);

// Trains the adapters so the initially-quantized model plus compensation
// reproduces full-precision block outputs on the given batches. Base weights
// are frozen; the returned model carries the original weights with the
// compensation merged in.
RestoreResult restore(std::span<const Block> model, std::span<const Matrix> batches,
                      const InitialQuantizer& quantizer, const RestorationConfig& cfg);

// Fraction of the global top-q weight entries that fall inside the
// top-ceil(q*m) rows by L1 mass. 1.0 means perfectly row-concentrated;
// an exchangeable random matrix scores about q.
double row_concentration(const Matrix& w, double ratio);

}  // namespace ptq
