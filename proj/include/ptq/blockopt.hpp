#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ptq/mat.hpp"
#include "ptq/quant.hpp"

namespace ptq {

enum class Nonlinearity { identity, relu };

Nonlinearity nonlinearity_from_string(const std::string& s);
std::string to_string(Nonlinearity n);

// A block is one or two linear layers; the nonlinearity sits between them
// when there are two. Weight rows index input channels (see Matrix).
struct Block {
    std::vector<Matrix> weights;
    std::vector<ChannelMask> masks;  // aligned with weights; may be empty until assigned
    Nonlinearity nonlin = Nonlinearity::identity;
};

struct QuantizedBlock {
    std::vector<QuantizedLayer> layers;
};

// Output-feature matching objective used for optimization. The cosine clamp
// makes the log total; use_nlc = false drops the angular term (ablation).
struct ObjectiveOptions {
    bool use_nlc = true;
    double cosine_clamp = 1e-8;
};

// -log(clamp(cos(f1, f2), clamp_eps, 1)); zero iff the vectors are colinear
// with positive sign.
double nlc_loss(const Vector& f1, const Vector& f2, double clamp_eps = 1e-8);

// ||f1 - f2||_2 + nlc_loss(f1, f2). Matrix features flatten row-major first.
double distance_metric(const Vector& f1, const Vector& f2);
double distance_metric(const Matrix& f1, const Matrix& f2);

// Full-precision forward through the block.
Matrix block_forward(const Block& block, const Matrix& x);

// Forward with dequantized weights under the given scaling vectors.
Matrix block_forward_quantized(const QuantizedBlock& qb, Nonlinearity nonlin,
                               std::span<const ScalingVectors> scales, const Matrix& x);

struct ObjectiveParts {
    double propagation = 0.0;  // distance(F(x, W), F(xq, Wq'))
    double distinction = 0.0;  // distance(F(xq, W), F(xq, Wq'))
    double total() const { return propagation + distinction; }
};

// Two-branch objective: propagation error against the full-precision branch
// plus output distinction on the shared quantized input.
ObjectiveParts block_objective(const Block& block, const QuantizedBlock& qb,
                               std::span<const ScalingVectors> scales, const Matrix& x,
                               const Matrix& xq, const ObjectiveOptions& opt = {});

// Gradient of the objective with respect to one layer's scaling vectors.
struct ScaleGradients {
    std::vector<double> magnitude;
    std::vector<double> row_angular;
    std::vector<double> col_angular;
};

// Analytic gradients for every layer of the block. Codes, signs and masks are
// constants; only the scaling vectors are differentiated.
std::vector<ScaleGradients> block_gradients(const Block& block, const QuantizedBlock& qb,
                                            std::span<const ScalingVectors> scales, const Matrix& x,
                                            const Matrix& xq, const ObjectiveOptions& opt = {});

struct OptConfig {
    double lr_magnitude = 1e-3;  // per-row magnitude scales
    double lr_angular = 5e-4;    // angular scales start at identity
    int epochs = 20;
    int batch_size = 1;         // per-sample steps; only 1 is supported
    double weight_decay = 0.0;  // decoupled decay, must stay zero
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;  // epoch ordering is fixed, shuffled once from this seed
    bool shuffle = true;
    ObjectiveOptions objective;
};

struct TraceRow {
    int step = 0;
    double objective = 0.0;  // per-sample, propagation + distinction
    double propagation = 0.0;
    double distinction = 0.0;
};

struct OptimizeResult {
    std::vector<ScalingVectors> best_scales;  // per layer
    std::vector<TraceRow> trace;              // one row per update step
    double initial_objective = 0.0;           // mean over calibration samples
    double best_objective = 0.0;
    int best_step = 0;
    int steps = 0;
};

class DivergenceError : public Error {
public:
    DivergenceError(const std::string& msg, std::vector<TraceRow> trace)
        : Error(ErrorKind::numeric, msg), trace(std::move(trace)) {}
    std::vector<TraceRow> trace;
};

// Moment-based updates with bias correction and zero decoupled weight decay,
// one calibration sample per step. Returns the parameters with the best
// full-set objective seen, which is never worse than the initial one.
OptimizeResult optimize_scales(const Block& block, const QuantizedBlock& qb,
                               std::span<const Matrix> calib_fp, std::span<const Matrix> calib_q,
                               const OptConfig& cfg);

// Forward with each layer's embedded scaling vectors.
Matrix block_forward_quantized(const QuantizedBlock& qb, Nonlinearity nonlin, const Matrix& x);

// Input of the next block along the quantized path: calibration data pushed
// through every already-quantized predecessor (embedded scales). With no
// predecessors this is the calibration input itself.
std::vector<Matrix> propagate_quantized_input(std::span<const QuantizedBlock> previous,
                                              std::span<const Nonlinearity> nonlins,
                                              std::span<const Matrix> calib);

std::string trace_csv(std::span<const TraceRow> trace);
void write_trace_csv(const std::string& path, std::span<const TraceRow> trace);

}  // namespace ptq
