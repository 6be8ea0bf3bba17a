#include "ptq/blockopt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ptq/numerics.hpp"
#include "ptq/rng.hpp"

namespace ptq {

Nonlinearity nonlinearity_from_string(const std::string& s) {
    if (s == "identity") return Nonlinearity::identity;
    if (s == "relu") return Nonlinearity::relu;
    throw_config("unknown nonlinearity: " + s);
}

std::string to_string(Nonlinearity n) {
    return n == Nonlinearity::relu ? "relu" : "identity";
}

double nlc_loss(const Vector& f1, const Vector& f2, double clamp_eps) {
    const double c = cosine_similarity(f1, f2);
    return -std::log(std::clamp(c, clamp_eps, 1.0));
}

double distance_metric(const Vector& f1, const Vector& f2) {
    return l2_distance(f1, f2) + nlc_loss(f1, f2);
}

namespace {

Vector flatten(const Matrix& m) { return Vector(m.values().begin(), m.values().end()); }

Matrix apply_nonlin(const Matrix& y, Nonlinearity nonlin) {
    if (nonlin == Nonlinearity::identity) return y;
    Matrix out = y;
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    return out;
}

void validate_block(const Block& block) {
    require(block.weights.size() == 1 || block.weights.size() == 2, ErrorKind::data,
            "block must have 1 or 2 layers");
    if (block.weights.size() == 2)
        require(block.weights[0].cols() == block.weights[1].rows(), ErrorKind::data,
                "block layer shapes do not compose");
}

// distance_metric(f1, f2); grad_out accumulates d distance / d f2.
double distance_and_grad(const Vector& f1, const Vector& f2, const ObjectiveOptions& opt,
                         Vector* grad_out) {
    const std::size_t n = f1.size();
    double value = 0.0;

    const double l2 = l2_distance(f1, f2);
    value += l2;
    if (grad_out && l2 > 0.0) {
        for (std::size_t i = 0; i < n; ++i) (*grad_out)[i] += (f2[i] - f1[i]) / l2;
    }

    if (opt.use_nlc) {
        const double n1 = norm2(f1);
        const double n2 = norm2(f2);
        require(n1 > 0.0 && n2 > 0.0, ErrorKind::data, "nlc_loss on zero-norm feature");
        const double c_raw = dot(f1, f2) / (n1 * n2);
        value += -std::log(std::clamp(c_raw, opt.cosine_clamp, 1.0));
        if (grad_out && c_raw > opt.cosine_clamp && c_raw < 1.0) {
            const double inv = -1.0 / c_raw;
            for (std::size_t i = 0; i < n; ++i) {
                const double dc = f1[i] / (n1 * n2) - c_raw * f2[i] / (n2 * n2);
                (*grad_out)[i] += inv * dc;
            }
        }
    }
    return value;
}

// Full-precision branch outputs for one calibration sample; constant while
// the scaling vectors are learned.
struct SampleFeatures {
    Vector from_fp_input;   // vec(F(x, W))
    Vector from_q_input;    // vec(F(xq, W))
};

SampleFeatures sample_features(const Block& block, const Matrix& x, const Matrix& xq) {
    return {flatten(block_forward(block, x)), flatten(block_forward(block, xq))};
}

ObjectiveParts objective_from_features(const SampleFeatures& feat, const Block& block,
                                       const QuantizedBlock& qb,
                                       std::span<const ScalingVectors> scales, const Matrix& xq,
                                       const ObjectiveOptions& opt) {
    const Vector f2 = flatten(block_forward_quantized(qb, block.nonlin, scales, xq));
    ObjectiveParts parts;
    parts.propagation = distance_and_grad(feat.from_fp_input, f2, opt, nullptr);
    parts.distinction = distance_and_grad(feat.from_q_input, f2, opt, nullptr);
    return parts;
}

struct GradState {
    ObjectiveParts parts;
    std::vector<ScaleGradients> grads;
};

GradState gradients_from_features(const SampleFeatures& feat, const Block& block,
                                  const QuantizedBlock& qb, std::span<const ScalingVectors> scales,
                                  const Matrix& xq, const ObjectiveOptions& opt) {
    const std::size_t layers = qb.layers.size();
    require(layers == block.weights.size() && layers == scales.size(), ErrorKind::data,
            "block_gradients: layer count mismatch");

    // Quantized-branch forward, keeping intermediates.
    std::vector<Matrix> wq(layers);      // dequantized weights
    std::vector<Matrix> inputs(layers);  // input to each layer
    std::vector<Matrix> pre(layers);     // pre-activation outputs
    for (std::size_t l = 0; l < layers; ++l) {
        wq[l] = dequantize_with(qb.layers[l], scales[l]);
        inputs[l] = (l == 0) ? xq : apply_nonlin(pre[l - 1], block.nonlin);
        pre[l] = matmul(inputs[l], wq[l]);
    }
    const Matrix& out_q = pre[layers - 1];
    const Vector f2 = flatten(out_q);

    GradState state;
    Vector grad_f2(f2.size(), 0.0);
    state.parts.propagation = distance_and_grad(feat.from_fp_input, f2, opt, &grad_f2);
    state.parts.distinction = distance_and_grad(feat.from_q_input, f2, opt, &grad_f2);

    Matrix g(out_q.rows(), out_q.cols());
    std::copy(grad_f2.begin(), grad_f2.end(), g.values().begin());

    // Reverse pass: dW[l] = inputs[l]^T g, then push g through the layer and
    // the nonlinearity kink.
    std::vector<Matrix> dw(layers);
    for (std::size_t l = layers; l-- > 0;) {
        dw[l] = matmul_at(inputs[l], g);
        if (l > 0) {
            Matrix gh = matmul_bt(g, wq[l]);
            if (block.nonlin == Nonlinearity::relu) {
                for (std::size_t i = 0; i < gh.size(); ++i)
                    if (pre[l - 1].values()[i] <= 0.0) gh.values()[i] = 0.0;
            }
            g = std::move(gh);
        }
    }

    // Chain dW into the scaling vectors; salient rows are constant.
    state.grads.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        const QuantizedLayer& q = qb.layers[l];
        const ScalingVectors& sv = scales[l];
        ScaleGradients& sg = state.grads[l];
        sg.magnitude.assign(q.rows, 0.0);
        sg.row_angular.assign(q.rows, 0.0);
        sg.col_angular.assign(q.cols, 0.0);
        for (std::size_t s = 0; s < q.binary_rows.size(); ++s) {
            const std::size_t i = q.binary_rows[s];
            const std::uint8_t* bits = q.signs.data() + s * q.cols;
            const double* dwr = dw[l].row(i);
            double inner = 0.0;
            const double row_scale = sv.magnitude[i] * sv.row_angular[i];
            for (std::size_t b = 0; b < q.cols; ++b) {
                const double sign = bits[b] ? 1.0 : -1.0;
                const double d = dwr[b] * sign;
                inner += d * sv.col_angular[b];
                sg.col_angular[b] += d * row_scale;
            }
            sg.magnitude[i] = inner * sv.row_angular[i];
            sg.row_angular[i] = inner * sv.magnitude[i];
        }
        for (double v : sg.magnitude)
            require(std::isfinite(v), ErrorKind::numeric, "non-finite magnitude gradient");
        for (double v : sg.col_angular)
            require(std::isfinite(v), ErrorKind::numeric, "non-finite angular gradient");
    }
    return state;
}

}  // namespace

double distance_metric(const Matrix& f1, const Matrix& f2) {
    return distance_metric(flatten(f1), flatten(f2));
}

Matrix block_forward(const Block& block, const Matrix& x) {
    validate_block(block);
    Matrix h = matmul(x, block.weights[0]);
    for (std::size_t l = 1; l < block.weights.size(); ++l) {
        h = matmul(apply_nonlin(h, block.nonlin), block.weights[l]);
    }
    return h;
}

Matrix block_forward_quantized(const QuantizedBlock& qb, Nonlinearity nonlin,
                               std::span<const ScalingVectors> scales, const Matrix& x) {
    require(qb.layers.size() >= 1 && qb.layers.size() == scales.size(), ErrorKind::data,
            "quantized block/scales mismatch");
    Matrix h = matmul(x, dequantize_with(qb.layers[0], scales[0]));
    for (std::size_t l = 1; l < qb.layers.size(); ++l) {
        h = matmul(apply_nonlin(h, nonlin), dequantize_with(qb.layers[l], scales[l]));
    }
    return h;
}

Matrix block_forward_quantized(const QuantizedBlock& qb, Nonlinearity nonlin, const Matrix& x) {
    std::vector<ScalingVectors> scales;
    scales.reserve(qb.layers.size());
    for (const auto& layer : qb.layers) scales.push_back(layer.scales);
    return block_forward_quantized(qb, nonlin, scales, x);
}

ObjectiveParts block_objective(const Block& block, const QuantizedBlock& qb,
                               std::span<const ScalingVectors> scales, const Matrix& x,
                               const Matrix& xq, const ObjectiveOptions& opt) {
    validate_block(block);
    require(x.rows() == xq.rows() && x.cols() == xq.cols(), ErrorKind::data,
            "block_objective: input shapes differ");
    return objective_from_features(sample_features(block, x, xq), block, qb, scales, xq, opt);
}

std::vector<ScaleGradients> block_gradients(const Block& block, const QuantizedBlock& qb,
                                            std::span<const ScalingVectors> scales, const Matrix& x,
                                            const Matrix& xq, const ObjectiveOptions& opt) {
    validate_block(block);
    require(x.rows() == xq.rows() && x.cols() == xq.cols(), ErrorKind::data,
            "block_gradients: input shapes differ");
    return gradients_from_features(sample_features(block, x, xq), block, qb, scales, xq, opt).grads;
}

namespace {

struct AdamVector {
    std::vector<double> m, v;

    void init(std::size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
    }

    void update(std::vector<double>& theta, const std::vector<double>& g, double lr, double beta1,
                double beta2, double eps, int step) {
        const double bc1 = 1.0 - std::pow(beta1, step);
        const double bc2 = 1.0 - std::pow(beta2, step);
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            theta[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
};

}  // namespace

OptimizeResult optimize_scales(const Block& block, const QuantizedBlock& qb,
                               std::span<const Matrix> calib_fp, std::span<const Matrix> calib_q,
                               const OptConfig& cfg) {
    validate_block(block);
    require(cfg.lr_magnitude >= 0.0 && cfg.lr_angular >= 0.0, ErrorKind::config,
            "negative learning rate");
    require(cfg.epochs >= 1, ErrorKind::config, "epochs must be >= 1");
    require(cfg.batch_size == 1, ErrorKind::config, "only batch size 1 is supported");
    require(cfg.weight_decay == 0.0, ErrorKind::config, "weight decay must stay zero");
    require(!calib_fp.empty() && calib_fp.size() == calib_q.size(), ErrorKind::data,
            "optimize_scales needs aligned calibration sets");

    const std::size_t layers = qb.layers.size();
    std::vector<ScalingVectors> scales;
    scales.reserve(layers);
    for (const auto& layer : qb.layers) scales.push_back(layer.scales);

    std::vector<SampleFeatures> features;
    features.reserve(calib_fp.size());
    for (std::size_t s = 0; s < calib_fp.size(); ++s)
        features.push_back(sample_features(block, calib_fp[s], calib_q[s]));

    auto full_objective = [&](std::span<const ScalingVectors> sv) {
        double acc = 0.0;
        for (std::size_t s = 0; s < calib_q.size(); ++s)
            acc += objective_from_features(features[s], block, qb, sv, calib_q[s], cfg.objective)
                       .total();
        return acc / static_cast<double>(calib_q.size());
    };

    std::vector<AdamVector> adam_mag(layers), adam_r1(layers), adam_r2(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        adam_mag[l].init(scales[l].magnitude.size());
        adam_r1[l].init(scales[l].row_angular.size());
        adam_r2[l].init(scales[l].col_angular.size());
    }

    std::vector<std::size_t> order(calib_fp.size());
    std::iota(order.begin(), order.end(), 0);
    if (cfg.shuffle) {
        Rng rng(cfg.seed);
        rng.shuffle(order);
    }

    OptimizeResult result;
    result.initial_objective = full_objective(scales);
    result.best_objective = result.initial_objective;
    result.best_scales = scales;
    result.best_step = 0;

    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t idx : order) {
            ++step;
            GradState state = gradients_from_features(features[idx], block, qb, scales,
                                                      calib_q[idx], cfg.objective);
            for (std::size_t l = 0; l < layers; ++l) {
                adam_mag[l].update(scales[l].magnitude, state.grads[l].magnitude, cfg.lr_magnitude,
                                   cfg.beta1, cfg.beta2, cfg.epsilon, step);
                adam_r1[l].update(scales[l].row_angular, state.grads[l].row_angular, cfg.lr_angular,
                                  cfg.beta1, cfg.beta2, cfg.epsilon, step);
                adam_r2[l].update(scales[l].col_angular, state.grads[l].col_angular, cfg.lr_angular,
                                  cfg.beta1, cfg.beta2, cfg.epsilon, step);
            }

            result.trace.push_back(
                {step, state.parts.total(), state.parts.propagation, state.parts.distinction});

            const double obj = full_objective(scales);
            if (!std::isfinite(obj)) {
                throw DivergenceError("optimize_scales diverged at step " + std::to_string(step),
                                      std::move(result.trace));
            }
            if (obj < result.best_objective) {
                result.best_objective = obj;
                result.best_scales = scales;
                result.best_step = step;
            }
        }
    }
    result.steps = step;
    return result;
}

std::vector<Matrix> propagate_quantized_input(std::span<const QuantizedBlock> previous,
                                              std::span<const Nonlinearity> nonlins,
                                              std::span<const Matrix> calib) {
    require(previous.size() == nonlins.size(), ErrorKind::data,
            "propagate_quantized_input: block/nonlinearity count mismatch");
    std::vector<Matrix> xq(calib.begin(), calib.end());
    for (std::size_t b = 0; b < previous.size(); ++b) {
        for (Matrix& sample : xq) sample = block_forward_quantized(previous[b], nonlins[b], sample);
    }
    return xq;
}

std::string trace_csv(std::span<const TraceRow> trace) {
    std::ostringstream out;
    out.precision(17);
    out << "step,objective,branch1,branch2\n";
    for (const TraceRow& row : trace) {
        out << row.step << ',' << row.objective << ',' << row.propagation << ','
            << row.distinction << '\n';
    }
    return out.str();
}

void write_trace_csv(const std::string& path, std::span<const TraceRow> trace) {
    std::ofstream f(path, std::ios::trunc);
    require(f.good(), ErrorKind::data, "cannot open trace file: " + path);
    f << trace_csv(trace);
    require(f.good(), ErrorKind::data, "trace write failed: " + path);
}

}  // namespace ptq
