#include "ptq/preproc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ptq/numerics.hpp"
#include "ptq/rng.hpp"
#include "ptq/saliency.hpp"

namespace ptq {

Matrix merge(const LowRankAdapter& adapter, const Matrix& w) {
    require(adapter.down.rows() == w.rows() && adapter.up.cols() == w.cols() &&
                adapter.down.cols() == adapter.up.rows(),
            ErrorKind::data, "merge: adapter shapes do not compose with the layer");
    Matrix merged = w;
    const Matrix delta = matmul_serial(adapter.down, adapter.up);
    for (std::size_t i = 0; i < merged.size(); ++i) merged.values()[i] += delta.values()[i];
    return merged;
}

namespace {

struct FlatLayer {
    std::size_t block = 0;
    std::size_t layer = 0;
    bool relu_after = false;
};

// Blocks compose linearly; the only nonlinearities sit inside two-layer blocks.
std::vector<FlatLayer> flatten_model(std::span<const Block> model) {
    std::vector<FlatLayer> flat;
    for (std::size_t b = 0; b < model.size(); ++b) {
        const Block& block = model[b];
        require(block.weights.size() == 1 || block.weights.size() == 2, ErrorKind::data,
                "restore: block must have 1 or 2 layers");
        for (std::size_t l = 0; l < block.weights.size(); ++l) {
            const bool relu = block.weights.size() == 2 && l == 0 &&
                              block.nonlin == Nonlinearity::relu;
            flat.push_back({b, l, relu});
        }
    }
    return flat;
}

Matrix stack_forward(std::span<const Matrix> weights, std::span<const FlatLayer> flat,
                     const Matrix& x, std::vector<Matrix>* inputs, std::vector<Matrix>* pre) {
    Matrix h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        if (inputs) (*inputs)[l] = h;
        Matrix y = matmul(h, weights[l]);
        if (pre) (*pre)[l] = y;
        if (flat[l].relu_after) {
            for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
        }
        h = std::move(y);
    }
    return h;
}

double mse(const Matrix& a, const Matrix& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.values()[i] - b.values()[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

struct AdamState {
    std::vector<double> m, v;
    void init(std::size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
    }
    void update(std::span<double> theta, std::span<const double> g, const RestorationConfig& cfg,
                int step) {
        const double bc1 = 1.0 - std::pow(cfg.beta1, step);
        const double bc2 = 1.0 - std::pow(cfg.beta2, step);
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            theta[i] -= cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.epsilon);
        }
    }
};

}  // namespace

RestoreResult restore(std::span<const Block> model, std::span<const Matrix> batches,
                      const InitialQuantizer& quantizer, const RestorationConfig& cfg) {
    require(cfg.steps >= 0, ErrorKind::config, "restore: steps must be >= 0");
    require(cfg.rank >= 1, ErrorKind::config, "restore: rank must be >= 1");
    require(!model.empty() && !batches.empty(), ErrorKind::data, "restore: empty model or batch list");

    const std::vector<FlatLayer> flat = flatten_model(model);
    const std::size_t layers = flat.size();

    // Frozen base: mask from full-precision activations, then analytic
    // quantization, dequantized once.
    std::vector<Matrix> base(layers);
    {
        std::vector<Matrix> acts(batches.begin(), batches.end());
        for (std::size_t l = 0; l < layers; ++l) {
            const Matrix& w = model[flat[l].block].weights[flat[l].layer];
            require(cfg.rank <= static_cast<int>(std::min(w.rows(), w.cols())), ErrorKind::config,
                    "restore: rank exceeds layer dimensions");
            Matrix stacked = acts[0];
            for (std::size_t s = 1; s < acts.size(); ++s) {
                Matrix grown(stacked.rows() + acts[s].rows(), stacked.cols());
                std::copy(stacked.values().begin(), stacked.values().end(), grown.values().begin());
                std::copy(acts[s].values().begin(), acts[s].values().end(),
                          grown.values().begin() + static_cast<std::ptrdiff_t>(stacked.size()));
                stacked = std::move(grown);
            }
            const ChannelMask mask =
                build_mask(channel_saliency(stacked, quantizer.saliency), quantizer.salient_ratio);
            base[l] = dequantize(quantize_layer(w, mask, quantizer.salient_bits));
            for (Matrix& a : acts) {
                Matrix y = matmul(a, w);
                if (flat[l].relu_after)
                    for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
                a = std::move(y);
            }
        }
    }

    // Full-precision targets.
    std::vector<Matrix> targets;
    targets.reserve(batches.size());
    std::vector<Matrix> model_weights;
    for (const FlatLayer& f : flat) model_weights.push_back(model[f.block].weights[f.layer]);
    for (const Matrix& x : batches) targets.push_back(stack_forward(model_weights, flat, x, nullptr, nullptr));

    // Adapters: down starts small random, up starts zero, so the initial
    // compensation is exactly zero.
    Rng rng(cfg.seed);
    std::vector<LowRankAdapter> adapters(layers);
    std::vector<AdamState> adam_down(layers), adam_up(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        const Matrix& w = model_weights[l];
        const auto r = static_cast<std::size_t>(cfg.rank);
        adapters[l].down = rng.normal_matrix(w.rows(), r, 1.0 / std::sqrt(static_cast<double>(r)));
        adapters[l].up = Matrix(r, w.cols());
        adam_down[l].init(adapters[l].down.size());
        adam_up[l].init(adapters[l].up.size());
    }

    auto adapted_weights = [&]() {
        std::vector<Matrix> ws(layers);
        for (std::size_t l = 0; l < layers; ++l) ws[l] = merge(adapters[l], base[l]);
        return ws;
    };

    auto full_loss = [&](const std::vector<Matrix>& ws) {
        double acc = 0.0;
        for (std::size_t s = 0; s < batches.size(); ++s)
            acc += mse(stack_forward(ws, flat, batches[s], nullptr, nullptr), targets[s]);
        return acc / static_cast<double>(batches.size());
    };

    RestoreResult result;
    result.initial_loss = full_loss(adapted_weights());

    std::vector<Matrix> inputs(layers), pre(layers);
    for (int step = 1; step <= cfg.steps; ++step) {
        const std::size_t s = static_cast<std::size_t>(step - 1) % batches.size();
        const std::vector<Matrix> ws = adapted_weights();
        const Matrix out = stack_forward(ws, flat, batches[s], &inputs, &pre);

        const double loss = mse(out, targets[s]);
        result.loss_trace.push_back(loss);
        if (!std::isfinite(loss)) throw_numeric("restore diverged at step " + std::to_string(step));

        Matrix g(out.rows(), out.cols());
        const double scale = 2.0 / static_cast<double>(out.size());
        for (std::size_t i = 0; i < out.size(); ++i)
            g.values()[i] = scale * (out.values()[i] - targets[s].values()[i]);

        for (std::size_t l = layers; l-- > 0;) {
            const Matrix dw = matmul_at(inputs[l], g);
            const Matrix d_down = matmul_bt(dw, adapters[l].up);
            const Matrix d_up = matmul_at(adapters[l].down, dw);
            adam_down[l].update(adapters[l].down.values(), d_down.values(), cfg, step);
            adam_up[l].update(adapters[l].up.values(), d_up.values(), cfg, step);
            if (l > 0) {
                Matrix gh = matmul_bt(g, ws[l]);
                if (flat[l - 1].relu_after) {
                    for (std::size_t i = 0; i < gh.size(); ++i)
                        if (pre[l - 1].values()[i] <= 0.0) gh.values()[i] = 0.0;
                }
                g = std::move(gh);
            }
        }
    }

    result.final_loss = full_loss(adapted_weights());

    // Merge the learned compensation into the original full-precision weights.
    result.merged.assign(model.begin(), model.end());
    result.adapters.resize(model.size());
    for (std::size_t l = 0; l < layers; ++l) {
        const FlatLayer& f = flat[l];
        result.merged[f.block].weights[f.layer] = merge(adapters[l], model_weights[l]);
        result.adapters[f.block].push_back(adapters[l]);
    }
    return result;
}

double row_concentration(const Matrix& w, double ratio) {
    require(ratio > 0.0 && ratio < 1.0, ErrorKind::config, "row_concentration ratio must be in (0, 1)");
    const std::vector<std::uint8_t> salient = weight_saliency_map(w, ratio);

    std::vector<double> mass(w.rows(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        const double* row = w.row(i);
        for (std::size_t j = 0; j < w.cols(); ++j) mass[i] += std::fabs(row[j]);
    }

    const auto top = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(w.rows())));
    std::vector<std::size_t> order(w.rows());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
    std::vector<std::uint8_t> in_top(w.rows(), 0);
    for (std::size_t r = 0; r < std::min(top, order.size()); ++r) in_top[order[r]] = 1;

    std::size_t total = 0, inside = 0;
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            if (salient[i * w.cols() + j]) {
                ++total;
                if (in_top[i]) ++inside;
            }
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(inside) / static_cast<double>(total);
}

}  // namespace ptq
