#include "ptq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ptq/numerics.hpp"
#include "ptq/ptqf.hpp"
#include "ptq/rng.hpp"
#include "ptq/saliency.hpp"

namespace ptq {

namespace fs = std::filesystem;
using nlohmann::json;

ActivationProfile profile_from_string(const std::string& s) {
    if (s == "heavy_tailed") return ActivationProfile::heavy_tailed;
    if (s == "uniform") return ActivationProfile::uniform;
    throw_config("unknown activation profile: " + s);
}

std::string to_string(ActivationProfile p) {
    return p == ActivationProfile::heavy_tailed ? "heavy_tailed" : "uniform";
}

SynthSpec default_synth_spec(std::size_t channels) {
    SynthSpec spec;
    spec.blocks.push_back({{{channels, channels}}, Nonlinearity::identity});
    spec.blocks.push_back(
        {{{channels, channels / 2}, {channels / 2, channels}}, Nonlinearity::relu});
    return spec;
}

SynthResult gen_synthetic(const SynthSpec& spec) {
    require(!spec.blocks.empty(), ErrorKind::config, "gen_synthetic: no blocks");
    require(spec.samples >= 1 && spec.tokens >= 1, ErrorKind::config,
            "gen_synthetic: samples and tokens must be >= 1");

    Rng rng(spec.seed);
    SynthResult result;

    std::size_t prev_cols = spec.blocks.front().layers.front().rows;
    const std::size_t channels = prev_cols;
    for (const SynthBlockShape& bs : spec.blocks) {
        require(bs.layers.size() == 1 || bs.layers.size() == 2, ErrorKind::config,
                "gen_synthetic: block must have 1 or 2 layers");
        Block block;
        block.nonlin = bs.nonlin;
        for (const SynthLayerShape& ls : bs.layers) {
            require(ls.rows >= 2 && ls.cols >= 1, ErrorKind::config,
                    "gen_synthetic: layer needs at least 2 rows and 1 column");
            require(ls.rows == prev_cols, ErrorKind::config,
                    "gen_synthetic: layer shapes do not chain");
            block.weights.push_back(
                rng.normal_matrix(ls.rows, ls.cols, 1.0 / std::sqrt(static_cast<double>(ls.rows))));
            prev_cols = ls.cols;
        }
        result.blocks.push_back(std::move(block));
    }

    // Per-channel magnitude scales for the calibration data.
    std::vector<double> scale(channels);
    if (spec.profile == ActivationProfile::heavy_tailed) {
        std::vector<std::size_t> idx(channels);
        for (std::size_t i = 0; i < channels; ++i) idx[i] = i;
        rng.shuffle(idx);
        const std::size_t heavy =
            std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.05 * channels)));
        for (std::size_t i = 0; i < channels; ++i) scale[i] = rng.uniform(0.8, 1.25);
        for (std::size_t h = 0; h < heavy; ++h) scale[idx[h]] *= 1000.0;
    } else {
        for (std::size_t i = 0; i < channels; ++i) scale[i] = rng.uniform(1.0, 1.3);
    }

    for (std::size_t s = 0; s < spec.samples; ++s) {
        Matrix x(spec.tokens, channels);
        for (std::size_t a = 0; a < spec.tokens; ++a) {
            double* row = x.row(a);
            for (std::size_t i = 0; i < channels; ++i) row[i] = scale[i] * rng.normal();
        }
        result.calibration.push_back(std::move(x));
    }
    return result;
}

void save_model(const std::string& dir, const SynthResult& model) {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = "ptq-model/1";
    manifest["calibration"] = "calibration.ptqf";
    json blocks = json::array();
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        json jb;
        jb["nonlinearity"] = to_string(model.blocks[b].nonlin);
        json layers = json::array();
        for (std::size_t l = 0; l < model.blocks[b].weights.size(); ++l) {
            const std::string name =
                "block" + std::to_string(b) + "_layer" + std::to_string(l) + ".ptqf";
            ptqf_write_matrix((fs::path(dir) / name).string(), model.blocks[b].weights[l]);
            layers.push_back(name);
        }
        jb["layers"] = layers;
        blocks.push_back(jb);
    }
    manifest["blocks"] = blocks;
    ptqf_write_batches((fs::path(dir) / "calibration.ptqf").string(), model.calibration);

    std::ofstream f(fs::path(dir) / "model.json", std::ios::trunc);
    require(f.good(), ErrorKind::data, "cannot write model.json in " + dir);
    f << manifest.dump(2) << '\n';
    require(f.good(), ErrorKind::data, "model.json write failed in " + dir);
}

LoadedModel load_model(const std::string& model_json_path) {
    std::ifstream f(model_json_path);
    require(f.good(), ErrorKind::data, "cannot open model manifest: " + model_json_path);
    json manifest;
    try {
        f >> manifest;
    } catch (const json::exception& e) {
        throw_data("malformed model manifest " + model_json_path + ": " + e.what());
    }
    require(manifest.value("format", "") == "ptq-model/1", ErrorKind::data,
            "unsupported model manifest format in " + model_json_path);

    const fs::path dir = fs::path(model_json_path).parent_path();
    LoadedModel model;
    try {
        for (const json& jb : manifest.at("blocks")) {
            Block block;
            block.nonlin = nonlinearity_from_string(jb.value("nonlinearity", "identity"));
            for (const json& name : jb.at("layers"))
                block.weights.push_back(ptqf_read_matrix((dir / name.get<std::string>()).string()));
            require(block.weights.size() == 1 || block.weights.size() == 2, ErrorKind::data,
                    "model block must have 1 or 2 layers");
            model.blocks.push_back(std::move(block));
        }
        model.calibration =
            ptqf_read_batches((dir / manifest.at("calibration").get<std::string>()).string());
    } catch (const json::exception& e) {
        throw_data("malformed model manifest " + model_json_path + ": " + e.what());
    }
    return model;
}

namespace {

json opt_config_to_json(const OptConfig& c) {
    json j;
    j["lr_magnitude"] = c.lr_magnitude;
    j["lr_angular"] = c.lr_angular;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["weight_decay"] = c.weight_decay;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["epsilon"] = c.epsilon;
    j["seed"] = c.seed;
    j["shuffle"] = c.shuffle;
    j["use_nlc"] = c.objective.use_nlc;
    return j;
}

OptConfig opt_config_from_json(const json& j) {
    OptConfig c;
    c.lr_magnitude = j.value("lr_magnitude", c.lr_magnitude);
    c.lr_angular = j.value("lr_angular", c.lr_angular);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.seed = j.value("seed", c.seed);
    c.shuffle = j.value("shuffle", c.shuffle);
    c.objective.use_nlc = j.value("use_nlc", c.objective.use_nlc);
    return c;
}

json restoration_to_json(const RestorationConfig& c) {
    json j;
    j["steps"] = c.steps;
    j["learning_rate"] = c.learning_rate;
    j["rank"] = c.rank;
    j["seed"] = c.seed;
    return j;
}

RestorationConfig restoration_from_json(const json& j) {
    RestorationConfig c;
    c.steps = j.value("steps", c.steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.rank = j.value("rank", c.rank);
    c.seed = j.value("seed", c.seed);
    return c;
}

json pipeline_config_to_json(const PipelineConfig& cfg) {
    json j;
    j["salient_ratio"] = cfg.salient_ratio;
    j["salient_bits"] = cfg.salient_bits;
    j["saliency"] = to_string(cfg.saliency);
    j["optimize"] = cfg.optimize;
    j["optimizer"] = opt_config_to_json(cfg.opt);
    j["preprocess"] = cfg.preprocess;
    j["restoration"] = restoration_to_json(cfg.restoration);
    j["report_concentration_ratio"] = cfg.report_concentration_ratio;
    j["seed"] = cfg.seed;
    return j;
}

PipelineConfig pipeline_config_from_json(const json& j) {
    PipelineConfig cfg;
    cfg.salient_ratio = j.value("salient_ratio", cfg.salient_ratio);
    cfg.salient_bits = j.value("salient_bits", cfg.salient_bits);
    if (j.contains("saliency")) cfg.saliency = saliency_kind_from_string(j.at("saliency"));
    cfg.optimize = j.value("optimize", cfg.optimize);
    if (j.contains("optimizer")) cfg.opt = opt_config_from_json(j.at("optimizer"));
    cfg.preprocess = j.value("preprocess", cfg.preprocess);
    if (j.contains("restoration")) cfg.restoration = restoration_from_json(j.at("restoration"));
    cfg.report_concentration_ratio =
        j.value("report_concentration_ratio", cfg.report_concentration_ratio);
    cfg.seed = j.value("seed", cfg.seed);
    return cfg;
}

json bit_accounting_to_json(const BitAccounting& b) {
    json j;
    j["weight_bits"] = b.weight_bits;
    j["index_bits"] = b.index_bits;
    j["additional_bits"] = b.additional_bits;
    j["total_bits"] = b.total_bits;
    return j;
}

json eval_report_to_json(const EvalReport& r) {
    json j;
    json layers = json::array();
    for (const LayerReport& lr : r.layers) {
        json jl;
        jl["block"] = lr.block;
        jl["layer"] = lr.layer;
        jl["rows"] = lr.rows;
        jl["cols"] = lr.cols;
        jl["salient"] = lr.salient;
        jl["mean_error"] = lr.mean_error;
        jl["max_error"] = lr.max_error;
        jl["mean_bound"] = lr.mean_bound;
        jl["bound_tightness"] = lr.bound_tightness;
        jl["row_concentration"] = lr.row_concentration;
        jl["bit_accounting"] = bit_accounting_to_json(lr.bits);
        layers.push_back(jl);
    }
    j["layers"] = layers;
    json blocks = json::array();
    for (const BlockOptReport& br : r.blocks) {
        json jb;
        jb["block"] = br.block;
        jb["initial_objective"] = br.initial_objective;
        jb["best_objective"] = br.best_objective;
        jb["best_step"] = br.best_step;
        jb["steps"] = br.steps;
        blocks.push_back(jb);
    }
    j["blocks"] = blocks;
    if (r.preprocess) {
        json jp;
        jp["initial_loss"] = r.preprocess->initial_loss;
        jp["final_loss"] = r.preprocess->final_loss;
        jp["concentration_before"] = r.preprocess->concentration_before;
        jp["concentration_after"] = r.preprocess->concentration_after;
        j["preprocess"] = jp;
    }
    return j;
}

std::vector<std::uint8_t> to_bytes(const std::string& s) {
    return std::vector<std::uint8_t>(s.begin(), s.end());
}

Matrix concat_rows(std::span<const Matrix> samples) {
    std::size_t rows = 0;
    for (const Matrix& m : samples) rows += m.rows();
    Matrix out(rows, samples.front().cols());
    std::size_t at = 0;
    for (const Matrix& m : samples) {
        std::copy(m.values().begin(), m.values().end(),
                  out.values().begin() + static_cast<std::ptrdiff_t>(at));
        at += m.size();
    }
    return out;
}

std::vector<std::uint8_t> mask_to_ptqf(const ChannelMask& mask) {
    PtqfTensor t;
    t.dims = {mask.size()};
    for (std::uint8_t b : mask.bits) t.data.push_back(b ? 1.0f : 0.0f);
    return ptqf_encode(t);
}

std::vector<std::uint8_t> matrix_to_ptqf(const Matrix& m) {
    PtqfTensor t;
    t.dims = {m.rows(), m.cols()};
    for (double v : m.values()) t.data.push_back(static_cast<float>(v));
    return ptqf_encode(t);
}

}  // namespace

PipelineConfig pipeline_config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw_config(std::string("malformed pipeline config: ") + e.what());
    }
    return pipeline_config_from_json(j);
}

std::string pipeline_config_to_json_text(const PipelineConfig& cfg) {
    return pipeline_config_to_json(cfg).dump(2) + "\n";
}

std::string eval_report_to_json_text(const EvalReport& report) {
    return eval_report_to_json(report).dump(2) + "\n";
}

namespace {

void validate_pipeline_config(const PipelineConfig& cfg, const std::vector<Block>& model,
                              const std::vector<Matrix>& calib) {
    require(cfg.salient_ratio > 0.0 && cfg.salient_ratio < 1.0, ErrorKind::config,
            "salient ratio must be in (0, 1)");
    require(cfg.salient_bits == 4, ErrorKind::config,
            "the packed container stores 4-bit salient codes; use salient_bits = 4");
    require(!model.empty(), ErrorKind::data, "empty model");
    require(!calib.empty(), ErrorKind::data, "empty calibration set");
    require(calib.front().cols() == model.front().weights.front().rows(), ErrorKind::data,
            "calibration channels do not match the first layer");
}

struct LayerStats {
    double mean_error, max_error, mean_bound;
};

LayerStats layer_stats(std::span<const Matrix> inputs, const Matrix& w, const Matrix& wq) {
    double err_acc = 0.0, err_max = 0.0, bound_acc = 0.0;
    std::size_t count = 0;
    for (const Matrix& x : inputs) {
        const auto [err, bound] = layer_error_and_bound(x, w, wq);
        for (std::size_t i = 0; i < err.size(); ++i) {
            err_acc += err.values()[i];
            bound_acc += bound.values()[i];
            err_max = std::max(err_max, err.values()[i]);
        }
        count += err.size();
    }
    return {err_acc / static_cast<double>(count), err_max, bound_acc / static_cast<double>(count)};
}

}  // namespace

QuantizeArtifacts run_quantize(const std::vector<Block>& model, const std::vector<Matrix>& calib,
                               const PipelineConfig& cfg) {
    validate_pipeline_config(cfg, model, calib);

    QuantizeArtifacts out;
    out.files["config.resolved.json"] = to_bytes(pipeline_config_to_json_text(cfg));

    std::vector<Block> working = model;

    if (cfg.preprocess) {
        InitialQuantizer init{cfg.salient_ratio, cfg.salient_bits, cfg.saliency};
        RestoreResult rr = restore(model, calib, init, cfg.restoration);
        PreprocessReport pr;
        pr.initial_loss = rr.initial_loss;
        pr.final_loss = rr.final_loss;
        json adapters_manifest;
        adapters_manifest["rank"] = cfg.restoration.rank;
        adapters_manifest["steps"] = cfg.restoration.steps;
        adapters_manifest["seed"] = cfg.restoration.seed;
        json adapter_files = json::object();
        for (std::size_t b = 0; b < model.size(); ++b) {
            for (std::size_t l = 0; l < model[b].weights.size(); ++l) {
                pr.concentration_before.push_back(
                    row_concentration(model[b].weights[l], cfg.report_concentration_ratio));
                pr.concentration_after.push_back(row_concentration(
                    rr.merged[b].weights[l], cfg.report_concentration_ratio));
                const std::string stem =
                    "block" + std::to_string(b) + "_layer" + std::to_string(l);
                out.files["adapters/" + stem + ".down.ptqf"] =
                    matrix_to_ptqf(rr.adapters[b][l].down);
                out.files["adapters/" + stem + ".up.ptqf"] = matrix_to_ptqf(rr.adapters[b][l].up);
                adapter_files[stem] = {{"down", "adapters/" + stem + ".down.ptqf"},
                                       {"up", "adapters/" + stem + ".up.ptqf"}};
            }
        }
        adapters_manifest["layers"] = adapter_files;
        out.files["adapters/adapters.json"] = to_bytes(adapters_manifest.dump(2) + "\n");
        out.report.preprocess = std::move(pr);
        working = std::move(rr.merged);
    }

    std::vector<Matrix> x_fp(calib.begin(), calib.end());
    std::vector<Matrix> x_q(calib.begin(), calib.end());

    for (std::size_t b = 0; b < working.size(); ++b) {
        Block& block = working[b];
        require(block.weights.front().rows() == x_q.front().cols(), ErrorKind::data,
                "block " + std::to_string(b) + ": input channel mismatch");

        // Masks come from the activations the quantized layer will actually
        // see; the second layer's activations use the first layer as already
        // quantized (analytic scales at this point).
        QuantizedBlock qb;
        block.masks.clear();
        std::vector<Matrix> layer_in = x_q;
        for (std::size_t l = 0; l < block.weights.size(); ++l) {
            const ChannelMask mask = build_mask(
                channel_saliency(concat_rows(layer_in), cfg.saliency), cfg.salient_ratio);
            block.masks.push_back(mask);
            qb.layers.push_back(quantize_layer(block.weights[l], mask, cfg.salient_bits));
            if (l + 1 < block.weights.size()) {
                const Matrix wq = dequantize(qb.layers[l]);
                for (Matrix& m : layer_in) {
                    Matrix y = matmul(m, wq);
                    if (block.nonlin == Nonlinearity::relu)
                        for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
                    m = std::move(y);
                }
            }
        }

        BlockOptReport br;
        br.block = b;
        if (cfg.optimize) {
            OptConfig opt = cfg.opt;
            opt.seed = cfg.opt.seed ^ (cfg.seed + b);  // distinct order per block
            OptimizeResult r = optimize_scales(block, qb, x_fp, x_q, opt);
            for (std::size_t l = 0; l < qb.layers.size(); ++l)
                qb.layers[l].scales = r.best_scales[l];
            br.initial_objective = r.initial_objective;
            br.best_objective = r.best_objective;
            br.best_step = r.best_step;
            br.steps = r.steps;
            out.files["trace_block" + std::to_string(b) + ".csv"] = to_bytes(trace_csv(r.trace));
        } else {
            std::vector<ScalingVectors> scales;
            for (const auto& layer : qb.layers) scales.push_back(layer.scales);
            double acc = 0.0;
            for (std::size_t s = 0; s < calib.size(); ++s)
                acc += block_objective(block, qb, scales, x_fp[s], x_q[s], cfg.opt.objective)
                           .total();
            br.initial_objective = br.best_objective = acc / static_cast<double>(calib.size());
        }
        out.report.blocks.push_back(br);

        // Per-layer stats along the final quantized path, then pack.
        std::vector<Matrix> layer_q_in = x_q;
        for (std::size_t l = 0; l < qb.layers.size(); ++l) {
            const Matrix wq = dequantize(qb.layers[l]);
            const LayerStats stats = layer_stats(layer_q_in, block.weights[l], wq);
            LayerReport lr;
            lr.block = b;
            lr.layer = l;
            lr.rows = block.weights[l].rows();
            lr.cols = block.weights[l].cols();
            lr.salient = qb.layers[l].salient_count();
            lr.mean_error = stats.mean_error;
            lr.max_error = stats.max_error;
            lr.mean_bound = stats.mean_bound;
            lr.bound_tightness = stats.mean_bound > 0.0 ? stats.mean_error / stats.mean_bound : 0.0;
            lr.row_concentration =
                row_concentration(block.weights[l], cfg.report_concentration_ratio);
            BitAccountingConfig acc_cfg;
            acc_cfg.rows = lr.rows;
            acc_cfg.cols = lr.cols;
            acc_cfg.salient_ratio =
                static_cast<double>(lr.salient) / static_cast<double>(lr.rows);
            acc_cfg.salient_bits = cfg.salient_bits;
            lr.bits = bit_accounting(acc_cfg);
            out.report.layers.push_back(lr);

            const std::string stem = "block" + std::to_string(b) + "_layer" + std::to_string(l);
            out.files[stem + ".pq61"] = pack(qb.layers[l]);
            out.files[stem + ".mask.ptqf"] = mask_to_ptqf(qb.layers[l].mask);

            if (l + 1 < qb.layers.size()) {
                for (Matrix& m : layer_q_in) {
                    Matrix y = matmul(m, wq);
                    if (block.nonlin == Nonlinearity::relu)
                        for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
                    m = std::move(y);
                }
            }
        }

        // Advance both calibration paths to the next block.
        for (Matrix& m : x_fp) m = block_forward(block, m);
        for (Matrix& m : x_q) m = block_forward_quantized(qb, block.nonlin, m);
    }

    out.files["report.json"] = to_bytes(eval_report_to_json_text(out.report));
    return out;
}

EvalReport run_eval(const std::vector<Block>& model, const std::vector<Matrix>& calib,
                    const std::vector<std::vector<QuantizedLayer>>& quantized,
                    const PipelineConfig& cfg) {
    require(model.size() == quantized.size(), ErrorKind::data,
            "eval: model and quantized block counts differ");
    require(!calib.empty(), ErrorKind::data, "eval: empty calibration set");

    EvalReport report;
    std::vector<Matrix> x_q(calib.begin(), calib.end());
    for (std::size_t b = 0; b < model.size(); ++b) {
        const Block& block = model[b];
        require(block.weights.size() == quantized[b].size(), ErrorKind::data,
                "eval: block " + std::to_string(b) + " layer count mismatch");
        QuantizedBlock qb;
        qb.layers = quantized[b];

        std::vector<Matrix> layer_in = x_q;
        for (std::size_t l = 0; l < qb.layers.size(); ++l) {
            const QuantizedLayer& q = qb.layers[l];
            require(q.rows == block.weights[l].rows() && q.cols == block.weights[l].cols(),
                    ErrorKind::data, "eval: quantized layer shape mismatch");
            const Matrix wq = dequantize(q);
            const LayerStats stats = layer_stats(layer_in, block.weights[l], wq);
            LayerReport lr;
            lr.block = b;
            lr.layer = l;
            lr.rows = q.rows;
            lr.cols = q.cols;
            lr.salient = q.salient_count();
            lr.mean_error = stats.mean_error;
            lr.max_error = stats.max_error;
            lr.mean_bound = stats.mean_bound;
            lr.bound_tightness = stats.mean_bound > 0.0 ? stats.mean_error / stats.mean_bound : 0.0;
            lr.row_concentration =
                row_concentration(block.weights[l], cfg.report_concentration_ratio);
            BitAccountingConfig acc_cfg;
            acc_cfg.rows = lr.rows;
            acc_cfg.cols = lr.cols;
            acc_cfg.salient_ratio = static_cast<double>(lr.salient) / static_cast<double>(lr.rows);
            acc_cfg.salient_bits = q.salient_bits;
            lr.bits = bit_accounting(acc_cfg);
            report.layers.push_back(lr);

            if (l + 1 < qb.layers.size()) {
                for (Matrix& m : layer_in) {
                    Matrix y = matmul(m, wq);
                    if (block.nonlin == Nonlinearity::relu)
                        for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
                    m = std::move(y);
                }
            }
        }
        for (Matrix& m : x_q) m = block_forward_quantized(qb, block.nonlin, m);
    }
    return report;
}

}  // namespace ptq
