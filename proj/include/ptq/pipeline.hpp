#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ptq/blockopt.hpp"
#include "ptq/packfmt.hpp"
#include "ptq/preproc.hpp"

namespace ptq {

// ---- synthetic instances ---------------------------------------------------

enum class ActivationProfile { heavy_tailed, uniform };

ActivationProfile profile_from_string(const std::string& s);
std::string to_string(ActivationProfile p);

struct SynthLayerShape {
    std::size_t rows = 0;
    std::size_t cols = 0;
};

struct SynthBlockShape {
    std::vector<SynthLayerShape> layers;  // 1 or 2
    Nonlinearity nonlin = Nonlinearity::identity;
};

struct SynthSpec {
    std::vector<SynthBlockShape> blocks;
    std::size_t samples = 8;
    std::size_t tokens = 32;
    ActivationProfile profile = ActivationProfile::heavy_tailed;
    std::uint64_t seed = 42;
};

// Stand-in for default desk-scale topology: one square block, then a
// bottleneck block with a relu between its two layers.
SynthSpec default_synth_spec(std::size_t channels = 128);

struct SynthResult {
    std::vector<Block> blocks;
    std::vector<Matrix> calibration;
};

// Deterministic toy model plus calibration set. The heavy-tailed profile puts
// a roughly 1000x magnitude spread on a few input channels.
SynthResult gen_synthetic(const SynthSpec& spec);

// ---- model directory layout ------------------------------------------------
//
// model.json names layer tensors (PTQF, relative paths) and the calibration
// file; layer files hold one rank-2 weight matrix each.

void save_model(const std::string& dir, const SynthResult& model);

struct LoadedModel {
    std::vector<Block> blocks;
    std::vector<Matrix> calibration;
};

LoadedModel load_model(const std::string& model_json_path);

// ---- pipeline configuration ------------------------------------------------

struct PipelineConfig {
    double salient_ratio = 0.2;
    int salient_bits = 4;
    SaliencyKind saliency = SaliencyKind::mean_abs;
    bool optimize = true;
    OptConfig opt;
    bool preprocess = false;
    RestorationConfig restoration;
    double report_concentration_ratio = 0.1;
    std::uint64_t seed = 42;
};

PipelineConfig pipeline_config_from_json_text(const std::string& text);
std::string pipeline_config_to_json_text(const PipelineConfig& cfg);

// ---- reports ----------------------------------------------------------------

struct LayerReport {
    std::size_t block = 0;
    std::size_t layer = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t salient = 0;
    double mean_error = 0.0;
    double max_error = 0.0;
    double mean_bound = 0.0;
    double bound_tightness = 0.0;  // mean_error / mean_bound
    double row_concentration = 0.0;
    BitAccounting bits;
};

struct BlockOptReport {
    std::size_t block = 0;
    double initial_objective = 0.0;
    double best_objective = 0.0;
    int best_step = 0;
    int steps = 0;
};

struct PreprocessReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> concentration_before;  // per layer
    std::vector<double> concentration_after;
};

struct EvalReport {
    std::vector<LayerReport> layers;
    std::vector<BlockOptReport> blocks;
    std::optional<PreprocessReport> preprocess;
};

std::string eval_report_to_json_text(const EvalReport& report);

// ---- drivers ----------------------------------------------------------------

// Every artifact a quantization run produces, keyed by output file name.
// Byte-for-byte deterministic for a fixed model, calibration set and config.
struct QuantizeArtifacts {
    std::map<std::string, std::vector<std::uint8_t>> files;
    EvalReport report;
};

// mask -> quantize -> optimize -> pack, block by block along the quantized
// activation path. Optional preprocessing rewrites the weights first.
QuantizeArtifacts run_quantize(const std::vector<Block>& model, const std::vector<Matrix>& calib,
                               const PipelineConfig& cfg);

// Recompute per-layer error statistics for already-quantized layers.
EvalReport run_eval(const std::vector<Block>& model, const std::vector<Matrix>& calib,
                    const std::vector<std::vector<QuantizedLayer>>& quantized,
                    const PipelineConfig& cfg);

}  // namespace ptq
