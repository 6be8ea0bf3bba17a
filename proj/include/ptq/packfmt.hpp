#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ptq/mat.hpp"
#include "ptq/quant.hpp"

namespace ptq {

// PQ61 container. Little-endian throughout:
//   "PQ61" | u32 version=1 | u32 m | u32 n | u32 k | u32 section count |
//   section table: (u32 id, u64 offset, u64 length) per section |
//   section payloads
//
// Sections, in file order with their ids:
//   1 mask          ceil(m/8) bytes, channel i at bit i%8 of byte i/8 (LSB first)
//   2 nibbles       k rows x ceil(n/2) bytes; low nibble = even column
//   3 affine-params k x (scale, zero point) as 16-bit halves
//   4 signs         (m-k) rows x ceil(n/8) bytes, LSB first, bit 1 = +1
//   5 alpha-s       m halves (per-row magnitude scale)
//   6 alpha-r1      m halves (per-row angular scale)
//   7 alpha-r2      n halves (per-column angular scale)
//
// Offsets are absolute file offsets. pack/unpack are mutually inverse: codes,
// signs and the mask roundtrip exactly; real parameters roundtrip at half
// precision (pack(unpack(bytes)) == bytes).

struct SectionInfo {
    std::uint32_t id = 0;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

struct PackedInfo {
    std::uint32_t version = 0;
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::uint32_t salient = 0;
    std::vector<SectionInfo> sections;
    std::vector<std::uint64_t> digests;  // FNV-1a 64 per section, same order
};

std::vector<std::uint8_t> pack(const QuantizedLayer& q);
QuantizedLayer unpack(std::span<const std::uint8_t> bytes);
PackedInfo inspect(std::span<const std::uint8_t> bytes);

void pq61_write(const std::string& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> pq61_read(const std::string& path);

// Mixed-precision forward pass straight off the packed bytes: nibble rows
// accumulate integer codes rescaled per row, sign rows accumulate via the
// identity sum(v * sgn) = 2 * sum(v over set bits) - sum(v), then get the
// per-row/per-column rescale. Matches matmul(x, dequantize(unpack(p))) to
// within 1e-3 relative error. Parallel over tokens, deterministic.
Matrix packed_forward(const Matrix& x, std::span<const std::uint8_t> bytes);
Matrix packed_forward_serial(const Matrix& x, std::span<const std::uint8_t> bytes);

// How the stored index bits of a mask are amortized in the average.
enum class MaskScheme {
    none,
    row_bitmap,      // one bit per input channel, amortized over total weight bits
    element_bitmap,  // one bit per weight
};

struct BitAccountingConfig {
    std::size_t rows = 4096;
    std::size_t cols = 4096;
    double salient_ratio = 0.2;
    double salient_bits = 4.0;
    double binary_bits = 1.0;
    MaskScheme mask = MaskScheme::row_bitmap;
    double scale_width = 16.0;   // bits per stored scaling factor
    double zero_width = 16.0;    // bits per stored zero point
    double scale_vectors = 3.0;  // number of length-m scaling vectors
    // Direct bits-per-weight for quantization parameters, when the scheme
    // does not follow the scale-vector formula.
    std::optional<double> additional_override;
};

struct BitAccounting {
    double weight_bits = 0.0;      // payload bits per weight
    double index_bits = 0.0;       // mask storage per weight
    double additional_bits = 0.0;  // quantization parameters per weight
    double total_bits = 0.0;
    double total_weight_bit_count = 0.0;  // rows * cols * weight_bits
};

// Average bits per weight: payload + mask index + parameter storage.
BitAccounting bit_accounting(const BitAccountingConfig& cfg);

// Named presets reproducing the reference mixed-precision accountings.
BitAccountingConfig accounting_preset_ptq161(std::size_t rows = 4096, std::size_t cols = 4096);
BitAccountingConfig accounting_preset_pb_llm();
BitAccountingConfig accounting_preset_billm();

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

}  // namespace ptq
