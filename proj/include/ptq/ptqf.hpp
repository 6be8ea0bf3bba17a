#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ptq/mat.hpp"

namespace ptq {

// PTQF tensor container. Layout, little-endian throughout:
//   "PTQF" | u32 version=1 | u8 element type (0 = IEEE f32) | u8 rank |
//   2 padding bytes | rank x u64 dims | row-major f32 payload
// Roundtrips are bit-exact.
struct PtqfTensor {
    std::vector<std::uint64_t> dims;
    std::vector<float> data;

    std::size_t element_count() const {
        std::size_t n = 1;
        for (auto d : dims) n *= static_cast<std::size_t>(d);
        return n;
    }
};

std::vector<std::uint8_t> ptqf_encode(const PtqfTensor& t);
PtqfTensor ptqf_decode(const std::vector<std::uint8_t>& bytes);

void ptqf_write(const std::string& path, const PtqfTensor& t);
PtqfTensor ptqf_read(const std::string& path);

// Matrices are stored rank-2; values narrowed to f32 on write, widened on read.
void ptqf_write_matrix(const std::string& path, const Matrix& m);
Matrix ptqf_read_matrix(const std::string& path);

// Calibration batches are stored as one rank-3 tensor (samples, tokens, channels).
void ptqf_write_batches(const std::string& path, const std::vector<Matrix>& batches);
std::vector<Matrix> ptqf_read_batches(const std::string& path);

}  // namespace ptq
