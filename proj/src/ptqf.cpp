#include "ptq/ptqf.hpp"

#include <cstring>
#include <fstream>

#include "ptq/error.hpp"

namespace ptq {

namespace {

constexpr std::uint8_t kElemF32 = 0;
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kMaxRank = 8;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

[[noreturn]] void bad_format(const std::string& what, std::size_t offset) {
    throw_data("ptqf: " + what + " at offset " + std::to_string(offset));
}

}  // namespace

std::vector<std::uint8_t> ptqf_encode(const PtqfTensor& t) {
    require(!t.dims.empty() && t.dims.size() <= kMaxRank, ErrorKind::data, "ptqf: rank must be in [1, 8]");
    require(t.data.size() == t.element_count(), ErrorKind::data, "ptqf: payload size does not match dims");
    std::vector<std::uint8_t> out;
    out.reserve(12 + 8 * t.dims.size() + 4 * t.data.size());
    for (char c : {'P', 'T', 'Q', 'F'}) out.push_back(static_cast<std::uint8_t>(c));
    put_u32(out, kVersion);
    out.push_back(kElemF32);
    out.push_back(static_cast<std::uint8_t>(t.dims.size()));
    out.push_back(0);
    out.push_back(0);
    for (auto d : t.dims) put_u64(out, d);
    for (float f : t.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
    return out;
}

PtqfTensor ptqf_decode(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 12) bad_format("truncated header", bytes.size());
    if (std::memcmp(bytes.data(), "PTQF", 4) != 0) bad_format("bad magic", 0);
    const std::uint32_t version = get_u32(bytes.data() + 4);
    if (version != kVersion) bad_format("unsupported version " + std::to_string(version), 4);
    if (bytes[8] != kElemF32) bad_format("unsupported element type " + std::to_string(bytes[8]), 8);
    const std::size_t rank = bytes[9];
    if (rank < 1 || rank > kMaxRank) bad_format("bad rank " + std::to_string(rank), 9);

    PtqfTensor t;
    std::size_t off = 12;
    if (bytes.size() < off + 8 * rank) bad_format("truncated dims", bytes.size());
    for (std::size_t i = 0; i < rank; ++i) {
        t.dims.push_back(get_u64(bytes.data() + off));
        off += 8;
    }
    const std::size_t count = t.element_count();
    if (bytes.size() != off + 4 * count) bad_format("payload size mismatch", off);
    t.data.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t bits = get_u32(bytes.data() + off + 4 * i);
        std::memcpy(&t.data[i], &bits, 4);
    }
    return t;
}

void ptqf_write(const std::string& path, const PtqfTensor& t) {
    const auto bytes = ptqf_encode(t);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), ErrorKind::data, "ptqf: cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(f.good(), ErrorKind::data, "ptqf: write failed: " + path);
}

PtqfTensor ptqf_read(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    require(f.good(), ErrorKind::data, "ptqf: cannot open: " + path);
    const auto size = static_cast<std::size_t>(f.tellg());
    f.seekg(0);
    std::vector<std::uint8_t> bytes(size);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    require(f.good(), ErrorKind::data, "ptqf: read failed: " + path);
    return ptqf_decode(bytes);
}

void ptqf_write_matrix(const std::string& path, const Matrix& m) {
    PtqfTensor t;
    t.dims = {m.rows(), m.cols()};
    t.data.reserve(m.size());
    for (double v : m.values()) t.data.push_back(static_cast<float>(v));
    ptqf_write(path, t);
}

Matrix ptqf_read_matrix(const std::string& path) {
    const PtqfTensor t = ptqf_read(path);
    require(t.dims.size() == 2, ErrorKind::data, "ptqf: expected rank-2 tensor in " + path);
    std::vector<double> data(t.data.begin(), t.data.end());
    Matrix m(static_cast<std::size_t>(t.dims[0]), static_cast<std::size_t>(t.dims[1]), std::move(data));
    require(m.all_finite(), ErrorKind::data, "ptqf: non-finite values in " + path);
    return m;
}

void ptqf_write_batches(const std::string& path, const std::vector<Matrix>& batches) {
    require(!batches.empty(), ErrorKind::data, "ptqf: empty batch list");
    const std::size_t tokens = batches.front().rows();
    const std::size_t channels = batches.front().cols();
    PtqfTensor t;
    t.dims = {batches.size(), tokens, channels};
    t.data.reserve(batches.size() * tokens * channels);
    for (const Matrix& b : batches) {
        require(b.rows() == tokens && b.cols() == channels, ErrorKind::data, "ptqf: ragged batch list");
        for (double v : b.values()) t.data.push_back(static_cast<float>(v));
    }
    ptqf_write(path, t);
}

std::vector<Matrix> ptqf_read_batches(const std::string& path) {
    const PtqfTensor t = ptqf_read(path);
    require(t.dims.size() == 3, ErrorKind::data, "ptqf: expected rank-3 tensor in " + path);
    const auto samples = static_cast<std::size_t>(t.dims[0]);
    const auto tokens = static_cast<std::size_t>(t.dims[1]);
    const auto channels = static_cast<std::size_t>(t.dims[2]);
    std::vector<Matrix> batches;
    batches.reserve(samples);
    for (std::size_t s = 0; s < samples; ++s) {
        std::vector<double> data(tokens * channels);
        const std::size_t base = s * tokens * channels;
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = t.data[base + i];
        batches.emplace_back(tokens, channels, std::move(data));
        require(batches.back().all_finite(), ErrorKind::data, "ptqf: non-finite values in " + path);
    }
    return batches;
}

}  // namespace ptq
