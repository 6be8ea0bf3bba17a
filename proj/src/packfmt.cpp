#include "ptq/packfmt.hpp"

#include <cstring>
#include <fstream>

#include "ptq/error.hpp"
#include "ptq/half.hpp"

namespace ptq {

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kSectionCount = 7;

enum SectionId : std::uint32_t {
    kMask = 1,
    kNibbles = 2,
    kAffineParams = 3,
    kSigns = 4,
    kAlphaS = 5,
    kAlphaR1 = 6,
    kAlphaR2 = 7,
};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
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

std::uint16_t get_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (static_cast<std::uint16_t>(p[1]) << 8));
}

[[noreturn]] void bad_format(const std::string& what, std::size_t offset) {
    throw_data("pq61: " + what + " at offset " + std::to_string(offset));
}

std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> bits) {
    std::vector<std::uint8_t> out((bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < bits.size(); ++i) {
        if (bits[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    }
    return out;
}

// Parsed section layout over a borrowed byte buffer.
struct PackedView {
    std::uint32_t rows = 0, cols = 0, salient = 0;
    std::span<const std::uint8_t> mask, nibbles, affine, signs, alpha_s, alpha_r1, alpha_r2;
    std::vector<SectionInfo> sections;
};

PackedView parse(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 24) bad_format("truncated header", bytes.size());
    if (std::memcmp(bytes.data(), "PQ61", 4) != 0) bad_format("bad magic", 0);
    const std::uint32_t version = get_u32(bytes.data() + 4);
    if (version != kVersion) bad_format("unsupported version " + std::to_string(version), 4);

    PackedView v;
    v.rows = get_u32(bytes.data() + 8);
    v.cols = get_u32(bytes.data() + 12);
    v.salient = get_u32(bytes.data() + 16);
    const std::uint32_t nsec = get_u32(bytes.data() + 20);
    if (nsec != kSectionCount) bad_format("unexpected section count " + std::to_string(nsec), 20);
    if (v.rows == 0 || v.cols == 0 || v.salient > v.rows) bad_format("bad dimensions", 8);

    std::size_t off = 24;
    if (bytes.size() < off + 20 * nsec) bad_format("truncated section table", bytes.size());
    for (std::uint32_t i = 0; i < nsec; ++i) {
        SectionInfo s;
        s.id = get_u32(bytes.data() + off);
        s.offset = get_u64(bytes.data() + off + 4);
        s.length = get_u64(bytes.data() + off + 12);
        if (s.id != i + 1) bad_format("unexpected section id " + std::to_string(s.id), off);
        if (s.offset + s.length > bytes.size()) bad_format("section out of bounds", off);
        v.sections.push_back(s);
        off += 20;
    }

    const std::size_t m = v.rows, n = v.cols, k = v.salient;
    const std::size_t expected[kSectionCount] = {
        (m + 7) / 8, k * ((n + 1) / 2), k * 4, (m - k) * ((n + 7) / 8), m * 2, m * 2, n * 2,
    };
    std::span<const std::uint8_t>* slots[kSectionCount] = {
        &v.mask, &v.nibbles, &v.affine, &v.signs, &v.alpha_s, &v.alpha_r1, &v.alpha_r2,
    };
    std::size_t expected_off = 24 + 20 * kSectionCount;
    for (std::uint32_t i = 0; i < kSectionCount; ++i) {
        const SectionInfo& s = v.sections[i];
        if (s.length != expected[i])
            bad_format("section " + std::to_string(s.id) + " has length " + std::to_string(s.length) +
                           ", expected " + std::to_string(expected[i]),
                       s.offset);
        if (s.offset != expected_off)
            bad_format("section " + std::to_string(s.id) + " out of order", s.offset);
        *slots[i] = bytes.subspan(s.offset, s.length);
        expected_off += s.length;
    }
    if (bytes.size() != expected_off) bad_format("trailing bytes", expected_off);
    return v;
}

}  // namespace

std::vector<std::uint8_t> pack(const QuantizedLayer& q) {
    validate(q);
    require(q.salient_bits == 4, ErrorKind::data, "pq61 stores 4-bit salient codes only");
    require(q.rows <= 0xffffffffu && q.cols <= 0xffffffffu, ErrorKind::data,
            "pq61 header field overflow");

    const std::size_t m = q.rows, n = q.cols, k = q.salient_count();

    std::vector<std::uint8_t> mask = pack_bits(q.mask.bits);

    std::vector<std::uint8_t> nibbles;
    nibbles.reserve(k * ((n + 1) / 2));
    for (std::size_t s = 0; s < k; ++s) {
        const std::uint8_t* codes = q.codes.data() + s * n;
        for (std::size_t b = 0; b < n; b += 2) {
            std::uint8_t byte = static_cast<std::uint8_t>(codes[b] & 0x0f);
            if (b + 1 < n) byte |= static_cast<std::uint8_t>((codes[b + 1] & 0x0f) << 4);
            nibbles.push_back(byte);
        }
    }

    std::vector<std::uint8_t> affine;
    affine.reserve(k * 4);
    for (const AffineRowParams& p : q.affine) {
        put_u16(affine, double_to_half_bits(p.scale));
        put_u16(affine, double_to_half_bits(static_cast<double>(p.zero_point)));
    }

    std::vector<std::uint8_t> signs;
    signs.reserve((m - k) * ((n + 7) / 8));
    for (std::size_t s = 0; s < m - k; ++s) {
        const auto row = pack_bits(std::span(q.signs).subspan(s * n, n));
        signs.insert(signs.end(), row.begin(), row.end());
    }

    auto halves = [](std::span<const double> v) {
        std::vector<std::uint8_t> out;
        out.reserve(v.size() * 2);
        for (double x : v) put_u16(out, double_to_half_bits(x));
        return out;
    };
    const std::vector<std::uint8_t> alpha_s = halves(q.scales.magnitude);
    const std::vector<std::uint8_t> alpha_r1 = halves(q.scales.row_angular);
    const std::vector<std::uint8_t> alpha_r2 = halves(q.scales.col_angular);

    const std::vector<std::uint8_t>* payloads[kSectionCount] = {
        &mask, &nibbles, &affine, &signs, &alpha_s, &alpha_r1, &alpha_r2,
    };

    std::vector<std::uint8_t> out;
    out.reserve(24 + 20 * kSectionCount);
    for (char c : {'P', 'Q', '6', '1'}) out.push_back(static_cast<std::uint8_t>(c));
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(m));
    put_u32(out, static_cast<std::uint32_t>(n));
    put_u32(out, static_cast<std::uint32_t>(k));
    put_u32(out, kSectionCount);
    std::uint64_t offset = 24 + 20 * kSectionCount;
    for (std::uint32_t i = 0; i < kSectionCount; ++i) {
        put_u32(out, i + 1);
        put_u64(out, offset);
        put_u64(out, payloads[i]->size());
        offset += payloads[i]->size();
    }
    for (const auto* p : payloads) out.insert(out.end(), p->begin(), p->end());
    return out;
}

QuantizedLayer unpack(std::span<const std::uint8_t> bytes) {
    const PackedView v = parse(bytes);
    const std::size_t m = v.rows, n = v.cols, k = v.salient;

    QuantizedLayer q;
    q.rows = m;
    q.cols = n;
    q.salient_bits = 4;
    q.mask.bits.resize(m);
    for (std::size_t i = 0; i < m; ++i) q.mask.bits[i] = (v.mask[i / 8] >> (i % 8)) & 1u;
    q.mask.salient = k;
    q.mask.ratio = static_cast<double>(k) / static_cast<double>(m);

    std::size_t mask_count = 0;
    for (std::size_t i = 0; i < m; ++i) {
        if (q.mask.bits[i]) {
            q.salient_rows.push_back(static_cast<std::uint32_t>(i));
            ++mask_count;
        } else {
            q.binary_rows.push_back(static_cast<std::uint32_t>(i));
        }
    }
    if (mask_count != k) bad_format("mask popcount does not match header salient count", 16);

    q.codes.resize(k * n);
    const std::size_t row_bytes = (n + 1) / 2;
    for (std::size_t s = 0; s < k; ++s) {
        const std::uint8_t* row = v.nibbles.data() + s * row_bytes;
        for (std::size_t b = 0; b < n; ++b) {
            const std::uint8_t byte = row[b / 2];
            q.codes[s * n + b] = (b % 2 == 0) ? (byte & 0x0f) : (byte >> 4);
        }
    }

    q.affine.resize(k);
    for (std::size_t s = 0; s < k; ++s) {
        AffineRowParams p;
        p.bits = 4;
        p.scale = half_bits_to_double(get_u16(v.affine.data() + 4 * s));
        p.zero_point = static_cast<int>(half_bits_to_double(get_u16(v.affine.data() + 4 * s + 2)));
        q.affine[s] = p;
    }

    q.signs.resize((m - k) * n);
    const std::size_t sign_row_bytes = (n + 7) / 8;
    for (std::size_t s = 0; s < m - k; ++s) {
        const std::uint8_t* row = v.signs.data() + s * sign_row_bytes;
        for (std::size_t b = 0; b < n; ++b) q.signs[s * n + b] = (row[b / 8] >> (b % 8)) & 1u;
    }

    auto unhalves = [](std::span<const std::uint8_t> raw, std::size_t count) {
        std::vector<double> out(count);
        for (std::size_t i = 0; i < count; ++i) out[i] = half_bits_to_double(get_u16(raw.data() + 2 * i));
        return out;
    };
    q.scales.magnitude = unhalves(v.alpha_s, m);
    q.scales.row_angular = unhalves(v.alpha_r1, m);
    q.scales.col_angular = unhalves(v.alpha_r2, n);

    validate(q);
    return q;
}

PackedInfo inspect(std::span<const std::uint8_t> bytes) {
    const PackedView v = parse(bytes);
    PackedInfo info;
    info.version = kVersion;
    info.rows = v.rows;
    info.cols = v.cols;
    info.salient = v.salient;
    info.sections = v.sections;
    for (const SectionInfo& s : v.sections)
        info.digests.push_back(fnv1a64(bytes.subspan(s.offset, s.length)));
    return info;
}

void pq61_write(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), ErrorKind::data, "pq61: cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(f.good(), ErrorKind::data, "pq61: write failed: " + path);
}

std::vector<std::uint8_t> pq61_read(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    require(f.good(), ErrorKind::data, "pq61: cannot open: " + path);
    const auto size = static_cast<std::size_t>(f.tellg());
    f.seekg(0);
    std::vector<std::uint8_t> bytes(size);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    require(f.good(), ErrorKind::data, "pq61: read failed: " + path);
    return bytes;
}

namespace {

void packed_forward_row(const PackedView& v, const Matrix& x, Matrix& y, std::size_t a) {
    const std::size_t m = v.rows, n = v.cols;
    const std::size_t nib_row_bytes = (n + 1) / 2;
    const std::size_t sign_row_bytes = (n + 7) / 8;
    double* out = y.row(a);

    // Salient rows: sum_i x*scale*code - sum_i x*scale*zero.
    double zero_term = 0.0;
    std::size_t s_sal = 0, s_bin = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const bool salient = (v.mask[i / 8] >> (i % 8)) & 1u;
        if (!salient) continue;
        const double scale = half_bits_to_double(get_u16(v.affine.data() + 4 * s_sal));
        const double zero = half_bits_to_double(get_u16(v.affine.data() + 4 * s_sal + 2));
        const double u = x(a, i) * scale;
        zero_term += u * zero;
        const std::uint8_t* row = v.nibbles.data() + s_sal * nib_row_bytes;
        for (std::size_t b = 0; b < n; b += 2) {
            const std::uint8_t byte = row[b / 2];
            out[b] += u * static_cast<double>(byte & 0x0f);
            if (b + 1 < n) out[b + 1] += u * static_cast<double>(byte >> 4);
        }
        ++s_sal;
    }

    // Binarized rows: 2 * sum over set bits - row total, then the column rescale.
    std::vector<double> plus(n, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const bool salient = (v.mask[i / 8] >> (i % 8)) & 1u;
        if (salient) continue;
        const double mag = half_bits_to_double(get_u16(v.alpha_s.data() + 2 * i));
        const double ang = half_bits_to_double(get_u16(v.alpha_r1.data() + 2 * i));
        const double u = x(a, i) * mag * ang;
        total += u;
        const std::uint8_t* row = v.signs.data() + s_bin * sign_row_bytes;
        for (std::size_t b = 0; b < n; ++b) {
            if ((row[b / 8] >> (b % 8)) & 1u) plus[b] += u;
        }
        ++s_bin;
    }
    for (std::size_t b = 0; b < n; ++b) {
        const double col = half_bits_to_double(get_u16(v.alpha_r2.data() + 2 * b));
        out[b] += col * (2.0 * plus[b] - total);
    }
    for (std::size_t b = 0; b < n; ++b) out[b] -= zero_term;
}

Matrix packed_forward_impl(const Matrix& x, std::span<const std::uint8_t> bytes, bool parallel) {
    const PackedView v = parse(bytes);
    require(x.cols() == v.rows, ErrorKind::data, "packed_forward: activation/layer shape mismatch");
    Matrix y(x.rows(), v.cols);
    const auto t = static_cast<std::int64_t>(x.rows());
    if (parallel) {
#pragma omp parallel for schedule(static)
        for (std::int64_t a = 0; a < t; ++a) packed_forward_row(v, x, y, static_cast<std::size_t>(a));
    } else {
        for (std::int64_t a = 0; a < t; ++a) packed_forward_row(v, x, y, static_cast<std::size_t>(a));
    }
    return y;
}

}  // namespace

Matrix packed_forward(const Matrix& x, std::span<const std::uint8_t> bytes) {
    return packed_forward_impl(x, bytes, true);
}

Matrix packed_forward_serial(const Matrix& x, std::span<const std::uint8_t> bytes) {
    return packed_forward_impl(x, bytes, false);
}

BitAccounting bit_accounting(const BitAccountingConfig& cfg) {
    require(cfg.rows >= 1 && cfg.cols >= 1, ErrorKind::config, "bit_accounting: empty layer shape");
    require(cfg.salient_ratio > 0.0 && cfg.salient_ratio < 1.0, ErrorKind::config,
            "bit_accounting: salient ratio must be in (0, 1)");
    require(cfg.salient_bits >= cfg.binary_bits && cfg.binary_bits > 0.0, ErrorKind::config,
            "bit_accounting: invalid bit-widths");

    const double p = cfg.salient_ratio;
    const double weights = static_cast<double>(cfg.rows) * static_cast<double>(cfg.cols);

    BitAccounting acc;
    acc.weight_bits = cfg.binary_bits * (1.0 - p) + cfg.salient_bits * p;
    acc.total_weight_bit_count = weights * acc.weight_bits;
    switch (cfg.mask) {
        case MaskScheme::none: acc.index_bits = 0.0; break;
        case MaskScheme::row_bitmap:
            acc.index_bits = static_cast<double>(cfg.rows) / acc.total_weight_bit_count;
            break;
        case MaskScheme::element_bitmap: acc.index_bits = 1.0; break;
    }
    if (cfg.additional_override) {
        acc.additional_bits = *cfg.additional_override;
    } else {
        const double param_bits = cfg.scale_vectors * static_cast<double>(cfg.rows) * cfg.scale_width +
                                  p * static_cast<double>(cfg.rows) * cfg.zero_width;
        acc.additional_bits = param_bits / acc.total_weight_bit_count;
    }
    acc.total_bits = acc.weight_bits + acc.index_bits + acc.additional_bits;
    return acc;
}

BitAccountingConfig accounting_preset_ptq161(std::size_t rows, std::size_t cols) {
    BitAccountingConfig cfg;
    cfg.rows = rows;
    cfg.cols = cols;
    return cfg;
}

BitAccountingConfig accounting_preset_pb_llm() {
    BitAccountingConfig cfg;
    cfg.salient_ratio = 0.1;
    cfg.salient_bits = 8.0;
    cfg.mask = MaskScheme::element_bitmap;
    cfg.additional_override = 0.0;
    return cfg;
}

BitAccountingConfig accounting_preset_billm() {
    BitAccountingConfig cfg;
    cfg.salient_ratio = 0.1;
    cfg.salient_bits = 1.0;  // every group binarized; payload is 1 bit throughout
    cfg.mask = MaskScheme::element_bitmap;
    cfg.additional_override = 0.1;
    return cfg;
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace ptq
