#include "bitdance/binq.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "bitdance/error.hpp"

namespace bitdance::binq {

BinaryToken::BinaryToken(std::vector<std::int8_t> bits) : bits_(std::move(bits)) {
    for (auto b : bits_)
        if (b != 1 && b != -1) throw InvalidInput("BinaryToken: entries must be -1 or +1");
}

BinaryGrid::BinaryGrid(std::size_t height, std::size_t width, std::size_t d)
    : height_(height), width_(width), d_(d), bits_(height * width * d, 1) {}

BinaryGrid::BinaryGrid(std::size_t height, std::size_t width, std::size_t d, std::vector<std::int8_t> bits)
    : height_(height), width_(width), d_(d), bits_(std::move(bits)) {
    if (bits_.size() != height * width * d) throw InvalidInput("BinaryGrid: bit count does not match shape");
    for (auto b : bits_)
        if (b != 1 && b != -1) throw InvalidInput("BinaryGrid: entries must be -1 or +1");
}

std::span<const std::int8_t> BinaryGrid::token(std::size_t r, std::size_t c) const {
    return {bits_.data() + (r * width_ + c) * d_, d_};
}

void BinaryGrid::set_token(std::size_t r, std::size_t c, std::span<const std::int8_t> bits) {
    if (bits.size() != d_) throw InvalidInput("BinaryGrid::set_token: wrong bit count");
    for (auto b : bits)
        if (b != 1 && b != -1) throw InvalidInput("BinaryGrid::set_token: entries must be -1 or +1");
    std::copy(bits.begin(), bits.end(), bits_.begin() + static_cast<std::ptrdiff_t>((r * width_ + c) * d_));
}

BinaryToken BinaryGrid::token_at(std::size_t r, std::size_t c) const {
    auto t = token(r, c);
    return BinaryToken({t.begin(), t.end()});
}

Matrix BinaryGrid::as_matrix() const {
    Matrix m(token_count(), d_);
    for (std::size_t i = 0; i < bits_.size(); ++i) m[i] = bits_[i];
    return m;
}

BinaryGrid BinaryGrid::from_matrix(std::size_t height, std::size_t width, const Matrix& values) {
    if (values.rows() != height * width) throw InvalidInput("BinaryGrid::from_matrix: row count mismatch");
    std::vector<std::int8_t> bits(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) throw InvalidInput("BinaryGrid::from_matrix: non-finite value");
        bits[i] = values[i] >= 0.0 ? 1 : -1;
    }
    return BinaryGrid(height, width, values.cols(), std::move(bits));
}

BinaryToken quantize(std::span<const double> x) {
    std::vector<std::int8_t> bits(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i])) throw InvalidInput("quantize: non-finite latent at channel " + std::to_string(i));
        bits[i] = x[i] >= 0.0 ? 1 : -1;
    }
    return BinaryToken(std::move(bits));
}

BinaryGrid quantize_grid(const LatentGrid& grid) {
    if (grid.values.rows() != grid.height * grid.width || grid.values.cols() != grid.d)
        throw InvalidInput("quantize_grid: latent matrix does not match grid shape");
    if (!grid.values.all_finite()) throw InvalidInput("quantize_grid: non-finite latent");
    return BinaryGrid::from_matrix(grid.height, grid.width, grid.values);
}

ad::Var quantize_ste(const ad::Var& x) {
    if (!x.value().all_finite()) throw InvalidInput("quantize_ste: non-finite latent");
    return ad::sign_ste(x);
}

void EntropyConfig::validate() const {
    if (d == 0) throw ConfigError("entropy: d must be positive");
    if (groups == 0 || d % groups != 0)
        throw ConfigError("entropy: groups (g=" + std::to_string(groups) + ") must divide d (d=" + std::to_string(d) +
                          ")");
    if (group_size() > kMaxGroupSize)
        throw ConfigError("entropy: group size d/g = " + std::to_string(group_size()) + " exceeds " +
                          std::to_string(kMaxGroupSize));
    if (!(temperature > 0.0)) throw ConfigError("entropy: temperature must be positive");
    if (!(weight >= 0.0)) throw ConfigError("entropy: weight must be non-negative");
}

Matrix corner_codes(std::size_t k) {
    if (k == 0 || k > kMaxGroupSize) throw InvalidInput("corner_codes: k out of range");
    const std::size_t n = std::size_t{1} << k;
    Matrix codes(n, k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) codes(i, j) = ((i >> (k - 1 - j)) & 1U) ? 1.0 : -1.0;
    return codes;
}

std::size_t code_index(std::span<const std::int8_t> bits) {
    std::size_t idx = 0;
    for (auto b : bits) idx = (idx << 1) | (b > 0 ? 1U : 0U);
    return idx;
}

namespace {

// Similarity logits x_group . c / T for every corner c: (B x K).
ad::Var group_logits(const ad::Var& batch, std::size_t group, const EntropyConfig& cfg, const Matrix& codes_t) {
    const std::size_t gs = cfg.group_size();
    ad::Var xs = ad::cols(batch, group * gs, gs);
    return ad::scale(ad::matmul(xs, ad::Var::constant(codes_t)), 1.0 / cfg.temperature);
}

}  // namespace

std::vector<std::vector<double>> group_code_distribution(std::span<const double> x, const EntropyConfig& cfg) {
    cfg.validate();
    if (x.size() != cfg.d) throw InvalidInput("group_code_distribution: latent length != d");
    ad::NoGradGuard guard;
    const Matrix codes_t = transpose(corner_codes(cfg.group_size()));
    ad::Var row = ad::Var::constant(Matrix(1, cfg.d, std::vector<double>(x.begin(), x.end())));
    std::vector<std::vector<double>> out;
    for (std::size_t g = 0; g < cfg.groups; ++g) {
        ad::Var p = ad::softmax_rows(group_logits(row, g, cfg, codes_t));
        out.emplace_back(p.value().values().begin(), p.value().values().end());
    }
    return out;
}

ad::Var entropy_loss(const ad::Var& batch, const EntropyConfig& cfg) {
    cfg.validate();
    if (batch.rows() == 0) throw InvalidInput("entropy_loss: empty batch");
    if (batch.cols() != cfg.d) throw InvalidInput("entropy_loss: batch width != d");
    const Matrix codes_t = transpose(corner_codes(cfg.group_size()));
    ad::Var total;
    for (std::size_t g = 0; g < cfg.groups; ++g) {
        ad::Var q = ad::softmax_rows(group_logits(batch, g, cfg, codes_t));
        ad::Var per_sample = ad::mean(ad::entropy_rows(q));
        ad::Var of_mean = ad::sum(ad::entropy_rows(ad::mean_rows(q)));
        ad::Var term = ad::sub(per_sample, of_mean);
        total = total.defined() ? ad::add(total, term) : term;
    }
    return total;
}

double entropy_loss(const Matrix& batch, const EntropyConfig& cfg) {
    ad::NoGradGuard guard;
    return entropy_loss(ad::Var::constant(batch), cfg).item();
}

// ---- packed files ----------------------------------------------------------

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFU));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[offset + i]) << (8 * i);
    return v;
}

}  // namespace

std::uint64_t packed_payload_bytes(std::uint64_t height, std::uint64_t width, std::uint64_t d) {
    const std::uint64_t tokens = height * width;
    if (height != 0 && tokens / height != width) throw FormatError("packed latent: dimension overflow");
    const std::uint64_t bits = tokens * d;
    if (tokens != 0 && bits / tokens != d) throw FormatError("packed latent: dimension overflow");
    if (bits > kMaxPackedBits) throw FormatError("packed latent: grid exceeds size limit");
    return (bits + 7) / 8;
}

std::uint64_t PackedHeader::payload_bytes() const { return packed_payload_bytes(height, width, d); }

std::vector<std::uint8_t> pack_bits(const BinaryGrid& grid) {
    constexpr std::uint64_t kU32Max = 0xFFFFFFFFULL;
    if (grid.height() > kU32Max || grid.width() > kU32Max || grid.d() > kU32Max)
        throw FormatError("pack_bits: dimension does not fit in u32");
    const std::uint64_t payload = packed_payload_bytes(grid.height(), grid.width(), grid.d());
    std::vector<std::uint8_t> out;
    out.reserve(kPackedHeaderBytes + payload);
    out.insert(out.end(), std::begin(kPackedMagic), std::end(kPackedMagic));
    put_u32(out, static_cast<std::uint32_t>(grid.height()));
    put_u32(out, static_cast<std::uint32_t>(grid.width()));
    put_u32(out, static_cast<std::uint32_t>(grid.d()));
    out.resize(kPackedHeaderBytes + payload, 0);
    auto bits = grid.bits();
    for (std::size_t i = 0; i < bits.size(); ++i)
        if (bits[i] > 0) out[kPackedHeaderBytes + i / 8] |= static_cast<std::uint8_t>(0x80U >> (i % 8));
    return out;
}

PackedHeader read_packed_header(std::span<const std::uint8_t> file) {
    if (file.size() < kPackedHeaderBytes) throw FormatError("packed latent: truncated header");
    if (std::memcmp(file.data(), kPackedMagic, 4) != 0) throw FormatError("packed latent: bad magic");
    PackedHeader h{get_u32(file, 4), get_u32(file, 8), get_u32(file, 12)};
    h.payload_bytes();  // validates dimensions
    return h;
}

BinaryGrid unpack_bits(std::span<const std::uint8_t> file) {
    const PackedHeader h = read_packed_header(file);
    const std::uint64_t payload = h.payload_bytes();
    if (file.size() - kPackedHeaderBytes < payload) throw FormatError("packed latent: truncated payload");
    if (file.size() - kPackedHeaderBytes > payload) throw FormatError("packed latent: trailing bytes after payload");
    const std::size_t nbits = static_cast<std::size_t>(h.height) * h.width * h.d;
    std::vector<std::int8_t> bits(nbits);
    for (std::size_t i = 0; i < nbits; ++i)
        bits[i] = (file[kPackedHeaderBytes + i / 8] & (0x80U >> (i % 8))) ? 1 : -1;
    return BinaryGrid(h.height, h.width, h.d, std::move(bits));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_packed_file(const std::filesystem::path& path, const BinaryGrid& grid) {
    const auto bytes = pack_bits(grid);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

BinaryGrid read_packed_file(const std::filesystem::path& path) { return unpack_bits(read_file_bytes(path)); }

// ---- accounting ------------------------------------------------------------

double compression_ratio(std::size_t image_h, std::size_t image_w, std::size_t downsample, std::size_t d) {
    if (downsample == 0 || d == 0 || image_h == 0 || image_w == 0)
        throw InvalidInput("compression_ratio: arguments must be positive");
    if (image_h % downsample != 0 || image_w % downsample != 0)
        throw InvalidInput("compression_ratio: downsample factor must divide both image dimensions");
    const double raw = static_cast<double>(image_h) * static_cast<double>(image_w) * 3.0 * 8.0;
    const double latent = static_cast<double>(image_h / downsample) * static_cast<double>(image_w / downsample) *
                          static_cast<double>(d);
    return raw / latent;
}

UsageStats codebook_usage_stats(std::span<const BinaryToken> tokens, std::size_t group_size) {
    if (tokens.empty()) throw InvalidInput("codebook_usage_stats: empty collection");
    const std::size_t d = tokens.front().dim();
    if (group_size == 0 || group_size > kMaxGroupSize || d % group_size != 0)
        throw InvalidInput("codebook_usage_stats: group size must divide d and be <= 16");
    UsageStats s;
    s.count = tokens.size();
    s.bit_mean.assign(d, 0.0);
    s.flip_rate.assign(d, 0.0);
    const std::size_t groups = d / group_size;
    s.group_histogram.assign(groups, std::vector<std::uint64_t>(std::size_t{1} << group_size, 0));
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const auto bits = tokens[t].bits();
        if (bits.size() != d) throw InvalidInput("codebook_usage_stats: tokens differ in length");
        for (std::size_t i = 0; i < d; ++i) {
            s.bit_mean[i] += bits[i];
            if (t > 0 && tokens[t - 1].bits()[i] != bits[i]) s.flip_rate[i] += 1.0;
        }
        for (std::size_t g = 0; g < groups; ++g) ++s.group_histogram[g][code_index(bits.subspan(g * group_size, group_size))];
    }
    for (auto& m : s.bit_mean) m /= static_cast<double>(tokens.size());
    if (tokens.size() > 1)
        for (auto& f : s.flip_rate) f /= static_cast<double>(tokens.size() - 1);
    return s;
}

}  // namespace bitdance::binq
