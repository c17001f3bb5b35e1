#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bitdance/autodiff.hpp"
#include "bitdance/matrix.hpp"

// Binary lookup-free quantization: sign quantizer with a straight-through
// gradient, group-wise entropy regularization, bit-packed latent storage and
// code-usage accounting.
namespace bitdance::binq {

// A d-bit token with every entry exactly -1 or +1.
class BinaryToken {
public:
    BinaryToken() = default;
    explicit BinaryToken(std::vector<std::int8_t> bits);

    std::size_t dim() const { return bits_.size(); }
    std::span<const std::int8_t> bits() const { return bits_; }
    std::int8_t operator[](std::size_t i) const { return bits_[i]; }
    std::vector<double> as_doubles() const { return {bits_.begin(), bits_.end()}; }

    friend bool operator==(const BinaryToken&, const BinaryToken&) = default;

private:
    std::vector<std::int8_t> bits_;
};

// Pre-quantization latents on an H x W token grid; row r*W + c of `values`
// holds the d channels of token (r, c).
struct LatentGrid {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t d = 0;
    Matrix values;
};

// Quantized token grid, token-major then channel order.
class BinaryGrid {
public:
    BinaryGrid() = default;
    BinaryGrid(std::size_t height, std::size_t width, std::size_t d);
    BinaryGrid(std::size_t height, std::size_t width, std::size_t d, std::vector<std::int8_t> bits);

    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t d() const { return d_; }
    std::size_t token_count() const { return height_ * width_; }
    std::span<const std::int8_t> bits() const { return bits_; }

    std::span<const std::int8_t> token(std::size_t r, std::size_t c) const;
    void set_token(std::size_t r, std::size_t c, std::span<const std::int8_t> bits);
    BinaryToken token_at(std::size_t r, std::size_t c) const;
    // (H*W) x d matrix of +-1.0 in raster order.
    Matrix as_matrix() const;
    static BinaryGrid from_matrix(std::size_t height, std::size_t width, const Matrix& values);

    friend bool operator==(const BinaryGrid&, const BinaryGrid&) = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::size_t d_ = 0;
    std::vector<std::int8_t> bits_;
};

// sign(x) per channel with sign(0) = +1 (also for -0.0). Throws InvalidInput on
// non-finite entries.
BinaryToken quantize(std::span<const double> x);
BinaryGrid quantize_grid(const LatentGrid& grid);

// Training-time quantizer: forward equals quantize, backward passes the
// incoming gradient through unchanged.
ad::Var quantize_ste(const ad::Var& x);

struct EntropyConfig {
    std::size_t d = 16;
    std::size_t groups = 2;
    double temperature = 1.0;
    double weight = 0.1;

    std::size_t group_size() const { return d / groups; }
    std::size_t codes_per_group() const { return std::size_t{1} << group_size(); }
    // Throws ConfigError naming the offending fields.
    void validate() const;
};

constexpr std::size_t kMaxGroupSize = 16;

// All 2^k corners of {-1, 1}^k. Row i is code index i; bit j of the code is
// the (k-1-j)-th bit of i, set meaning +1 (most significant bit first).
Matrix corner_codes(std::size_t k);
// Code index of a +-1 vector under the same convention.
std::size_t code_index(std::span<const std::int8_t> bits);

// Per group: softmax over the 2^group_size corners of <x_group, c> / temperature.
std::vector<std::vector<double>> group_code_distribution(std::span<const double> x, const EntropyConfig& cfg);

// Sum over groups of mean_batch H(q) - H(mean_batch q), natural log.
// Rows of `batch` are samples.
ad::Var entropy_loss(const ad::Var& batch, const EntropyConfig& cfg);
double entropy_loss(const Matrix& batch, const EntropyConfig& cfg);

// ---- packed latent files ---------------------------------------------------

inline constexpr char kPackedMagic[4] = {'B', 'L', 'T', '1'};
inline constexpr std::size_t kPackedHeaderBytes = 16;
// Upper bound on token_count * d accepted by the reader.
inline constexpr std::uint64_t kMaxPackedBits = std::uint64_t{1} << 36;

struct PackedHeader {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::uint32_t d = 0;

    std::uint64_t payload_bytes() const;
};

std::uint64_t packed_payload_bytes(std::uint64_t height, std::uint64_t width, std::uint64_t d);
// Serializes "BLT1", u32 LE height/width/d, then MSB-first bits with +1 -> 1.
std::vector<std::uint8_t> pack_bits(const BinaryGrid& grid);
BinaryGrid unpack_bits(std::span<const std::uint8_t> file);
PackedHeader read_packed_header(std::span<const std::uint8_t> file);

void write_packed_file(const std::filesystem::path& path, const BinaryGrid& grid);
BinaryGrid read_packed_file(const std::filesystem::path& path);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

// ---- accounting ------------------------------------------------------------

// Raw 8-bit RGB bits over latent bits.
double compression_ratio(std::size_t image_h, std::size_t image_w, std::size_t downsample, std::size_t d);

struct UsageStats {
    std::size_t count = 0;
    std::vector<double> bit_mean;
    // Fraction of consecutive token pairs (collection order) whose bit differs.
    std::vector<double> flip_rate;
    // group_histogram[g][code] counts occurrences of each code in group g.
    std::vector<std::vector<std::uint64_t>> group_histogram;
};

UsageStats codebook_usage_stats(std::span<const BinaryToken> tokens, std::size_t group_size);

}  // namespace bitdance::binq
