#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "bitdance/binq.hpp"
#include "bitdance/error.hpp"
#include "bitdance/rng.hpp"
#include "grad_check.hpp"

namespace bitdance::binq {
namespace {

std::vector<std::int8_t> bits_of(const BinaryToken& t) { return {t.bits().begin(), t.bits().end()}; }

// Exhaustive nearest corner of {-1,1}^d under Euclidean distance.
std::vector<std::int8_t> brute_force_nearest_corner(const std::vector<double>& x) {
    const std::size_t d = x.size();
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::int8_t> arg(d);
    for (std::size_t code = 0; code < (std::size_t{1} << d); ++code) {
        double dist = 0.0;
        std::vector<std::int8_t> c(d);
        for (std::size_t i = 0; i < d; ++i) {
            c[i] = (code >> i) & 1U ? 1 : -1;
            dist += (x[i] - c[i]) * (x[i] - c[i]);
        }
        if (dist < best) {
            best = dist;
            arg = c;
        }
    }
    return arg;
}

TEST(Quantize, SignDefinition) {
    EXPECT_EQ(bits_of(quantize(std::vector<double>{0.3, -0.7, 2.0})), (std::vector<std::int8_t>{1, -1, 1}));
}

TEST(Quantize, ZeroMapsToPlusOne) {
    EXPECT_EQ(bits_of(quantize(std::vector<double>{0.0, -0.0})), (std::vector<std::int8_t>{1, 1}));
}

TEST(Quantize, RejectsNonFinite) {
    EXPECT_THROW(quantize(std::vector<double>{0.1, std::nan("")}), InvalidInput);
    EXPECT_THROW(quantize(std::vector<double>{std::numeric_limits<double>::infinity()}), InvalidInput);
}

TEST(Quantize, MatchesBruteForceNearestCorner) {
    Rng rng(11);
    for (std::size_t d : {1u, 3u, 8u, 12u}) {
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> x(d);
            for (auto& v : x) v = rng.normal();
            EXPECT_EQ(bits_of(quantize(x)), brute_force_nearest_corner(x)) << "d=" << d;
        }
    }
}

TEST(Quantize, Idempotent) {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> x(16);
        for (auto& v : x) v = rng.normal() * 3.0;
        BinaryToken once = quantize(x);
        EXPECT_EQ(quantize(once.as_doubles()), once);
    }
}

TEST(BinaryToken, RejectsNonBinaryEntries) {
    EXPECT_THROW(BinaryToken(std::vector<std::int8_t>{1, 0}), InvalidInput);
}

TEST(QuantizeSte, ForwardMatchesQuantizeAndGradientPassesThrough) {
    ad::Var x = ad::Var::parameter(Matrix{{0.3, -0.7}});
    ad::Var q = quantize_ste(x);
    EXPECT_EQ(q.value(), (Matrix{{1.0, -1.0}}));
    ad::backward(ad::sum(q));
    EXPECT_EQ(x.grad(), (Matrix{{1.0, 1.0}}));
}

// Toy autoencoder: latent -> sign -> tanh(linear) -> squared error. The
// straight-through gradient at the pre-quantization latent must equal the
// finite-difference derivative of the decoder loss at the quantized code.
TEST(QuantizeSte, ToyAutoencoderGradientMatchesFiniteDifferences) {
    Rng rng(13);
    const Matrix w_enc = rng.normal_matrix(6, 4), w_dec = rng.normal_matrix(4, 6), input = rng.normal_matrix(3, 6);
    ad::Var wd = ad::Var::constant(w_dec);
    auto decoder_loss = [&](const ad::Var& code) {
        return ad::mse(ad::tanh(ad::matmul(code, wd)), ad::Var::constant(input));
    };
    ad::Var latent = ad::Var::parameter(matmul(input, w_enc));
    ad::backward(decoder_loss(quantize_ste(latent)));
    const Matrix ste_grad = latent.grad();

    ad::Var code = ad::Var::parameter(quantize_ste(ad::Var::constant(latent.value())).value());
    auto loss = [&] { return decoder_loss(code); };
    ad::backward(loss());
    const Matrix fd_target = code.grad();
    EXPECT_LT(max_abs_diff(ste_grad, fd_target), 1e-15);
    EXPECT_LT(testing::check_gradient(loss, code).max_rel_error, 1e-4);
}

TEST(GroupCodeDistribution, ZeroLatentIsUniform) {
    EntropyConfig cfg{.d = 2, .groups = 1, .temperature = 1.0};
    auto dist = group_code_distribution(std::vector<double>{0.0, 0.0}, cfg);
    ASSERT_EQ(dist.size(), 1u);
    for (double p : dist[0]) EXPECT_NEAR(p, 0.25, 1e-15);
}

TEST(GroupCodeDistribution, LargeLatentConcentratesOnMatchingCorner) {
    EntropyConfig cfg{.d = 2, .groups = 1, .temperature = 1.0};
    auto dist = group_code_distribution(std::vector<double>{10.0, 10.0}, cfg);
    // Exact: logits 20, 0, 0, -20 over codes (-,-), (-,+), (+,-), (+,+).
    const double z = std::exp(20.0) + 2.0 + std::exp(-20.0);
    EXPECT_NEAR(dist[0][3], std::exp(20.0) / z, 1e-12);
    EXPECT_GE(dist[0][3], 0.999);
}

TEST(GroupCodeDistribution, PermutingBitsPermutesCodes) {
    EntropyConfig cfg{.d = 3, .groups = 1, .temperature = 0.7};
    const std::vector<double> x = {0.4, -1.1, 0.2};
    const std::vector<double> swapped = {-1.1, 0.4, 0.2};  // swap channels 0 and 1
    auto a = group_code_distribution(x, cfg)[0];
    auto b = group_code_distribution(swapped, cfg)[0];
    for (std::size_t code = 0; code < 8; ++code) {
        // Swap the two most significant bits of the code index.
        const std::size_t hi = (code >> 2) & 1U, mid = (code >> 1) & 1U;
        const std::size_t perm = (mid << 2) | (hi << 1) | (code & 1U);
        EXPECT_NEAR(a[code], b[perm], 1e-15);
    }
    EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), 1.0, 1e-12);
}

TEST(GroupCodeDistribution, RejectsGroupsNotDividingD) {
    EntropyConfig cfg{.d = 6, .groups = 4};
    EXPECT_THROW(group_code_distribution(std::vector<double>(6, 0.0), cfg), ConfigError);
}

TEST(EntropyConfig, Validation) {
    EXPECT_NO_THROW((EntropyConfig{.d = 16, .groups = 2}.validate()));
    EXPECT_THROW((EntropyConfig{.d = 34, .groups = 2}.validate()), ConfigError);  // group size 17
    EXPECT_THROW((EntropyConfig{.d = 4, .groups = 1, .temperature = 0.0}.validate()), ConfigError);
}

TEST(EntropyLoss, IdenticalConfidentSamplesGiveZero) {
    EntropyConfig cfg{.d = 2, .groups = 1, .temperature = 1.0};
    Matrix batch{{100.0, 100.0}, {100.0, 100.0}, {100.0, 100.0}};
    EXPECT_NEAR(entropy_loss(batch, cfg), 0.0, 1e-9);
}

TEST(EntropyLoss, ConfidentAndUniformGivesMinusLogK) {
    EntropyConfig cfg{.d = 2, .groups = 1, .temperature = 1.0};
    Matrix batch{{100.0, 100.0}, {100.0, -100.0}, {-100.0, 100.0}, {-100.0, -100.0}};
    EXPECT_NEAR(entropy_loss(batch, cfg), -std::log(4.0), 1e-9);
}

// Independent enumeration oracle: explicit softmax over the four corners.
double enumerate_entropy_loss(const std::vector<std::array<double, 2>>& xs, double temperature) {
    const std::array<std::array<double, 2>, 4> corners = {{{-1, -1}, {-1, 1}, {1, -1}, {1, 1}}};
    std::array<double, 4> avg{};
    double mean_h = 0.0;
    for (const auto& x : xs) {
        std::array<double, 4> p{};
        double z = 0.0;
        for (int c = 0; c < 4; ++c) {
            p[c] = std::exp((x[0] * corners[c][0] + x[1] * corners[c][1]) / temperature);
            z += p[c];
        }
        double h = 0.0;
        for (int c = 0; c < 4; ++c) {
            p[c] /= z;
            h -= p[c] * std::log(p[c]);
            avg[c] += p[c] / static_cast<double>(xs.size());
        }
        mean_h += h / static_cast<double>(xs.size());
    }
    double h_avg = 0.0;
    for (double a : avg) h_avg -= a * std::log(a);
    return mean_h - h_avg;
}

TEST(EntropyLoss, SmallBatchMatchesEnumeration) {
    const std::vector<std::array<double, 2>> xs = {{0.5, -1.2}, {2.0, 0.3}, {-0.7, -0.4}, {1.1, 1.9}};
    Matrix batch(4, 2);
    for (std::size_t i = 0; i < 4; ++i) {
        batch(i, 0) = xs[i][0];
        batch(i, 1) = xs[i][1];
    }
    EntropyConfig cfg{.d = 2, .groups = 1, .temperature = 1.0};
    EXPECT_NEAR(entropy_loss(batch, cfg), enumerate_entropy_loss(xs, 1.0), 1e-12);
}

TEST(EntropyLoss, EmptyBatchRejected) {
    EntropyConfig cfg{.d = 2, .groups = 1};
    EXPECT_THROW(entropy_loss(Matrix(0, 2), cfg), InvalidInput);
}

TEST(EntropyLoss, BoundedByLogKPerGroup) {
    Rng rng(14);
    EntropyConfig cfg{.d = 8, .groups = 2, .temperature = 0.5};
    const double log_k = std::log(16.0);
    for (int trial = 0; trial < 30; ++trial) {
        Matrix batch = rng.normal_matrix(1 + rng.below(20), 8, 0.1 + 3.0 * rng.uniform());
        const double l = entropy_loss(batch, cfg);
        EXPECT_GE(l, -2.0 * log_k - 1e-12);
        EXPECT_LE(l, 2.0 * log_k + 1e-12);
    }
}

TEST(EntropyLoss, GradientMatchesFiniteDifferences) {
    Rng rng(15);
    EntropyConfig cfg{.d = 8, .groups = 2, .temperature = 1.0};
    ad::Var batch = ad::Var::parameter(rng.normal_matrix(6, 8));
    auto loss = [&] { return entropy_loss(batch, cfg); };
    EXPECT_LT(testing::check_gradient(loss, batch, 1e-6, 48).max_rel_error, 1e-4);
}

TEST(PackBits, SingleTokenLayout) {
    BinaryGrid g(1, 1, 8, {1, -1, -1, -1, -1, -1, -1, -1});
    auto bytes = pack_bits(g);
    ASSERT_EQ(bytes.size(), kPackedHeaderBytes + 1);
    EXPECT_EQ(bytes[16], 0x80);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "BLT1");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[12], 8);
}

TEST(PackBits, PayloadLength) {
    EXPECT_EQ(packed_payload_bytes(16, 16, 32), 1024u);
    EXPECT_EQ(packed_payload_bytes(1, 1, 3), 1u);
    EXPECT_EQ(packed_payload_bytes(3, 5, 7), 14u);  // ceil(105 / 8)
}

TEST(PackBits, RoundTripRandomGrid) {
    Rng rng(16);
    std::vector<std::int8_t> bits(4 * 4 * 16);
    for (auto& b : bits) b = rng.bernoulli(0.5) ? 1 : -1;
    BinaryGrid g(4, 4, 16, bits);
    EXPECT_EQ(unpack_bits(pack_bits(g)), g);
}

TEST(PackBits, FormatErrors) {
    BinaryGrid g(2, 3, 5);
    auto bytes = pack_bits(g);
    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(unpack_bits(truncated), FormatError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(unpack_bits(bad_magic), FormatError);
    EXPECT_THROW(unpack_bits(std::span(bytes).first(10)), FormatError);
    auto huge = bytes;
    for (std::size_t i = 4; i < 16; ++i) huge[i] = 0xFF;
    EXPECT_THROW(unpack_bits(huge), FormatError);
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(unpack_bits(trailing), FormatError);
}

TEST(CompressionRatio, ReproducesTokenizerTableRows) {
    EXPECT_EQ(compression_ratio(256, 256, 16, 32), 192.0);
    EXPECT_EQ(compression_ratio(256, 256, 32, 256), 96.0);
    EXPECT_EQ(compression_ratio(256, 256, 32, 128), 192.0);
}

TEST(CompressionRatio, RejectsNonDivisibleDimensions) {
    EXPECT_THROW(compression_ratio(250, 256, 16, 32), InvalidInput);
    EXPECT_THROW(compression_ratio(256, 256, 0, 32), InvalidInput);
}

TEST(UsageStats, IdenticalTokens) {
    std::vector<BinaryToken> toks(5, BinaryToken({1, -1, 1, 1}));
    auto s = codebook_usage_stats(toks, 2);
    for (double f : s.flip_rate) EXPECT_EQ(f, 0.0);
    EXPECT_EQ(s.group_histogram[0][code_index(std::vector<std::int8_t>{1, -1})], 5u);
    EXPECT_EQ(std::accumulate(s.group_histogram[1].begin(), s.group_histogram[1].end(), std::uint64_t{0}), 5u);
    EXPECT_EQ(s.group_histogram[1][3], 5u);
}

TEST(UsageStats, AllCornersOnce) {
    std::vector<BinaryToken> toks = {BinaryToken({-1, -1}), BinaryToken({-1, 1}), BinaryToken({1, -1}),
                                     BinaryToken({1, 1})};
    auto s = codebook_usage_stats(toks, 2);
    EXPECT_EQ(s.bit_mean, (std::vector<double>{0.0, 0.0}));
    EXPECT_EQ(s.group_histogram[0], (std::vector<std::uint64_t>{1, 1, 1, 1}));
}

TEST(UsageStats, SignsOfGaussianNoiseAreBalanced) {
    Rng rng(17);
    std::vector<BinaryToken> toks;
    for (int i = 0; i < 10000; ++i) {
        std::vector<double> x(16);
        for (auto& v : x) v = rng.normal();
        toks.push_back(quantize(x));
    }
    auto s = codebook_usage_stats(toks, 8);
    for (double m : s.bit_mean) {
        EXPECT_GE(m, -1.0);
        EXPECT_LE(m, 1.0);
        EXPECT_LT(std::abs(m), 0.05);
    }
}

TEST(UsageStats, EmptyRejected) {
    EXPECT_THROW(codebook_usage_stats(std::vector<BinaryToken>{}, 2), InvalidInput);
}

}  // namespace
}  // namespace bitdance::binq
