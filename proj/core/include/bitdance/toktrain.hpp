#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bitdance/binq.hpp"
#include "bitdance/nn.hpp"
#include "bitdance/rng.hpp"

// Toy visual tokenizer around the binary quantizer, plus the synthetic image
// family it is trained on.
namespace bitdance::toktrain {

// RGB image, values in [0, 1], stored height x width x 3 (channel fastest).
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w * 3, fill) {}

    double& at(std::size_t r, std::size_t c, std::size_t ch) { return pixels[(r * width + c) * 3 + ch]; }
    double at(std::size_t r, std::size_t c, std::size_t ch) const { return pixels[(r * width + c) * 3 + ch]; }

    friend bool operator==(const Image&, const Image&) = default;
};

// One row per f x f patch in raster order; columns are the patch pixels
// (row, col, channel) flattened.
Matrix patchify(const Image& img, std::size_t f);
// Inverse of patchify; values are clamped to [0, 1].
Image unpatchify(const Matrix& patches, std::size_t grid_h, std::size_t grid_w, std::size_t f);

double psnr(const Image& a, const Image& b);

void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);

// ---- synthetic data --------------------------------------------------------

struct SyntheticSpec {
    std::size_t image_size = 32;
    std::size_t num_classes = 4;
    std::uint64_t seed = 0;
};

struct Sample {
    Image image;
    int label = 0;
};

// Gray background with one saturated rectangle whose hue lies in a band
// centred on 360 * label / num_classes degrees.
Sample make_sample(const SyntheticSpec& spec, int label, Rng& rng);

// Deterministic stream of labelled samples; labels are uniform.
class SyntheticDataset {
public:
    explicit SyntheticDataset(SyntheticSpec spec);

    Sample next();
    std::vector<Sample> take(std::size_t n);
    const SyntheticSpec& spec() const { return spec_; }
    // Stream position, for resuming a run.
    std::string state() const { return rng_.serialize(); }
    void restore(const std::string& state) { rng_ = Rng::deserialize(state); }

private:
    SyntheticSpec spec_;
    Rng rng_;
};

// Classifies an image by the dominant hue of its saturated pixels. Returns -1
// when fewer than kMinSaturatedPixels pixels qualify.
int hue_oracle(const Image& img, std::size_t num_classes);
inline constexpr std::size_t kMinSaturatedPixels = 16;

// ---- tokenizer ---------------------------------------------------------------

struct TokenizerConfig {
    std::size_t downsample = 4;
    std::size_t d = 16;
    std::size_t hidden_width = 32;
    std::size_t blocks = 2;
    binq::EntropyConfig entropy{};
    // Optional ||x - sign(x)||^2 term; 0 disables.
    double commitment_weight = 0.0;
    // false: latents bypass the quantizer (continuous-target ablation).
    bool quantize = true;
    // L2 penalty on continuous latents, used only when quantize is false.
    double latent_l2 = 1e-3;

    void validate() const;
    std::size_t patch_dim() const { return downsample * downsample * 3; }
};

// Patch-MLP encoder and mirrored decoder. Parameters live under "tokenizer.".
class Tokenizer {
public:
    Tokenizer(TokenizerConfig cfg, std::uint64_t seed);

    const TokenizerConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

    // Rows are patches (patch_dim columns) -> rows are latents (d columns).
    ad::Var encode_rows(const ad::Var& patches) const;
    // Rows are tokens (d columns) -> rows are patches.
    ad::Var decode_rows(const ad::Var& tokens) const;

    binq::LatentGrid encode(const Image& img) const;
    // Accepts any d-column grid of +-1 or continuous values.
    Image decode(const binq::LatentGrid& grid) const;
    Image decode(const binq::BinaryGrid& grid) const;
    // quantize(encode(img)).
    binq::BinaryGrid tokenize(const Image& img) const;

private:
    struct Block {
        nn::Mlp mlp;
    };
    ad::Var trunk(const ad::Var& x, const std::vector<Block>& blocks) const;
    void check_image(const Image& img) const;

    TokenizerConfig cfg_;
    nn::ParamStore params_;
    nn::Linear enc_in_, enc_out_, dec_in_, dec_out_;
    std::vector<Block> enc_blocks_, dec_blocks_;
};

struct LossReport {
    double recon = 0.0;
    double entropy = 0.0;
    double total = 0.0;
};

struct TokenizerTrainConfig {
    double lr = 2e-3;
    std::size_t warmup_steps = 50;
    std::size_t batch_size = 16;
};

// Single-writer training loop state for a tokenizer.
class TokenizerTrainer {
public:
    TokenizerTrainer(Tokenizer& tok, TokenizerTrainConfig cfg);

    // total = recon + entropy_weight * entropy (+ commitment or latent L2);
    // updates parameters.
    LossReport step(std::span<const Image> batch);
    // Same losses without an update.
    LossReport evaluate(std::span<const Image> batch) const;

    std::size_t step_count() const { return opt_.step_count(); }
    nn::AdamW& optimizer() { return opt_; }

private:
    LossReport losses(std::span<const Image> batch, ad::Var* total) const;

    Tokenizer* tok_;
    TokenizerTrainConfig cfg_;
    nn::AdamW opt_;
};

// Fraction of bits reproduced when a decoded image is encoded again.
double bit_stability(const Tokenizer& tok, std::span<const Image> images);

}  // namespace bitdance::toktrain
