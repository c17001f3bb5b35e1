#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bitdance/flowhead.hpp"
#include "bitdance/nn.hpp"
#include "bitdance/pipeline.hpp"
#include "bitdance/toktrain.hpp"

// Baselines and experiments around the binary diffusion head: parameter
// accounting for the three head designs, a factorized bit-wise head, the
// joint-vs-factorized distribution probe, sampling sweeps and the
// continuous-target ablation.
namespace bitdance::evalx {

// ---- parameter accounting ---------------------------------------------------

// h * 2^d for an index-classification head over all 2^d codes. Throws
// InvalidInput when d > 62 or the product overflows 64 bits.
std::uint64_t token_cls_param_count(std::uint64_t h, std::uint64_t d);
// h * 2d: two logits per bit, no bias.
std::uint64_t bitwise_output_param_count(std::uint64_t h, std::uint64_t d);
// Closed-form parameter count of a flowhead::FlowHead with this config.
std::uint64_t diffusion_head_param_count(const flowhead::HeadConfig& cfg);

// ---- factorized bit-wise head ----------------------------------------------

// Linear map h -> 2d without bias. Columns (2j, 2j+1) are the logits of bit j
// being -1 and +1; bits are independent given z.
class BitwiseHead {
public:
    BitwiseHead(std::size_t h, std::size_t d, nn::ParamStore& store, const std::string& prefix, Rng& rng);

    std::size_t d() const { return d_; }
    ad::Var logits(const ad::Var& z) const;
    // Per-bit logit of +1: l_{2j+1} - l_{2j}.
    ad::Var bit_logits(const ad::Var& z) const;
    // Mean binary cross-entropy over all bits; targets are +-1.
    ad::Var loss(const ad::Var& z, const Matrix& targets) const;
    // One token per row of z, each bit drawn independently.
    Matrix sample(const Matrix& z, Rng& rng) const;

private:
    std::size_t d_;
    ad::Var weight_;
};

// ---- joint-vs-factorized probe --------------------------------------------

// Distribution over {-1, 1}^d. Index i encodes a token MSB first with bit set
// meaning +1, matching binq::code_index.
struct JointSpec {
    std::size_t d = 2;
    std::vector<double> probs;

    void validate() const;
    // Half the mass on all -1 (index 0), half on all +1 (index 3).
    static JointSpec xor2();
    static JointSpec point_mass(std::size_t d, std::size_t index);
    // Rows of +-1 drawn from the table.
    Matrix draw(std::size_t count, Rng& rng) const;
};

std::size_t token_index(std::span<const double> row);
// Normalized histogram over 2^d codes of +-1 rows.
std::vector<double> empirical_distribution(const Matrix& tokens, std::size_t d);
// 0.5 * sum |p - q|.
double total_variation(std::span<const double> p, std::span<const double> q);
// Bound on the expected TV of an empirical distribution of n draws over k
// outcomes from the truth: 0.5 * sqrt(k / n).
double sampling_error_bound(std::size_t outcomes, std::size_t draws);

struct JointExperimentConfig {
    std::size_t cond_width = 8;
    std::size_t batch = 64;
    std::size_t bitwise_steps = 500;
    double bitwise_lr = 5e-2;
    std::size_t diffusion_steps = 2000;
    double diffusion_lr = 2e-3;
    flowhead::HeadConfig head{.d = 2, .n = 1, .cond_width = 8, .depth = 2, .head_width = 32, .heads = 2};
    std::size_t eval_samples = 10000;
    std::size_t num_steps = 50;
    std::uint64_t seed = 0;
};

struct JointReport {
    std::vector<double> truth;
    std::vector<double> factorized;
    std::vector<double> diffusion;
    double tv_factorized = 0.0;
    double tv_diffusion = 0.0;
    double sampling_error = 0.0;
    std::size_t samples = 0;
};

// Trains a bit-wise head and a diffusion head on draws from `spec` under one
// fixed condition vector, samples both and compares against the exact table.
JointReport joint_vs_factorized(const JointSpec& spec, const JointExperimentConfig& cfg);

// ---- sampling sweeps ----------------------------------------------------------

struct SweepOptions {
    std::size_t samples_per_class = 10;
    std::uint64_t seed = 0;
};

struct SweepRow {
    std::size_t num_steps = 0;
    double cfg_scale = 0.0;
    std::size_t samples = 0;
    double accuracy = 0.0;       // oracle label == requested label
    double undecided = 0.0;      // oracle found too few saturated pixels
    double bit_mean = 0.0;       // mean of all generated bits
    double binary_fraction = 0;  // fraction of generated values in {-1, 1}
    std::size_t ar_steps = 0;    // per image
};

// Class-conditional generation of samples_per_class images per class, decoded
// and classified by the hue oracle. Batches are identical across rows.
SweepRow oracle_accuracy(const pipeline::ArModel& model, const toktrain::Tokenizer& tok, std::size_t num_steps,
                         double cfg_scale, const SweepOptions& opt);
std::vector<SweepRow> step_sweep(const pipeline::ArModel& model, const toktrain::Tokenizer& tok,
                                 std::span<const std::size_t> steps, double cfg_scale, const SweepOptions& opt);
std::vector<SweepRow> cfg_sweep(const pipeline::ArModel& model, const toktrain::Tokenizer& tok,
                                std::span<const double> scales, std::size_t num_steps, const SweepOptions& opt);

// ---- trained-head output histograms ---------------------------------------

// Histograms of the model's x-prediction on teacher-forced conditioning rows
// for real token sequences (patch raster order), one per t.
std::vector<flowhead::Histogram> head_output_histogram(const pipeline::ArModel& model,
                                                       std::span<const Matrix> sequences, std::span<const int> labels,
                                                       std::span<const double> t_values, Rng& rng);

// ---- continuous-target ablation ------------------------------------------

struct AblationConfig {
    toktrain::TokenizerConfig tokenizer{};
    toktrain::TokenizerTrainConfig tokenizer_train{};
    std::size_t tokenizer_steps = 2000;
    pipeline::ArConfig ar{};
    pipeline::TrainConfig ar_train{};
    std::size_t ar_steps = 5000;
    std::size_t ar_batch = 8;
    std::size_t support_images = 256;  // training images whose latents form the support set
    std::size_t num_steps = 20;
    double cfg_scale = 0.0;
    SweepOptions eval{};
    std::uint64_t seed = 0;
};

struct AblationRow {
    std::string variant;  // "binary" or "continuous"
    double recon_psnr = 0.0;
    double oracle_accuracy = 0.0;
    double nn_distance_mean = 0.0;  // generated token to nearest training latent
    double nn_distance_max = 0.0;
    double corner_fraction = 0.0;   // generated tokens that are exact codebook corners
};

// Mean and max over rows of `generated` of the Euclidean distance to the
// nearest row of `support`.
std::pair<double, double> nearest_neighbor_distance(const Matrix& generated, const Matrix& support);

// Trains both variants with identical budgets and seeds, then generates and
// measures each. Both rows share one schema.
std::vector<AblationRow> continuous_target_ablation(const AblationConfig& cfg);

}  // namespace bitdance::evalx
