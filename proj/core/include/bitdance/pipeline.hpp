#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bitdance/backbone.hpp"
#include "bitdance/binq.hpp"
#include "bitdance/flowhead.hpp"
#include "bitdance/nn.hpp"

// Next-patch autoregressive model: patch raster ordering, teacher-forced
// training, patch-by-patch generation and patch-size escalation.
namespace bitdance::pipeline {

struct PatchLayout {
    std::size_t p = 1;
    std::size_t grid_h = 8;
    std::size_t grid_w = 8;

    void validate() const;
    std::size_t num_patches() const { return (grid_h / p) * (grid_w / p); }
    std::size_t num_tokens() const { return grid_h * grid_w; }
    std::size_t patch_tokens() const { return p * p; }
    // Grid position of every sequence index: patches left-to-right,
    // top-to-bottom; inside a patch, rows then columns.
    std::vector<backbone::GridPos> order() const;
};

// (H*W) x d rows of +-1 in patch raster order.
Matrix flatten_patch_raster(const binq::BinaryGrid& grid, std::size_t p);
binq::BinaryGrid unflatten_patch_raster(const Matrix& seq, const PatchLayout& layout);
// Same reordering for real-valued rows given in plain raster order.
Matrix raster_to_patch_order(const Matrix& raster, const PatchLayout& layout);
Matrix patch_to_raster_order(const Matrix& seq, const PatchLayout& layout);

struct ArConfig {
    backbone::BackboneConfig backbone{};
    flowhead::HeadConfig head{};
    std::size_t grid_h = 8;
    std::size_t grid_w = 8;
    // false: the head is trained on and samples continuous latents without
    // the final sign() (continuous-target ablation).
    bool binary_targets = true;

    // Sets head.d, head.n and head.cond_width from the backbone settings.
    void sync_head();
    void validate() const;
    PatchLayout layout() const { return {backbone.patch_size, grid_h, grid_w}; }
    backbone::SequenceLayout sequence_layout() const;
};

// Backbone and flow head sharing one parameter store. Parameters live under
// "backbone." and "flowhead.". Not copyable: modules hold handles into the
// store; use clone() for an independent copy.
class ArModel {
public:
    ArModel(const ArConfig& cfg, std::uint64_t seed);
    ArModel(const ArModel&) = delete;
    ArModel& operator=(const ArModel&) = delete;
    ArModel(ArModel&&) = default;

    ArModel clone() const;

    const ArConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    const backbone::Backbone& net() const { return *backbone_; }
    const flowhead::FlowHead& head() const { return *head_; }

private:
    ArConfig cfg_;
    nn::ParamStore params_;
    std::unique_ptr<backbone::Backbone> backbone_;
    std::unique_ptr<flowhead::FlowHead> head_;
};

// Teacher-forced backbone pass: row j of the result conditions the
// prediction of token j of each sequence (patch raster order).
ad::Var conditioning_rows(const ArModel& model, std::span<const Matrix> sequences, std::span<const int> labels);

// Teacher-forced objective over a batch. sequences[i] is a token grid in
// patch raster order (N x d). Returns the mean flow loss over all patches and
// samples. `z_out`, when given, receives the conditioning rows; `head`
// replaces the model's own flow head when given.
ad::Var ar_loss(const ArModel& model, std::span<const Matrix> sequences, std::span<const int> labels,
                const flowhead::FlowDraw& draw, ad::Var* z_out = nullptr,
                const flowhead::XPredictor* head = nullptr);

// Direct next-token formulation (requires p = 1): plain raster order,
// classic causal mask, one token per diffusion-head group.
ad::Var next_token_reference_loss(const ArModel& model, std::span<const binq::BinaryGrid> grids,
                                  std::span<const int> labels, const flowhead::FlowDraw& draw);

struct TrainConfig {
    double lr = 1e-4;
    std::size_t warmup_steps = 100;
    double weight_decay = 0.0;
    double grad_clip = 1.0;
    double ema_decay = 0.9999;
    double cond_drop = 0.1;
};

struct StepReport {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
};

// Holds pointers into `model`, which must outlive the trainer and stay put.
class ArTrainer {
public:
    ArTrainer(ArModel& model, TrainConfig cfg, std::uint64_t seed);

    // One optimizer step on binary grids (raster H x W) with class labels.
    // Draw order: per-sample condition drop, then flow noise.
    StepReport step(std::span<const binq::BinaryGrid> grids, std::span<const int> labels);
    // Same step on real-valued latent grids; requires binary_targets = false.
    StepReport step(std::span<const binq::LatentGrid> grids, std::span<const int> labels);

    std::size_t step_count() const { return opt_.step_count(); }
    const nn::Ema& ema() const { return ema_; }
    nn::Ema& ema() { return ema_; }
    nn::AdamW& optimizer() { return opt_; }
    Rng& rng() { return rng_; }
    const TrainConfig& config() const { return cfg_; }

    // Model with the EMA weights.
    ArModel ema_model() const;

private:
    StepReport step_sequences(std::vector<Matrix> seqs, std::span<const int> labels);

    ArModel* model_;
    TrainConfig cfg_;
    nn::AdamW opt_;
    nn::Ema ema_;
    Rng rng_;
};

struct GenerationRequest {
    std::vector<int> labels;  // one per image; backbone::kNullClass for unconditional
    std::size_t num_steps = 50;
    double cfg_scale = 0.0;
    std::uint64_t seed = 0;
    bool record_trace = false;
};

struct TraceStep {
    Matrix z;       // conditioning rows for this step
    Matrix tokens;  // sampled +-1 rows
};

struct GenerationResult {
    std::vector<binq::BinaryGrid> grids;
    // Unbinarized samples; filled only when the model has binary_targets = false.
    std::vector<binq::LatentGrid> latents;
    std::size_t ar_steps = 0;
    std::vector<TraceStep> trace;
};

GenerationResult generate(const ArModel& model, const GenerationRequest& req);

// Token-by-token raster generation (requires p = 1); reference for generate().
GenerationResult generate_next_token_reference(const ArModel& model, const GenerationRequest& req);

// New model at patch size `new_p`: every parameter is copied except the prefix
// bank, whose existing rows are kept and whose new rows start at the mean of
// the existing rows plus N(0, 0.02^2) noise (fresh N(0, 0.5^2) if none).
ArModel escalate_patch_size(const ArModel& model, std::size_t new_p, std::uint64_t seed);

}  // namespace bitdance::pipeline
