#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "bitdance/pipeline.hpp"
#include "bitdance/toktrain.hpp"

namespace bitdance::app {

// Every tunable of a run, read from flat "key = value" text. Integers are
// unsigned; booleans accept true/false/1/0.
struct RunConfig {
    std::size_t seed = 0;

    // data
    std::size_t image_size = 32;
    std::size_t num_classes = 4;

    // tokenizer
    std::size_t f = 4;
    std::size_t d = 16;
    std::size_t g = 2;
    double temperature = 1.0;
    double entropy_weight = 0.1;
    double commitment_weight = 0.0;
    std::size_t tok_hidden = 32;
    std::size_t tok_blocks = 2;
    double tok_lr = 2e-3;
    std::size_t tok_warmup = 50;
    std::size_t tok_batch = 16;
    std::size_t tok_steps = 2000;

    // autoregressive model
    std::size_t p = 2;
    std::size_t width = 64;
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t head_width = 64;
    std::size_t head_depth = 2;
    std::size_t head_heads = 4;
    std::size_t head_mlp_ratio = 4;
    bool binary_targets = true;

    // AR training
    double lr = 1e-3;
    std::size_t warmup = 100;
    double weight_decay = 0.0;
    double grad_clip = 1.0;
    double ema_decay = 0.995;
    double cond_drop = 0.1;
    std::size_t batch = 8;
    std::size_t steps = 5000;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only

    // sampling
    std::size_t num_steps = 50;
    double cfg_scale = 3.0;
    double delta_clamp = 1e-3;

    // Throws ConfigError for unknown keys or unparsable values.
    void set(std::string_view key, std::string_view value);
    std::string get(std::string_view key) const;
    static const std::vector<std::string>& keys();

    // Throws ConfigError listing every violated constraint by field name.
    void validate() const;

    // Canonical text, one "key = value" per line in keys() order.
    std::string to_text() const;
    // Keys whose values differ.
    std::vector<std::string> diff(const RunConfig& other) const;

    static RunConfig parse(std::string_view text, const std::string& source = "<config>");
    // Throws IoError when the file cannot be read.
    static RunConfig load(const std::filesystem::path& path);

    std::size_t grid() const { return image_size / f; }
    toktrain::SyntheticSpec data(std::uint64_t stream_seed) const;
    toktrain::TokenizerConfig tokenizer() const;
    toktrain::TokenizerTrainConfig tokenizer_train() const;
    pipeline::ArConfig ar() const;
    pipeline::TrainConfig ar_train() const;
};

// Applies "key=value" overrides in order.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments);

// Independent seed for a named purpose derived from the run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose);

}  // namespace bitdance::app
