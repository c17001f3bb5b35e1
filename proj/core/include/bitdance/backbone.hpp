#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "bitdance/nn.hpp"
#include "bitdance/rng.hpp"

// Autoregressive transformer over binary tokens with block-causal attention
// and KV-cached incremental decoding.
namespace bitdance::backbone {

// Index used in place of a class label for the learned null condition.
inline constexpr int kNullClass = -1;

// Layout of one input sequence: cond_len conditioning rows, p^2 - 1 prefix
// rows, then tokens in patch raster order. The first block is conditioning
// plus prefix; every later block is one patch.
struct SequenceLayout {
    std::size_t cond_len = 1;
    std::size_t patch_size = 1;
    std::size_t num_patches = 1;

    std::size_t patch_tokens() const { return patch_size * patch_size; }
    std::size_t prefix_len() const { return patch_tokens() - 1; }
    std::size_t first_block() const { return cond_len + prefix_len(); }
    // Conditioning + prefix + every token.
    std::size_t total_length() const { return first_block() + num_patches * patch_tokens(); }
    // Teacher-forcing input: conditioning + prefix + all tokens but the last patch.
    std::size_t train_length() const { return first_block() + (num_patches - 1) * patch_tokens(); }
    std::vector<std::size_t> block_sizes(std::size_t length) const;
};

// allow(i, j) <=> block_of(j) <= block_of(i). Since blocks are contiguous this
// is the key interval [0, end of block_of(i)).
class BlockCausalMask {
public:
    static BlockCausalMask from_block_sizes(std::span<const std::size_t> sizes);

    std::size_t size() const { return block_of_.size(); }
    std::size_t block_of(std::size_t pos) const { return block_of_.at(pos); }
    bool allow(std::size_t i, std::size_t j) const { return block_of_.at(j) <= block_of_.at(i); }
    // Exclusive end of the block containing pos.
    std::size_t block_end(std::size_t pos) const { return block_end_[block_of_.at(pos)]; }
    // One key range per position; for `batch` stacked copies, offsets shift
    // each copy into its own rows.
    std::vector<ad::KeyRange> key_ranges(std::size_t batch = 1) const;

private:
    std::vector<std::size_t> block_of_;
    std::vector<std::size_t> block_end_;
};

// Mask over the first `length` positions of `layout` (default: all of them).
BlockCausalMask build_block_causal_mask(const SequenceLayout& layout, std::size_t length = 0);

struct GridPos {
    std::size_t row = 0;
    std::size_t col = 0;
};

// 2D sinusoidal encoding: first half of the channels encodes the row, second
// half the column. width must be divisible by 4.
Matrix pos2d(std::span<const GridPos> positions, std::size_t width);

struct BackboneConfig {
    std::size_t d = 16;
    std::size_t width = 64;
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t num_classes = 4;
    std::size_t patch_size = 2;

    void validate() const;
    std::size_t prefix_len() const { return patch_size * patch_size - 1; }
};

// Per-layer keys and values of `batch` sequences that have consumed `length`
// positions. Rows are sequence-major.
struct KvCache {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<Matrix> keys;
    std::vector<Matrix> values;
};

class Backbone {
public:
    // Registers parameters under `prefix` (e.g. "backbone.").
    Backbone(const BackboneConfig& cfg, nn::ParamStore& store, const std::string& prefix, Rng& rng);
    // Binds to parameters already in `store`.
    Backbone(const BackboneConfig& cfg, const nn::ParamStore& store, const std::string& prefix);

    const BackboneConfig& config() const { return cfg_; }

    // Rows [class or null embedding, prefix_len prefix rows] for each label.
    ad::Var embed_first_block(std::span<const int> labels) const;
    // Linear projection of the +-1 token rows plus the positional term.
    ad::Var embed_tokens(const Matrix& tokens, std::span<const GridPos> positions) const;
    // Full sequences: per label, first block then tokens_per_seq tokens taken
    // sequence-major from `tokens`; positions has tokens_per_seq entries.
    ad::Var embed(std::span<const int> labels, const Matrix& tokens, std::span<const GridPos> positions) const;

    // Transformer over stacked inputs; ranges give each row's visible keys.
    ad::Var forward(const ad::Var& inputs, std::span<const ad::KeyRange> ranges) const;

    KvCache empty_cache(std::size_t batch) const;
    // Feeds `new_rows` (batch x k rows, sequence-major) at positions
    // cache.length .. cache.length + k - 1; new position i sees keys
    // [0, visible_end[i]). Returns hidden states for the new rows.
    Matrix incremental_forward(KvCache& cache, const Matrix& new_rows, std::span<const std::size_t> visible_end) const;

private:
    struct Layer {
        nn::Linear qkv, proj;
        nn::Mlp mlp;
    };
    void bind(const nn::ParamStore& store, const std::string& prefix);
    ad::Var layer(const Layer& l, const ad::Var& x, const ad::Var& keys, const ad::Var& values,
                  std::span<const ad::KeyRange> ranges) const;

    BackboneConfig cfg_;
    ad::Var class_embed_;  // (num_classes + 1) x width, last row is the null condition
    ad::Var prefix_;       // prefix_len x width, undefined when p = 1
    nn::Linear token_proj_;
    std::vector<Layer> layers_;
};

}  // namespace bitdance::backbone
