#include "bitdance/backbone.hpp"

#include <cmath>

#include "bitdance/error.hpp"

namespace bitdance::backbone {

std::vector<std::size_t> SequenceLayout::block_sizes(std::size_t length) const {
    if (length == 0) length = total_length();
    if (length > total_length()) throw InvalidInput("sequence longer than the layout");
    std::vector<std::size_t> sizes;
    std::size_t used = 0;
    std::size_t next = first_block();
    while (used < length) {
        const std::size_t take = std::min(next, length - used);
        if (take > 0) sizes.push_back(take);
        used += take;
        next = patch_tokens();
    }
    return sizes;
}

BlockCausalMask BlockCausalMask::from_block_sizes(std::span<const std::size_t> sizes) {
    BlockCausalMask m;
    std::size_t end = 0;
    for (std::size_t b = 0; b < sizes.size(); ++b) {
        if (sizes[b] == 0) throw InvalidInput("block sizes must be positive");
        end += sizes[b];
        m.block_end_.push_back(end);
        m.block_of_.insert(m.block_of_.end(), sizes[b], b);
    }
    return m;
}

std::vector<ad::KeyRange> BlockCausalMask::key_ranges(std::size_t batch) const {
    const std::size_t len = size();
    std::vector<ad::KeyRange> out(batch * len);
    for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t i = 0; i < len; ++i)
            out[s * len + i] = {static_cast<std::uint32_t>(s * len),
                                static_cast<std::uint32_t>(s * len + block_end(i))};
    return out;
}

BlockCausalMask build_block_causal_mask(const SequenceLayout& layout, std::size_t length) {
    const auto sizes = layout.block_sizes(length);
    return BlockCausalMask::from_block_sizes(sizes);
}

Matrix pos2d(std::span<const GridPos> positions, std::size_t width) {
    if (width % 4 != 0) throw InvalidInput("pos2d: width must be divisible by 4");
    const std::size_t quarter = width / 4;
    Matrix out(positions.size(), width);
    for (std::size_t r = 0; r < positions.size(); ++r) {
        for (std::size_t i = 0; i < quarter; ++i) {
            const double omega = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
            const double a = static_cast<double>(positions[r].row) * omega;
            const double b = static_cast<double>(positions[r].col) * omega;
            out(r, i) = std::sin(a);
            out(r, quarter + i) = std::cos(a);
            out(r, 2 * quarter + i) = std::sin(b);
            out(r, 3 * quarter + i) = std::cos(b);
        }
    }
    return out;
}

void BackboneConfig::validate() const {
    if (d == 0) throw ConfigError("d must be positive");
    if (width == 0 || width % 4 != 0) throw ConfigError("width must be a positive multiple of 4");
    if (heads == 0 || width % heads != 0) {
        throw ConfigError("width (" + std::to_string(width) + ") must be divisible by heads (" +
                          std::to_string(heads) + ")");
    }
    if (depth == 0 || mlp_ratio == 0) throw ConfigError("depth and mlp_ratio must be positive");
    if (num_classes == 0) throw ConfigError("num_classes must be positive");
    if (patch_size == 0) throw ConfigError("patch_size must be positive");
}

Backbone::Backbone(const BackboneConfig& cfg, nn::ParamStore& store, const std::string& prefix, Rng& rng)
    : cfg_(cfg) {
    cfg_.validate();
    const std::size_t h = cfg_.width;
    store.add(prefix + "class_embed", nn::normal_init(cfg_.num_classes + 1, h, 0.5, rng));
    if (cfg_.prefix_len() > 0) store.add(prefix + "prefix", nn::normal_init(cfg_.prefix_len(), h, 0.5, rng));
    nn::Linear::create(store, prefix + "token_proj", cfg_.d, h, rng);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
        const std::string b = prefix + "layers." + std::to_string(i) + ".";
        nn::Linear::create(store, b + "qkv", h, 3 * h, rng);
        nn::Linear::create(store, b + "proj", h, h, rng);
        nn::Mlp::create(store, b + "mlp", h, cfg_.mlp_ratio * h, rng);
    }
    bind(store, prefix);
}

Backbone::Backbone(const BackboneConfig& cfg, const nn::ParamStore& store, const std::string& prefix) : cfg_(cfg) {
    cfg_.validate();
    bind(store, prefix);
}

void Backbone::bind(const nn::ParamStore& store, const std::string& prefix) {
    auto lin = [&](const std::string& name) {
        return nn::Linear{store.get(name + ".weight"), store.get(name + ".bias")};
    };
    class_embed_ = store.get(prefix + "class_embed");
    if (cfg_.prefix_len() > 0) {
        prefix_ = store.get(prefix + "prefix");
        if (prefix_.rows() != cfg_.prefix_len()) throw CompatibilityError("prefix bank size does not match patch size");
    }
    token_proj_ = lin(prefix + "token_proj");
    layers_.clear();
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
        const std::string b = prefix + "layers." + std::to_string(i) + ".";
        layers_.push_back({lin(b + "qkv"), lin(b + "proj"), nn::Mlp{lin(b + "mlp.fc1"), lin(b + "mlp.fc2")}});
    }
    if (class_embed_.rows() != cfg_.num_classes + 1 || class_embed_.cols() != cfg_.width ||
        token_proj_.in_features() != cfg_.d) {
        throw CompatibilityError("backbone parameters do not match the backbone configuration");
    }
}

ad::Var Backbone::embed_first_block(std::span<const int> labels) const {
    const std::size_t first = 1 + cfg_.prefix_len();
    std::vector<ad::RowRef> map;
    map.reserve(labels.size() * first);
    for (int label : labels) {
        if (label != kNullClass && (label < 0 || static_cast<std::size_t>(label) >= cfg_.num_classes)) {
            throw InvalidInput("class label " + std::to_string(label) + " outside [0, " +
                               std::to_string(cfg_.num_classes) + ")");
        }
        const std::size_t idx = label == kNullClass ? cfg_.num_classes : static_cast<std::size_t>(label);
        map.push_back({0, static_cast<std::uint32_t>(idx)});
        for (std::size_t i = 0; i < cfg_.prefix_len(); ++i) map.push_back({1, static_cast<std::uint32_t>(i)});
    }
    std::vector<ad::Var> sources = {class_embed_};
    if (prefix_.defined()) sources.push_back(prefix_);
    return ad::assemble_rows(sources, map);
}

ad::Var Backbone::embed_tokens(const Matrix& tokens, std::span<const GridPos> positions) const {
    if (tokens.cols() != cfg_.d) throw InvalidInput("embed: token width does not match d");
    if (positions.empty() || tokens.rows() % positions.size() != 0) {
        throw InvalidInput("embed: token count is not a multiple of the position count");
    }
    const std::size_t reps = tokens.rows() / positions.size();
    const Matrix pe = pos2d(positions, cfg_.width);
    Matrix tiled(tokens.rows(), cfg_.width);
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < positions.size(); ++i) {
            auto dst = tiled.row(r * positions.size() + i);
            auto src = pe.row(i);
            std::copy(src.begin(), src.end(), dst.begin());
        }
    return ad::add(token_proj_(ad::Var::constant(tokens)), ad::Var::constant(std::move(tiled)));
}

ad::Var Backbone::embed(std::span<const int> labels, const Matrix& tokens, std::span<const GridPos> positions) const {
    const std::size_t batch = labels.size(), k = positions.size();
    if (tokens.rows() != batch * k) {
        throw InvalidInput("embed: expected " + std::to_string(batch * k) + " token rows, got " +
                           std::to_string(tokens.rows()));
    }
    ad::Var head = embed_first_block(labels);
    if (k == 0) return head;
    ad::Var body = embed_tokens(tokens, positions);
    const std::size_t first = 1 + cfg_.prefix_len();
    std::vector<ad::RowRef> map;
    map.reserve(batch * (first + k));
    for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t i = 0; i < first; ++i) map.push_back({0, static_cast<std::uint32_t>(s * first + i)});
        for (std::size_t i = 0; i < k; ++i) map.push_back({1, static_cast<std::uint32_t>(s * k + i)});
    }
    return ad::assemble_rows({head, body}, map);
}

ad::Var Backbone::layer(const Layer& l, const ad::Var& x, const ad::Var& keys, const ad::Var& values,
                        std::span<const ad::KeyRange> ranges) const {
    const std::size_t h = cfg_.width;
    ad::Var qkv = l.qkv(ad::layer_norm(x));
    ad::Var q = ad::cols(qkv, 0, h);
    ad::Var a = ad::attention(q, keys.defined() ? keys : ad::cols(qkv, h, h),
                              values.defined() ? values : ad::cols(qkv, 2 * h, h), cfg_.heads, ranges);
    ad::Var y = ad::add(x, l.proj(a));
    return ad::add(y, l.mlp(ad::layer_norm(y)));
}

ad::Var Backbone::forward(const ad::Var& inputs, std::span<const ad::KeyRange> ranges) const {
    if (inputs.cols() != cfg_.width) throw InvalidInput("forward: input width does not match backbone width");
    if (ranges.size() != inputs.rows()) throw InvalidInput("forward: one key range per row required");
    ad::Var x = inputs;
    for (const auto& l : layers_) x = layer(l, x, ad::Var(), ad::Var(), ranges);
    return ad::layer_norm(x);
}

KvCache Backbone::empty_cache(std::size_t batch) const {
    KvCache c;
    c.batch = batch;
    c.keys.assign(cfg_.depth, Matrix(0, cfg_.width));
    c.values.assign(cfg_.depth, Matrix(0, cfg_.width));
    return c;
}

namespace {

// Sequence-major merge of `old` (batch x len rows) and `fresh` (batch x k rows).
Matrix interleave(const Matrix& old, const Matrix& fresh, std::size_t batch, std::size_t len, std::size_t k) {
    const std::size_t w = fresh.cols();
    Matrix out(batch * (len + k), w);
    for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t i = 0; i < len; ++i) {
            auto src = old.row(s * len + i);
            std::copy(src.begin(), src.end(), out.row(s * (len + k) + i).begin());
        }
        for (std::size_t i = 0; i < k; ++i) {
            auto src = fresh.row(s * k + i);
            std::copy(src.begin(), src.end(), out.row(s * (len + k) + len + i).begin());
        }
    }
    return out;
}

}  // namespace

Matrix Backbone::incremental_forward(KvCache& cache, const Matrix& new_rows,
                                     std::span<const std::size_t> visible_end) const {
    const std::size_t k = visible_end.size();
    if (cache.keys.size() != cfg_.depth || cache.batch == 0) throw InvalidInput("KV cache does not match backbone");
    if (k == 0 || new_rows.rows() != cache.batch * k || new_rows.cols() != cfg_.width) {
        throw InvalidInput("incremental_forward: new rows do not match cache batch");
    }
    const std::size_t len = cache.length, total = len + k;
    for (std::size_t i = 0; i < k; ++i) {
        if (visible_end[i] <= len + i || visible_end[i] > total) {
            throw InvalidInput("incremental_forward: visible range must cover the position and stay inside the cache");
        }
    }
    std::vector<ad::KeyRange> ranges(cache.batch * k);
    for (std::size_t s = 0; s < cache.batch; ++s)
        for (std::size_t i = 0; i < k; ++i)
            ranges[s * k + i] = {static_cast<std::uint32_t>(s * total),
                                 static_cast<std::uint32_t>(s * total + visible_end[i])};

    ad::NoGradGuard guard;
    const std::size_t h = cfg_.width;
    ad::Var x = ad::Var::constant(new_rows);
    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const Layer& l = layers_[li];
        // Same arithmetic as layer(), with keys/values extended by the cache.
        ad::Var qkv = l.qkv(ad::layer_norm(x));
        cache.keys[li] = interleave(cache.keys[li], ad::cols(qkv, h, h).value(), cache.batch, len, k);
        cache.values[li] = interleave(cache.values[li], ad::cols(qkv, 2 * h, h).value(), cache.batch, len, k);
        ad::Var a = ad::attention(ad::cols(qkv, 0, h), ad::Var::constant(cache.keys[li]),
                                  ad::Var::constant(cache.values[li]), cfg_.heads, ranges);
        ad::Var y = ad::add(x, l.proj(a));
        x = ad::add(y, l.mlp(ad::layer_norm(y)));
    }
    cache.length = total;
    return ad::layer_norm(x).value();
}

}  // namespace bitdance::backbone
