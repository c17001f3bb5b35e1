#include "app/run_config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <variant>

#include "bitdance/error.hpp"

namespace bitdance::app {
namespace {

using Field = std::variant<std::size_t RunConfig::*, double RunConfig::*, bool RunConfig::*>;

const std::vector<std::pair<std::string, Field>>& fields() {
    static const std::vector<std::pair<std::string, Field>> table = {
        {"seed", &RunConfig::seed},
        {"image_size", &RunConfig::image_size},
        {"num_classes", &RunConfig::num_classes},
        {"f", &RunConfig::f},
        {"d", &RunConfig::d},
        {"g", &RunConfig::g},
        {"temperature", &RunConfig::temperature},
        {"entropy_weight", &RunConfig::entropy_weight},
        {"commitment_weight", &RunConfig::commitment_weight},
        {"tok_hidden", &RunConfig::tok_hidden},
        {"tok_blocks", &RunConfig::tok_blocks},
        {"tok_lr", &RunConfig::tok_lr},
        {"tok_warmup", &RunConfig::tok_warmup},
        {"tok_batch", &RunConfig::tok_batch},
        {"tok_steps", &RunConfig::tok_steps},
        {"p", &RunConfig::p},
        {"width", &RunConfig::width},
        {"depth", &RunConfig::depth},
        {"heads", &RunConfig::heads},
        {"mlp_ratio", &RunConfig::mlp_ratio},
        {"head_width", &RunConfig::head_width},
        {"head_depth", &RunConfig::head_depth},
        {"head_heads", &RunConfig::head_heads},
        {"head_mlp_ratio", &RunConfig::head_mlp_ratio},
        {"binary_targets", &RunConfig::binary_targets},
        {"lr", &RunConfig::lr},
        {"warmup", &RunConfig::warmup},
        {"weight_decay", &RunConfig::weight_decay},
        {"grad_clip", &RunConfig::grad_clip},
        {"ema_decay", &RunConfig::ema_decay},
        {"cond_drop", &RunConfig::cond_drop},
        {"batch", &RunConfig::batch},
        {"steps", &RunConfig::steps},
        {"checkpoint_every", &RunConfig::checkpoint_every},
        {"num_steps", &RunConfig::num_steps},
        {"cfg_scale", &RunConfig::cfg_scale},
        {"delta_clamp", &RunConfig::delta_clamp},
    };
    return table;
}

const Field& find_field(std::string_view key) {
    for (const auto& [name, field] : fields())
        if (name == key) return field;
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
    // Shortest text that reads back to the same value.
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& [name, field] : fields()) out.push_back(name);
        return out;
    }();
    return names;
}

void RunConfig::set(std::string_view key, std::string_view value) {
    const Field& field = find_field(key);
    const std::string k(key);
    value = trim(value);
    auto bad = [&](const char* what) {
        return ConfigError("config key '" + k + "': expected " + what + ", got '" + std::string(value) + "'");
    };
    std::visit(
        [&](auto member) {
            using T = std::remove_reference_t<decltype(this->*member)>;
            T parsed{};
            if constexpr (std::is_same_v<T, bool>) {
                if (value == "true" || value == "1") parsed = true;
                else if (value == "false" || value == "0") parsed = false;
                else throw bad("true or false");
            } else {
                const char* first = value.data();
                const char* last = first + value.size();
                auto [ptr, ec] = std::from_chars(first, last, parsed);
                if (value.empty() || ec != std::errc() || ptr != last) {
                    throw bad(std::is_integral_v<T> ? "a non-negative integer" : "a number");
                }
                if constexpr (std::is_floating_point_v<T>) {
                    if (!std::isfinite(parsed)) throw bad("a finite number");
                }
            }
            this->*member = parsed;
        },
        field);
}

std::string RunConfig::get(std::string_view key) const {
    return std::visit(
        [&](auto member) -> std::string {
            using T = std::remove_reference_t<decltype(this->*member)>;
            if constexpr (std::is_same_v<T, bool>) return this->*member ? "true" : "false";
            else if constexpr (std::is_floating_point_v<T>) return format_double(this->*member);
            else return std::to_string(this->*member);
        },
        find_field(key));
}

void RunConfig::validate() const {
    std::vector<std::string> errs;
    auto need = [&](bool ok, std::string msg) {
        if (!ok) errs.push_back(std::move(msg));
    };
    auto positive = [&](std::size_t v, const char* name) { need(v > 0, std::string(name) + " must be positive"); };
    auto v = [](std::size_t x) { return std::to_string(x); };

    positive(image_size, "image_size");
    positive(num_classes, "num_classes");
    positive(f, "f");
    positive(d, "d");
    positive(g, "g");
    positive(p, "p");
    positive(tok_batch, "tok_batch");
    positive(batch, "batch");
    positive(num_steps, "num_steps");
    positive(heads, "heads");
    positive(head_heads, "head_heads");
    positive(depth, "depth");
    positive(head_depth, "head_depth");
    positive(tok_hidden, "tok_hidden");
    positive(mlp_ratio, "mlp_ratio");
    positive(head_mlp_ratio, "head_mlp_ratio");
    if (f > 0 && image_size > 0) {
        need(image_size % f == 0, "f (" + v(f) + ") must divide image_size (" + v(image_size) + ")");
        if (image_size % f == 0 && p > 0) {
            need(grid() % p == 0, "p (" + v(p) + ") must divide the token grid image_size / f (" + v(grid()) + ")");
        }
    }
    if (g > 0 && d > 0) {
        need(d % g == 0, "g (" + v(g) + ") must divide d (" + v(d) + ")");
        if (d % g == 0) {
            need(d / g <= binq::kMaxGroupSize,
                 "d / g (" + v(d / g) + ") exceeds the group size limit " + v(binq::kMaxGroupSize));
        }
    }
    need(image_size >= 8, "image_size must be at least 8");
    need(width > 0 && width % 4 == 0, "width (" + v(width) + ") must be a positive multiple of 4");
    if (heads > 0) need(width % heads == 0, "heads (" + v(heads) + ") must divide width (" + v(width) + ")");
    need(head_width > 0, "head_width must be positive");
    if (head_heads > 0) {
        need(head_width % head_heads == 0,
             "head_heads (" + v(head_heads) + ") must divide head_width (" + v(head_width) + ")");
    }
    need(temperature > 0.0, "temperature must be positive");
    need(entropy_weight >= 0.0, "entropy_weight must be non-negative");
    need(commitment_weight >= 0.0, "commitment_weight must be non-negative");
    need(tok_lr > 0.0, "tok_lr must be positive");
    need(lr > 0.0, "lr must be positive");
    need(weight_decay >= 0.0, "weight_decay must be non-negative");
    need(grad_clip >= 0.0, "grad_clip must be non-negative (0 disables)");
    need(ema_decay >= 0.0 && ema_decay < 1.0, "ema_decay must lie in [0, 1)");
    need(cond_drop >= 0.0 && cond_drop <= 1.0, "cond_drop must lie in [0, 1]");
    need(cfg_scale >= 0.0, "cfg_scale must be non-negative");
    need(delta_clamp > 0.0 && delta_clamp < 1.0, "delta_clamp must lie in (0, 1)");

    if (!errs.empty()) {
        std::string msg = "invalid config:";
        for (const auto& e : errs) msg += "\n  " + e;
        throw ConfigError(msg);
    }
}

std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& key : keys()) out += key + " = " + get(key) + "\n";
    return out;
}

std::vector<std::string> RunConfig::diff(const RunConfig& other) const {
    std::vector<std::string> out;
    for (const auto& key : keys())
        if (get(key) != other.get(key)) out.push_back(key);
    return out;
}

RunConfig RunConfig::parse(std::string_view text, const std::string& source) {
    RunConfig cfg;
    std::map<std::string, std::size_t> seen;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = source + ":" + std::to_string(line_no) + ": ";
        if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
        const std::string key(trim(line.substr(0, eq)));
        if (auto [it, fresh] = seen.emplace(key, line_no); !fresh) {
            throw ConfigError(where + "duplicate key '" + key + "' (first set on line " + std::to_string(it->second) +
                              ")");
        }
        try {
            cfg.set(key, line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments) {
    for (const auto& a : assignments) {
        const auto eq = a.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + a + "' is not key=value");
        cfg.set(trim(std::string_view(a).substr(0, eq)), std::string_view(a).substr(eq + 1));
    }
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
    // FNV-1a over the purpose, folded into the seed, then one splitmix64 round.
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : purpose) h = (h ^ c) * 0x100000001b3ull;
    std::uint64_t z = seed + h + 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

toktrain::SyntheticSpec RunConfig::data(std::uint64_t stream_seed) const {
    return {.image_size = image_size, .num_classes = num_classes, .seed = stream_seed};
}

toktrain::TokenizerConfig RunConfig::tokenizer() const {
    toktrain::TokenizerConfig tc;
    tc.downsample = f;
    tc.d = d;
    tc.hidden_width = tok_hidden;
    tc.blocks = tok_blocks;
    tc.entropy = {.d = d, .groups = g, .temperature = temperature, .weight = entropy_weight};
    tc.commitment_weight = commitment_weight;
    tc.quantize = binary_targets;
    return tc;
}

toktrain::TokenizerTrainConfig RunConfig::tokenizer_train() const {
    return {.lr = tok_lr, .warmup_steps = tok_warmup, .batch_size = tok_batch};
}

pipeline::ArConfig RunConfig::ar() const {
    pipeline::ArConfig ac;
    ac.backbone = {.d = d,
                   .width = width,
                   .depth = depth,
                   .heads = heads,
                   .mlp_ratio = mlp_ratio,
                   .num_classes = num_classes,
                   .patch_size = p};
    ac.head.depth = head_depth;
    ac.head.head_width = head_width;
    ac.head.heads = head_heads;
    ac.head.mlp_ratio = head_mlp_ratio;
    ac.head.num_steps = num_steps;
    ac.head.cfg_scale = cfg_scale;
    ac.head.delta_clamp = delta_clamp;
    ac.grid_h = ac.grid_w = grid();
    ac.binary_targets = binary_targets;
    ac.sync_head();
    return ac;
}

pipeline::TrainConfig RunConfig::ar_train() const {
    return {.lr = lr,
            .warmup_steps = warmup,
            .weight_decay = weight_decay,
            .grad_clip = grad_clip,
            .ema_decay = ema_decay,
            .cond_drop = cond_drop};
}

}  // namespace bitdance::app
