// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
// Criteria 1-11 use small independent oracles and run in a few minutes.
// Criteria 12-16 train the pinned desk recipe from configs/ (tokenizer, p=2
// model, p=4 escalation) in a work directory and evaluate the result.
//
//   acceptance [--workdir DIR] [--reuse] [--only 1,2,...]
//
// --reuse keeps finished stages found in DIR instead of retraining.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "app/commands.hpp"
#include "app/run_config.hpp"
#include "bitdance/backbone.hpp"
#include "bitdance/binq.hpp"
#include "bitdance/evalx.hpp"
#include "bitdance/flowhead.hpp"
#include "bitdance/pipeline.hpp"
#include "bitdance/toktrain.hpp"
#include "grad_check.hpp"
#include "test_models.hpp"

namespace fs = std::filesystem;
using namespace bitdance;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::vector<std::int8_t> random_bits(std::size_t n, Rng& rng) {
    std::vector<std::int8_t> bits(n);
    for (auto& b : bits) b = rng.bernoulli(0.5) ? 1 : -1;
    return bits;
}

binq::BinaryGrid random_grid(std::size_t h, std::size_t w, std::size_t d, Rng& rng) {
    return binq::BinaryGrid(h, w, d, random_bits(h * w * d, rng));
}

// ---- 1. quantizer ------------------------------------------------------------

std::vector<std::int8_t> nearest_corner(const std::vector<double>& x) {
    const std::size_t d = x.size();
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::int8_t> arg(d), c(d);
    for (std::size_t code = 0; code < (std::size_t{1} << d); ++code) {
        double dist = 0.0;
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

Outcome quantizer_exactness() {
    Stopwatch sw;
    Rng rng(101);
    std::size_t mismatches = 0, total = 0;
    for (std::size_t d : {4u, 8u, 12u})
        for (int i = 0; i < 1000; ++i) {
            std::vector<double> x(d);
            for (auto& v : x) v = rng.normal() * (i % 2 ? 0.1 : 2.0);
            const auto q = binq::quantize(x);
            const std::vector<std::int8_t> got(q.bits().begin(), q.bits().end());
            mismatches += got != nearest_corner(x);
            ++total;
        }
    const double s = sw.seconds();
    return {mismatches == 0 && s < 10.0, fmt("%zu/%zu mismatches, %.2f s", mismatches, total, s)};
}

// ---- 2. entropy loss -----------------------------------------------------------

// Direct enumeration: per-sample softmax over all 2^k corners of each group,
// mean per-sample entropy minus entropy of the batch mean, summed over groups.
double enumerated_entropy_loss(const Matrix& x, std::size_t groups, double temperature) {
    const std::size_t d = x.cols(), k = d / groups, codes = std::size_t{1} << k;
    double total = 0.0;
    for (std::size_t g = 0; g < groups; ++g) {
        std::vector<double> avg(codes, 0.0);
        double mean_h = 0.0;
        for (std::size_t r = 0; r < x.rows(); ++r) {
            std::vector<double> logit(codes);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < codes; ++c) {
                double s = 0.0;
                for (std::size_t j = 0; j < k; ++j) s += x(r, g * k + j) * (((c >> (k - 1 - j)) & 1U) ? 1.0 : -1.0);
                logit[c] = s / temperature;
                mx = std::max(mx, logit[c]);
            }
            double z = 0.0;
            for (double l : logit) z += std::exp(l - mx);
            double h = 0.0;
            for (std::size_t c = 0; c < codes; ++c) {
                const double p = std::exp(logit[c] - mx) / z;
                if (p > 0.0) h -= p * std::log(p);
                avg[c] += p / static_cast<double>(x.rows());
            }
            mean_h += h / static_cast<double>(x.rows());
        }
        double h_avg = 0.0;
        for (double a : avg)
            if (a > 0.0) h_avg -= a * std::log(a);
        total += mean_h - h_avg;
    }
    return total;
}

Outcome entropy_analytics() {
    const binq::EntropyConfig two{.d = 2, .groups = 1, .temperature = 1.0};
    const double zero = binq::entropy_loss(Matrix{{100.0, 100.0}, {100.0, 100.0}, {100.0, 100.0}}, two);

    // All 16 corners of a 4-bit group, confidently: loss = 0 - ln 16.
    const binq::EntropyConfig four{.d = 4, .groups = 1, .temperature = 1.0};
    Matrix corners(16, 4);
    for (std::size_t c = 0; c < 16; ++c)
        for (std::size_t j = 0; j < 4; ++j) corners(c, j) = ((c >> j) & 1U) ? 100.0 : -100.0;
    const double uniform = binq::entropy_loss(corners, four);

    Rng rng(102);
    const Matrix batch = rng.normal_matrix(5, 6);
    const binq::EntropyConfig six{.d = 6, .groups = 2, .temperature = 0.8};
    const double enumerated = binq::entropy_loss(batch, six);
    const double oracle = enumerated_entropy_loss(batch, 2, 0.8);

    const double e1 = std::abs(zero), e2 = std::abs(uniform + std::log(16.0)), e3 = std::abs(enumerated - oracle);

    ad::Var x = ad::Var::parameter(rng.normal_matrix(6, 8));
    const binq::EntropyConfig eight{.d = 8, .groups = 2, .temperature = 1.0};
    const auto grad = testing::check_gradient([&] { return binq::entropy_loss(x, eight); }, x, 1e-6, 48);

    const bool ok = e1 <= 1e-9 && e2 <= 1e-9 && e3 <= 1e-9 && grad.max_rel_error <= 1e-4;
    return {ok, fmt("|L0|=%.1e |L+lnK|=%.1e |L-enum|=%.1e grad rel %.1e", e1, e2, e3, grad.max_rel_error)};
}

// ---- 3. compression ratios ------------------------------------------------------

Outcome compression_table() {
    const double a = binq::compression_ratio(256, 256, 16, 32);
    const double b = binq::compression_ratio(256, 256, 32, 256);
    const double c = binq::compression_ratio(256, 256, 32, 128);
    // 256*256*3*8 bits per image over (256/f)^2 * d latent bits.
    const double oa = 256.0 * 256 * 24 / (16.0 * 16 * 32), ob = 256.0 * 256 * 24 / (8.0 * 8 * 256),
                 oc = 256.0 * 256 * 24 / (8.0 * 8 * 128);
    const bool ok = a == 192.0 && b == 96.0 && c == 192.0 && a == oa && b == ob && c == oc;
    return {ok, fmt("%g, %g, %g", a, b, c)};
}

// ---- 4. codec -------------------------------------------------------------------

// Reference encoder written from the format description.
std::vector<std::uint8_t> reference_pack(const binq::BinaryGrid& g) {
    std::vector<std::uint8_t> out = {'B', 'L', 'T', '1'};
    for (std::uint32_t v : {static_cast<std::uint32_t>(g.height()), static_cast<std::uint32_t>(g.width()),
                            static_cast<std::uint32_t>(g.d())})
        for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
    const auto bits = g.bits();
    out.resize(16 + (bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < bits.size(); ++i)
        if (bits[i] > 0) out[16 + i / 8] |= static_cast<std::uint8_t>(0x80U >> (i % 8));
    return out;
}

Outcome codec_round_trip() {
    Rng rng(104);
    std::size_t failures = 0;
    for (int i = 0; i < 10000; ++i) {
        const auto g = random_grid(1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(40), rng);
        const auto bytes = binq::pack_bits(g);
        failures += !(binq::unpack_bits(bytes) == g) || bytes != reference_pack(g);
    }
    const auto big = binq::pack_bits(random_grid(16, 16, 32, rng));
    const std::size_t payload = big.size() - binq::kPackedHeaderBytes;
    return {failures == 0 && payload == 1024, fmt("%zu/10000 failures, 16x16x32 payload %zu bytes", failures, payload)};
}

// ---- 5. flow identities ------------------------------------------------------------

class FixedPredictor : public flowhead::XPredictor {
public:
    explicit FixedPredictor(Matrix f) : f_(std::move(f)) {}
    ad::Var predict(const ad::Var&, std::span<const double>, const ad::Var&, std::size_t) const override {
        return ad::Var::constant(f_);
    }

private:
    Matrix f_;
};

// x-prediction whose implied velocity is the constant c.
class ConstantField : public flowhead::XPredictor {
public:
    explicit ConstantField(std::vector<double> c) : c_(std::move(c)) {}
    ad::Var predict(const ad::Var& x_t, std::span<const double> t, const ad::Var&, std::size_t n) const override {
        Matrix f = x_t.value();
        for (std::size_t r = 0; r < f.rows(); ++r)
            for (std::size_t j = 0; j < f.cols(); ++j) f(r, j) += (1.0 - t[r / n]) * c_[j];
        return ad::Var::constant(f);
    }

private:
    std::vector<double> c_;
};

Outcome flow_identities() {
    Rng rng(105);
    double worst_loss = 0.0;
    for (int i = 0; i < 100; ++i) {
        const std::size_t n = 1 + rng.below(4), groups = 1 + rng.below(4), d = 1 + rng.below(16);
        Matrix x(groups * n, d);
        for (double& e : x.values()) e = rng.bernoulli(0.5) ? 1.0 : -1.0;
        FixedPredictor oracle(x);
        const double l = flowhead::flow_loss(oracle, x, ad::Var::constant(Matrix(groups * n, 1)), n, rng, 1e-3).item();
        worst_loss = std::max(worst_loss, l);
    }

    const std::vector<double> c = {0.7, -1.3, 2.5, 0.0};
    ConstantField field(c);
    double worst_euler = 0.0;
    for (std::size_t steps : {1u, 5u, 50u}) {
        Rng a(106), ref(106);
        const Matrix x0 = ref.normal_matrix(3, 4);
        const Matrix out =
            flowhead::sample(field, Matrix(3, 1), Matrix(), 1, 4, {.num_steps = steps, .binarize = false}, a);
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t j = 0; j < 4; ++j) worst_euler = std::max(worst_euler, std::abs(out(r, j) - x0(r, j) - c[j]));
    }

    std::size_t non_binary = 0, values = 0;
    for (int i = 0; i < 10; ++i) {
        const std::size_t n = i % 2 ? 4 : 1;
        nn::ParamStore store;
        flowhead::HeadConfig cfg{.d = 5, .n = n, .cond_width = 3, .depth = 1, .head_width = 8, .heads = 2};
        flowhead::FlowHead head(cfg, store, "h.", rng);
        testing::randomize(store, rng, 1.0);
        const Matrix z = rng.normal_matrix(2 * n, 3), zn = rng.normal_matrix(2 * n, 3);
        const Matrix out = flowhead::sample(head, z, zn, n, 5, {.num_steps = 3, .cfg_scale = 0.5 * i}, rng);
        for (double v : out.values()) non_binary += v != 1.0 && v != -1.0;
        values += out.size();
    }
    const bool ok = worst_loss <= 1e-24 && worst_euler <= 1e-12 && non_binary == 0;
    return {ok, fmt("oracle loss max %.1e, Euler N-dependence %.1e, %zu/%zu non-binary", worst_loss, worst_euler,
                    non_binary, values)};
}

// ---- 6. gradient suite ----------------------------------------------------------------

Outcome gradient_suite() {
    Stopwatch sw;
    double flow = 0.0, tok = 0.0, net = 0.0;
    {
        nn::ParamStore store;
        Rng rng(106);
        flowhead::HeadConfig cfg{.d = 3, .n = 2, .cond_width = 4, .depth = 1, .head_width = 8, .heads = 2};
        flowhead::FlowHead head(cfg, store, "h.", rng);
        testing::randomize(store, rng, 0.3);
        Matrix x(4, 3);
        for (double& e : x.values()) e = rng.bernoulli(0.5) ? 1.0 : -1.0;
        ad::Var z = ad::Var::parameter(rng.normal_matrix(4, 4));
        const flowhead::FlowDraw draw{{0.25, 0.8}, rng.normal_matrix(4, 3)};
        auto loss = [&] { return flowhead::flow_loss(head, x, z, 2, draw, 1e-3); };
        flow = testing::check_gradient(loss, z).max_rel_error;
        for (const auto& name : store.names())
            flow = std::max(flow, testing::check_gradient(loss, store.get(name), 1e-6, 16).max_rel_error);
    }
    {
        // Straight-through gradient of the real loss against finite differences
        // of the surrogate with sign(l0) - l0 frozen as an additive offset.
        toktrain::TokenizerConfig cfg;
        cfg.d = cfg.entropy.d = 6;
        cfg.entropy.groups = 2;
        cfg.hidden_width = 16;
        toktrain::Tokenizer t(cfg, 107);
        Rng rng(108);
        toktrain::Image img(8, 8);
        for (double& v : img.pixels) v = rng.uniform();
        const Matrix patches = toktrain::patchify(img, 4);
        const Matrix l0 = t.encode_rows(ad::Var::constant(patches)).value();
        Matrix offset = l0;
        for (std::size_t i = 0; i < l0.size(); ++i) offset[i] = (l0[i] >= 0 ? 1.0 : -1.0) - l0[i];
        auto total = [&](const ad::Var& l, const ad::Var& q) {
            ad::Var recon = ad::mse(t.decode_rows(q), ad::Var::constant(patches));
            return ad::add(recon, ad::scale(binq::entropy_loss(l, cfg.entropy), cfg.entropy.weight));
        };
        auto real = [&] {
            ad::Var l = t.encode_rows(ad::Var::constant(patches));
            return total(l, binq::quantize_ste(l));
        };
        auto surrogate = [&] {
            ad::Var l = t.encode_rows(ad::Var::constant(patches));
            return total(l, ad::add(l, ad::Var::constant(offset)));
        };
        for (const auto& name : t.params().names()) {
            ad::Var p = t.params().get(name);
            p.zero_grad();
            ad::backward(real());
            const Matrix analytic = p.grad();
            p.zero_grad();
            // Numeric side: central differences of the surrogate.
            const auto numeric = testing::check_gradient(surrogate, p, 1e-6, 24);
            p.zero_grad();
            ad::backward(surrogate());
            tok = std::max({tok, numeric.max_rel_error, max_abs_diff(p.grad(), analytic)});
            p.zero_grad();
        }
    }
    {
        nn::ParamStore store;
        Rng rng(109);
        backbone::BackboneConfig cfg{.d = 3, .width = 8, .depth = 2, .heads = 2, .mlp_ratio = 2, .num_classes = 3,
                                     .patch_size = 2};
        backbone::Backbone b(cfg, store, "backbone.", rng);
        testing::randomize(store, rng, 0.4);
        backbone::SequenceLayout layout{.cond_len = 1, .patch_size = 2, .num_patches = 2};
        const auto ranges = backbone::build_block_causal_mask(layout).key_ranges();
        ad::Var x = ad::Var::parameter(rng.normal_matrix(layout.total_length(), 8));
        const ad::Var w = ad::Var::constant(rng.normal_matrix(layout.total_length(), 8));
        auto loss = [&] { return ad::sum(ad::mul(b.forward(x, ranges), w)); };
        net = testing::check_gradient(loss, x).max_rel_error;
        for (const auto& name : store.names()) {
            if (name == "backbone.class_embed" || name == "backbone.prefix" || name.find("token_proj") != std::string::npos)
                continue;
            net = std::max(net, testing::check_gradient(loss, store.get(name), 1e-6, 16).max_rel_error);
        }
    }
    const double s = sw.seconds();
    const bool ok = flow <= 1e-4 && tok <= 1e-4 && net <= 1e-4 && s < 120.0;
    return {ok, fmt("flow %.1e, tokenizer(STE) %.1e, backbone %.1e, %.1f s", flow, tok, net, s)};
}

// ---- 7. mask --------------------------------------------------------------------------

std::size_t oracle_block(std::size_t cond, std::size_t p, std::size_t i) {
    const std::size_t first = cond + p * p - 1;
    if (i < first) return 0;
    return (first > 0 ? 1 : 0) + (i - first) / (p * p);
}

Outcome mask_soundness() {
    std::size_t layouts = 0, wrong = 0;
    for (std::size_t cond = 0; cond <= 2; ++cond)
        for (std::size_t p = 1; p <= 8; ++p)
            for (std::size_t patches = 1;; ++patches) {
                backbone::SequenceLayout layout{.cond_len = cond, .patch_size = p, .num_patches = patches};
                const std::size_t len = layout.total_length();
                if (len > 64) break;
                ++layouts;
                const auto m = backbone::build_block_causal_mask(layout);
                const auto ranges = m.key_ranges();
                for (std::size_t i = 0; i < len; ++i) {
                    std::size_t visible = 0;
                    for (std::size_t j = 0; j < len; ++j) {
                        const bool want = oracle_block(cond, p, j) <= oracle_block(cond, p, i);
                        wrong += m.allow(i, j) != want;
                        visible += want;
                    }
                    wrong += ranges[i].begin != 0 || ranges[i].end != visible;
                }
            }

    backbone::SequenceLayout layout{.cond_len = 1, .patch_size = 2, .num_patches = 4};
    const auto mask = backbone::build_block_causal_mask(layout);
    const auto ranges = mask.key_ranges();
    const std::size_t len = layout.total_length();
    std::size_t leaks = 0;
    for (std::uint64_t draw = 0; draw < 20; ++draw) {
        nn::ParamStore store;
        Rng rng(700 + draw);
        backbone::BackboneConfig cfg{.d = 3, .width = 8, .depth = 2, .heads = 2, .mlp_ratio = 2, .num_classes = 3,
                                     .patch_size = 2};
        backbone::Backbone net(cfg, store, "backbone.", rng);
        testing::randomize(store, rng, 0.5);
        ad::Var x = ad::Var::parameter(rng.normal_matrix(len, 8));
        const ad::Var w = ad::Var::constant(rng.normal_matrix(len, 8));
        for (std::size_t b = 0; b <= layout.num_patches; ++b) {
            std::vector<std::uint32_t> rows;
            for (std::uint32_t i = 0; i < len; ++i)
                if (oracle_block(1, 2, i) == b) rows.push_back(i);
            x.zero_grad();
            ad::Var out = net.forward(x, ranges);
            ad::backward(ad::sum(ad::mul(ad::gather_rows(out, rows), ad::gather_rows(w, rows))));
            for (std::size_t j = 0; j < len; ++j)
                if (oracle_block(1, 2, j) > b)
                    for (std::size_t c = 0; c < 8; ++c) leaks += x.grad()(j, c) != 0.0;
        }
    }
    return {wrong == 0 && leaks == 0 && layouts > 100,
            fmt("%zu layouts, %zu rule violations, %zu nonzero future gradients over 20 draws", layouts, wrong, leaks)};
}

// ---- 8. p=1 equivalence -------------------------------------------------------------

pipeline::ArConfig small_ar(std::size_t p, std::size_t grid, std::size_t d = 3) {
    pipeline::ArConfig cfg;
    cfg.backbone = {.d = d, .width = 8, .depth = 1, .heads = 2, .mlp_ratio = 2, .num_classes = 3, .patch_size = p};
    cfg.head.depth = 1;
    cfg.head.head_width = 8;
    cfg.head.heads = 2;
    cfg.head.mlp_ratio = 2;
    cfg.grid_h = cfg.grid_w = grid;
    return cfg;
}

Outcome p1_equivalence() {
    pipeline::ArModel model(small_ar(1, 8), 801);
    testing::randomize(model.params(), Rng(802), 0.3);
    Rng rng(803);
    std::vector<binq::BinaryGrid> grids;
    std::vector<Matrix> seqs;
    for (int i = 0; i < 4; ++i) {
        grids.push_back(random_grid(8, 8, 3, rng));
        seqs.push_back(pipeline::flatten_patch_raster(grids.back(), 1));
    }
    const std::vector<int> labels = {0, 2, backbone::kNullClass, 1};
    const auto draw = flowhead::draw_flow_noise(4 * 64, 1, 3, 1e-3, rng);
    const double patch = pipeline::ar_loss(model, seqs, labels, draw).item();
    const double token = pipeline::next_token_reference_loss(model, grids, labels, draw).item();

    std::size_t trace_diffs = 0;
    for (double cfg : {0.0, 2.0}) {
        pipeline::GenerationRequest req{.labels = {1, 0}, .num_steps = 4, .cfg_scale = cfg, .seed = 804,
                                        .record_trace = true};
        const auto a = pipeline::generate(model, req);
        const auto b = pipeline::generate_next_token_reference(model, req);
        trace_diffs += a.trace.size() != b.trace.size() || !(a.grids == b.grids);
        for (std::size_t i = 0; i < std::min(a.trace.size(), b.trace.size()); ++i)
            trace_diffs += !(a.trace[i].z == b.trace[i].z) || !(a.trace[i].tokens == b.trace[i].tokens);
    }
    return {patch == token && trace_diffs == 0,
            fmt("loss %.17g vs %.17g, %zu trace differences", patch, token, trace_diffs)};
}

// ---- 9. step-count law -----------------------------------------------------------------

Outcome step_count_law() {
    std::size_t steps[2] = {0, 0};
    int i = 0;
    for (std::size_t p : {2u, 4u}) {
        pipeline::ArModel model(small_ar(p, 16), 900 + p);
        steps[i++] = pipeline::generate(model, {.labels = {0}, .num_steps = 2, .seed = 1}).ar_steps;
    }
    return {steps[0] == 64 && steps[1] == 16, fmt("16x16 grid: p=2 %zu steps, p=4 %zu steps", steps[0], steps[1])};
}

// ---- 10. head parameter accounting -------------------------------------------------------

constexpr double kHeadBoundConstant = 64.0;

Outcome head_accounting() {
    const std::uint64_t cls = evalx::token_cls_param_count(1024, 32);
    const bool cls_ok = cls == 4'398'046'511'104ull && cls == 1024ull << 32;

    bool bitwise_ok = true;
    for (auto [h, d] : {std::pair<std::size_t, std::size_t>{1024, 32}, {64, 16}}) {
        nn::ParamStore store;
        Rng rng(1001);
        evalx::BitwiseHead head(h, d, store, "b.", rng);
        bitwise_ok &= store.scalar_count() == h * 2 * d && evalx::bitwise_output_param_count(h, d) == h * 2 * d;
    }

    // Count is exactly affine in d (second differences vanish) for the desk
    // head, so it cannot depend on 2^d; the h*2d*depth*C bound is checked in
    // the d >= 16 range the heads are used at.
    flowhead::HeadConfig head{.d = 1, .n = 4, .cond_width = 64, .depth = 2, .head_width = 64, .heads = 4};
    std::vector<std::uint64_t> counts;
    for (std::size_t d = 1; d <= 62; ++d) {
        head.d = d;
        counts.push_back(evalx::diffusion_head_param_count(head));
    }
    bool affine = true;
    for (std::size_t i = 2; i < counts.size(); ++i) affine &= counts[i] - counts[i - 1] == counts[1] - counts[0];
    double worst_ratio = 0.0;
    for (std::size_t d = 16; d <= 62; ++d)
        worst_ratio = std::max(worst_ratio, counts[d - 1] / (64.0 * 2.0 * d * 2.0));

    // The formula must agree with the module it describes.
    head.d = 16;
    nn::ParamStore store;
    Rng rng(1002);
    flowhead::FlowHead built(head, store, "h.", rng);
    const bool formula_ok = store.scalar_count() == evalx::diffusion_head_param_count(head);

    const bool ok = cls_ok && bitwise_ok && affine && formula_ok && worst_ratio <= kHeadBoundConstant;
    return {ok, fmt("token-cls %llu, bitwise h*2d %s, diffusion affine in d %s, count/(h*2d*depth) <= %.1f (C=%g)",
                    static_cast<unsigned long long>(cls), bitwise_ok ? "ok" : "MISMATCH", affine ? "yes" : "NO",
                    worst_ratio, kHeadBoundConstant)};
}

// ---- 11. joint vs factorized ---------------------------------------------------------------

Outcome joint_vs_factorized() {
    Stopwatch sw;
    evalx::JointExperimentConfig cfg;
    cfg.eval_samples = 10000;
    const auto rep = evalx::joint_vs_factorized(evalx::JointSpec::xor2(), cfg);
    const double s = sw.seconds();
    const bool ok = rep.tv_factorized >= 0.47 && rep.tv_diffusion <= 0.1 && rep.samples == 10000 && s < 600.0;
    return {ok, fmt("TV factorized %.4f, TV diffusion %.4f, %zu samples, %.0f s", rep.tv_factorized, rep.tv_diffusion,
                    rep.samples, s)};
}

// ---- 12-16. desk recipe -----------------------------------------------------------------------

struct DeskResults {
    std::string error;
    double recipe_seconds = 0.0;
    double escalation_seconds = 0.0;
    double tuned_cfg = 0.0;
    std::vector<evalx::SweepRow> tuning;
    evalx::SweepRow n50, n10, escalated;
    std::vector<flowhead::Histogram> hist;
    bool blt_identical = false;
    std::size_t blt_files = 0;
};

constexpr std::uint64_t kTuneSeed = 11;
constexpr std::uint64_t kEvalSeed = 22;
constexpr std::size_t kTunePerClass = 10;
constexpr std::size_t kEvalPerClass = 50;

double summary_wall_time(const fs::path& dir) {
    std::ifstream in(dir / "summary.json");
    return nlohmann::json::parse(in).at("wall_time_s").get<double>();
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class Desk {
public:
    Desk(fs::path workdir, bool reuse) : dir_(std::move(workdir)), reuse_(reuse) {}

    const DeskResults& results() {
        if (!done_) {
            done_ = true;
            try {
                run();
            } catch (const std::exception& e) {
                res_.error = e.what();
            }
        }
        return res_;
    }

private:
    void note(const std::string& msg) { std::cout << "  [desk] " << msg << std::endl; }

    bool stage_done(const fs::path& sub, const char* ck) const {
        return reuse_ && fs::exists(dir_ / sub / ck) && fs::exists(dir_ / sub / "summary.json");
    }

    void run() {
        if (!reuse_) fs::remove_all(dir_);
        fs::create_directories(dir_);
        std::ofstream log(dir_ / "desk.log", std::ios::app);
        const auto desk = app::RunConfig::load(fs::path(BITDANCE_CONFIG_DIR) / "desk.conf");
        const auto esc = app::RunConfig::load(fs::path(BITDANCE_CONFIG_DIR) / "escalate_p4.conf");

        if (!stage_done("tok", "tokenizer.ck")) {
            note("training tokenizer");
            app::train_tokenizer({.config = desk, .out_dir = dir_ / "tok"}, log);
        }
        if (!stage_done("ar", "ar.ck")) {
            note("training p=2 model");
            app::train_ar({.config = desk, .out_dir = dir_ / "ar", .tokenizer = dir_ / "tok" / "tokenizer.ck"}, log);
        }
        res_.recipe_seconds = summary_wall_time(dir_ / "tok") + summary_wall_time(dir_ / "ar");
        note(fmt("recipe wall time %.0f s", res_.recipe_seconds));
        if (!stage_done("esc", "ar.ck")) {
            note("escalating to p=4");
            app::train_ar({.config = esc, .out_dir = dir_ / "esc", .init = dir_ / "ar" / "ar.ck"}, log);
        }
        res_.escalation_seconds = summary_wall_time(dir_ / "esc");

        const auto base = app::load_ar_checkpoint(dir_ / "ar" / "ar.ck");
        note("tuning cfg_scale on a held-out seed");
        const std::vector<double> scales = {1.0, 2.0, 3.0, 4.0};
        res_.tuning = evalx::cfg_sweep(*base.model, *base.tokenizer, scales, desk.num_steps,
                                       {.samples_per_class = kTunePerClass, .seed = kTuneSeed});
        // Highest accuracy; ties go to the smaller scale.
        const auto best = std::max_element(res_.tuning.begin(), res_.tuning.end(),
                                           [](const auto& a, const auto& b) { return a.accuracy < b.accuracy; });
        res_.tuned_cfg = best->cfg_scale;

        note(fmt("evaluating at cfg_scale %g", res_.tuned_cfg));
        const evalx::SweepOptions eval{.samples_per_class = kEvalPerClass, .seed = kEvalSeed};
        res_.n50 = evalx::oracle_accuracy(*base.model, *base.tokenizer, 50, res_.tuned_cfg, eval);
        res_.n10 = evalx::oracle_accuracy(*base.model, *base.tokenizer, 10, res_.tuned_cfg, eval);

        const auto big = app::load_ar_checkpoint(dir_ / "esc" / "ar.ck");
        res_.escalated = evalx::oracle_accuracy(*big.model, *big.tokenizer, 50, res_.tuned_cfg, eval);

        note("head output histograms");
        res_.hist = app::hist({.checkpoint = dir_ / "ar" / "ar.ck", .t_values = {0.1, 0.5, 0.9}, .images = 64,
                               .seed = 33, .out_dir = dir_ / "hist"},
                              log);

        // Two same-seed sample runs through the command layer.
        for (const char* sub : {"sample_a", "sample_b"})
            app::sample({.checkpoint = dir_ / "ar" / "ar.ck", .label = 2, .count = 6, .seed = 44,
                         .out_dir = dir_ / sub, .chunk = 4},
                        log);
        res_.blt_identical = true;
        for (const auto& entry : fs::directory_iterator(dir_ / "sample_a")) {
            if (entry.path().extension() != ".blt") continue;
            ++res_.blt_files;
            const fs::path other = dir_ / "sample_b" / entry.path().filename();
            res_.blt_identical &= fs::exists(other) && read_bytes(entry.path()) == read_bytes(other);
        }
    }

    fs::path dir_;
    bool reuse_;
    bool done_ = false;
    DeskResults res_;
};

Outcome desk_generation(Desk& desk) {
    const auto& r = desk.results();
    if (!r.error.empty()) return {false, r.error};
    std::string tune;
    for (const auto& row : r.tuning) tune += fmt(" %g:%.2f", row.cfg_scale, row.accuracy);
    const bool ok = r.n50.accuracy >= 0.90 && r.n50.samples == 200 && r.recipe_seconds <= 3600.0;
    return {ok, fmt("accuracy %.3f over %zu samples at cfg_scale %g (tuning%s), recipe %.0f s", r.n50.accuracy,
                    r.n50.samples, r.tuned_cfg, tune.c_str(), r.recipe_seconds)};
}

Outcome few_steps(Desk& desk) {
    const auto& r = desk.results();
    if (!r.error.empty()) return {false, r.error};
    const double gap = std::abs(r.n10.accuracy - r.n50.accuracy);
    return {gap <= 0.03 + 1e-12, fmt("N=10 %.3f vs N=50 %.3f", r.n10.accuracy, r.n50.accuracy)};
}

Outcome head_sharpening(Desk& desk) {
    const auto& r = desk.results();
    if (!r.error.empty()) return {false, r.error};
    if (r.hist.size() != 3) return {false, "expected three histograms"};
    const double a = r.hist[0].frac_abs_gt_half, b = r.hist[1].frac_abs_gt_half, c = r.hist[2].frac_abs_gt_half;
    const bool ok = a <= b && b <= c && c - a >= 0.2;
    return {ok, fmt("frac |f|>0.5 at t=0.1/0.5/0.9: %.3f %.3f %.3f", a, b, c)};
}

Outcome escalation(Desk& desk) {
    const auto& r = desk.results();
    if (!r.error.empty()) return {false, r.error};
    const bool steps_ok = r.n50.ar_steps == 4 * r.escalated.ar_steps && r.escalated.ar_steps > 0;
    const bool acc_ok = r.escalated.accuracy >= r.n50.accuracy - 0.05 - 1e-12;
    return {steps_ok && acc_ok, fmt("p=4 accuracy %.3f vs p=2 %.3f, AR steps %zu -> %zu, fine-tune %.0f s",
                                    r.escalated.accuracy, r.n50.accuracy, r.n50.ar_steps, r.escalated.ar_steps,
                                    r.escalation_seconds)};
}

Outcome determinism(Desk& desk) {
    // Incremental decoding against the full forward at desk width.
    std::size_t checked = 0, diffs = 0;
    for (std::size_t p : {1u, 2u, 4u})
        for (std::size_t patches : {1u, 2u, 3u, 7u})
            for (std::size_t batch : {1u, 2u}) {
                nn::ParamStore store;
                Rng rng(1600 + 10 * p + patches);
                backbone::BackboneConfig cfg{.d = 16, .width = 64, .depth = 2, .heads = 4, .mlp_ratio = 4,
                                             .num_classes = 4, .patch_size = p};
                backbone::Backbone net(cfg, store, "backbone.", rng);
                testing::randomize(store, rng, 0.2);
                backbone::SequenceLayout layout{.cond_len = 1, .patch_size = p, .num_patches = patches};
                const std::size_t len = layout.total_length(), first = layout.first_block();
                const Matrix x = rng.normal_matrix(batch * len, 64);
                const Matrix full =
                    net.forward(ad::Var::constant(x), backbone::build_block_causal_mask(layout).key_ranges(batch))
                        .value();
                backbone::KvCache cache = net.empty_cache(batch);
                for (std::size_t pos = 0; pos < len;) {
                    const std::size_t k = pos == 0 ? first : p * p;
                    Matrix rows;
                    for (std::size_t s = 0; s < batch; ++s) rows.append_rows(x.slice_rows(s * len + pos, k));
                    const Matrix out = net.incremental_forward(cache, rows, std::vector<std::size_t>(k, pos + k));
                    for (std::size_t s = 0; s < batch; ++s)
                        diffs += !(out.slice_rows(s * k, k) == full.slice_rows(s * len + pos, k));
                    pos += k;
                }
                ++checked;
            }

    // Same-seed generation, compared as packed latent bytes.
    pipeline::ArModel model(small_ar(2, 8, 16), 1601);
    testing::randomize(model.params(), Rng(1602), 0.3);
    const pipeline::GenerationRequest req{.labels = {0, 1, 2}, .num_steps = 5, .cfg_scale = 2.0, .seed = 1603};
    const auto a = pipeline::generate(model, req), b = pipeline::generate(model, req);
    bool same = a.grids.size() == 3 && a.grids.size() == b.grids.size();
    for (std::size_t i = 0; same && i < a.grids.size(); ++i) same = binq::pack_bits(a.grids[i]) == binq::pack_bits(b.grids[i]);

    const auto& r = desk.results();
    if (!r.error.empty()) return {false, r.error};
    const bool ok = diffs == 0 && same && r.blt_identical && r.blt_files == 6;
    return {ok, fmt("%zu cache layouts with %zu mismatching blocks; in-process latents %s; %zu sample .blt files %s",
                    checked, diffs, same ? "identical" : "DIFFER", r.blt_files,
                    r.blt_identical ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App cli{"Acceptance criteria"};
    std::string workdir = "acceptance_run";
    bool reuse = false;
    std::vector<int> only;
    cli.add_option("--workdir", workdir, "Directory for the desk-scale runs");
    cli.add_flag("--reuse", reuse, "Keep finished stages found in the work directory");
    cli.add_option("--only", only, "Run only these criteria")->delimiter(',');
    CLI11_PARSE(cli, argc, argv);

    Desk desk(workdir, reuse);
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"quantizer exactness", quantizer_exactness},
        {"entropy loss analytics", entropy_analytics},
        {"compression ratio table", compression_table},
        {"packed latent codec", codec_round_trip},
        {"flow identities", flow_identities},
        {"gradient suite", gradient_suite},
        {"mask soundness and no leakage", mask_soundness},
        {"p=1 equals next-token", p1_equivalence},
        {"AR step-count law", step_count_law},
        {"head parameter accounting", head_accounting},
        {"joint vs factorized head", joint_vs_factorized},
        {"desk-scale generation", [&] { return desk_generation(desk); }},
        {"few sampling steps", [&] { return few_steps(desk); }},
        {"head outputs sharpen with t", [&] { return head_sharpening(desk); }},
        {"patch-size escalation", [&] { return escalation(desk); }},
        {"determinism and cache equivalence", [&] { return determinism(desk); }},
    };

    const std::set<int> selected(only.begin(), only.end());
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        Stopwatch sw;
        Outcome out;
        try {
            out = criteria[i].second();
        } catch (const std::exception& e) {
            out = {false, std::string("exception: ") + e.what()};
        }
        failures += !out.pass;
        std::cout << (out.pass ? "PASS" : "FAIL") << fmt("  %2d  %-34s %s  [%.1f s]", id, criteria[i].first,
                                                         out.detail.c_str(), sw.seconds())
                  << std::endl;
    }
    std::cout << (failures == 0 ? "all criteria passed" : fmt("%d criteria failed", failures)) << std::endl;
    return failures == 0 ? 0 : 1;
}
