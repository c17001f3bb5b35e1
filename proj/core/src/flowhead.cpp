#include "bitdance/flowhead.hpp"

#include <algorithm>
#include <cmath>

#include "bitdance/error.hpp"

namespace bitdance::flowhead {

void HeadConfig::validate() const {
    if (d == 0) throw ConfigError("head d must be positive");
    if (n == 0) throw ConfigError("head n must be >= 1");
    if (num_steps == 0) throw ConfigError("num_steps must be >= 1");
    if (!(delta_clamp > 0.0 && delta_clamp < 1.0)) throw ConfigError("delta_clamp must lie in (0, 1)");
    if (cfg_scale < 0.0) throw ConfigError("cfg_scale must be >= 0");
    if (head_width == 0 || heads == 0 || head_width % heads != 0) {
        throw ConfigError("head_width (" + std::to_string(head_width) + ") must be divisible by head_heads (" +
                          std::to_string(heads) + ")");
    }
    if (cond_width == 0 || depth == 0 || mlp_ratio == 0) throw ConfigError("head sizes must be positive");
}

Matrix timestep_features(std::span<const double> t, std::size_t dim) {
    const std::size_t half = dim / 2;
    Matrix out(t.size(), dim);
    for (std::size_t r = 0; r < t.size(); ++r) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double a = t[r] * 1000.0 * freq;
            out(r, i) = std::sin(a);
            out(r, half + i) = std::cos(a);
        }
    }
    return out;
}

namespace {

nn::Linear bind_linear(const nn::ParamStore& store, const std::string& name) {
    nn::Linear l;
    l.weight = store.get(name + ".weight");
    if (store.contains(name + ".bias")) l.bias = store.get(name + ".bias");
    return l;
}

ad::Var modulate(const ad::Var& normed, const ad::Var& shift, const ad::Var& scale) {
    return ad::add(ad::mul(normed, ad::add_scalar(scale, 1.0)), shift);
}

}  // namespace

FlowHead::FlowHead(const HeadConfig& cfg, nn::ParamStore& store, const std::string& prefix, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    create(store, prefix, rng);
    bind(store, prefix);
}

FlowHead::FlowHead(const HeadConfig& cfg, const nn::ParamStore& store, const std::string& prefix) : cfg_(cfg) {
    cfg_.validate();
    bind(store, prefix);
}

void FlowHead::create(nn::ParamStore& store, const std::string& prefix, Rng& rng) {
    const std::size_t w = cfg_.head_width;
    nn::Linear::create(store, prefix + "in", cfg_.d, w, rng);
    nn::Linear::create(store, prefix + "cond", cfg_.cond_width, w, rng);
    nn::Linear::create(store, prefix + "t.fc1", w, w, rng);
    nn::Linear::create(store, prefix + "t.fc2", w, w, rng);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
        const std::string b = prefix + "blocks." + std::to_string(i) + ".";
        nn::Linear::zeros(store, b + "mod", w, 6 * w);
        nn::Linear::create(store, b + "qkv", w, 3 * w, rng);
        nn::Linear::create(store, b + "proj", w, w, rng);
        nn::Mlp::create(store, b + "mlp", w, cfg_.mlp_ratio * w, rng);
    }
    nn::Linear::zeros(store, prefix + "final.mod", w, 2 * w);
    nn::Linear::zeros(store, prefix + "out", w, cfg_.d);
}

void FlowHead::bind(const nn::ParamStore& store, const std::string& prefix) {
    in_proj_ = bind_linear(store, prefix + "in");
    cond_proj_ = bind_linear(store, prefix + "cond");
    t_fc1_ = bind_linear(store, prefix + "t.fc1");
    t_fc2_ = bind_linear(store, prefix + "t.fc2");
    blocks_.clear();
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
        const std::string b = prefix + "blocks." + std::to_string(i) + ".";
        blocks_.push_back({bind_linear(store, b + "mod"), bind_linear(store, b + "qkv"), bind_linear(store, b + "proj"),
                           nn::Mlp{bind_linear(store, b + "mlp.fc1"), bind_linear(store, b + "mlp.fc2")}});
    }
    final_mod_ = bind_linear(store, prefix + "final.mod");
    out_proj_ = bind_linear(store, prefix + "out");
    if (in_proj_.in_features() != cfg_.d || cond_proj_.in_features() != cfg_.cond_width ||
        in_proj_.out_features() != cfg_.head_width) {
        throw CompatibilityError("flow head parameters do not match the head configuration");
    }
}

ad::Var FlowHead::predict(const ad::Var& x_t, std::span<const double> t, const ad::Var& z, std::size_t n) const {
    const std::size_t rows = x_t.rows();
    if (n == 0 || rows % n != 0) throw InvalidInput("flow head: row count not a multiple of n");
    const std::size_t groups = rows / n;
    if (x_t.cols() != cfg_.d) throw InvalidInput("flow head: x_t has wrong width");
    if (z.rows() != rows || z.cols() != cfg_.cond_width) throw InvalidInput("flow head: Z shape mismatch");
    if (t.size() != groups) throw InvalidInput("flow head: expected one t per group");
    const std::size_t w = cfg_.head_width;

    std::vector<std::uint32_t> group_of(rows);
    std::vector<ad::KeyRange> ranges(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t g = r / n;
        group_of[r] = static_cast<std::uint32_t>(g);
        ranges[r] = {static_cast<std::uint32_t>(g * n), static_cast<std::uint32_t>(g * n + n)};
    }

    ad::Var temb = t_fc2_(ad::silu(t_fc1_(ad::Var::constant(timestep_features(t, w)))));
    ad::Var c = ad::add(cond_proj_(z), ad::gather_rows(temb, group_of));
    ad::Var sc = ad::silu(c);

    ad::Var x = in_proj_(x_t);
    for (const auto& b : blocks_) {
        ad::Var mod = b.modulation(sc);
        ad::Var h = modulate(ad::layer_norm(x), ad::cols(mod, 0, w), ad::cols(mod, w, w));
        ad::Var qkv = b.qkv(h);
        ad::Var a = ad::attention(ad::cols(qkv, 0, w), ad::cols(qkv, w, w), ad::cols(qkv, 2 * w, w), cfg_.heads,
                                  ranges);
        x = ad::add(x, ad::mul(ad::cols(mod, 2 * w, w), b.proj(a)));
        h = modulate(ad::layer_norm(x), ad::cols(mod, 3 * w, w), ad::cols(mod, 4 * w, w));
        x = ad::add(x, ad::mul(ad::cols(mod, 5 * w, w), b.mlp(h)));
    }
    ad::Var fm = final_mod_(sc);
    return out_proj_(modulate(ad::layer_norm(x), ad::cols(fm, 0, w), ad::cols(fm, w, w)));
}

ad::Var velocity(const XPredictor& head, const ad::Var& x_t, std::span<const double> t, const ad::Var& z,
                 std::size_t n, double delta_clamp) {
    ad::Var f = head.predict(x_t, t, z, n);
    std::vector<double> inv(x_t.rows());
    for (std::size_t r = 0; r < inv.size(); ++r) inv[r] = 1.0 / std::max(1.0 - t[r / n], delta_clamp);
    return ad::scale_rows(ad::sub(f, x_t), inv);
}

FlowDraw draw_flow_noise(std::size_t groups, std::size_t n, std::size_t d, double delta_clamp, Rng& rng) {
    FlowDraw draw;
    draw.t.resize(groups);
    draw.eps = Matrix(groups * n, d);
    for (std::size_t g = 0; g < groups; ++g) {
        draw.t[g] = rng.uniform(0.0, 1.0 - delta_clamp);
        for (std::size_t i = 0; i < n * d; ++i) draw.eps[g * n * d + i] = rng.normal();
    }
    return draw;
}

ad::Var flow_loss(const XPredictor& head, const Matrix& targets, const ad::Var& z, std::size_t n,
                  const FlowDraw& draw, double delta_clamp, bool require_binary) {
    if (n == 0 || targets.rows() % n != 0) throw InvalidInput("flow_loss: target rows not a multiple of n");
    if (require_binary) {
        for (double v : targets.values())
            if (v != 1.0 && v != -1.0) throw InvalidInput("flow_loss: targets must be +-1");
    } else if (!targets.all_finite()) {
        throw InvalidInput("flow_loss: targets must be finite");
    }
    if (!draw.eps.same_shape(targets) || draw.t.size() * n != targets.rows()) {
        throw InvalidInput("flow_loss: noise draw does not match targets");
    }
    const std::size_t d = targets.cols();
    Matrix x_t(targets.rows(), d), v_t(targets.rows(), d);
    for (std::size_t r = 0; r < targets.rows(); ++r) {
        const double t = draw.t[r / n];
        for (std::size_t c = 0; c < d; ++c) {
            const double x = targets(r, c), e = draw.eps(r, c);
            x_t(r, c) = t * x + (1.0 - t) * e;
            v_t(r, c) = x - e;
        }
    }
    ad::Var v = velocity(head, ad::Var::constant(std::move(x_t)), draw.t, z, n, delta_clamp);
    return ad::mse(v, ad::Var::constant(std::move(v_t)));
}

ad::Var flow_loss(const XPredictor& head, const Matrix& targets, const ad::Var& z, std::size_t n, Rng& rng,
                  double delta_clamp, bool require_binary) {
    if (n == 0 || targets.rows() % n != 0) throw InvalidInput("flow_loss: target rows not a multiple of n");
    FlowDraw draw = draw_flow_noise(targets.rows() / n, n, targets.cols(), delta_clamp, rng);
    return flow_loss(head, targets, z, n, draw, delta_clamp, require_binary);
}

Matrix sample(const XPredictor& head, const Matrix& z, const Matrix& z_null, std::size_t n, std::size_t d,
              const SampleOptions& opt, Rng& rng) {
    if (opt.num_steps == 0) throw InvalidInput("sample: num_steps must be >= 1");
    if (n == 0 || z.rows() % n != 0) throw InvalidInput("sample: Z rows not a multiple of n");
    const bool guided = opt.cfg_scale > 0.0;
    if (guided && !z_null.same_shape(z)) throw InvalidInput("sample: Z_null must match Z when cfg_scale > 0");

    ad::NoGradGuard guard;
    const std::size_t rows = z.rows(), groups = rows / n;
    Matrix x = rng.normal_matrix(rows, d);
    Matrix z_both = z;
    if (guided) z_both.append_rows(z_null);
    const ad::Var zv = ad::Var::constant(z_both);
    const double steps = static_cast<double>(opt.num_steps);

    for (std::size_t k = 0; k < opt.num_steps; ++k) {
        const double t = static_cast<double>(k) / steps;
        Matrix v;
        if (guided) {
            Matrix xx = x;
            xx.append_rows(x);
            std::vector<double> ts(2 * groups, t);
            Matrix both = velocity(head, ad::Var::constant(std::move(xx)), ts, zv, n, opt.delta_clamp).value();
            v = both.slice_rows(0, rows);
            const Matrix vu = both.slice_rows(rows, rows);
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] + opt.cfg_scale * (v[i] - vu[i]);
        } else {
            std::vector<double> ts(groups, t);
            v = velocity(head, ad::Var::constant(x), ts, zv, n, opt.delta_clamp).value();
        }
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += v[i] / steps;
    }
    if (opt.binarize)
        for (double& e : x.values()) e = e >= 0.0 ? 1.0 : -1.0;
    return x;
}

std::vector<double> default_histogram_edges() {
    std::vector<double> edges(42);
    for (std::size_t i = 0; i < edges.size(); ++i) edges[i] = -2.05 + 0.1 * static_cast<double>(i);
    return edges;
}

Histogram make_histogram(std::span<const double> values, std::vector<double> edges, double t) {
    if (edges.size() < 2) throw InvalidInput("histogram needs at least one bin");
    Histogram h;
    h.t = t;
    h.counts.assign(edges.size() - 1, 0);
    std::size_t big = 0;
    for (double v : values) {
        const auto it = std::upper_bound(edges.begin(), edges.end(), v);
        std::size_t bin = it == edges.begin() ? 0 : static_cast<std::size_t>(it - edges.begin()) - 1;
        bin = std::min(bin, h.counts.size() - 1);
        ++h.counts[bin];
        big += std::abs(v) > 0.5;
    }
    h.total = values.size();
    h.frac_abs_gt_half = values.empty() ? 0.0 : static_cast<double>(big) / static_cast<double>(values.size());
    h.edges = std::move(edges);
    return h;
}

std::vector<Histogram> output_histogram(const XPredictor& head, const Matrix& targets, const Matrix& z, std::size_t n,
                                        std::span<const double> t_values, Rng& rng) {
    if (n == 0 || targets.rows() % n != 0 || z.rows() != targets.rows()) {
        throw InvalidInput("output_histogram: targets/Z shape mismatch");
    }
    ad::NoGradGuard guard;
    std::vector<Histogram> out;
    const ad::Var zv = ad::Var::constant(z);
    for (double t : t_values) {
        Matrix x_t = rng.normal_matrix(targets.rows(), targets.cols());
        for (std::size_t i = 0; i < x_t.size(); ++i) x_t[i] = t * targets[i] + (1.0 - t) * x_t[i];
        std::vector<double> ts(targets.rows() / n, t);
        Matrix f = head.predict(ad::Var::constant(std::move(x_t)), ts, zv, n).value();
        out.push_back(make_histogram(f.values(), default_histogram_edges(), t));
    }
    return out;
}

}  // namespace bitdance::flowhead
