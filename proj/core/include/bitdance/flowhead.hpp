#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "bitdance/nn.hpp"
#include "bitdance/rng.hpp"

// Binary diffusion head: rectified flow with x-prediction, an Euler sampler
// with classifier-free guidance, and hard binarization onto {-1, 1}^d.
//
// Every call works on G independent groups of n rows each. Row g*n + i of
// x_t / Z / targets is position i of group g; rows attend only within their
// group, so batching groups never changes a group's result.
namespace bitdance::flowhead {

struct HeadConfig {
    std::size_t d = 16;
    std::size_t n = 1;            // tokens predicted jointly (p^2)
    std::size_t cond_width = 64;  // h, width of the conditioning rows
    std::size_t depth = 4;
    std::size_t head_width = 256;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t num_steps = 50;
    double cfg_scale = 0.0;
    double delta_clamp = 1e-3;

    void validate() const;
};

// Anything that maps (x_t, t, Z) to a clean-sample prediction.
class XPredictor {
public:
    virtual ~XPredictor() = default;
    // x_t: (G*n) x d, t: one time per group, z: (G*n) x h. Returns (G*n) x d.
    virtual ad::Var predict(const ad::Var& x_t, std::span<const double> t, const ad::Var& z, std::size_t n) const = 0;
};

// Sinusoidal features of t * 1000 (half sines, half cosines), one row per entry.
Matrix timestep_features(std::span<const double> t, std::size_t dim);

// DiT-style head: adaptive-norm blocks conditioned on (t embedding + per-row
// projection of Z), attention over the n rows of a group, zero-initialized
// output projection. No parameter depends on n.
class FlowHead : public XPredictor {
public:
    // Registers parameters in `store` under `prefix` (e.g. "flowhead.").
    FlowHead(const HeadConfig& cfg, nn::ParamStore& store, const std::string& prefix, Rng& rng);
    // Rebinds to parameters already present in `store` (same names, shapes).
    FlowHead(const HeadConfig& cfg, const nn::ParamStore& store, const std::string& prefix);

    ad::Var predict(const ad::Var& x_t, std::span<const double> t, const ad::Var& z, std::size_t n) const override;

    const HeadConfig& config() const { return cfg_; }

private:
    struct Block {
        nn::Linear modulation;  // c -> 6w: shift/scale/gate for attention and MLP
        nn::Linear qkv, proj;
        nn::Mlp mlp;
    };
    void bind(const nn::ParamStore& store, const std::string& prefix);
    void create(nn::ParamStore& store, const std::string& prefix, Rng& rng);

    HeadConfig cfg_;
    nn::Linear in_proj_, cond_proj_, t_fc1_, t_fc2_, final_mod_, out_proj_;
    std::vector<Block> blocks_;
};

// v = (f - x_t) / max(1 - t, delta) with t given per group.
ad::Var velocity(const XPredictor& head, const ad::Var& x_t, std::span<const double> t, const ad::Var& z,
                 std::size_t n, double delta_clamp);

// One draw of the flow-matching objective for every group.
struct FlowDraw {
    std::vector<double> t;  // per group
    Matrix eps;             // (G*n) x d
};

// Per group, in order: t ~ U[0, 1 - delta), then n*d standard normals.
FlowDraw draw_flow_noise(std::size_t groups, std::size_t n, std::size_t d, double delta_clamp, Rng& rng);

// Mean squared error between velocity(x_t) and x - eps, with
// x_t = t*x + (1-t)*eps. targets must be +-1 unless require_binary is false
// (continuous-target ablation).
ad::Var flow_loss(const XPredictor& head, const Matrix& targets, const ad::Var& z, std::size_t n,
                  const FlowDraw& draw, double delta_clamp, bool require_binary = true);
ad::Var flow_loss(const XPredictor& head, const Matrix& targets, const ad::Var& z, std::size_t n, Rng& rng,
                  double delta_clamp, bool require_binary = true);

struct SampleOptions {
    std::size_t num_steps = 50;
    double cfg_scale = 0.0;
    double delta_clamp = 1e-3;
    bool binarize = true;
};

// Euler integration from x0 ~ N(0, I) over num_steps uniform steps; guidance
// v = v_c + s (v_c - v_u) when s > 0; sign() once at the end when binarize.
// z_null may be empty when cfg_scale == 0.
Matrix sample(const XPredictor& head, const Matrix& z, const Matrix& z_null, std::size_t n, std::size_t d,
              const SampleOptions& opt, Rng& rng);

// Histogram of x-prediction outputs over fixed bins.
struct Histogram {
    double t = 0.0;
    std::vector<double> edges;  // bins + 1 entries
    std::vector<std::size_t> counts;
    std::size_t total = 0;
    double frac_abs_gt_half = 0.0;
};

// 41 bins of width 0.1 centred on -2.0 .. 2.0; outliers land in the end bins.
std::vector<double> default_histogram_edges();
Histogram make_histogram(std::span<const double> values, std::vector<double> edges, double t);

// For each t: x_t = t*targets + (1-t)*eps with fresh eps, then a histogram of
// every component of f(x_t, t, z).
std::vector<Histogram> output_histogram(const XPredictor& head, const Matrix& targets, const Matrix& z, std::size_t n,
                                        std::span<const double> t_values, Rng& rng);

}  // namespace bitdance::flowhead
