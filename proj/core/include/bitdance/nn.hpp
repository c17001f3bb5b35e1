#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "bitdance/autodiff.hpp"
#include "bitdance/rng.hpp"

// Parameter bookkeeping, layers and optimization shared by every model.
namespace bitdance::nn {

// Named collection of trainable leaves. Modules keep Var handles to the
// entries, so overwriting values in place (checkpoint load, EMA swap) is
// visible to them immediately. Iteration order is insertion order.
class ParamStore {
public:
    ad::Var& add(const std::string& name, Matrix init);
    ad::Var& get(const std::string& name);
    const ad::Var& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<std::string>& names() const { return names_; }
    std::size_t tensor_count() const { return names_.size(); }
    // Total number of scalar parameters.
    std::size_t scalar_count() const;
    // Scalar count over names starting with `prefix`.
    std::size_t scalar_count(const std::string& prefix) const;

    void zero_grad();
    // Copies values for every name present in both stores; shapes must match.
    void copy_values_from(const ParamStore& other);
    std::map<std::string, Matrix> snapshot() const;
    void load_snapshot(const std::map<std::string, Matrix>& values, bool require_all = true);

private:
    std::vector<std::string> names_;
    std::vector<ad::Var> vars_;
    std::map<std::string, std::size_t> index_;
};

Matrix normal_init(std::size_t rows, std::size_t cols, double stddev, Rng& rng);
// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
Matrix xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

struct Linear {
    ad::Var weight;  // in x out
    ad::Var bias;    // 1 x out, may be undefined

    static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                         bool bias = true);
    static Linear zeros(ParamStore& store, const std::string& name, std::size_t in, std::size_t out);
    ad::Var operator()(const ad::Var& x) const { return ad::linear(x, weight, bias); }
    std::size_t in_features() const { return weight.rows(); }
    std::size_t out_features() const { return weight.cols(); }
};

// Two-layer perceptron with GELU.
struct Mlp {
    Linear fc1;
    Linear fc2;

    static Mlp create(ParamStore& store, const std::string& name, std::size_t width, std::size_t hidden, Rng& rng);
    ad::Var operator()(const ad::Var& x) const { return fc2(ad::gelu(fc1(x))); }
};

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 1.0;  // global L2 norm; <= 0 disables
    std::size_t warmup_steps = 0;
};

// Decoupled weight decay Adam. Decay applies to matrices only (not to
// vectors such as biases and single-row embeddings).
class AdamW {
public:
    AdamW(ParamStore& params, AdamWConfig cfg);

    // Applies one update from the accumulated gradients and returns the
    // pre-clipping global gradient norm. Throws TrainingDivergence on
    // non-finite gradients.
    double step();
    double current_lr() const;
    std::size_t step_count() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

    // Moment buffers keyed "adam.m.<param>" / "adam.v.<param>".
    std::map<std::string, Matrix> state() const;
    void load_state(const std::map<std::string, Matrix>& state, std::size_t step);

private:
    ParamStore* params_;
    AdamWConfig cfg_;
    std::size_t t_ = 0;
    std::map<std::string, Matrix> m_;
    std::map<std::string, Matrix> v_;
};

// Exponential moving average of parameters: e <- decay * e + (1 - decay) * theta.
class Ema {
public:
    Ema(const ParamStore& params, double decay);

    void update(const ParamStore& params);
    void copy_to(ParamStore& params) const;
    double decay() const { return decay_; }
    const std::map<std::string, Matrix>& values() const { return shadow_; }
    std::map<std::string, Matrix>& mutable_values() { return shadow_; }

private:
    double decay_;
    std::map<std::string, Matrix> shadow_;
};

}  // namespace bitdance::nn
