#include "bitdance/nn.hpp"

#include <algorithm>
#include <cmath>

#include "bitdance/error.hpp"

namespace bitdance::nn {

ad::Var& ParamStore::add(const std::string& name, Matrix init) {
    if (contains(name)) throw InvalidInput("ParamStore: duplicate parameter '" + name + "'");
    index_[name] = vars_.size();
    names_.push_back(name);
    vars_.push_back(ad::Var::parameter(std::move(init)));
    return vars_.back();
}

ad::Var& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidInput("ParamStore: unknown parameter '" + name + "'");
    return vars_[it->second];
}

const ad::Var& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidInput("ParamStore: unknown parameter '" + name + "'");
    return vars_[it->second];
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : vars_) n += v.value().size();
    return n;
}

std::size_t ParamStore::scalar_count(const std::string& prefix) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i].rfind(prefix, 0) == 0) n += vars_[i].value().size();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& v : vars_) v.zero_grad();
}

void ParamStore::copy_values_from(const ParamStore& other) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
        if (!other.contains(names_[i])) continue;
        const Matrix& src = other.get(names_[i]).value();
        if (!src.same_shape(vars_[i].value()))
            throw InvalidInput("ParamStore::copy_values_from: shape mismatch for '" + names_[i] + "'");
        vars_[i].mutable_value() = src;
    }
}

std::map<std::string, Matrix> ParamStore::snapshot() const {
    std::map<std::string, Matrix> out;
    for (std::size_t i = 0; i < names_.size(); ++i) out[names_[i]] = vars_[i].value();
    return out;
}

void ParamStore::load_snapshot(const std::map<std::string, Matrix>& values, bool require_all) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
        auto it = values.find(names_[i]);
        if (it == values.end()) {
            if (require_all) throw FormatError("missing parameter '" + names_[i] + "'");
            continue;
        }
        if (!it->second.same_shape(vars_[i].value()))
            throw CompatibilityError("parameter '" + names_[i] + "' has shape " + std::to_string(it->second.rows()) +
                                     "x" + std::to_string(it->second.cols()) + ", expected " +
                                     std::to_string(vars_[i].rows()) + "x" + std::to_string(vars_[i].cols()));
        vars_[i].mutable_value() = it->second;
    }
}

Matrix normal_init(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    return rng.normal_matrix(rows, cols, stddev);
}

Matrix xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix m(fan_in, fan_out);
    for (double& v : m.values()) v = rng.uniform(-a, a);
    return m;
}

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                      bool bias) {
    Linear l;
    l.weight = store.add(name + ".weight", xavier_uniform(in, out, rng));
    if (bias) l.bias = store.add(name + ".bias", Matrix(1, out));
    return l;
}

Linear Linear::zeros(ParamStore& store, const std::string& name, std::size_t in, std::size_t out) {
    Linear l;
    l.weight = store.add(name + ".weight", Matrix(in, out));
    l.bias = store.add(name + ".bias", Matrix(1, out));
    return l;
}

Mlp Mlp::create(ParamStore& store, const std::string& name, std::size_t width, std::size_t hidden, Rng& rng) {
    return {Linear::create(store, name + ".fc1", width, hidden, rng),
            Linear::create(store, name + ".fc2", hidden, width, rng)};
}

AdamW::AdamW(ParamStore& params, AdamWConfig cfg) : params_(&params), cfg_(cfg) {
    for (const auto& name : params.names()) {
        const Matrix& v = params.get(name).value();
        m_[name] = Matrix(v.rows(), v.cols());
        v_[name] = Matrix(v.rows(), v.cols());
    }
}

double AdamW::current_lr() const {
    if (cfg_.warmup_steps == 0) return cfg_.lr;
    const double frac = static_cast<double>(t_ + 1) / static_cast<double>(cfg_.warmup_steps);
    return cfg_.lr * std::min(1.0, frac);
}

double AdamW::step() {
    double norm_sq = 0.0;
    for (const auto& name : params_->names()) {
        const Matrix& g = params_->get(name).grad();
        norm_sq += frobenius_sq(g);
    }
    const double norm = std::sqrt(norm_sq);
    if (!std::isfinite(norm)) {
        throw TrainingDivergence("non-finite gradient norm at optimizer step " + std::to_string(t_));
    }
    const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
    const double lr = current_lr();
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& name : params_->names()) {
        ad::Var& p = params_->get(name);
        const Matrix& g = p.grad();
        Matrix& value = p.mutable_value();
        Matrix& m = m_.at(name);
        Matrix& v = v_.at(name);
        const bool decay = cfg_.weight_decay > 0.0 && value.rows() > 1 && value.cols() > 1;
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double gi = g.empty() ? 0.0 : g[i] * clip;
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            if (decay) value[i] -= lr * cfg_.weight_decay * value[i];
            value[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
    return norm;
}

std::map<std::string, Matrix> AdamW::state() const {
    std::map<std::string, Matrix> out;
    for (const auto& [name, m] : m_) out["adam.m." + name] = m;
    for (const auto& [name, v] : v_) out["adam.v." + name] = v;
    return out;
}

void AdamW::load_state(const std::map<std::string, Matrix>& state, std::size_t step) {
    for (auto& [name, m] : m_) {
        auto it = state.find("adam.m." + name);
        if (it == state.end() || !it->second.same_shape(m)) throw FormatError("optimizer state missing for " + name);
        m = it->second;
    }
    for (auto& [name, v] : v_) {
        auto it = state.find("adam.v." + name);
        if (it == state.end() || !it->second.same_shape(v)) throw FormatError("optimizer state missing for " + name);
        v = it->second;
    }
    t_ = step;
}

Ema::Ema(const ParamStore& params, double decay) : decay_(decay), shadow_(params.snapshot()) {
    if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("ema_decay must lie in [0, 1]");
}

void Ema::update(const ParamStore& params) {
    for (auto& [name, e] : shadow_) {
        const Matrix& theta = params.get(name).value();
        for (std::size_t i = 0; i < e.size(); ++i) e[i] = decay_ * e[i] + (1.0 - decay_) * theta[i];
    }
}

void Ema::copy_to(ParamStore& params) const { params.load_snapshot(shadow_, false); }

}  // namespace bitdance::nn
