#include "bitdance/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "bitdance/error.hpp"

namespace bitdance::ad {

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.value().same_shape(b.value())) {
        throw InvalidInput(std::string(op) + ": shape mismatch");
    }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Matrix& Node::ensure_grad() {
    if (grad.empty() && !value.empty()) grad = Matrix(value.rows(), value.cols());
    return grad;
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
    if (node_) node_->grad = Matrix();
}

double Var::item() const {
    if (value().size() != 1) throw InvalidInput("Var::item: not a scalar");
    return value()[0];
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Matrix value, const std::vector<Var>& parents, std::function<void(Node&)> fn) {
    Var out(std::move(value), false);
    if (!g_grad_enabled) return out;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (const auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward = std::move(fn);
    return out;
}

Var make_result(Matrix value, std::initializer_list<Var> parents, std::function<void(Node&)> fn) {
    return make_result(std::move(value), std::vector<Var>(parents), std::move(fn));
}

void backward(const Var& loss) {
    if (loss.value().size() != 1) throw InvalidInput("backward: loss must be a scalar");
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS gives a topological order without deep recursion.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

namespace {

Matrix& pgrad(Node& n, std::size_t i) { return n.parents[i]->ensure_grad(); }
bool needs(Node& n, std::size_t i) { return n.parents[i]->requires_grad; }

}  // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    return make_result(a.value() + b.value(), {a, b}, [](Node& n) {
        if (needs(n, 0)) pgrad(n, 0) += n.grad;
        if (needs(n, 1)) pgrad(n, 1) += n.grad;
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    return make_result(a.value() - b.value(), {a, b}, [](Node& n) {
        if (needs(n, 0)) pgrad(n, 0) += n.grad;
        if (needs(n, 1)) pgrad(n, 1) -= n.grad;
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Matrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& n) {
        const Matrix& av = n.parents[0]->value;
        const Matrix& bv = n.parents[1]->value;
        if (needs(n, 0)) {
            Matrix& g = pgrad(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (needs(n, 1)) {
            Matrix& g = pgrad(n, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

Var scale(const Var& a, double s) {
    return make_result(a.value() * s, {a}, [s](Node& n) {
        Matrix& g = pgrad(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
    });
}

Var add_scalar(const Var& a, double s) {
    Matrix out = a.value();
    for (double& v : out.values()) v += s;
    return make_result(std::move(out), {a}, [](Node& n) { pgrad(n, 0) += n.grad; });
}

Var add_row(const Var& a, const Var& bias) {
    if (bias.rows() != 1 || bias.cols() != a.cols()) throw InvalidInput("add_row: bias shape mismatch");
    Matrix out = a.value();
    const std::size_t c = out.cols();
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j) out(r, j) += bias.value()[j];
    return make_result(std::move(out), {a, bias}, [](Node& n) {
        if (needs(n, 0)) pgrad(n, 0) += n.grad;
        if (needs(n, 1)) {
            Matrix& g = pgrad(n, 1);
            for (std::size_t r = 0; r < n.grad.rows(); ++r)
                for (std::size_t j = 0; j < n.grad.cols(); ++j) g[j] += n.grad(r, j);
        }
    });
}

Var scale_rows(const Var& a, std::span<const double> factors) {
    if (factors.size() != a.rows()) throw InvalidInput("scale_rows: factor count mismatch");
    Matrix out = a.value();
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (double& v : out.row(r)) v *= factors[r];
    std::vector<double> f(factors.begin(), factors.end());
    return make_result(std::move(out), {a}, [f = std::move(f)](Node& n) {
        Matrix& g = pgrad(n, 0);
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t j = 0; j < g.cols(); ++j) g(r, j) += f[r] * n.grad(r, j);
    });
}

Var matmul(const Var& a, const Var& b) {
    return make_result(bitdance::matmul(a.value(), b.value()), {a, b}, [](Node& n) {
        if (needs(n, 0)) pgrad(n, 0) += matmul_nt(n.grad, n.parents[1]->value);
        if (needs(n, 1)) matmul_tn_acc(n.parents[0]->value, n.grad, pgrad(n, 1));
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    Var y = matmul(x, w);
    return b.defined() ? add_row(y, b) : y;
}

namespace {

template <typename F, typename D>
Var unary(const Var& a, F f, D df) {
    Matrix out = a.value();
    for (double& v : out.values()) v = f(v);
    return make_result(std::move(out), {a}, [df](Node& n) {
        const Matrix& x = n.parents[0]->value;
        Matrix& g = pgrad(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * df(x[i]);
    });
}

}  // namespace

Var gelu(const Var& a) {
    return unary(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); },
        [](double x) {
            const double u = kGeluC * (x + 0.044715 * x * x * x);
            const double t = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        });
}

Var silu(const Var& a) {
    return unary(
        a, [](double x) { return x * sigmoid_scalar(x); },
        [](double x) {
            const double s = sigmoid_scalar(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

Var sigmoid(const Var& a) {
    return unary(a, sigmoid_scalar, [](double x) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 - s);
    });
}

Var tanh(const Var& a) {
    return unary(
        a, [](double x) { return std::tanh(x); },
        [](double x) {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        });
}

Var sign_ste(const Var& a) {
    Matrix out = a.value();
    for (double& v : out.values()) v = v >= 0.0 ? 1.0 : -1.0;
    return make_result(std::move(out), {a}, [](Node& n) { pgrad(n, 0) += n.grad; });
}

Var layer_norm(const Var& a, double eps) {
    const std::size_t rows = a.rows(), c = a.cols();
    Matrix out(rows, c);
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        auto x = a.value().row(r);
        double mu = 0.0;
        for (double v : x) mu += v;
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (double v : x) var += (v - mu) * (v - mu);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        auto y = out.row(r);
        for (std::size_t j = 0; j < c; ++j) y[j] = (x[j] - mu) * is;
    }
    Matrix normalized = out;
    return make_result(std::move(out), {a}, [inv_std = std::move(inv_std), y = std::move(normalized)](Node& n) {
        Matrix& g = pgrad(n, 0);
        const std::size_t c = g.cols();
        for (std::size_t r = 0; r < g.rows(); ++r) {
            auto gy = n.grad.row(r);
            auto yr = y.row(r);
            double mean_g = 0.0, mean_gy = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                mean_g += gy[j];
                mean_gy += gy[j] * yr[j];
            }
            mean_g /= static_cast<double>(c);
            mean_gy /= static_cast<double>(c);
            auto gx = g.row(r);
            for (std::size_t j = 0; j < c; ++j) gx[j] += inv_std[r] * (gy[j] - mean_g - yr[j] * mean_gy);
        }
    });
}

Var softmax_rows(const Var& a) {
    Matrix out = a.value();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto x = out.row(r);
        const double m = *std::max_element(x.begin(), x.end());
        double z = 0.0;
        for (double& v : x) {
            v = std::exp(v - m);
            z += v;
        }
        for (double& v : x) v /= z;
    }
    Matrix p = out;
    return make_result(std::move(out), {a}, [p = std::move(p)](Node& n) {
        Matrix& g = pgrad(n, 0);
        for (std::size_t r = 0; r < g.rows(); ++r) {
            auto pr = p.row(r);
            auto gy = n.grad.row(r);
            double dot = 0.0;
            for (std::size_t j = 0; j < pr.size(); ++j) dot += pr[j] * gy[j];
            auto gx = g.row(r);
            for (std::size_t j = 0; j < pr.size(); ++j) gx[j] += pr[j] * (gy[j] - dot);
        }
    });
}

Var entropy_rows(const Var& p) {
    Matrix out(p.rows(), 1);
    for (std::size_t r = 0; r < p.rows(); ++r) {
        double h = 0.0;
        for (double v : p.value().row(r))
            if (v > 0.0) h -= v * std::log(v);
        out(r, 0) = h;
    }
    return make_result(std::move(out), {p}, [](Node& n) {
        const Matrix& pv = n.parents[0]->value;
        Matrix& g = pgrad(n, 0);
        for (std::size_t r = 0; r < g.rows(); ++r) {
            const double gr = n.grad(r, 0);
            for (std::size_t j = 0; j < g.cols(); ++j) {
                const double v = std::max(pv(r, j), 1e-300);
                g(r, j) += -gr * (std::log(v) + 1.0);
            }
        }
    });
}

Var mean_rows(const Var& a) {
    const std::size_t rows = a.rows();
    if (rows == 0) throw InvalidInput("mean_rows: empty input");
    Matrix out(1, a.cols());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < a.cols(); ++j) out[j] += a.value()(r, j);
    out *= 1.0 / static_cast<double>(rows);
    return make_result(std::move(out), {a}, [](Node& n) {
        Matrix& g = pgrad(n, 0);
        const double inv = 1.0 / static_cast<double>(g.rows());
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t j = 0; j < g.cols(); ++j) g(r, j) += n.grad[j] * inv;
    });
}

Var cols(const Var& a, std::size_t begin, std::size_t count) {
    if (begin + count > a.cols()) throw InvalidInput("cols: out of range");
    Matrix out(a.rows(), count);
    for (std::size_t r = 0; r < a.rows(); ++r)
        std::copy_n(a.value().row(r).begin() + static_cast<std::ptrdiff_t>(begin), count, out.row(r).begin());
    return make_result(std::move(out), {a}, [begin](Node& n) {
        Matrix& g = pgrad(n, 0);
        for (std::size_t r = 0; r < n.grad.rows(); ++r)
            for (std::size_t j = 0; j < n.grad.cols(); ++j) g(r, begin + j) += n.grad(r, j);
    });
}

Var assemble_rows(const std::vector<Var>& sources, std::span<const RowRef> map) {
    if (sources.empty()) throw InvalidInput("assemble_rows: no sources");
    const std::size_t c = sources.front().cols();
    for (const auto& s : sources)
        if (s.cols() != c) throw InvalidInput("assemble_rows: column mismatch");
    Matrix out(map.size(), c);
    for (std::size_t r = 0; r < map.size(); ++r) {
        const auto& ref = map[r];
        if (ref.source >= sources.size() || ref.row >= sources[ref.source].rows())
            throw InvalidInput("assemble_rows: reference out of range");
        auto src = sources[ref.source].value().row(ref.row);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    std::vector<RowRef> m(map.begin(), map.end());
    return make_result(std::move(out), sources, [m = std::move(m)](Node& n) {
        for (std::size_t r = 0; r < m.size(); ++r) {
            if (!needs(n, m[r].source)) continue;
            auto dst = pgrad(n, m[r].source).row(m[r].row);
            auto gr = n.grad.row(r);
            for (std::size_t j = 0; j < gr.size(); ++j) dst[j] += gr[j];
        }
    });
}

Var gather_rows(const Var& a, std::span<const std::uint32_t> rows) {
    std::vector<RowRef> map;
    map.reserve(rows.size());
    for (auto r : rows) map.push_back({0, r});
    return assemble_rows({a}, map);
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, std::span<const KeyRange> ranges) {
    const std::size_t lq = q.rows(), lk = k.rows(), dim = q.cols();
    if (k.cols() != dim || v.cols() != dim || v.rows() != lk) throw InvalidInput("attention: q/k/v shape mismatch");
    if (heads == 0 || dim % heads != 0) throw InvalidInput("attention: width not divisible by heads");
    if (ranges.size() != lq) throw InvalidInput("attention: one key range per query row required");
    const std::size_t dh = dim / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    // Probabilities are kept per (row, head) for the backward pass.
    std::vector<std::size_t> offsets(lq + 1, 0);
    for (std::size_t i = 0; i < lq; ++i) {
        if (ranges[i].begin >= ranges[i].end || ranges[i].end > lk)
            throw InvalidInput("attention: empty or out-of-range key interval");
        offsets[i + 1] = offsets[i] + (ranges[i].end - ranges[i].begin) * heads;
    }
    std::vector<double> probs(offsets[lq]);
    Matrix out(lq, dim);
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    for (std::size_t i = 0; i < lq; ++i) {
        const std::size_t b = ranges[i].begin, e = ranges[i].end, w = e - b;
        for (std::size_t h = 0; h < heads; ++h) {
            double* p = probs.data() + offsets[i] + h * w;
            const double* qi = qv.data() + i * dim + h * dh;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = b; j < e; ++j) {
                const double* kj = kv.data() + j * dim + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                s *= sc;
                p[j - b] = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < w; ++j) {
                p[j] = std::exp(p[j] - mx);
                z += p[j];
            }
            double* oi = out.data() + i * dim + h * dh;
            for (std::size_t j = 0; j < w; ++j) {
                p[j] /= z;
                const double* vj = vv.data() + (b + j) * dim + h * dh;
                for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
            }
        }
    }

    std::vector<KeyRange> rg(ranges.begin(), ranges.end());
    return make_result(
        std::move(out), {q, k, v},
        [heads, dh, sc, rg = std::move(rg), offsets = std::move(offsets), probs = std::move(probs)](Node& n) {
            const Matrix& qv = n.parents[0]->value;
            const Matrix& kv = n.parents[1]->value;
            const Matrix& vv = n.parents[2]->value;
            const bool gq = needs(n, 0), gk = needs(n, 1), gv = needs(n, 2);
            Matrix* dq = gq ? &pgrad(n, 0) : nullptr;
            Matrix* dk = gk ? &pgrad(n, 1) : nullptr;
            Matrix* dv = gv ? &pgrad(n, 2) : nullptr;
            const std::size_t dim = heads * dh;
            std::vector<double> dp;
            for (std::size_t i = 0; i < rg.size(); ++i) {
                const std::size_t b = rg[i].begin, e = rg[i].end, w = e - b;
                dp.resize(w);
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* p = probs.data() + offsets[i] + h * w;
                    const double* go = n.grad.data() + i * dim + h * dh;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < w; ++j) {
                        const double* vj = vv.data() + (b + j) * dim + h * dh;
                        double s = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                        dp[j] = s;
                        dot += p[j] * s;
                        if (gv) {
                            double* dvj = dv->data() + (b + j) * dim + h * dh;
                            for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * go[c];
                        }
                    }
                    const double* qi = qv.data() + i * dim + h * dh;
                    for (std::size_t j = 0; j < w; ++j) {
                        const double ds = p[j] * (dp[j] - dot) * sc;
                        if (ds == 0.0) continue;
                        const double* kj = kv.data() + (b + j) * dim + h * dh;
                        if (gq) {
                            double* dqi = dq->data() + i * dim + h * dh;
                            for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                        }
                        if (gk) {
                            double* dkj = dk->data() + (b + j) * dim + h * dh;
                            for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        });
}

Var sum(const Var& a) {
    return make_result(Matrix(1, 1, bitdance::sum(a.value())), {a}, [](Node& n) {
        Matrix& g = pgrad(n, 0);
        const double gs = n.grad[0];
        for (double& v : g.values()) v += gs;
    });
}

Var mean(const Var& a) {
    if (a.value().size() == 0) throw InvalidInput("mean: empty input");
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var mse(const Var& a, const Var& b) {
    require_same_shape(a, b, "mse");
    const std::size_t count = a.value().size();
    if (count == 0) throw InvalidInput("mse: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double d = a.value()[i] - b.value()[i];
        s += d * d;
    }
    return make_result(Matrix(1, 1, s / static_cast<double>(count)), {a, b}, [count](Node& n) {
        const Matrix& av = n.parents[0]->value;
        const Matrix& bv = n.parents[1]->value;
        const double f = 2.0 * n.grad[0] / static_cast<double>(count);
        if (needs(n, 0)) {
            Matrix& g = pgrad(n, 0);
            for (std::size_t i = 0; i < count; ++i) g[i] += f * (av[i] - bv[i]);
        }
        if (needs(n, 1)) {
            Matrix& g = pgrad(n, 1);
            for (std::size_t i = 0; i < count; ++i) g[i] -= f * (av[i] - bv[i]);
        }
    });
}

Var bce_with_logits(const Var& logits, const Matrix& targets) {
    if (!logits.value().same_shape(targets)) throw InvalidInput("bce_with_logits: shape mismatch");
    const std::size_t count = targets.size();
    if (count == 0) throw InvalidInput("bce_with_logits: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double x = logits.value()[i], y = targets[i];
        // log(1 + exp(-|x|)) + max(x, 0) - x*y
        s += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    return make_result(Matrix(1, 1, s / static_cast<double>(count)), {logits}, [targets, count](Node& n) {
        const Matrix& x = n.parents[0]->value;
        Matrix& g = pgrad(n, 0);
        const double f = n.grad[0] / static_cast<double>(count);
        for (std::size_t i = 0; i < count; ++i) g[i] += f * (sigmoid_scalar(x[i]) - targets[i]);
    });
}

}  // namespace bitdance::ad
