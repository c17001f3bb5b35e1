#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "bitdance/matrix.hpp"

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// A Var is a handle to a node in a dynamically built graph. Operations record
// a backward closure only when grad mode is on and at least one input needs a
// gradient, so inference code pays for the forward arithmetic alone.
namespace bitdance::ad {

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Matrix& ensure_grad();
};

class Var {
public:
    Var() = default;
    explicit Var(Matrix value, bool requires_grad = false);

    static Var constant(Matrix value) { return Var(std::move(value), false); }
    static Var parameter(Matrix value) { return Var(std::move(value), true); }

    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    // Empty matrix until a backward pass reaches this node.
    const Matrix& grad() const { return node_->grad; }
    Matrix& mutable_grad() { return node_->ensure_grad(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }
    void zero_grad();

    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }
    double item() const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    friend Var make_result(Matrix, std::initializer_list<Var>, std::function<void(Node&)>);
    friend Var make_result(Matrix, const std::vector<Var>&, std::function<void(Node&)>);
    std::shared_ptr<Node> node_;
};

bool grad_enabled();

// Disables graph recording for its lifetime on the current thread.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Seeds d(loss)/d(loss) = 1 for a 1x1 loss and accumulates into every
// reachable node that requires a gradient.
void backward(const Var& loss);

// Contiguous key interval [begin, end) visible to one query row.
struct KeyRange {
    std::uint32_t begin = 0;
    std::uint32_t end = 0;
};

// Row of a source matrix for assemble_rows.
struct RowRef {
    std::uint32_t source = 0;
    std::uint32_t row = 0;
};

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// a (R x C) + bias (1 x C) broadcast over rows.
Var add_row(const Var& a, const Var& bias);
// Row r of a multiplied by factors[r].
Var scale_rows(const Var& a, std::span<const double> factors);
Var matmul(const Var& a, const Var& b);
// x * W + b, with b a 1 x out row (may be undefined for no bias).
Var linear(const Var& x, const Var& w, const Var& b);

Var gelu(const Var& a);
Var silu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
// Forward sign with the {0 -> +1} convention; backward is the identity.
Var sign_ste(const Var& a);

// Per-row standardization (no affine part).
Var layer_norm(const Var& a, double eps = 1e-6);
Var softmax_rows(const Var& a);
// R x 1 column of natural-log Shannon entropies of the rows of a stochastic matrix.
Var entropy_rows(const Var& p);
// 1 x C mean over rows.
Var mean_rows(const Var& a);

Var cols(const Var& a, std::size_t begin, std::size_t count);
Var assemble_rows(const std::vector<Var>& sources, std::span<const RowRef> map);
Var gather_rows(const Var& a, std::span<const std::uint32_t> rows);

// Multi-head scaled dot-product attention. Query row i (of q) sees key rows
// ranges[i].begin .. ranges[i].end-1 (of k and v). Column count of q/k/v must
// be divisible by heads.
Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, std::span<const KeyRange> ranges);

Var sum(const Var& a);
Var mean(const Var& a);
// mean((a - b)^2) over all elements.
Var mse(const Var& a, const Var& b);
// Mean binary cross-entropy of logits against targets in [0, 1].
Var bce_with_logits(const Var& logits, const Matrix& targets);

}  // namespace bitdance::ad
