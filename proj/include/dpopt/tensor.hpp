#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace dpopt::ad {

using Shape = std::vector<int>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense n-dimensional value, row-major, 64-bit floats. Copies share storage;
// storage is never mutated once a tensor is visible to an op, so sharing is
// safe. `node` ties the tensor to the tape that recorded it (see Tape).
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    bool requires_grad = false;
    int node = -1;
    std::int64_t tape_epoch = -1;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_vector(Shape shape, std::vector<double> values, bool requires_grad = false);

    bool defined() const { return data != nullptr; }
    std::int64_t numel() const { return numel_of(shape); }
    int rank() const { return static_cast<int>(shape.size()); }
    const std::vector<double>& values() const { return *data; }
    double at(std::int64_t i) const { return (*data)[static_cast<std::size_t>(i)]; }
    double scalar_value() const;  // requires numel() == 1
};

// Disables recording within a scope. Sampling loops and backward rules run
// under this guard.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
    static bool active();
};

// Append-only reverse-mode tape. One tape per optimization step; activates on
// construction (per-thread), records every op whose inputs participate in the
// graph, and is freed wholesale after backward().
class Tape {
public:
    using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();

    std::size_t size() const { return nodes_.size(); }
    std::int64_t epoch() const { return epoch_; }

    // Accumulates gradients for everything reachable from `loss`. The loss
    // must be scalar. May be called once per tape.
    void backward(const Tensor& loss);

    // Gradient of a leaf or intermediate after backward(); zeros if the
    // tensor was never reached.
    Tensor grad(const Tensor& t) const;

    // Counters, bumped by the toy denoiser / guidance helper when a call is
    // recorded on this tape.
    long denoiser_forwards = 0;      // per-branch grad-recorded denoiser calls
    long guided_denoiser_calls = 0;  // grad-recorded guidance pairs

    // --- recording interface (used by the op implementations) ---
    int record(std::vector<int> parents, BackwardFn backward);
    int leaf_id(const Tensor& t);
    int node_id_of(const Tensor& t) const;  // -1 if not on this tape

private:
    struct Node {
        std::vector<int> parents;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> leaf_ids_;
    std::vector<std::shared_ptr<std::vector<double>>> retained_;
    std::vector<Tensor> grads_;
    bool backward_done_ = false;
    std::int64_t epoch_ = 0;
};

// --- primitive ops -----------------------------------------------------
// Elementwise binaries accept equal shapes or one scalar (numel == 1)
// operand; richer broadcasting goes through broadcast_to explicitly.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);

// {m,k}x{k,n} -> {m,n};  {k}x{k,n} -> {n};  {m,k}x{k} -> {m}
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& a);   // -> {1}
Tensor mean(const Tensor& a);  // -> {1}
Tensor pow(const Tensor& a, double exponent);
Tensor sqrt(const Tensor& a);
Tensor arcsin(const Tensor& a);  // domain [-1, 1], hard error outside
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // domain (0, inf), hard error outside
Tensor softmax(const Tensor& a);  // last axis; rank 1 or 2
Tensor silu(const Tensor& a);     // x * sigmoid(x)
Tensor l2_norm(const Tensor& a);  // -> {1}
Tensor concat(std::span<const Tensor> parts);  // rank-1 tensors
Tensor slice(const Tensor& a, std::int64_t start, std::int64_t len);  // first axis
Tensor broadcast_to(const Tensor& a, const Shape& shape);  // prepend/expand leading 1-dims
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor clamp_min(const Tensor& a, double lo);
Tensor clamp_max(const Tensor& a, double hi);

// Value-equal tensor cut off from the graph.
Tensor detach(const Tensor& a);

// Max over coordinates of |analytic - central difference| / (|central
// difference| + 1e-12) for a scalar-valued function of theta. Opens its own
// tape; must not run under an active one.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& theta, double step);

}  // namespace dpopt::ad
