#include "dpopt/tensor.hpp"

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace dpopt::ad {

namespace {

thread_local int g_no_grad_depth = 0;
thread_local Tape* g_tape = nullptr;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<const Eigen::VectorXd>;

[[noreturn]] void fail(const char* op, const std::string& msg) {
    throw std::invalid_argument(std::string(op) + ": " + msg);
}

void check_defined(const char* op, const Tensor& t) {
    if (!t.defined()) fail(op, "undefined tensor operand");
}

bool is_live(const Tensor& t) {
    return g_tape != nullptr && t.node >= 0 && t.tape_epoch == g_tape->epoch();
}

bool participates(const Tensor& t) { return t.requires_grad || is_live(t); }

// Builds the result tensor and records the node when any input participates
// in the active graph.
Tensor make_result(Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs, Tape::BackwardFn backward) {
    Tensor out;
    out.shape = std::move(shape);
    out.data = std::make_shared<std::vector<double>>(std::move(values));
    if (g_tape != nullptr && g_no_grad_depth == 0) {
        bool any = false;
        for (const Tensor* t : inputs) any = any || participates(*t);
        if (any) {
            std::vector<int> parents;
            parents.reserve(inputs.size());
            for (const Tensor* t : inputs) {
                if (is_live(*t)) {
                    parents.push_back(t->node);
                } else if (t->requires_grad) {
                    parents.push_back(g_tape->leaf_id(*t));
                } else {
                    parents.push_back(-1);
                }
            }
            out.node = g_tape->record(std::move(parents), std::move(backward));
            out.tape_epoch = g_tape->epoch();
            out.requires_grad = true;
        }
    }
    return out;
}

std::vector<double> raw_add(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor added(const Tensor& a, const Tensor& b) {
    Tensor out;
    out.shape = a.shape;
    out.data = std::make_shared<std::vector<double>>(raw_add(*a.data, *b.data));
    return out;
}

Tensor plain(Shape shape, std::vector<double> values) {
    Tensor out;
    out.shape = std::move(shape);
    out.data = std::make_shared<std::vector<double>>(std::move(values));
    return out;
}

enum class BinKind { Add, Sub, Mul };

// Elementwise binary with scalar (numel==1) broadcast on either side.
Tensor binary(const char* name, BinKind kind, const Tensor& a, const Tensor& b) {
    check_defined(name, a);
    check_defined(name, b);
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!(a.shape == b.shape || a_scalar || b_scalar))
        fail(name, "shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));

    const Shape& out_shape = (a_scalar && !b_scalar) ? b.shape : a.shape;
    const std::int64_t n = numel_of(out_shape);
    const auto& av = *a.data;
    const auto& bv = *b.data;
    std::vector<double> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = av[a_scalar ? 0 : i];
        const double y = bv[b_scalar ? 0 : i];
        switch (kind) {
            case BinKind::Add: out[i] = x + y; break;
            case BinKind::Sub: out[i] = x - y; break;
            case BinKind::Mul: out[i] = x * y; break;
        }
    }

    Tensor ta = a, tb = b;
    return make_result(out_shape, std::move(out), {&a, &b},
                       [ta, tb, kind, a_scalar, b_scalar](const Tensor& g) {
                           const auto& gv = *g.data;
                           const std::int64_t n = g.numel();
                           std::vector<double> ga(ta.numel(), 0.0), gb(tb.numel(), 0.0);
                           for (std::int64_t i = 0; i < n; ++i) {
                               double da = 0.0, db = 0.0;
                               switch (kind) {
                                   case BinKind::Add: da = gv[i]; db = gv[i]; break;
                                   case BinKind::Sub: da = gv[i]; db = -gv[i]; break;
                                   case BinKind::Mul:
                                       da = gv[i] * (*tb.data)[b_scalar ? 0 : i];
                                       db = gv[i] * (*ta.data)[a_scalar ? 0 : i];
                                       break;
                               }
                               ga[a_scalar ? 0 : i] += da;
                               gb[b_scalar ? 0 : i] += db;
                           }
                           return std::vector<Tensor>{plain(ta.shape, std::move(ga)),
                                                      plain(tb.shape, std::move(gb))};
                       });
}

// Elementwise unary: forward value and pointwise derivative.
template <typename F, typename DF>
Tensor unary(const char* name, const Tensor& a, F f, DF df) {
    check_defined(name, a);
    const auto& av = *a.data;
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    Tensor ta = a;
    return make_result(a.shape, std::move(out), {&a}, [ta, df](const Tensor& g) {
        const auto& gv = *g.data;
        const auto& xv = *ta.data;
        std::vector<double> gx(xv.size());
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = gv[i] * df(xv[i]);
        return std::vector<Tensor>{plain(ta.shape, std::move(gx))};
    });
}

}  // namespace

std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t;
    const std::int64_t n = numel_of(shape);
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), value);
    t.requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({1}, value, requires_grad); }

Tensor Tensor::from_vector(Shape shape, std::vector<double> values, bool requires_grad) {
    if (numel_of(shape) != static_cast<std::int64_t>(values.size()))
        throw std::invalid_argument("from_vector: " + std::to_string(values.size()) +
                                    " values for shape " + shape_str(shape));
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<double>>(std::move(values));
    t.requires_grad = requires_grad;
    return t;
}

double Tensor::scalar_value() const {
    if (!defined() || numel() != 1) throw std::invalid_argument("scalar_value: tensor is not scalar");
    return (*data)[0];
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool NoGradGuard::active() { return g_no_grad_depth > 0; }

Tape::Tape() {
    if (g_tape != nullptr) throw std::logic_error("Tape: another tape is already active on this thread");
    static std::atomic<std::int64_t> counter{0};
    epoch_ = ++counter;
    g_tape = this;
}

Tape::~Tape() { g_tape = nullptr; }

Tape* Tape::current() { return g_tape; }

int Tape::record(std::vector<int> parents, BackwardFn backward) {
    nodes_.push_back(Node{std::move(parents), std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf_id(const Tensor& t) {
    const void* key = static_cast<const void*>(t.data.get());
    auto it = leaf_ids_.find(key);
    if (it != leaf_ids_.end()) return it->second;
    retained_.push_back(t.data);
    const int id = record({}, nullptr);
    leaf_ids_.emplace(key, id);
    return id;
}

int Tape::node_id_of(const Tensor& t) const {
    if (t.node >= 0 && t.tape_epoch == epoch_) return t.node;
    if (t.defined()) {
        auto it = leaf_ids_.find(static_cast<const void*>(t.data.get()));
        if (it != leaf_ids_.end()) return it->second;
    }
    return -1;
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be a defined scalar tensor");
    if (backward_done_) throw std::logic_error("backward: tape already consumed");
    backward_done_ = true;
    grads_.assign(nodes_.size(), Tensor{});
    const int root = node_id_of(loss);
    if (root < 0) return;  // loss is constant: every gradient is zero

    NoGradGuard ng;
    grads_[root] = Tensor::full(loss.shape, 1.0);
    for (int id = root; id >= 0; --id) {
        if (!grads_[id].defined()) continue;
        const Node& node = nodes_[id];
        if (node.parents.empty() || !node.backward) continue;
        std::vector<Tensor> pg = node.backward(grads_[id]);
        for (std::size_t i = 0; i < node.parents.size(); ++i) {
            const int p = node.parents[i];
            if (p < 0 || i >= pg.size() || !pg[i].defined()) continue;
            if (!grads_[p].defined()) {
                grads_[p] = pg[i];
            } else {
                grads_[p] = added(grads_[p], pg[i]);  // multi-consumer sum
            }
        }
    }
}

Tensor Tape::grad(const Tensor& t) const {
    const int id = node_id_of(t);
    if (id >= 0 && id < static_cast<int>(grads_.size()) && grads_[id].defined()) {
        Tensor g = grads_[id];
        g.shape = t.shape;  // leaf grads carry the leaf's own shape
        return g;
    }
    return Tensor::zeros(t.shape);
}

// --- ops ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinKind::Mul, a, b); }

Tensor scale(const Tensor& a, double c) {
    return unary("scale", a, [c](double x) { return c * x; }, [c](double) { return c; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined("matmul", a);
    check_defined("matmul", b);
    if (a.rank() > 2 || b.rank() > 2 || a.rank() == 0 || b.rank() == 0 ||
        (a.rank() == 1 && b.rank() == 1))
        fail("matmul", "unsupported ranks " + shape_str(a.shape) + " x " + shape_str(b.shape));

    const int m = a.rank() == 2 ? a.shape[0] : 1;
    const int k = a.rank() == 2 ? a.shape[1] : a.shape[0];
    const int k2 = b.rank() == 2 ? b.shape[0] : b.shape[0];
    const int n = b.rank() == 2 ? b.shape[1] : 1;
    if (k != k2)
        fail("matmul", "inner dimension mismatch " + shape_str(a.shape) + " x " + shape_str(b.shape));

    MatMap A(a.data->data(), m, k);
    MatMap B(b.data->data(), k, n);
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    Eigen::Map<RowMat>(out.data(), m, n) = A * B;

    Shape out_shape;
    if (a.rank() == 2 && b.rank() == 2) out_shape = {m, n};
    else if (a.rank() == 1) out_shape = {n};
    else out_shape = {m};

    Tensor ta = a, tb = b;
    return make_result(std::move(out_shape), std::move(out), {&a, &b},
                       [ta, tb, m, k, n](const Tensor& g) {
                           MatMap A(ta.data->data(), m, k);
                           MatMap B(tb.data->data(), k, n);
                           MatMap G(g.data->data(), m, n);
                           std::vector<double> ga(static_cast<std::size_t>(m) * k);
                           std::vector<double> gb(static_cast<std::size_t>(k) * n);
                           Eigen::Map<RowMat>(ga.data(), m, k) = G * B.transpose();
                           Eigen::Map<RowMat>(gb.data(), k, n) = A.transpose() * G;
                           return std::vector<Tensor>{plain(ta.shape, std::move(ga)),
                                                      plain(tb.shape, std::move(gb))};
                       });
}

Tensor sum(const Tensor& a) {
    check_defined("sum", a);
    double s = 0.0;
    for (double x : *a.data) s += x;
    Tensor ta = a;
    return make_result({1}, {s}, {&a}, [ta](const Tensor& g) {
        return std::vector<Tensor>{Tensor::full(ta.shape, g.at(0))};
    });
}

Tensor mean(const Tensor& a) {
    check_defined("mean", a);
    if (a.numel() == 0) fail("mean", "empty tensor");
    double s = 0.0;
    for (double x : *a.data) s += x;
    const double inv = 1.0 / static_cast<double>(a.numel());
    Tensor ta = a;
    return make_result({1}, {s * inv}, {&a}, [ta, inv](const Tensor& g) {
        return std::vector<Tensor>{Tensor::full(ta.shape, g.at(0) * inv)};
    });
}

Tensor pow(const Tensor& a, double exponent) {
    return unary("pow", a, [exponent](double x) { return std::pow(x, exponent); },
                 [exponent](double x) { return exponent * std::pow(x, exponent - 1.0); });
}

Tensor sqrt(const Tensor& a) {
    check_defined("sqrt", a);
    for (double x : *a.data)
        if (x < 0.0) fail("sqrt", "negative input " + std::to_string(x));
    return unary("sqrt", a, [](double x) { return std::sqrt(x); },
                 [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor arcsin(const Tensor& a) {
    check_defined("arcsin", a);
    for (double x : *a.data)
        if (x < -1.0 || x > 1.0) fail("arcsin", "input outside [-1, 1]: " + std::to_string(x));
    return unary("arcsin", a, [](double x) { return std::asin(x); },
                 [](double x) { return 1.0 / std::sqrt(1.0 - x * x); });
}

Tensor exp(const Tensor& a) {
    check_defined("exp", a);
    const auto& av = *a.data;
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
    std::vector<double> saved = out;
    Tensor ta = a;
    return make_result(a.shape, std::move(out), {&a}, [ta, saved](const Tensor& g) {
        const auto& gv = *g.data;
        std::vector<double> gx(saved.size());
        for (std::size_t i = 0; i < saved.size(); ++i) gx[i] = gv[i] * saved[i];
        return std::vector<Tensor>{plain(ta.shape, std::move(gx))};
    });
}

Tensor log(const Tensor& a) {
    check_defined("log", a);
    for (double x : *a.data)
        if (x <= 0.0) fail("log", "input outside (0, inf): " + std::to_string(x));
    return unary("log", a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Tensor softmax(const Tensor& a) {
    check_defined("softmax", a);
    if (a.rank() != 1 && a.rank() != 2) fail("softmax", "rank must be 1 or 2, got " + shape_str(a.shape));
    const int rows = a.rank() == 2 ? a.shape[0] : 1;
    const int cols = a.rank() == 2 ? a.shape[1] : a.shape[0];
    if (cols == 0) fail("softmax", "empty axis");
    const auto& av = *a.data;
    std::vector<double> out(av.size());
    for (int r = 0; r < rows; ++r) {
        const double* x = av.data() + static_cast<std::size_t>(r) * cols;
        double* y = out.data() + static_cast<std::size_t>(r) * cols;
        double mx = x[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            z += y[c];
        }
        for (int c = 0; c < cols; ++c) y[c] /= z;
    }
    std::vector<double> saved = out;
    Tensor ta = a;
    return make_result(a.shape, std::move(out), {&a}, [ta, saved, rows, cols](const Tensor& g) {
        const auto& gv = *g.data;
        std::vector<double> gx(saved.size());
        for (int r = 0; r < rows; ++r) {
            const double* y = saved.data() + static_cast<std::size_t>(r) * cols;
            const double* gr = gv.data() + static_cast<std::size_t>(r) * cols;
            double dot = 0.0;
            for (int c = 0; c < cols; ++c) dot += gr[c] * y[c];
            double* o = gx.data() + static_cast<std::size_t>(r) * cols;
            for (int c = 0; c < cols; ++c) o[c] = y[c] * (gr[c] - dot);
        }
        return std::vector<Tensor>{plain(ta.shape, std::move(gx))};
    });
}

Tensor silu(const Tensor& a) {
    return unary("silu", a,
                 [](double x) { return x / (1.0 + std::exp(-x)); },
                 [](double x) {
                     const double s = 1.0 / (1.0 + std::exp(-x));
                     return s * (1.0 + x * (1.0 - s));
                 });
}

Tensor l2_norm(const Tensor& a) {
    check_defined("l2_norm", a);
    double ss = 0.0;
    for (double x : *a.data) ss += x * x;
    const double n = std::sqrt(ss);
    Tensor ta = a;
    return make_result({1}, {n}, {&a}, [ta, n](const Tensor& g) {
        const auto& xv = *ta.data;
        std::vector<double> gx(xv.size(), 0.0);
        if (n > 0.0) {
            const double s = g.at(0) / n;
            for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = s * xv[i];
        }
        return std::vector<Tensor>{plain(ta.shape, std::move(gx))};
    });
}

Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) fail("concat", "no tensors");
    std::int64_t total = 0;
    for (const Tensor& p : parts) {
        check_defined("concat", p);
        if (p.rank() != 1) fail("concat", "rank-1 tensors required, got " + shape_str(p.shape));
        total += p.numel();
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total));
    for (const Tensor& p : parts) out.insert(out.end(), p.data->begin(), p.data->end());

    std::vector<const Tensor*> input_ptrs;
    std::vector<Tensor> saved_parts(parts.begin(), parts.end());
    std::vector<std::int64_t> sizes;
    for (const Tensor& p : parts) sizes.push_back(p.numel());

    // make_result takes an initializer_list; record manually for the variadic case.
    Tensor result;
    result.shape = {static_cast<int>(total)};
    result.data = std::make_shared<std::vector<double>>(std::move(out));
    if (g_tape != nullptr && g_no_grad_depth == 0) {
        bool any = false;
        for (const Tensor& p : parts) any = any || participates(p);
        if (any) {
            std::vector<int> ids;
            for (const Tensor& p : parts) {
                if (is_live(p)) ids.push_back(p.node);
                else if (p.requires_grad) ids.push_back(g_tape->leaf_id(p));
                else ids.push_back(-1);
            }
            result.node = g_tape->record(std::move(ids), [sizes, saved_parts](const Tensor& g) {
                std::vector<Tensor> gs;
                std::int64_t off = 0;
                for (std::size_t i = 0; i < sizes.size(); ++i) {
                    std::vector<double> part(g.data->begin() + off, g.data->begin() + off + sizes[i]);
                    gs.push_back(plain(saved_parts[i].shape, std::move(part)));
                    off += sizes[i];
                }
                return gs;
            });
            result.tape_epoch = g_tape->epoch();
            result.requires_grad = true;
        }
    }
    return result;
}

Tensor slice(const Tensor& a, std::int64_t start, std::int64_t len) {
    check_defined("slice", a);
    if (a.rank() == 0) fail("slice", "rank-0 tensor");
    const std::int64_t dim0 = a.shape[0];
    if (start < 0 || len < 0 || start + len > dim0)
        fail("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                          ") out of bounds for dim " + std::to_string(dim0));
    const std::int64_t row = a.numel() / std::max<std::int64_t>(dim0, 1);
    std::vector<double> out(a.data->begin() + start * row, a.data->begin() + (start + len) * row);
    Shape out_shape = a.shape;
    out_shape[0] = static_cast<int>(len);
    Tensor ta = a;
    return make_result(std::move(out_shape), std::move(out), {&a},
                       [ta, start, len, row](const Tensor& g) {
                           std::vector<double> gx(ta.numel(), 0.0);
                           for (std::int64_t i = 0; i < len * row; ++i)
                               gx[static_cast<std::size_t>(start * row + i)] = g.at(i);
                           return std::vector<Tensor>{plain(ta.shape, std::move(gx))};
                       });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
    check_defined("broadcast_to", a);
    if (static_cast<int>(shape.size()) < a.rank())
        fail("broadcast_to", "target rank below source rank");
    const int pad = static_cast<int>(shape.size()) - a.rank();
    for (int i = 0; i < a.rank(); ++i) {
        const int src = a.shape[i], dst = shape[pad + i];
        if (src != dst && src != 1)
            fail("broadcast_to", "cannot broadcast " + shape_str(a.shape) + " to " + shape_str(shape) +
                                     " (only leading-1 dimensions expand)");
    }
    const std::int64_t n = numel_of(shape);
    const int out_rank = static_cast<int>(shape.size());
    std::vector<double> out(static_cast<std::size_t>(n));
    // Row-major index mapping from target to source.
    std::vector<std::int64_t> src_stride(out_rank, 0);
    {
        std::int64_t s = 1;
        for (int i = a.rank() - 1; i >= 0; --i) {
            src_stride[pad + i] = (a.shape[i] == 1) ? 0 : s;
            s *= a.shape[i];
        }
    }
    std::vector<std::int64_t> dst_stride(out_rank, 1);
    for (int i = out_rank - 2; i >= 0; --i) dst_stride[i] = dst_stride[i + 1] * shape[i + 1];
    for (std::int64_t idx = 0; idx < n; ++idx) {
        std::int64_t rem = idx, src = 0;
        for (int d = 0; d < out_rank; ++d) {
            const std::int64_t c = rem / dst_stride[d];
            rem %= dst_stride[d];
            src += src_stride[d] * c;  // stride 0 on broadcast dims
        }
        out[static_cast<std::size_t>(idx)] = (*a.data)[static_cast<std::size_t>(src)];
    }
    Tensor ta = a;
    Shape target = shape;
    return make_result(target, std::move(out), {&a},
                       [ta, target, dst_stride, src_stride](const Tensor& g) {
                           std::vector<double> gx(ta.numel(), 0.0);
                           const std::int64_t n = g.numel();
                           const int out_rank = static_cast<int>(target.size());
                           for (std::int64_t idx = 0; idx < n; ++idx) {
                               std::int64_t rem = idx, src = 0;
                               for (int d = 0; d < out_rank; ++d) {
                                   const std::int64_t c = rem / dst_stride[d];
                                   rem %= dst_stride[d];
                                   if (src_stride[d]) src += src_stride[d] * c;
                               }
                               gx[static_cast<std::size_t>(src)] += g.at(idx);
                           }
                           return std::vector<Tensor>{plain(ta.shape, std::move(gx))};
                       });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    check_defined("reshape", a);
    if (numel_of(shape) != a.numel())
        fail("reshape", "element count mismatch " + shape_str(a.shape) + " -> " + shape_str(shape));
    Tensor ta = a;
    std::vector<double> out = *a.data;
    return make_result(shape, std::move(out), {&a}, [ta](const Tensor& g) {
        return std::vector<Tensor>{plain(ta.shape, *g.data)};
    });
}

Tensor clamp_min(const Tensor& a, double lo) {
    return unary("clamp_min", a, [lo](double x) { return x < lo ? lo : x; },
                 [lo](double x) { return x > lo ? 1.0 : 0.0; });
}

Tensor clamp_max(const Tensor& a, double hi) {
    return unary("clamp_max", a, [hi](double x) { return x > hi ? hi : x; },
                 [hi](double x) { return x < hi ? 1.0 : 0.0; });
}

Tensor detach(const Tensor& a) {
    check_defined("detach", a);
    Tensor t;
    t.shape = a.shape;
    t.data = a.data;
    return t;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& theta, double step) {
    if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
    if (Tape::current() != nullptr)
        throw std::logic_error("grad_check: must not run under an active tape");

    std::vector<double> analytic;
    {
        Tape tape;
        Tensor th = theta;
        th.requires_grad = true;
        th.node = -1;
        Tensor y = f(th);
        if (y.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
        tape.backward(y);
        analytic = tape.grad(th).values();
    }

    NoGradGuard ng;
    double max_rel = 0.0;
    for (std::size_t i = 0; i < theta.data->size(); ++i) {
        std::vector<double> vp = *theta.data, vm = *theta.data;
        vp[i] += step;
        vm[i] -= step;
        const double fp = f(Tensor::from_vector(theta.shape, std::move(vp))).scalar_value();
        const double fm = f(Tensor::from_vector(theta.shape, std::move(vm))).scalar_value();
        const double fd = (fp - fm) / (2.0 * step);
        const double rel = std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-12);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace dpopt::ad
