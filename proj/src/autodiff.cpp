#include "ctg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ctg::autodiff {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return s.empty() ? 0 : n;
}

// ---------------------------------------------------------------- Tape

Tensor Tape::attach(Tensor t, bool requires_grad) {
    Node node;
    node.op = requires_grad ? "input" : "constant";
    node.shape = t.shape();
    node.values = t.values_;
    node.requires_grad = requires_grad;
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    if (requires_grad) {
        node.grad = std::make_shared<std::vector<double>>(t.size(), 0.0);
        t.grad_ = node.grad;
    }
    nodes_.push_back(std::move(node));
    return t;
}

Tensor Tape::input(Tensor t) { return attach(std::move(t), true); }

Tensor Tape::constant(Tensor t) { return attach(std::move(t), false); }

Tensor Tape::lift(const Tensor& t) {
    if (t.on_tape()) {
        if (t.tape() != this) {
            throw std::invalid_argument("Tape::lift: tensor belongs to another tape");
        }
        return t;
    }
    return constant(t.detached());
}

Tensor Tape::record(std::string op, const std::vector<Tensor>& inputs, Shape out_shape,
                    std::vector<double> out_values, BackwardFn backward) {
    Node node;
    node.op = std::move(op);
    node.shape = std::move(out_shape);
    node.parents.reserve(inputs.size());
    for (const auto& in : inputs) {
        if (!in.on_tape() || in.tape() != this) {
            throw std::invalid_argument("Tape::record(" + node.op +
                                        "): input not on this tape");
        }
        node.parents.push_back(in.node_id());
        node.requires_grad = node.requires_grad || nodes_[in.node_id()].requires_grad;
    }
    node.values = std::make_shared<std::vector<double>>(std::move(out_values));
    if (node.values->size() != shape_numel(node.shape)) {
        throw std::invalid_argument("Tape::record(" + node.op + "): value count " +
                                    std::to_string(node.values->size()) +
                                    " does not match shape " + shape_str(node.shape));
    }
    if (node.requires_grad) {
        node.grad = std::make_shared<std::vector<double>>(node.values->size(), 0.0);
        node.backward = std::move(backward);
    }

    Tensor out;
    out.shape_ = node.shape;
    out.values_ = node.values;
    out.grad_ = node.grad;
    out.tape_ = this;
    out.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
    return out;
}

void Tape::backward(const Tensor& root) {
    if (!root.on_tape() || root.tape() != this) {
        throw std::invalid_argument("Tape::backward: root not on this tape");
    }
    if (!root.is_scalar()) {
        throw std::invalid_argument("Tape::backward: root of shape " +
                                    shape_str(root.shape()) + " is not scalar");
    }

    // zero grads from any previous pass
    for (auto& node : nodes_) {
        if (node.grad) std::fill(node.grad->begin(), node.grad->end(), 0.0);
    }

    const int root_id = root.node_id();
    if (!nodes_[root_id].requires_grad) return;  // nothing reachable requires grad

    // mark nodes the root actually depends on; everything else keeps zeros
    std::vector<char> reachable(nodes_.size(), 0);
    std::vector<int> stack{root_id};
    reachable[root_id] = 1;
    while (!stack.empty()) {
        int id = stack.back();
        stack.pop_back();
        for (int p : nodes_[id].parents) {
            if (!reachable[p] && nodes_[p].requires_grad) {
                reachable[p] = 1;
                stack.push_back(p);
            }
        }
    }

    (*nodes_[root_id].grad)[0] = 1.0;

    for (int id = root_id; id >= 0; --id) {
        Node& node = nodes_[id];
        if (!reachable[id] || !node.backward) continue;
        BackwardCtx ctx;
        ctx.out_grad_ = std::span<const double>(*node.grad);
        ctx.out_values_ = std::span<const double>(*node.values);
        ctx.in_values_.reserve(node.parents.size());
        ctx.in_grads_.reserve(node.parents.size());
        for (int p : node.parents) {
            Node& parent = nodes_[p];
            ctx.in_values_.emplace_back(*parent.values);
            ctx.in_grads_.push_back(parent.requires_grad ? parent.grad->data() : nullptr);
        }
        node.backward(ctx);
    }
}

// ---------------------------------------------------------------- ops

namespace ops {

namespace {

Tape& tape_of(const char* op, std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts) {
        if (t->on_tape()) return *t->tape();
    }
    throw std::invalid_argument(std::string(op) + ": no input is on a tape");
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

// rows/cols view treating 1-D tensors as a single row
std::pair<std::size_t, std::size_t> as_rows(const Tensor& t) {
    if (t.shape().size() == 1) return {1, t.shape()[0]};
    if (t.shape().size() == 2) return {t.shape()[0], t.shape()[1]};
    throw std::invalid_argument("expected 1-D or 2-D tensor, got shape " +
                                shape_str(t.shape()));
}

void softmax_row(const double* x, double* out, std::size_t n) {
    double mx = x[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::exp(x[i] - mx);
        sum += out[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] /= sum;
}

}  // namespace

std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    Tape& tape = tape_of("add", {&a, &b});
    Tensor ta = tape.lift(a), tb = tape.lift(b);
    std::vector<double> out(ta.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta.values()[i] + tb.values()[i];
    return tape.record("add", {ta, tb}, ta.shape(), std::move(out),
                       [](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           for (std::size_t k = 0; k < 2; ++k) {
                               if (double* gi = ctx.in_grad(k)) {
                                   for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                               }
                           }
                       });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    Tape& tape = tape_of("sub", {&a, &b});
    Tensor ta = tape.lift(a), tb = tape.lift(b);
    std::vector<double> out(ta.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta.values()[i] - tb.values()[i];
    return tape.record("sub", {ta, tb}, ta.shape(), std::move(out),
                       [](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           if (double* ga = ctx.in_grad(0)) {
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (double* gb = ctx.in_grad(1)) {
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           }
                       });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    Tape& tape = tape_of("mul", {&a, &b});
    Tensor ta = tape.lift(a), tb = tape.lift(b);
    std::vector<double> out(ta.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta.values()[i] * tb.values()[i];
    return tape.record("mul", {ta, tb}, ta.shape(), std::move(out),
                       [](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           auto av = ctx.in_values(0);
                           auto bv = ctx.in_values(1);
                           if (double* ga = ctx.in_grad(0)) {
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                           }
                           if (double* gb = ctx.in_grad(1)) {
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                           }
                       });
}

Tensor scale(const Tensor& a, double c) {
    Tape& tape = tape_of("scale", {&a});
    Tensor ta = tape.lift(a);
    std::vector<double> out(ta.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * ta.values()[i];
    return tape.record("scale", {ta}, ta.shape(), std::move(out),
                       [c](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           if (double* ga = ctx.in_grad(0)) {
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
                           }
                       });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (!s.is_scalar()) {
        throw std::invalid_argument("scale_by: scale of shape " + shape_str(s.shape()) +
                                    " is not scalar");
    }
    Tape& tape = tape_of("scale_by", {&a, &s});
    Tensor ta = tape.lift(a), ts = tape.lift(s);
    const double c = ts.values()[0];
    std::vector<double> out(ta.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * ta.values()[i];
    return tape.record("scale_by", {ta, ts}, ta.shape(), std::move(out),
                       [](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           auto av = ctx.in_values(0);
                           const double c = ctx.in_values(1)[0];
                           if (double* ga = ctx.in_grad(0)) {
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
                           }
                           if (double* gs = ctx.in_grad(1)) {
                               double acc = 0.0;
                               for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
                               gs[0] += acc;
                           }
                       });
}

Tensor clamp_max(const Tensor& a, double cap) {
    Tape& tape = tape_of("clamp_max", {&a});
    Tensor ta = tape.lift(a);
    std::vector<double> out(ta.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(ta.values()[i], cap);
    return tape.record("clamp_max", {ta}, ta.shape(), std::move(out),
                       [cap](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           auto av = ctx.in_values(0);
                           if (double* ga = ctx.in_grad(0)) {
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   if (av[i] <= cap) ga[i] += g[i];
                               }
                           }
                       });
}

namespace {
constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kCubic = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
    Tape& tape = tape_of("gelu", {&a});
    Tensor ta = tape.lift(a);
    std::vector<double> out(ta.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = ta.values()[i];
        out[i] = 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kCubic * x * x * x)));
    }
    return tape.record("gelu", {ta}, ta.shape(), std::move(out),
                       [](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           auto av = ctx.in_values(0);
                           double* ga = ctx.in_grad(0);
                           if (!ga) return;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                               double x = av[i];
                               double inner = kSqrt2OverPi * (x + kCubic * x * x * x);
                               double t = std::tanh(inner);
                               double dinner = kSqrt2OverPi * (1.0 + 3.0 * kCubic * x * x);
                               double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
                               ga[i] += g[i] * d;
                           }
                       });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
    Tape& tape = tape_of("matmul", {&a, &b});
    Tensor ta = tape.lift(a), tb = tape.lift(b);
    const std::size_t m = ta.shape()[0], k = ta.shape()[1], n = tb.shape()[1];
    std::vector<double> out(m * n, 0.0);
    const auto& av = ta.values();
    const auto& bv = tb.values();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = &bv[p * n];
            double* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    return tape.record(
        "matmul", {ta, tb}, Shape{m, n}, std::move(out), [m, k, n](const BackwardCtx& ctx) {
            auto g = ctx.out_grad();
            auto av = ctx.in_values(0);
            auto bv = ctx.in_values(1);
            if (double* ga = ctx.in_grad(0)) {
                // gA += G * B^T
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* grow = &g[i * n];
                        const double* brow = &bv[p * n];
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + p] += acc;
                    }
                }
            }
            if (double* gb = ctx.in_grad(1)) {
                // gB += A^T * G
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = &g[i * n];
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = av[i * k + p];
                        if (aip == 0.0) continue;
                        double* brow = &gb[p * n];
                        for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
                    }
                }
            }
        });
}

Tensor transpose(const Tensor& a) {
    if (a.shape().size() != 2) {
        throw std::invalid_argument("transpose: expected 2-D tensor, got " +
                                    shape_str(a.shape()));
    }
    Tape& tape = tape_of("transpose", {&a});
    Tensor ta = tape.lift(a);
    const std::size_t m = ta.shape()[0], n = ta.shape()[1];
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ta.values()[i * n + j];
    }
    return tape.record("transpose", {ta}, Shape{n, m}, std::move(out),
                       [m, n](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           if (double* ga = ctx.in_grad(0)) {
                               for (std::size_t i = 0; i < m; ++i) {
                                   for (std::size_t j = 0; j < n; ++j) {
                                       ga[i * n + j] += g[j * m + i];
                                   }
                               }
                           }
                       });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
    Tape& tape = [&]() -> Tape& {
        for (const auto& p : parts) {
            if (p.on_tape()) return *p.tape();
        }
        throw std::invalid_argument("concat: no input is on a tape");
    }();
    std::vector<Tensor> lifted;
    lifted.reserve(parts.size());
    for (const auto& p : parts) lifted.push_back(tape.lift(p));

    std::vector<std::pair<std::size_t, std::size_t>> dims;  // rows, cols per part
    for (const auto& p : lifted) dims.push_back(as_rows(p));
    std::size_t rows = dims[0].first, cols = dims[0].second;
    for (std::size_t i = 1; i < dims.size(); ++i) {
        if (axis == 0) {
            if (dims[i].second != cols) {
                throw std::invalid_argument("concat: column mismatch " +
                                            shape_str(lifted[0].shape()) + " vs " +
                                            shape_str(lifted[i].shape()));
            }
            rows += dims[i].first;
        } else {
            if (dims[i].first != rows) {
                throw std::invalid_argument("concat: row mismatch " +
                                            shape_str(lifted[0].shape()) + " vs " +
                                            shape_str(lifted[i].shape()));
            }
            cols += dims[i].second;
        }
    }

    std::vector<double> out(rows * cols);
    if (axis == 0) {
        std::size_t r = 0;
        for (std::size_t i = 0; i < lifted.size(); ++i) {
            std::copy(lifted[i].values().begin(), lifted[i].values().end(),
                      out.begin() + static_cast<std::ptrdiff_t>(r * cols));
            r += dims[i].first;
        }
    } else {
        std::size_t c = 0;
        for (std::size_t i = 0; i < lifted.size(); ++i) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < dims[i].second; ++j) {
                    out[r * cols + c + j] = lifted[i].values()[r * dims[i].second + j];
                }
            }
            c += dims[i].second;
        }
    }
    return tape.record("concat", lifted, Shape{rows, cols}, std::move(out),
                       [axis, dims, rows, cols](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           std::size_t offset = 0;
                           for (std::size_t i = 0; i < ctx.num_inputs(); ++i) {
                               double* gi = ctx.in_grad(i);
                               if (axis == 0) {
                                   if (gi) {
                                       const std::size_t n = dims[i].first * cols;
                                       for (std::size_t t = 0; t < n; ++t) {
                                           gi[t] += g[offset * cols + t];
                                       }
                                   }
                                   offset += dims[i].first;
                               } else {
                                   if (gi) {
                                       for (std::size_t r = 0; r < rows; ++r) {
                                           for (std::size_t j = 0; j < dims[i].second; ++j) {
                                               gi[r * dims[i].second + j] +=
                                                   g[r * cols + offset + j];
                                           }
                                       }
                                   }
                                   offset += dims[i].second;
                               }
                           }
                       });
}

Tensor slice(const Tensor& a, int axis, std::size_t lo, std::size_t hi) {
    auto [rows, cols] = as_rows(a);
    const std::size_t limit = axis == 0 ? rows : cols;
    if (axis != 0 && axis != 1) throw std::invalid_argument("slice: axis must be 0 or 1");
    if (lo >= hi || hi > limit) {
        throw std::invalid_argument("slice: range [" + std::to_string(lo) + ", " +
                                    std::to_string(hi) + ") invalid for shape " +
                                    shape_str(a.shape()));
    }
    Tape& tape = tape_of("slice", {&a});
    Tensor ta = tape.lift(a);
    const std::size_t out_rows = axis == 0 ? hi - lo : rows;
    const std::size_t out_cols = axis == 0 ? cols : hi - lo;
    std::vector<double> out(out_rows * out_cols);
    for (std::size_t r = 0; r < out_rows; ++r) {
        for (std::size_t c = 0; c < out_cols; ++c) {
            std::size_t sr = axis == 0 ? r + lo : r;
            std::size_t sc = axis == 0 ? c : c + lo;
            out[r * out_cols + c] = ta.values()[sr * cols + sc];
        }
    }
    return tape.record("slice", {ta}, Shape{out_rows, out_cols}, std::move(out),
                       [axis, lo, cols, out_rows, out_cols](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           if (double* ga = ctx.in_grad(0)) {
                               for (std::size_t r = 0; r < out_rows; ++r) {
                                   for (std::size_t c = 0; c < out_cols; ++c) {
                                       std::size_t sr = axis == 0 ? r + lo : r;
                                       std::size_t sc = axis == 0 ? c : c + lo;
                                       ga[sr * cols + sc] += g[r * out_cols + c];
                                   }
                               }
                           }
                       });
}

Tensor softmax(const Tensor& a) {
    auto [rows, cols] = as_rows(a);
    Tape& tape = tape_of("softmax", {&a});
    Tensor ta = tape.lift(a);
    std::vector<double> out(ta.size());
    for (std::size_t r = 0; r < rows; ++r) {
        softmax_row(&ta.values()[r * cols], &out[r * cols], cols);
    }
    return tape.record("softmax", {ta}, ta.shape(), std::move(out),
                       [rows, cols](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           auto s = ctx.out_values();
                           if (double* ga = ctx.in_grad(0)) {
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const double* gr = &g[r * cols];
                                   const double* sr = &s[r * cols];
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * sr[j];
                                   for (std::size_t j = 0; j < cols; ++j) {
                                       ga[r * cols + j] += sr[j] * (gr[j] - dot);
                                   }
                               }
                           }
                       });
}

Tensor log_softmax(const Tensor& a) {
    auto [rows, cols] = as_rows(a);
    Tape& tape = tape_of("log_softmax", {&a});
    Tensor ta = tape.lift(a);
    std::vector<double> out(ta.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &ta.values()[r * cols];
        double mx = x[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) sum += std::exp(x[j] - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = x[j] - lse;
    }
    return tape.record("log_softmax", {ta}, ta.shape(), std::move(out),
                       [rows, cols](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           auto lp = ctx.out_values();
                           if (double* ga = ctx.in_grad(0)) {
                               for (std::size_t r = 0; r < rows; ++r) {
                                   double gsum = 0.0;
                                   for (std::size_t j = 0; j < cols; ++j) gsum += g[r * cols + j];
                                   for (std::size_t j = 0; j < cols; ++j) {
                                       ga[r * cols + j] +=
                                           g[r * cols + j] - std::exp(lp[r * cols + j]) * gsum;
                                   }
                               }
                           }
                       });
}

Tensor causal_softmax(const Tensor& a) {
    if (a.shape().size() != 2 || a.shape()[0] != a.shape()[1]) {
        throw std::invalid_argument("causal_softmax: expected square matrix, got " +
                                    shape_str(a.shape()));
    }
    Tape& tape = tape_of("causal_softmax", {&a});
    Tensor ta = tape.lift(a);
    const std::size_t n = ta.shape()[0];
    std::vector<double> out(n * n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        softmax_row(&ta.values()[r * n], &out[r * n], r + 1);
    }
    return tape.record("causal_softmax", {ta}, ta.shape(), std::move(out),
                       [n](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           auto s = ctx.out_values();
                           if (double* ga = ctx.in_grad(0)) {
                               for (std::size_t r = 0; r < n; ++r) {
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j <= r; ++j) {
                                       dot += g[r * n + j] * s[r * n + j];
                                   }
                                   for (std::size_t j = 0; j <= r; ++j) {
                                       ga[r * n + j] += s[r * n + j] * (g[r * n + j] - dot);
                                   }
                               }
                           }
                       });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    auto [rows, cols] = as_rows(x);
    if (gamma.size() != cols || beta.size() != cols) {
        throw std::invalid_argument("layer_norm: gamma " + shape_str(gamma.shape()) +
                                    " / beta " + shape_str(beta.shape()) +
                                    " do not match feature width of " + shape_str(x.shape()));
    }
    Tape& tape = tape_of("layer_norm", {&x, &gamma, &beta});
    Tensor tx = tape.lift(x), tg = tape.lift(gamma), tb = tape.lift(beta);
    std::vector<double> out(tx.size());
    std::vector<double> inv_std(rows);
    std::vector<double> mean(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = &tx.values()[r * cols];
        double mu = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        inv_std[r] = is;
        for (std::size_t j = 0; j < cols; ++j) {
            out[r * cols + j] = (xr[j] - mu) * is * tg.values()[j] + tb.values()[j];
        }
    }
    return tape.record(
        "layer_norm", {tx, tg, tb}, tx.shape(), std::move(out),
        [rows, cols, mean, inv_std](const BackwardCtx& ctx) {
            auto g = ctx.out_grad();
            auto xv = ctx.in_values(0);
            auto gv = ctx.in_values(1);
            double* gx = ctx.in_grad(0);
            double* gg = ctx.in_grad(1);
            double* gb = ctx.in_grad(2);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = &xv[r * cols];
                const double* gr = &g[r * cols];
                const double is = inv_std[r];
                const double mu = mean[r];
                double sum_gh = 0.0, sum_ghx = 0.0;
                for (std::size_t j = 0; j < cols; ++j) {
                    const double xhat = (xr[j] - mu) * is;
                    const double gh = gr[j] * gv[j];  // grad wrt xhat
                    sum_gh += gh;
                    sum_ghx += gh * xhat;
                    if (gg) gg[j] += gr[j] * xhat;
                    if (gb) gb[j] += gr[j];
                }
                if (gx) {
                    const double inv_n = 1.0 / static_cast<double>(cols);
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double xhat = (xr[j] - mu) * is;
                        const double gh = gr[j] * gv[j];
                        gx[r * cols + j] +=
                            is * (gh - inv_n * sum_gh - xhat * inv_n * sum_ghx);
                    }
                }
            }
        });
}

Tensor row_max(const Tensor& a) {
    auto [rows, cols] = as_rows(a);
    Tape& tape = tape_of("row_max", {&a});
    Tensor ta = tape.lift(a);
    std::vector<double> out(rows);
    std::vector<std::size_t> arg(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        std::span<const double> row(&ta.values()[r * cols], cols);
        arg[r] = argmax(row);
        out[r] = row[arg[r]];
    }
    return tape.record("row_max", {ta}, Shape{rows, 1}, std::move(out),
                       [cols, arg](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           if (double* ga = ctx.in_grad(0)) {
                               for (std::size_t r = 0; r < g.size(); ++r) {
                                   ga[r * cols + arg[r]] += g[r];
                               }
                           }
                       });
}

Tensor mean_rows(const Tensor& a) {
    auto [rows, cols] = as_rows(a);
    Tape& tape = tape_of("mean_rows", {&a});
    Tensor ta = tape.lift(a);
    std::vector<double> out(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) out[j] += ta.values()[r * cols + j];
    }
    for (double& v : out) v /= static_cast<double>(rows);
    return tape.record("mean_rows", {ta}, Shape{1, cols}, std::move(out),
                       [rows, cols](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           if (double* ga = ctx.in_grad(0)) {
                               const double inv = 1.0 / static_cast<double>(rows);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t j = 0; j < cols; ++j) {
                                       ga[r * cols + j] += g[j] * inv;
                                   }
                               }
                           }
                       });
}

Tensor sum_all(const Tensor& a) {
    Tape& tape = tape_of("sum_all", {&a});
    Tensor ta = tape.lift(a);
    double total = 0.0;
    for (double v : ta.values()) total += v;
    return tape.record("sum_all", {ta}, Shape{1}, {total}, [](const BackwardCtx& ctx) {
        const double g = ctx.out_grad()[0];
        if (double* ga = ctx.in_grad(0)) {
            for (std::size_t i = 0; i < ctx.in_values(0).size(); ++i) ga[i] += g;
        }
    });
}

Tensor mean_all(const Tensor& a) {
    Tape& tape = tape_of("mean_all", {&a});
    Tensor ta = tape.lift(a);
    double total = 0.0;
    for (double v : ta.values()) total += v;
    const double n = static_cast<double>(ta.size());
    return tape.record("mean_all", {ta}, Shape{1}, {total / n}, [n](const BackwardCtx& ctx) {
        const double g = ctx.out_grad()[0] / n;
        if (double* ga = ctx.in_grad(0)) {
            for (std::size_t i = 0; i < ctx.in_values(0).size(); ++i) ga[i] += g;
        }
    });
}

Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2) {
        throw std::invalid_argument("embed_rows: table must be 2-D, got " +
                                    shape_str(table.shape()));
    }
    const std::size_t rows = table.shape()[0], cols = table.shape()[1];
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= rows) {
            throw std::invalid_argument("embed_rows: index " + std::to_string(id) +
                                        " out of range for table " + shape_str(table.shape()));
        }
    }
    Tape& tape = tape_of("embed_rows", {&table});
    Tensor tt = tape.lift(table);
    std::vector<double> out(ids.size() * cols);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        const double* src = &tt.values()[static_cast<std::size_t>(ids[t]) * cols];
        std::copy(src, src + cols, out.begin() + static_cast<std::ptrdiff_t>(t * cols));
    }
    return tape.record("embed_rows", {tt}, Shape{ids.size(), cols}, std::move(out),
                       [ids, cols](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           if (double* gt = ctx.in_grad(0)) {
                               for (std::size_t t = 0; t < ids.size(); ++t) {
                                   double* dst = &gt[static_cast<std::size_t>(ids[t]) * cols];
                                   for (std::size_t j = 0; j < cols; ++j) {
                                       dst[j] += g[t * cols + j];
                                   }
                               }
                           }
                       });
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets) {
    auto [rows, cols] = as_rows(logits);
    if (targets.size() != rows) {
        throw std::invalid_argument("cross_entropy_mean: " + std::to_string(targets.size()) +
                                    " targets for logits " + shape_str(logits.shape()));
    }
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= cols) {
            throw std::invalid_argument("cross_entropy_mean: target " + std::to_string(t) +
                                        " out of range for logits " +
                                        shape_str(logits.shape()));
        }
    }
    Tape& tape = tape_of("cross_entropy_mean", {&logits});
    Tensor tl = tape.lift(logits);
    std::vector<double> probs(tl.size());
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        softmax_row(&tl.values()[r * cols], &probs[r * cols], cols);
        loss -= std::log(std::max(probs[r * cols + static_cast<std::size_t>(targets[r])],
                                  1e-300));
    }
    loss /= static_cast<double>(rows);
    return tape.record("cross_entropy_mean", {tl}, Shape{1}, {loss},
                       [rows, cols, targets, probs](const BackwardCtx& ctx) {
                           const double g = ctx.out_grad()[0] / static_cast<double>(rows);
                           if (double* gl = ctx.in_grad(0)) {
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t j = 0; j < cols; ++j) {
                                       double p = probs[r * cols + j];
                                       double y = (static_cast<std::size_t>(targets[r]) == j)
                                                      ? 1.0
                                                      : 0.0;
                                       gl[r * cols + j] += g * (p - y);
                                   }
                               }
                           }
                       });
}

Tensor ste_one_hot(const Tensor& logits) {
    auto [rows, cols] = as_rows(logits);
    if (rows != 1) {
        throw std::invalid_argument("ste_one_hot: expected a single logit vector, got " +
                                    shape_str(logits.shape()));
    }
    for (double v : logits.values()) {
        if (std::isnan(v)) throw std::invalid_argument("ste_one_hot: NaN in logits");
    }
    Tape& tape = tape_of("ste_one_hot", {&logits});
    Tensor tl = tape.lift(logits);
    std::vector<double> out(cols, 0.0);
    out[argmax(std::span<const double>(tl.values()))] = 1.0;
    return tape.record("ste_one_hot", {tl}, tl.shape(), std::move(out),
                       [](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           if (double* ga = ctx.in_grad(0)) {
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                       });
}

Tensor repetition_penalty(const Tensor& logits, const std::vector<char>& mask,
                          double penalty) {
    if (penalty < 1.0) {
        throw std::invalid_argument("repetition_penalty: penalty " +
                                    std::to_string(penalty) + " must be >= 1");
    }
    if (mask.size() != logits.size()) {
        throw std::invalid_argument("repetition_penalty: mask size " +
                                    std::to_string(mask.size()) + " vs logits " +
                                    shape_str(logits.shape()));
    }
    Tape& tape = tape_of("repetition_penalty", {&logits});
    Tensor tl = tape.lift(logits);
    std::vector<double> out(tl.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = tl.values()[i];
        out[i] = mask[i] ? (x > 0.0 ? x / penalty : x * penalty) : x;
    }
    return tape.record("repetition_penalty", {tl}, tl.shape(), std::move(out),
                       [mask, penalty](const BackwardCtx& ctx) {
                           auto g = ctx.out_grad();
                           auto xv = ctx.in_values(0);
                           if (double* ga = ctx.in_grad(0)) {
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   double f = mask[i] ? (xv[i] > 0.0 ? 1.0 / penalty : penalty)
                                                      : 1.0;
                                   ga[i] += g[i] * f;
                               }
                           }
                       });
}

}  // namespace ops

}  // namespace ctg::autodiff
