#pragma once

#include <cstring>
#include <map>
#include <optional>
#include <type_traits>

#include "e3va/core.hpp"

namespace e3va {

enum class NodeKind { Parameter, Constant, Intermediate };

// Ownership tags, assigned while the model graph is recorded. The profiler's
// structural claims are stated over these.
enum class Tag { Backbone, Adapter, Neck, Head };

inline const char* tag_name(Tag t) {
    switch (t) {
        case Tag::Backbone: return "backbone";
        case Tag::Adapter: return "adapter";
        case Tag::Neck: return "neck";
        case Tag::Head: return "head";
    }
    return "?";
}

enum class Op {
    Leaf,
    Matmul,
    Add,
    Scale,
    Gelu,
    Softmax,
    LayerNorm,
    Reshape,
    Transpose,
    WindowPartition,
    WindowMerge,
    Concat,
    Slice,
    Mean,
    CrossEntropy,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Matmul: return "matmul";
        case Op::Add: return "add";
        case Op::Scale: return "scale";
        case Op::Gelu: return "gelu";
        case Op::Softmax: return "softmax";
        case Op::LayerNorm: return "layernorm";
        case Op::Reshape: return "reshape";
        case Op::Transpose: return "transpose";
        case Op::WindowPartition: return "window_partition";
        case Op::WindowMerge: return "window_merge";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::Mean: return "mean";
        case Op::CrossEntropy: return "cross_entropy";
    }
    return "?";
}

// Per-primitive attributes; only the fields a primitive reads are meaningful.
struct Attrs {
    double scalar = 0.0;          // scale
    int axis = -1;                // softmax, layernorm, concat, slice
    double eps = 1e-5;            // layernorm
    int window = 0;               // window_partition
    int64_t start = 0, len = 0;   // slice
    std::vector<int> perm;        // transpose
    Shape target;                 // reshape
    std::vector<int> labels;      // cross_entropy
};

// Lightweight handle into a tape.
struct Tensor {
    int id = -1;
    bool valid() const { return id >= 0; }
    friend bool operator==(Tensor a, Tensor b) { return a.id == b.id; }
    friend bool operator!=(Tensor a, Tensor b) { return a.id != b.id; }
};

struct TapeStats {
    int64_t n_nodes = 0;
    int64_t n_grad_nodes = 0;
    int64_t grad_bytes_total = 0;
    int64_t activation_bytes_total = 0;
    int64_t n_backbone_grad_nodes = 0;
    friend bool operator==(const TapeStats& a, const TapeStats& b) {
        return a.n_nodes == b.n_nodes && a.n_grad_nodes == b.n_grad_nodes &&
               a.grad_bytes_total == b.grad_bytes_total &&
               a.activation_bytes_total == b.activation_bytes_total &&
               a.n_backbone_grad_nodes == b.n_backbone_grad_nodes;
    }
};

template <class Real>
struct GradMap {
    // parameter node id -> gradient, same shape as the parameter
    std::map<int, std::vector<Real>> by_param;
    bool contains(Tensor t) const { return by_param.count(t.id) > 0; }
    const std::vector<Real>& at(Tensor t) const { return by_param.at(t.id); }
    size_t size() const { return by_param.size(); }
};

// Recorded computation graph. Values are computed eagerly on apply; backward
// walks the tape in reverse and allocates gradient buffers only inside the
// trainable closure, recording exact byte counts per node.
template <class Real>
class Tape {
    static_assert(std::is_floating_point_v<Real>);

public:
    struct Node {
        Op op = Op::Leaf;
        NodeKind kind = NodeKind::Intermediate;
        Tag tag = Tag::Neck;
        bool trainable = false;
        bool requires_grad = false;  // some trainable parameter is an ancestor
        bool needs_grad = false;     // requires_grad && on a path to the loss
        Shape shape;
        std::vector<Real> value;
        std::vector<Real> grad;  // allocated during backward, needs_grad only
        int64_t grad_bytes = 0;
        int64_t saved_bytes = 0;  // bytes backward will read for this node
        std::vector<int> inputs;
        std::vector<std::vector<Real>> saved;  // values not already on the tape
        Attrs attrs;
    };

    // ---- leaves ----

    Tensor tensor_new(const Shape& shape, std::vector<Real> data, NodeKind kind,
                      bool trainable) {
        if (int64_t(data.size()) != numel(shape))
            throw Error("tensor_new: data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
        if (kind == NodeKind::Constant && trainable)
            throw Error("tensor_new: constants cannot be trainable");
        Node n;
        n.op = Op::Leaf;
        n.kind = kind;
        n.tag = tag_;
        n.trainable = kind == NodeKind::Parameter && trainable;
        n.requires_grad = n.trainable;
        n.shape = shape;
        n.value = std::move(data);
        nodes_.push_back(std::move(n));
        return Tensor{int(nodes_.size()) - 1};
    }

    Tensor param(const Shape& shape, std::vector<Real> data, bool trainable) {
        return tensor_new(shape, std::move(data), NodeKind::Parameter, trainable);
    }

    Tensor constant(const Shape& shape, std::vector<Real> data) {
        return tensor_new(shape, std::move(data), NodeKind::Constant, false);
    }

    Tensor scalar_constant(Real v) { return constant({1}, {v}); }

    // ---- primitives ----

    Tensor matmul(Tensor a, Tensor b) {
        const Node& A = at(a);
        const Node& B = at(b);
        if (A.shape.size() < 2 || B.shape.size() < 2)
            throw ShapeError("matmul", "operands must have rank >= 2, got " +
                                           shape_str(A.shape) + " x " + shape_str(B.shape));
        int64_t M = A.shape[A.shape.size() - 2], K = A.shape.back();
        int64_t Kb = B.shape[B.shape.size() - 2], N = B.shape.back();
        Shape abatch(A.shape.begin(), A.shape.end() - 2);
        Shape bbatch(B.shape.begin(), B.shape.end() - 2);
        if (K != Kb || (!abatch.empty() && !bbatch.empty() && abatch != bbatch))
            throw ShapeError("matmul", "incompatible shapes " + shape_str(A.shape) +
                                           " x " + shape_str(B.shape));
        Shape batch = abatch.empty() ? bbatch : abatch;
        int64_t nb = numel(batch);
        Shape out_shape = batch;
        out_shape.push_back(M);
        out_shape.push_back(N);

        std::vector<Real> out(numel(out_shape), Real(0));
        const Real* pa = A.value.data();
        const Real* pb = B.value.data();
        bool a_bcast = abatch.empty() && !bbatch.empty();
        bool b_bcast = bbatch.empty() && !abatch.empty();
        for (int64_t l = 0; l < nb; ++l) {
            const Real* ai = pa + (a_bcast ? 0 : l * M * K);
            const Real* bi = pb + (b_bcast ? 0 : l * K * N);
            mm_acc(ai, bi, out.data() + l * M * N, M, K, N);
        }

        Node n = op_node(Op::Matmul, {a.id, b.id}, std::move(out_shape), std::move(out));
        if (n.requires_grad) {
            // backward needs B to form dA and A to form dB
            if (at(a).requires_grad) n.saved_bytes += bytes(B.value);
            if (at(b).requires_grad) n.saved_bytes += bytes(A.value);
        }
        return push(std::move(n));
    }

    // b may be a trailing-shape broadcast of a (e.g. bias add)
    Tensor add(Tensor a, Tensor b) {
        const Node& A = at(a);
        const Node& B = at(b);
        if (!suffix_of(B.shape, A.shape))
            throw ShapeError("add", "shape " + shape_str(B.shape) +
                                        " is not a trailing broadcast of " +
                                        shape_str(A.shape));
        std::vector<Real> out = A.value;
        int64_t nb = numel(B.shape);
        int64_t lead = numel(A.shape) / nb;
        const Real* pb = B.value.data();
        for (int64_t l = 0; l < lead; ++l) {
            Real* po = out.data() + l * nb;
            for (int64_t i = 0; i < nb; ++i) po[i] += pb[i];
        }
        return push(op_node(Op::Add, {a.id, b.id}, A.shape, std::move(out)));
    }

    Tensor scale(Tensor a, double c) {
        const Node& A = at(a);
        std::vector<Real> out = A.value;
        for (auto& v : out) v *= Real(c);
        Node n = op_node(Op::Scale, {a.id}, A.shape, std::move(out));
        n.attrs.scalar = c;
        return push(std::move(n));
    }

    Tensor gelu(Tensor a) {
        const Node& A = at(a);
        std::vector<Real> out(A.value.size());
        for (size_t i = 0; i < out.size(); ++i) {
            Real x = A.value[i];
            out[i] = Real(0.5) * x * (Real(1) + Real(std::erf(double(x) * M_SQRT1_2)));
        }
        Node n = op_node(Op::Gelu, {a.id}, A.shape, std::move(out));
        if (n.requires_grad) n.saved_bytes += bytes(A.value);
        return push(std::move(n));
    }

    Tensor softmax(Tensor a, int axis) {
        const Node& A = at(a);
        int r = int(A.shape.size());
        if (axis < 0) axis += r;
        if (axis < 0 || axis >= r)
            throw ShapeError("softmax", "axis out of range for " + shape_str(A.shape));
        int64_t n = A.shape[axis];
        int64_t inner = 1;
        for (int i = axis + 1; i < r; ++i) inner *= A.shape[i];
        int64_t outer = numel(A.shape) / (n * inner);
        std::vector<Real> out(A.value.size());
        const Real* px = A.value.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                int64_t base = o * n * inner + in;
                Real mx = px[base];
                for (int64_t i = 1; i < n; ++i) mx = std::max(mx, px[base + i * inner]);
                Real sum = 0;
                for (int64_t i = 0; i < n; ++i) {
                    Real e = std::exp(px[base + i * inner] - mx);
                    out[base + i * inner] = e;
                    sum += e;
                }
                for (int64_t i = 0; i < n; ++i) out[base + i * inner] /= sum;
            }
        Node nd = op_node(Op::Softmax, {a.id}, A.shape, std::move(out));
        nd.attrs.axis = axis;
        if (nd.requires_grad) nd.saved_bytes += bytes(nd.value);  // reads own output
        return push(std::move(nd));
    }

    // Last-axis layer norm with affine weight and bias.
    Tensor layernorm(Tensor x, Tensor weight, Tensor bias, double eps = 1e-5) {
        const Node& X = at(x);
        const Node& W = at(weight);
        const Node& B = at(bias);
        if (X.shape.empty())
            throw ShapeError("layernorm", "input must have rank >= 1");
        int64_t n = X.shape.back();
        if (W.shape != Shape{n} || B.shape != Shape{n})
            throw ShapeError("layernorm", "weight/bias must be [" + std::to_string(n) +
                                              "], got " + shape_str(W.shape) + " / " +
                                              shape_str(B.shape));
        int64_t rows = numel(X.shape) / n;
        std::vector<Real> out(X.value.size());
        std::vector<Real> xhat(X.value.size());
        std::vector<Real> rstd(rows);
        const Real* px = X.value.data();
        const Real* pw = W.value.data();
        const Real* pb = B.value.data();
        for (int64_t r = 0; r < rows; ++r) {
            const Real* row = px + r * n;
            Real mu = 0;
            for (int64_t i = 0; i < n; ++i) mu += row[i];
            mu /= Real(n);
            Real var = 0;
            for (int64_t i = 0; i < n; ++i) {
                Real d = row[i] - mu;
                var += d * d;
            }
            var /= Real(n);
            Real rs = Real(1) / std::sqrt(var + Real(eps));
            rstd[r] = rs;
            for (int64_t i = 0; i < n; ++i) {
                Real xh = (row[i] - mu) * rs;
                xhat[r * n + i] = xh;
                out[r * n + i] = xh * pw[i] + pb[i];
            }
        }
        Node nd = op_node(Op::LayerNorm, {x.id, weight.id, bias.id}, X.shape,
                          std::move(out));
        nd.attrs.eps = eps;
        nd.attrs.axis = int(X.shape.size()) - 1;
        if (nd.requires_grad) {
            nd.saved_bytes += bytes(xhat) + bytes(rstd);
            nd.saved.push_back(std::move(xhat));
            nd.saved.push_back(std::move(rstd));
        }
        return push(std::move(nd));
    }

    Tensor reshape(Tensor a, const Shape& target) {
        const Node& A = at(a);
        if (numel(target) != numel(A.shape))
            throw ShapeError("reshape", shape_str(A.shape) + " -> " + shape_str(target) +
                                            " changes element count");
        Node n = op_node(Op::Reshape, {a.id}, target, A.value);
        n.attrs.target = target;
        return push(std::move(n));
    }

    Tensor transpose(Tensor a, const std::vector<int>& perm) {
        const Node& A = at(a);
        int r = int(A.shape.size());
        if (int(perm.size()) != r)
            throw ShapeError("transpose", "perm rank mismatch for " + shape_str(A.shape));
        Shape out_shape(r);
        for (int i = 0; i < r; ++i) out_shape[i] = A.shape[perm[i]];
        std::vector<Real> out(A.value.size());
        permute_copy(A.value.data(), out.data(), A.shape, perm);
        Node n = op_node(Op::Transpose, {a.id}, std::move(out_shape), std::move(out));
        n.attrs.perm = perm;
        return push(std::move(n));
    }

    // [..., T, C] -> [..., nW, w*w, C] grouping the sqrt(T) x sqrt(T) token grid
    // into w x w windows.
    Tensor window_partition(Tensor a, int window) {
        const Node& A = at(a);
        if (A.shape.size() < 2)
            throw ShapeError("window_partition", "rank >= 2 required");
        int64_t T = A.shape[A.shape.size() - 2];
        int64_t C = A.shape.back();
        int64_t g = isqrt_exact(T, "window_partition");
        if (window < 1 || g % window != 0)
            throw ShapeError("window_partition",
                             "grid side " + std::to_string(g) + " not divisible by window " +
                                 std::to_string(window));
        int64_t w = window, gw = g / w, nW = gw * gw;
        Shape out_shape(A.shape.begin(), A.shape.end() - 2);
        out_shape.push_back(nW);
        out_shape.push_back(w * w);
        out_shape.push_back(C);
        int64_t lead = numel(A.shape) / (T * C);
        std::vector<Real> out(A.value.size());
        const Real* pi = A.value.data();
        for (int64_t l = 0; l < lead; ++l)
            for (int64_t t = 0; t < T; ++t) {
                int64_t gy = t / g, gx = t % g;
                int64_t widx = (gy / w) * gw + gx / w;
                int64_t inner = (gy % w) * w + gx % w;
                std::memcpy(out.data() + ((l * nW + widx) * w * w + inner) * C,
                            pi + (l * T + t) * C, sizeof(Real) * C);
            }
        Node n = op_node(Op::WindowPartition, {a.id}, std::move(out_shape),
                         std::move(out));
        n.attrs.window = window;
        return push(std::move(n));
    }

    // inverse of window_partition: [..., nW, w*w, C] -> [..., T, C]
    Tensor window_merge(Tensor a) {
        const Node& A = at(a);
        if (A.shape.size() < 3)
            throw ShapeError("window_merge", "rank >= 3 required");
        int64_t nW = A.shape[A.shape.size() - 3];
        int64_t W2 = A.shape[A.shape.size() - 2];
        int64_t C = A.shape.back();
        int64_t w = isqrt_exact(W2, "window_merge");
        int64_t T = nW * W2;
        int64_t g = isqrt_exact(T, "window_merge");
        int64_t gw = g / w;
        Shape out_shape(A.shape.begin(), A.shape.end() - 3);
        out_shape.push_back(T);
        out_shape.push_back(C);
        int64_t lead = numel(A.shape) / (T * C);
        std::vector<Real> out(A.value.size());
        const Real* pi = A.value.data();
        for (int64_t l = 0; l < lead; ++l)
            for (int64_t t = 0; t < T; ++t) {
                int64_t gy = t / g, gx = t % g;
                int64_t widx = (gy / w) * gw + gx / w;
                int64_t inner = (gy % w) * w + gx % w;
                std::memcpy(out.data() + (l * T + t) * C,
                            pi + ((l * nW + widx) * W2 + inner) * C, sizeof(Real) * C);
            }
        Node n = op_node(Op::WindowMerge, {a.id}, std::move(out_shape), std::move(out));
        n.attrs.window = int(w);
        return push(std::move(n));
    }

    Tensor concat(const std::vector<Tensor>& parts, int axis) {
        if (parts.empty()) throw ShapeError("concat", "needs at least one input");
        const Node& A0 = at(parts[0]);
        int r = int(A0.shape.size());
        if (axis < 0) axis += r;
        if (axis < 0 || axis >= r) throw ShapeError("concat", "axis out of range");
        Shape out_shape = A0.shape;
        out_shape[axis] = 0;
        for (Tensor p : parts) {
            const Node& P = at(p);
            if (int(P.shape.size()) != r)
                throw ShapeError("concat", "rank mismatch");
            for (int i = 0; i < r; ++i)
                if (i != axis && P.shape[i] != A0.shape[i])
                    throw ShapeError("concat", "shape mismatch at dim " + std::to_string(i) +
                                                   ": " + shape_str(P.shape) + " vs " +
                                                   shape_str(A0.shape));
            out_shape[axis] += P.shape[axis];
        }
        int64_t inner = 1;
        for (int i = axis + 1; i < r; ++i) inner *= A0.shape[i];
        int64_t outer = 1;
        for (int i = 0; i < axis; ++i) outer *= A0.shape[i];
        std::vector<Real> out(numel(out_shape));
        int64_t row_out = out_shape[axis] * inner;
        int64_t off = 0;
        std::vector<int> ids;
        for (Tensor p : parts) {
            const Node& P = at(p);
            int64_t row_in = P.shape[axis] * inner;
            for (int64_t o = 0; o < outer; ++o)
                std::memcpy(out.data() + o * row_out + off, P.value.data() + o * row_in,
                            sizeof(Real) * row_in);
            off += row_in;
            ids.push_back(p.id);
        }
        Node n = op_node(Op::Concat, ids, std::move(out_shape), std::move(out));
        n.attrs.axis = axis;
        return push(std::move(n));
    }

    Tensor slice(Tensor a, int axis, int64_t start, int64_t len) {
        const Node& A = at(a);
        int r = int(A.shape.size());
        if (axis < 0) axis += r;
        if (axis < 0 || axis >= r) throw ShapeError("slice", "axis out of range");
        if (start < 0 || len <= 0 || start + len > A.shape[axis])
            throw ShapeError("slice", "range [" + std::to_string(start) + "," +
                                          std::to_string(start + len) + ") invalid for " +
                                          shape_str(A.shape));
        Shape out_shape = A.shape;
        out_shape[axis] = len;
        int64_t inner = 1;
        for (int i = axis + 1; i < r; ++i) inner *= A.shape[i];
        int64_t outer = 1;
        for (int i = 0; i < axis; ++i) outer *= A.shape[i];
        std::vector<Real> out(numel(out_shape));
        int64_t row_in = A.shape[axis] * inner, row_out = len * inner;
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + o * row_out, A.value.data() + o * row_in + start * inner,
                        sizeof(Real) * row_out);
        Node n = op_node(Op::Slice, {a.id}, std::move(out_shape), std::move(out));
        n.attrs.axis = axis;
        n.attrs.start = start;
        n.attrs.len = len;
        return push(std::move(n));
    }

    Tensor mean(Tensor a) {
        const Node& A = at(a);
        Real s = 0;
        for (Real v : A.value) s += v;
        s /= Real(A.value.size());
        return push(op_node(Op::Mean, {a.id}, Shape{1}, std::vector<Real>{s}));
    }

    // Mean cross entropy over rows of [..., C] against integer labels.
    Tensor cross_entropy(Tensor logits, std::vector<int> labels) {
        const Node& A = at(logits);
        if (A.shape.size() < 2)
            throw ShapeError("cross_entropy", "logits must have rank >= 2");
        int64_t C = A.shape.back();
        int64_t rows = numel(A.shape) / C;
        if (int64_t(labels.size()) != rows)
            throw ShapeError("cross_entropy", std::to_string(labels.size()) +
                                                  " labels for " + std::to_string(rows) +
                                                  " rows");
        std::vector<Real> probs(A.value.size());
        const Real* px = A.value.data();
        Real loss = 0;
        for (int64_t r = 0; r < rows; ++r) {
            int lab = labels[r];
            if (lab < 0 || lab >= C)
                throw Error("cross_entropy: label " + std::to_string(lab) +
                            " out of range [0," + std::to_string(C) + ")");
            const Real* row = px + r * C;
            Real mx = row[0];
            for (int64_t i = 1; i < C; ++i) mx = std::max(mx, row[i]);
            Real sum = 0;
            for (int64_t i = 0; i < C; ++i) sum += std::exp(row[i] - mx);
            Real lse = mx + std::log(sum);
            for (int64_t i = 0; i < C; ++i) probs[r * C + i] = std::exp(row[i] - lse);
            loss += lse - row[lab];
        }
        loss /= Real(rows);
        Node n = op_node(Op::CrossEntropy, {logits.id}, Shape{1},
                         std::vector<Real>{loss});
        n.attrs.labels = std::move(labels);
        if (n.requires_grad) {
            n.saved_bytes += bytes(probs);
            n.saved.push_back(std::move(probs));
        }
        return push(std::move(n));
    }

    // Generic dispatcher matching the one-primitive-at-a-time surface.
    Tensor apply_primitive(Op kind, const std::vector<Tensor>& inputs, const Attrs& attrs) {
        auto need = [&](size_t k) {
            if (inputs.size() != k)
                throw ShapeError(op_name(kind), "expected " + std::to_string(k) +
                                                    " inputs, got " +
                                                    std::to_string(inputs.size()));
        };
        switch (kind) {
            case Op::Matmul: need(2); return matmul(inputs[0], inputs[1]);
            case Op::Add: need(2); return add(inputs[0], inputs[1]);
            case Op::Scale: need(1); return scale(inputs[0], attrs.scalar);
            case Op::Gelu: need(1); return gelu(inputs[0]);
            case Op::Softmax: need(1); return softmax(inputs[0], attrs.axis);
            case Op::LayerNorm:
                need(3);
                return layernorm(inputs[0], inputs[1], inputs[2], attrs.eps);
            case Op::Reshape: need(1); return reshape(inputs[0], attrs.target);
            case Op::Transpose: need(1); return transpose(inputs[0], attrs.perm);
            case Op::WindowPartition:
                need(1);
                return window_partition(inputs[0], attrs.window);
            case Op::WindowMerge: need(1); return window_merge(inputs[0]);
            case Op::Concat: return concat(inputs, attrs.axis);
            case Op::Slice:
                need(1);
                return slice(inputs[0], attrs.axis, attrs.start, attrs.len);
            case Op::Mean: need(1); return mean(inputs[0]);
            case Op::CrossEntropy: need(1); return cross_entropy(inputs[0], attrs.labels);
            case Op::Leaf: break;
        }
        throw Error("apply_primitive: not a primitive");
    }

    // ---- closure + backward ----

    // needs_grad(n) := n lies on a directed path from a trainable parameter to
    // the loss. requires_grad already tracks the forward half; intersect with
    // backward reachability from the loss.
    void mark_closure(Tensor loss) {
        const Node& L = at(loss);
        if (numel(L.shape) != 1)
            throw Error("mark_closure: loss must be scalar, got " + shape_str(L.shape));
        std::vector<char> reach(nodes_.size(), 0);
        std::vector<int> stack{loss.id};
        reach[loss.id] = 1;
        while (!stack.empty()) {
            int i = stack.back();
            stack.pop_back();
            for (int in : nodes_[i].inputs)
                if (!reach[in]) {
                    reach[in] = 1;
                    stack.push_back(in);
                }
        }
        for (size_t i = 0; i < nodes_.size(); ++i)
            nodes_[i].needs_grad = reach[i] && nodes_[i].requires_grad;
        closure_loss_ = loss.id;
        backward_done_ = false;
    }

    GradMap<Real> backward(Tensor loss) {
        if (closure_loss_ != loss.id)
            throw Error("backward: mark_closure has not run for this loss");
        if (backward_done_) throw Error("backward: already run for this tape");
        if (!std::isfinite(double(at(loss).value[0])))
            throw NonFiniteError(loss.id, "loss value");
        backward_done_ = true;
        if (nodes_[loss.id].needs_grad) {
            ensure_grad(loss.id)[0] = Real(1);
            for (int i = loss.id; i >= 0; --i) {
                Node& n = nodes_[i];
                if (!n.needs_grad || n.grad.empty()) continue;
                for (Real g : n.grad)
                    if (!std::isfinite(double(g))) throw NonFiniteError(i, "gradient");
                vjp(i);
            }
        }
        GradMap<Real> gm;
        for (size_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            if (n.op == Op::Leaf && n.trainable && n.needs_grad && !n.grad.empty())
                gm.by_param[int(i)] = n.grad;
        }
        return gm;
    }

    TapeStats stats() const {
        if (!backward_done_) throw Error("tape_stats: backward has not run");
        TapeStats s;
        s.n_nodes = int64_t(nodes_.size());
        for (const Node& n : nodes_) {
            if (!n.grad.empty()) {
                ++s.n_grad_nodes;
                if (n.tag == Tag::Backbone) ++s.n_backbone_grad_nodes;
            }
            s.grad_bytes_total += n.grad_bytes;
            if (n.needs_grad) s.activation_bytes_total += n.saved_bytes;
        }
        return s;
    }

    // ---- accessors ----

    int size() const { return int(nodes_.size()); }
    const Node& at(Tensor t) const { return nodes_.at(t.id); }
    const Node& at(int id) const { return nodes_.at(id); }
    const Shape& shape(Tensor t) const { return at(t).shape; }
    const std::vector<Real>& value(Tensor t) const { return at(t).value; }
    const std::vector<Real>& grad(Tensor t) const { return at(t).grad; }
    bool needs_grad(Tensor t) const { return at(t).needs_grad; }
    bool requires_grad(Tensor t) const { return at(t).requires_grad; }
    bool backward_done() const { return backward_done_; }

    Tag tag() const { return tag_; }
    void set_tag(Tag t) { tag_ = t; }

    class TagScope {
    public:
        TagScope(Tape& t, Tag tag) : tape_(t), prev_(t.tag()) { tape_.set_tag(tag); }
        ~TagScope() { tape_.set_tag(prev_); }

    private:
        Tape& tape_;
        Tag prev_;
    };

private:
    std::vector<Node> nodes_;
    Tag tag_ = Tag::Neck;
    int closure_loss_ = -1;
    bool backward_done_ = false;

    static int64_t bytes(const std::vector<Real>& v) {
        return int64_t(v.size()) * int64_t(sizeof(Real));
    }

    static bool suffix_of(const Shape& small, const Shape& big) {
        if (small.size() > big.size()) return false;
        for (size_t i = 0; i < small.size(); ++i)
            if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
        return true;
    }

    static int64_t isqrt_exact(int64_t v, const char* op) {
        int64_t g = int64_t(std::llround(std::sqrt(double(v))));
        if (g * g != v)
            throw ShapeError(op, std::to_string(v) + " tokens do not form a square grid");
        return g;
    }

    static void mm_acc(const Real* a, const Real* b, Real* c, int64_t M, int64_t K,
                       int64_t N) {
        for (int64_t i = 0; i < M; ++i)
            for (int64_t k = 0; k < K; ++k) {
                Real aik = a[i * K + k];
                if (aik == Real(0)) continue;
                const Real* br = b + k * N;
                Real* cr = c + i * N;
                for (int64_t j = 0; j < N; ++j) cr[j] += aik * br[j];
            }
    }

    static void permute_copy(const Real* in, Real* out, const Shape& in_shape,
                             const std::vector<int>& perm) {
        int r = int(in_shape.size());
        Shape out_shape(r);
        for (int i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
        std::vector<int64_t> in_strides(r, 1), out_stride_of_in_dim(r, 0);
        for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        std::vector<int64_t> out_strides(r, 1);
        for (int i = r - 2; i >= 0; --i)
            out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
        for (int i = 0; i < r; ++i) out_stride_of_in_dim[perm[i]] = out_strides[i];
        int64_t total = numel(in_shape);
        std::vector<int64_t> idx(r, 0);
        int64_t out_off = 0;
        for (int64_t lin = 0; lin < total; ++lin) {
            out[out_off] = in[lin];
            for (int d = r - 1; d >= 0; --d) {
                out_off += out_stride_of_in_dim[d];
                if (++idx[d] < in_shape[d]) break;
                out_off -= out_stride_of_in_dim[d] * in_shape[d];
                idx[d] = 0;
            }
        }
    }

    Node op_node(Op op, std::vector<int> inputs, Shape shape, std::vector<Real> value) {
        Node n;
        n.op = op;
        n.kind = NodeKind::Intermediate;
        n.tag = tag_;
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.inputs = std::move(inputs);
        for (int in : n.inputs)
            if (nodes_[in].requires_grad) n.requires_grad = true;
        return n;
    }

    Tensor push(Node n) {
        nodes_.push_back(std::move(n));
        return Tensor{int(nodes_.size()) - 1};
    }

    std::vector<Real>& ensure_grad(int id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) {
            n.grad.assign(numel(n.shape), Real(0));
            n.grad_bytes = bytes(n.grad);
        }
        return n.grad;
    }

    bool input_needs(const Node& n, size_t k) const {
        return nodes_[n.inputs[k]].needs_grad;
    }

    // Gradient flows only along edges whose sources are inside the closure.
    void vjp(int id) {
        Node& n = nodes_[id];
        const std::vector<Real>& g = n.grad;
        switch (n.op) {
            case Op::Leaf:
                return;
            case Op::Matmul: {
                const Node& A = nodes_[n.inputs[0]];
                const Node& B = nodes_[n.inputs[1]];
                int64_t M = A.shape[A.shape.size() - 2], K = A.shape.back();
                int64_t N = B.shape.back();
                int64_t nb = int64_t(n.value.size()) / (M * N);
                bool a_bcast = int64_t(A.value.size()) == M * K && nb > 1;
                bool b_bcast = int64_t(B.value.size()) == K * N && nb > 1;
                if (input_needs(n, 0)) {
                    std::vector<Real>& da = ensure_grad(n.inputs[0]);
                    for (int64_t l = 0; l < nb; ++l) {
                        const Real* gl = g.data() + l * M * N;
                        const Real* bl = B.value.data() + (b_bcast ? 0 : l * K * N);
                        Real* dal = da.data() + (a_bcast ? 0 : l * M * K);
                        for (int64_t i = 0; i < M; ++i)
                            for (int64_t k = 0; k < K; ++k) {
                                Real s = 0;
                                const Real* gr = gl + i * N;
                                const Real* br = bl + k * N;
                                for (int64_t j = 0; j < N; ++j) s += gr[j] * br[j];
                                dal[i * K + k] += s;
                            }
                    }
                }
                if (input_needs(n, 1)) {
                    std::vector<Real>& db = ensure_grad(n.inputs[1]);
                    for (int64_t l = 0; l < nb; ++l) {
                        const Real* gl = g.data() + l * M * N;
                        const Real* al = A.value.data() + (a_bcast ? 0 : l * M * K);
                        Real* dbl = db.data() + (b_bcast ? 0 : l * K * N);
                        for (int64_t i = 0; i < M; ++i)
                            for (int64_t k = 0; k < K; ++k) {
                                Real aik = al[i * K + k];
                                if (aik == Real(0)) continue;
                                const Real* gr = gl + i * N;
                                Real* dbr = dbl + k * N;
                                for (int64_t j = 0; j < N; ++j) dbr[j] += aik * gr[j];
                            }
                    }
                }
                return;
            }
            case Op::Add: {
                if (input_needs(n, 0)) {
                    std::vector<Real>& da = ensure_grad(n.inputs[0]);
                    for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                }
                if (input_needs(n, 1)) {
                    std::vector<Real>& db = ensure_grad(n.inputs[1]);
                    int64_t nbv = int64_t(db.size());
                    int64_t lead = int64_t(g.size()) / nbv;
                    for (int64_t l = 0; l < lead; ++l) {
                        const Real* gl = g.data() + l * nbv;
                        for (int64_t i = 0; i < nbv; ++i) db[i] += gl[i];
                    }
                }
                return;
            }
            case Op::Scale: {
                if (!input_needs(n, 0)) return;
                std::vector<Real>& da = ensure_grad(n.inputs[0]);
                Real c = Real(n.attrs.scalar);
                for (size_t i = 0; i < g.size(); ++i) da[i] += c * g[i];
                return;
            }
            case Op::Gelu: {
                if (!input_needs(n, 0)) return;
                const Node& A = nodes_[n.inputs[0]];
                std::vector<Real>& da = ensure_grad(n.inputs[0]);
                constexpr double inv_sqrt_2pi = 0.3989422804014326779;
                for (size_t i = 0; i < g.size(); ++i) {
                    double x = double(A.value[i]);
                    double phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                    double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                    da[i] += g[i] * Real(phi + x * pdf);
                }
                return;
            }
            case Op::Softmax: {
                if (!input_needs(n, 0)) return;
                std::vector<Real>& dx = ensure_grad(n.inputs[0]);
                const std::vector<Real>& y = n.value;
                int axis = n.attrs.axis;
                int64_t cnt = n.shape[axis];
                int64_t inner = 1;
                for (size_t i = axis + 1; i < n.shape.size(); ++i) inner *= n.shape[i];
                int64_t outer = numel(n.shape) / (cnt * inner);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t in = 0; in < inner; ++in) {
                        int64_t base = o * cnt * inner + in;
                        Real dot = 0;
                        for (int64_t i = 0; i < cnt; ++i)
                            dot += g[base + i * inner] * y[base + i * inner];
                        for (int64_t i = 0; i < cnt; ++i) {
                            int64_t k = base + i * inner;
                            dx[k] += y[k] * (g[k] - dot);
                        }
                    }
                return;
            }
            case Op::LayerNorm: {
                const Node& X = nodes_[n.inputs[0]];
                const Node& W = nodes_[n.inputs[1]];
                const std::vector<Real>& xhat = n.saved[0];
                const std::vector<Real>& rstd = n.saved[1];
                int64_t cols = X.shape.back();
                int64_t rows = numel(X.shape) / cols;
                bool nx = input_needs(n, 0), nw = input_needs(n, 1), nb = input_needs(n, 2);
                Real* dx = nx ? ensure_grad(n.inputs[0]).data() : nullptr;
                Real* dw = nw ? ensure_grad(n.inputs[1]).data() : nullptr;
                Real* db = nb ? ensure_grad(n.inputs[2]).data() : nullptr;
                const Real* pw = W.value.data();
                for (int64_t r = 0; r < rows; ++r) {
                    const Real* gr = g.data() + r * cols;
                    const Real* xh = xhat.data() + r * cols;
                    if (nw)
                        for (int64_t i = 0; i < cols; ++i) dw[i] += gr[i] * xh[i];
                    if (nb)
                        for (int64_t i = 0; i < cols; ++i) db[i] += gr[i];
                    if (nx) {
                        Real m1 = 0, m2 = 0;
                        for (int64_t i = 0; i < cols; ++i) {
                            Real dxh = gr[i] * pw[i];
                            m1 += dxh;
                            m2 += dxh * xh[i];
                        }
                        m1 /= Real(cols);
                        m2 /= Real(cols);
                        Real rs = rstd[r];
                        Real* dxr = dx + r * cols;
                        for (int64_t i = 0; i < cols; ++i) {
                            Real dxh = gr[i] * pw[i];
                            dxr[i] += rs * (dxh - m1 - xh[i] * m2);
                        }
                    }
                }
                return;
            }
            case Op::Reshape: {
                if (!input_needs(n, 0)) return;
                std::vector<Real>& da = ensure_grad(n.inputs[0]);
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                return;
            }
            case Op::Transpose: {
                if (!input_needs(n, 0)) return;
                const Node& A = nodes_[n.inputs[0]];
                std::vector<Real> tmp(g.size());
                std::vector<int> inv(n.attrs.perm.size());
                for (size_t i = 0; i < inv.size(); ++i) inv[n.attrs.perm[i]] = int(i);
                permute_copy(g.data(), tmp.data(), n.shape, inv);
                std::vector<Real>& da = ensure_grad(n.inputs[0]);
                (void)A;
                for (size_t i = 0; i < tmp.size(); ++i) da[i] += tmp[i];
                return;
            }
            case Op::WindowPartition: {
                if (!input_needs(n, 0)) return;
                const Node& A = nodes_[n.inputs[0]];
                std::vector<Real>& da = ensure_grad(n.inputs[0]);
                int64_t T = A.shape[A.shape.size() - 2];
                int64_t C = A.shape.back();
                int64_t g_side = int64_t(std::llround(std::sqrt(double(T))));
                int64_t w = n.attrs.window, gw = g_side / w, nW = gw * gw;
                int64_t lead = numel(A.shape) / (T * C);
                for (int64_t l = 0; l < lead; ++l)
                    for (int64_t t = 0; t < T; ++t) {
                        int64_t gy = t / g_side, gx = t % g_side;
                        int64_t widx = (gy / w) * gw + gx / w;
                        int64_t inner = (gy % w) * w + gx % w;
                        const Real* src = g.data() + ((l * nW + widx) * w * w + inner) * C;
                        Real* dst = da.data() + (l * T + t) * C;
                        for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
                    }
                return;
            }
            case Op::WindowMerge: {
                if (!input_needs(n, 0)) return;
                const Node& A = nodes_[n.inputs[0]];
                std::vector<Real>& da = ensure_grad(n.inputs[0]);
                int64_t nW = A.shape[A.shape.size() - 3];
                int64_t W2 = A.shape[A.shape.size() - 2];
                int64_t C = A.shape.back();
                int64_t w = n.attrs.window;
                int64_t T = nW * W2;
                int64_t g_side = int64_t(std::llround(std::sqrt(double(T))));
                int64_t gw = g_side / w;
                int64_t lead = numel(A.shape) / (T * C);
                for (int64_t l = 0; l < lead; ++l)
                    for (int64_t t = 0; t < T; ++t) {
                        int64_t gy = t / g_side, gx = t % g_side;
                        int64_t widx = (gy / w) * gw + gx / w;
                        int64_t inner = (gy % w) * w + gx % w;
                        const Real* src = g.data() + (l * T + t) * C;
                        Real* dst = da.data() + ((l * nW + widx) * W2 + inner) * C;
                        for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
                    }
                return;
            }
            case Op::Concat: {
                int axis = n.attrs.axis;
                int64_t inner = 1;
                for (size_t i = axis + 1; i < n.shape.size(); ++i) inner *= n.shape[i];
                int64_t outer = 1;
                for (int i = 0; i < axis; ++i) outer *= n.shape[i];
                int64_t row_out = n.shape[axis] * inner;
                int64_t off = 0;
                for (size_t k = 0; k < n.inputs.size(); ++k) {
                    const Node& P = nodes_[n.inputs[k]];
                    int64_t row_in = P.shape[axis] * inner;
                    if (input_needs(n, k)) {
                        std::vector<Real>& dp = ensure_grad(n.inputs[k]);
                        for (int64_t o = 0; o < outer; ++o) {
                            const Real* src = g.data() + o * row_out + off;
                            Real* dst = dp.data() + o * row_in;
                            for (int64_t i = 0; i < row_in; ++i) dst[i] += src[i];
                        }
                    }
                    off += row_in;
                }
                return;
            }
            case Op::Slice: {
                if (!input_needs(n, 0)) return;
                const Node& A = nodes_[n.inputs[0]];
                std::vector<Real>& da = ensure_grad(n.inputs[0]);
                int axis = n.attrs.axis;
                int64_t inner = 1;
                for (size_t i = axis + 1; i < A.shape.size(); ++i) inner *= A.shape[i];
                int64_t outer = 1;
                for (int i = 0; i < axis; ++i) outer *= A.shape[i];
                int64_t row_in = A.shape[axis] * inner;
                int64_t row_out = n.attrs.len * inner;
                for (int64_t o = 0; o < outer; ++o) {
                    const Real* src = g.data() + o * row_out;
                    Real* dst = da.data() + o * row_in + n.attrs.start * inner;
                    for (int64_t i = 0; i < row_out; ++i) dst[i] += src[i];
                }
                return;
            }
            case Op::Mean: {
                if (!input_needs(n, 0)) return;
                std::vector<Real>& da = ensure_grad(n.inputs[0]);
                Real gi = g[0] / Real(da.size());
                for (auto& v : da) v += gi;
                return;
            }
            case Op::CrossEntropy: {
                if (!input_needs(n, 0)) return;
                std::vector<Real>& dl = ensure_grad(n.inputs[0]);
                const std::vector<Real>& probs = n.saved[0];
                int64_t C = nodes_[n.inputs[0]].shape.back();
                int64_t rows = int64_t(dl.size()) / C;
                Real s = g[0] / Real(rows);
                for (int64_t r = 0; r < rows; ++r) {
                    const Real* pr = probs.data() + r * C;
                    Real* dr = dl.data() + r * C;
                    for (int64_t i = 0; i < C; ++i) dr[i] += s * pr[i];
                    dr[n.attrs.labels[r]] -= s;
                }
                return;
            }
        }
    }
};

using Tapef64 = Tape<double>;
using Tapef32 = Tape<float>;

}  // namespace e3va
