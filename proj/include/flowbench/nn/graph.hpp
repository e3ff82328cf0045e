#pragma once

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowbench/nn/conv.hpp"
#include "flowbench/nn/gemm.hpp"
#include "flowbench/nn/tensor.hpp"
#include "flowbench/util/thread_pool.hpp"

namespace flowbench::nn {

// Activation fused into the writeback of conv / tconv / fc nodes.
enum class Act { none, relu };

// Reverse-mode tape over a static computation graph. The graph is built once
// per training configuration and re-executed every step: callers write fresh
// data into input nodes, run forward(), then backward(loss). Node buffers are
// sized at build time, so steady-state execution performs no allocation.
//
// Leaf kinds: input (caller-owned data, no gradient), param (external tensor,
// gradient accumulated here, visited by the optimizer) and frozen (external
// tensor treated as a constant — graphs may cache packed forms of frozen
// weights, so do not mutate them after building).
template <typename T>
class Graph {
public:
    struct Id {
        int v = -1;
        bool valid() const { return v >= 0; }
    };

    enum class Op {
        kInput,
        kParam,
        kFrozen,
        kConv2d,     // args: x, w, b           (x may be a virtual concat pair)
        kTConv2d,    // args: x, w, b
        kFc,         // args: x, w, b
        kRelu,
        kConcat,
        kSlice,
        kUpsample2x,
        kAdd,
        kAddWeighted,
        kScale,
        kFlatten,
        kMulRows,
        kLstm,
        kEpeSum,
        kMseMean,
        kSumAll,
        kGaussLogProb,
        kPpoSurrogate,
        kGaussEntropy,
    };

    util::ThreadPool* pool = nullptr;
    bool check_finite = false;  // scans every node value after forward (test mode)

    // ---- leaves ----

    Id input(Shape s) {
        Node n;
        n.op = Op::kInput;
        n.shape = s;
        n.value = Tensor<T>(s);
        return push(std::move(n));
    }

    Id param(Tensor<T>* p) { return leaf(p, /*trainable=*/true); }
    Id frozen(Tensor<T>* p) { return leaf(p, /*trainable=*/false); }

    // ---- layer ops ----

    Id conv2d(Id x, Id w, Id b, int stride, bool zero_pad, Act act = Act::none) {
        return conv2d_impl(x, Id{}, w, b, stride, zero_pad, act);
    }

    // Convolution over the channel concatenation [x1 | x2] without
    // materializing it; weights see Cin = C1 + C2.
    Id conv2d_cat(Id x1, Id x2, Id w, Id b, int stride, bool zero_pad, Act act = Act::none) {
        return conv2d_impl(x1, x2, w, b, stride, zero_pad, act);
    }

    Id tconv2d(Id x, Id w, Id b, Act act = Act::none) { return tconv2d_impl(x, Id{}, w, b, act); }

    Id tconv2d_cat(Id x1, Id x2, Id w, Id b, Act act = Act::none) {
        return tconv2d_impl(x1, x2, w, b, act);
    }

    Id fc(Id x, Id w, Id b, Act act = Act::none) {
        const Shape& xs = shape_of(x);
        const Shape& ws = shape_of(w);
        require(xs.rank == 2, "fc: input must be [batch, features]");
        require(ws.rank == 2 && ws[0] == xs[1], "fc: weight shape mismatch " + ws.str() + " vs " + xs.str());
        require(shape_of(b) == Shape{ws[1]}, "fc: bias shape mismatch");
        Node n;
        n.op = Op::kFc;
        n.args = {x, w, b};
        n.act = act;
        n.shape = Shape{xs[0], ws[1]};
        return push(std::move(n));
    }

    Id relu(Id x) { return unary(Op::kRelu, x, shape_of(x)); }

    Id concat(Id a, Id b) {
        const Shape& as = shape_of(a);
        const Shape& bs = shape_of(b);
        require(as.rank == bs.rank, "concat: rank mismatch");
        for (int i = 0; i < as.rank - 1; ++i)
            require(as[i] == bs[i], "concat: extent mismatch " + as.str() + " vs " + bs.str());
        Shape out = as;
        out[as.rank - 1] += bs[bs.rank - 1];
        Node n;
        n.op = Op::kConcat;
        n.args = {a, b};
        n.shape = out;
        return push(std::move(n));
    }

    Id slice(Id x, int from, int to) {
        const Shape& xs = shape_of(x);
        require(from >= 0 && to <= xs[xs.rank - 1] && from < to, "slice: bad range");
        Shape out = xs;
        out[xs.rank - 1] = to - from;
        Node n;
        n.op = Op::kSlice;
        n.args = {x};
        n.i0 = from;
        n.i1 = to;
        n.shape = out;
        return push(std::move(n));
    }

    Id upsample2x(Id x) {
        const Shape& xs = shape_of(x);
        require(xs.rank == 4, "upsample2x: input must be rank 4");
        Node n;
        n.op = Op::kUpsample2x;
        n.args = {x};
        n.shape = Shape{xs[0], 2 * xs[1], 2 * xs[2], xs[3]};
        return push(std::move(n));
    }

    Id add(Id a, Id b) { return add_weighted_impl(a, b, 1.0, 1.0, Op::kAdd); }

    Id add_weighted(Id a, Id b, double wa, double wb) {
        return add_weighted_impl(a, b, wa, wb, Op::kAddWeighted);
    }

    Id scale(Id x, double c) {
        Node n;
        n.op = Op::kScale;
        n.args = {x};
        n.f0 = c;
        n.shape = shape_of(x);
        return push(std::move(n));
    }

    Id flatten(Id x) {
        const Shape& xs = shape_of(x);
        require(xs.rank >= 2, "flatten: rank < 2");
        int f = 1;
        for (int i = 1; i < xs.rank; ++i) f *= xs[i];
        Node n;
        n.op = Op::kFlatten;
        n.args = {x};
        n.shape = Shape{xs[0], f};
        return push(std::move(n));
    }

    // Multiplies each row of x by mask[row]; mask carries no gradient.
    Id mul_rows(Id x, Id mask) {
        const Shape& xs = shape_of(x);
        require(shape_of(mask).count() == xs[0], "mul_rows: mask length != batch");
        Node n;
        n.op = Op::kMulRows;
        n.args = {x, mask};
        n.shape = xs;
        return push(std::move(n));
    }

    // Gated recurrent cell; output is [h'|c'] stacked on the feature axis.
    // Gate layout along the 4H axis: input, forget, candidate, output.
    Id lstm(Id x, Id h, Id c, Id wih, Id whh, Id b) {
        const Shape& xs = shape_of(x);
        const Shape& hs = shape_of(h);
        require(xs.rank == 2 && hs.rank == 2, "lstm: inputs must be rank 2");
        int B = xs[0], F = xs[1], H = hs[1];
        require(hs[0] == B && shape_of(c) == hs, "lstm: state shape mismatch");
        require(shape_of(wih) == (Shape{F, 4 * H}), "lstm: wih must be [F,4H]");
        require(shape_of(whh) == (Shape{H, 4 * H}), "lstm: whh must be [H,4H]");
        require(shape_of(b) == (Shape{4 * H}), "lstm: bias must be [4H]");
        Node n;
        n.op = Op::kLstm;
        n.args = {x, h, c, wih, whh, b};
        n.shape = Shape{B, 2 * H};
        n.s0.resize(static_cast<std::size_t>(B) * 4 * H);  // post-activation gates
        n.s1.resize(static_cast<std::size_t>(B) * H);      // tanh(c')
        return push(std::move(n));
    }

    // ---- losses / reductions ----

    // Sum over all sites of the per-pixel Euclidean norm of (pred - target);
    // pred is [B,H,W,2] and target an input of the same shape.
    Id epe_sum(Id pred, Id target) {
        const Shape& ps = shape_of(pred);
        require(ps.rank == 4 && ps[3] == 2, "epe_sum: pred must be [B,H,W,2]");
        require(shape_of(target) == ps, "epe_sum: target shape mismatch");
        Node n;
        n.op = Op::kEpeSum;
        n.args = {pred, target};
        n.shape = Shape{1};
        return push(std::move(n));
    }

    Id mse_mean(Id pred, Id target) {
        require(shape_of(target) == shape_of(pred), "mse_mean: shape mismatch");
        Node n;
        n.op = Op::kMseMean;
        n.args = {pred, target};
        n.shape = Shape{1};
        return push(std::move(n));
    }

    Id sum_all(Id x) {
        Node n;
        n.op = Op::kSumAll;
        n.args = {x};
        n.shape = Shape{1};
        return push(std::move(n));
    }

    // Diagonal-Gaussian log density of `actions` under (mean, exp(logstd));
    // logstd is state-independent with shape [D]. Output is [B].
    Id gaussian_logprob(Id mean, Id logstd, Id actions) {
        const Shape& ms = shape_of(mean);
        require(ms.rank == 2, "gaussian_logprob: mean must be [B,D]");
        require(shape_of(logstd) == (Shape{ms[1]}), "gaussian_logprob: logstd must be [D]");
        require(shape_of(actions) == ms, "gaussian_logprob: actions shape mismatch");
        Node n;
        n.op = Op::kGaussLogProb;
        n.args = {mean, logstd, actions};
        n.shape = Shape{ms[0]};
        return push(std::move(n));
    }

    // Negated mean clipped surrogate: -(1/B) sum min(rho*A, clip(rho,1-eps,1+eps)*A)
    // with rho = exp(logp_new - logp_old). logp_old and adv carry no gradient.
    Id ppo_surrogate(Id logp_new, Id logp_old, Id adv, double clip_eps) {
        const Shape& ls = shape_of(logp_new);
        require(ls.rank == 1, "ppo_surrogate: logp must be [B]");
        require(shape_of(logp_old) == ls && shape_of(adv) == ls, "ppo_surrogate: shape mismatch");
        Node n;
        n.op = Op::kPpoSurrogate;
        n.args = {logp_new, logp_old, adv};
        n.f0 = clip_eps;
        n.shape = Shape{1};
        return push(std::move(n));
    }

    // Mean entropy of the diagonal Gaussian: sum(logstd) + D/2*(1+log 2pi).
    Id gaussian_entropy(Id logstd) {
        require(shape_of(logstd).rank == 1, "gaussian_entropy: logstd must be [D]");
        Node n;
        n.op = Op::kGaussEntropy;
        n.args = {logstd};
        n.shape = Shape{1};
        return push(std::move(n));
    }

    // ---- execution ----

    void forward() {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            exec_forward(static_cast<int>(i));
            if (check_finite && !value(Id{static_cast<int>(i)}).all_finite())
                throw std::runtime_error("graph: non-finite value at node " + std::to_string(i) +
                                         " op " + std::to_string(static_cast<int>(nodes_[i].op)));
        }
    }

    // Zeroes all gradients, seeds d(loss)=1 and sweeps the tape in reverse.
    void backward(Id loss) {
        require(shape_of(loss).count() == 1, "backward: loss must be scalar");
        for (Node& n : nodes_)
            if (!n.grad.data.empty()) n.grad.zero();
        active_.assign(nodes_.size(), 0);
        if (!nodes_[static_cast<std::size_t>(loss.v)].needs_grad) return;
        grad_ref(loss).data[0] = T(1);
        active_[static_cast<std::size_t>(loss.v)] = 1;
        for (int i = loss.v; i >= 0; --i) {
            if (!active_[static_cast<std::size_t>(i)]) continue;
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.op == Op::kInput || n.op == Op::kParam || n.op == Op::kFrozen) continue;
            exec_backward(i);
            for (Id a : n.args)
                if (a.valid() && nodes_[static_cast<std::size_t>(a.v)].needs_grad)
                    active_[static_cast<std::size_t>(a.v)] = 1;
        }
    }

    // Mutable storage of an input node.
    Tensor<T>& data(Id id) {
        Node& n = nodes_.at(static_cast<std::size_t>(id.v));
        if (n.op == Op::kParam || n.op == Op::kFrozen) return *n.external;
        require(n.op == Op::kInput, "data(): not a leaf node");
        return n.value;
    }

    const Tensor<T>& value(Id id) const {
        const Node& n = nodes_.at(static_cast<std::size_t>(id.v));
        if (n.op == Op::kParam || n.op == Op::kFrozen) return *n.external;
        return n.value;
    }

    const Tensor<T>& grad(Id id) const {
        const Node& n = nodes_.at(static_cast<std::size_t>(id.v));
        require(!n.grad.data.empty(), "grad(): node has no gradient");
        return n.grad;
    }

    const Shape& shape_of(Id id) const {
        require(id.valid() && id.v < static_cast<int>(nodes_.size()), "bad node id");
        return nodes_[static_cast<std::size_t>(id.v)].shape;
    }

    // Trainable parameter tensors with their graph ids, in creation order.
    const std::vector<std::pair<Tensor<T>*, Id>>& trainable() const { return trainable_; }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Op op{};
        Shape shape;
        std::vector<Id> args;
        Tensor<T> value;
        Tensor<T> grad;
        Tensor<T>* external = nullptr;
        bool needs_grad = false;
        Act act = Act::none;
        int i0 = 0, i1 = 0;
        double f0 = 0.0, f1 = 0.0;
        ConvDims conv;
        TConvDims tconv;
        std::vector<T> s0, s1, s2;  // op scratch, sized at build
        std::vector<float> wcache;  // packed weights (frozen-weight nodes only)
        bool wcache_valid = false;
    };

    static void require(bool ok, const std::string& msg) {
        if (!ok) throw std::invalid_argument("graph: " + msg);
    }

    Id leaf(Tensor<T>* p, bool trainable) {
        require(p != nullptr && p->shape.count() > 0, "param: null or empty tensor");
        Node n;
        n.op = trainable ? Op::kParam : Op::kFrozen;
        n.shape = p->shape;
        n.external = p;
        n.needs_grad = trainable;
        if (trainable) n.grad = Tensor<T>(p->shape);
        Id id = push_raw(std::move(n));
        if (trainable) trainable_.push_back({p, id});
        return id;
    }

    Id unary(Op op, Id x, Shape out) {
        Node n;
        n.op = op;
        n.args = {x};
        n.shape = out;
        return push(std::move(n));
    }

    Id add_weighted_impl(Id a, Id b, double wa, double wb, Op op) {
        require(shape_of(a) == shape_of(b), "add: shape mismatch " + shape_of(a).str() + " vs " + shape_of(b).str());
        Node n;
        n.op = op;
        n.args = {a, b};
        n.f0 = wa;
        n.f1 = wb;
        n.shape = shape_of(a);
        return push(std::move(n));
    }

    Id conv2d_impl(Id x1, Id x2, Id w, Id b, int stride, bool zero_pad, Act act) {
        const Shape& xs = shape_of(x1);
        require(xs.rank == 4, "conv2d: input must be rank 4");
        int cin = xs[3];
        if (x2.valid()) {
            const Shape& x2s = shape_of(x2);
            require(x2s.rank == 4 && x2s[0] == xs[0] && x2s[1] == xs[1] && x2s[2] == xs[2],
                    "conv2d_cat: extent mismatch");
            cin += x2s[3];
        }
        const Shape& ws = shape_of(w);
        require(ws.rank == 4, "conv2d: weights must be [kh,kw,Cin,Cout]");
        require(ws[2] == cin, "conv2d: channel mismatch " + ws.str() + " for input channels " + std::to_string(cin));
        require(shape_of(b) == Shape{ws[3]}, "conv2d: bias shape mismatch");
        ConvDims d = ConvDims::make(xs[1], xs[2], cin, ws[0], ws[1], ws[3], stride, zero_pad);
        require(d.patch_len() <= 2048, "conv2d: patch length exceeds the pack buffer");
        Node n;
        n.op = Op::kConv2d;
        n.args = x2.valid() ? std::vector<Id>{x1, w, b, x2} : std::vector<Id>{x1, w, b};
        n.conv = d;
        n.act = act;
        n.shape = Shape{xs[0], d.OH, d.OW, d.Cout};
        n.s0.resize(static_cast<std::size_t>(d.out_pixels()) * d.patch_len());  // backward patches
        return push(std::move(n));
    }

    Id tconv2d_impl(Id x1, Id x2, Id w, Id b, Act act) {
        const Shape& xs = shape_of(x1);
        require(xs.rank == 4, "tconv2d: input must be rank 4");
        int cin = xs[3];
        if (x2.valid()) {
            const Shape& x2s = shape_of(x2);
            require(x2s.rank == 4 && x2s[0] == xs[0] && x2s[1] == xs[1] && x2s[2] == xs[2],
                    "tconv2d_cat: extent mismatch");
            cin += x2s[3];
        }
        const Shape& ws = shape_of(w);
        require(ws.rank == 4 && ws[0] == 4 && ws[1] == 4, "tconv2d: weights must be [4,4,Cin,Cout]");
        require(ws[2] == cin, "tconv2d: channel mismatch");
        require(shape_of(b) == Shape{ws[3]}, "tconv2d: bias shape mismatch");
        TConvDims d = TConvDims::make(xs[1], xs[2], cin, ws[3]);
        Node n;
        n.op = Op::kTConv2d;
        n.args = x2.valid() ? std::vector<Id>{x1, w, b, x2} : std::vector<Id>{x1, w, b};
        n.tconv = d;
        n.act = act;
        n.shape = Shape{xs[0], d.OH, d.OW, d.Cout};
        n.s0.resize(static_cast<std::size_t>(d.H) * d.W * 16 * d.Cout);  // per-sample G
        n.s1.resize(static_cast<std::size_t>(d.Cin) * 16 * d.Cout);      // repacked weights
        return push(std::move(n));
    }

    Id push(Node&& n) {
        n.needs_grad = false;
        for (Id a : n.args) {
            require(a.valid() && a.v < static_cast<int>(nodes_.size()), "arg id out of range");
            n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(a.v)].needs_grad;
        }
        n.value = Tensor<T>(n.shape);
        if (n.needs_grad) {
            n.grad = Tensor<T>(n.shape);
            if (n.act == Act::relu) n.s2.resize(static_cast<std::size_t>(n.shape.count()));
        }
        return push_raw(std::move(n));
    }

    Id push_raw(Node&& n) {
        nodes_.push_back(std::move(n));
        return Id{static_cast<int>(nodes_.size()) - 1};
    }

    const T* vptr(Id id) const {
        const Node& n = nodes_[static_cast<std::size_t>(id.v)];
        return (n.op == Op::kParam || n.op == Op::kFrozen) ? n.external->ptr() : n.value.ptr();
    }
    T* gptr(Id id) { return grad_ref(id).ptr(); }
    Tensor<T>& grad_ref(Id id) { return nodes_[static_cast<std::size_t>(id.v)].grad; }
    bool wants_grad(Id id) const { return nodes_[static_cast<std::size_t>(id.v)].needs_grad; }
    bool is_frozen(Id id) const { return nodes_[static_cast<std::size_t>(id.v)].op == Op::kFrozen; }

    // Masked upstream gradient for fused-relu nodes: dy where value > 0.
    const T* effective_dy(Node& n) {
        if (n.act != Act::relu) return n.grad.ptr();
        const T* y = n.value.ptr();
        const T* g = n.grad.ptr();
        T* out = n.s2.data();
        std::int64_t c = n.value.size();
        for (std::int64_t i = 0; i < c; ++i) out[i] = y[i] > T(0) ? g[i] : T(0);
        return out;
    }

    // Packed-B weight cache for float graphs with frozen weights.
    float* packed_weights(Node& n, const float* w, int ldb, int K, int N, bool frozen, bool& valid) {
        if (!frozen) {
            valid = false;
            return nullptr;
        }
        n.wcache.resize(static_cast<std::size_t>(detail::packed_b_size(K, N)));
        valid = n.wcache_valid;
        if (!n.wcache_valid) {
            detail::pack_b(w, ldb, K, N, n.wcache.data());
            n.wcache_valid = true;
            valid = true;
        }
        return n.wcache.data();
    }

    // ---------------- forward ----------------

    void exec_forward(int idx) {
        Node& n = nodes_[static_cast<std::size_t>(idx)];
        switch (n.op) {
            case Op::kInput:
            case Op::kParam:
            case Op::kFrozen:
                return;
            case Op::kConv2d:
                return fwd_conv(n);
            case Op::kTConv2d:
                return fwd_tconv(n);
            case Op::kFc:
                return fwd_fc(n);
            case Op::kRelu: {
                const T* x = vptr(n.args[0]);
                T* y = n.value.ptr();
                std::int64_t c = n.value.size();
                for (std::int64_t i = 0; i < c; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
                return;
            }
            case Op::kConcat: {
                const Shape& as = shape_of(n.args[0]);
                const Shape& bs = shape_of(n.args[1]);
                int ca = as[as.rank - 1], cb = bs[bs.rank - 1];
                std::int64_t rows = n.value.size() / (ca + cb);
                const T* a = vptr(n.args[0]);
                const T* b = vptr(n.args[1]);
                T* y = n.value.ptr();
                for (std::int64_t r = 0; r < rows; ++r) {
                    std::memcpy(y + r * (ca + cb), a + r * ca, sizeof(T) * static_cast<std::size_t>(ca));
                    std::memcpy(y + r * (ca + cb) + ca, b + r * cb, sizeof(T) * static_cast<std::size_t>(cb));
                }
                return;
            }
            case Op::kSlice: {
                const Shape& xs = shape_of(n.args[0]);
                int cx = xs[xs.rank - 1], cy = n.i1 - n.i0;
                std::int64_t rows = n.value.size() / cy;
                const T* x = vptr(n.args[0]);
                T* y = n.value.ptr();
                for (std::int64_t r = 0; r < rows; ++r)
                    std::memcpy(y + r * cy, x + r * cx + n.i0, sizeof(T) * static_cast<std::size_t>(cy));
                return;
            }
            case Op::kUpsample2x: {
                const Shape& xs = shape_of(n.args[0]);
                int B = xs[0], H = xs[1], W = xs[2], C = xs[3];
                const T* x = vptr(n.args[0]);
                T* y = n.value.ptr();
                for (int b = 0; b < B; ++b)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) {
                            const T* src = x + ((static_cast<std::int64_t>(b) * H + h) * W + w) * C;
                            for (int dy = 0; dy < 2; ++dy) {
                                T* dst = y + ((static_cast<std::int64_t>(b) * 2 * H + 2 * h + dy) * 2 * W + 2 * w) * C;
                                std::memcpy(dst, src, sizeof(T) * static_cast<std::size_t>(C));
                                std::memcpy(dst + C, src, sizeof(T) * static_cast<std::size_t>(C));
                            }
                        }
                return;
            }
            case Op::kAdd:
            case Op::kAddWeighted: {
                const T* a = vptr(n.args[0]);
                const T* b = vptr(n.args[1]);
                T* y = n.value.ptr();
                T wa = static_cast<T>(n.f0), wb = static_cast<T>(n.f1);
                std::int64_t c = n.value.size();
                if (n.op == Op::kAdd)
                    for (std::int64_t i = 0; i < c; ++i) y[i] = a[i] + b[i];
                else
                    for (std::int64_t i = 0; i < c; ++i) y[i] = wa * a[i] + wb * b[i];
                return;
            }
            case Op::kScale: {
                const T* x = vptr(n.args[0]);
                T* y = n.value.ptr();
                T c = static_cast<T>(n.f0);
                std::int64_t cnt = n.value.size();
                for (std::int64_t i = 0; i < cnt; ++i) y[i] = c * x[i];
                return;
            }
            case Op::kFlatten:
                std::memcpy(n.value.ptr(), vptr(n.args[0]), sizeof(T) * static_cast<std::size_t>(n.value.size()));
                return;
            case Op::kMulRows: {
                const Shape& xs = shape_of(n.args[0]);
                std::int64_t B = xs[0], F = n.value.size() / xs[0];
                const T* x = vptr(n.args[0]);
                const T* m = vptr(n.args[1]);
                T* y = n.value.ptr();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t f = 0; f < F; ++f) y[b * F + f] = x[b * F + f] * m[b];
                return;
            }
            case Op::kLstm:
                return fwd_lstm(n);
            case Op::kEpeSum: {
                const T* p = vptr(n.args[0]);
                const T* t = vptr(n.args[1]);
                std::int64_t sites = shape_of(n.args[0]).count() / 2;
                double acc = 0.0;
                for (std::int64_t i = 0; i < sites; ++i) {
                    double dx = static_cast<double>(p[2 * i] - t[2 * i]);
                    double dy = static_cast<double>(p[2 * i + 1] - t[2 * i + 1]);
                    acc += std::sqrt(dx * dx + dy * dy);
                }
                n.value.data[0] = static_cast<T>(acc);
                return;
            }
            case Op::kMseMean: {
                const T* p = vptr(n.args[0]);
                const T* t = vptr(n.args[1]);
                std::int64_t c = shape_of(n.args[0]).count();
                double acc = 0.0;
                for (std::int64_t i = 0; i < c; ++i) {
                    double d = static_cast<double>(p[i] - t[i]);
                    acc += d * d;
                }
                n.value.data[0] = static_cast<T>(acc / static_cast<double>(c));
                return;
            }
            case Op::kSumAll: {
                const T* x = vptr(n.args[0]);
                std::int64_t c = shape_of(n.args[0]).count();
                double acc = 0.0;
                for (std::int64_t i = 0; i < c; ++i) acc += static_cast<double>(x[i]);
                n.value.data[0] = static_cast<T>(acc);
                return;
            }
            case Op::kGaussLogProb: {
                const Shape& ms = shape_of(n.args[0]);
                int B = ms[0], D = ms[1];
                const T* mu = vptr(n.args[0]);
                const T* ls = vptr(n.args[1]);
                const T* a = vptr(n.args[2]);
                T* y = n.value.ptr();
                double logstd_sum = 0.0;
                for (int d = 0; d < D; ++d) logstd_sum += static_cast<double>(ls[d]);
                const double c0 = -0.5 * D * std::log(2.0 * 3.14159265358979323846) - logstd_sum;
                for (int b = 0; b < B; ++b) {
                    double q = 0.0;
                    for (int d = 0; d < D; ++d) {
                        double z = (static_cast<double>(a[b * D + d]) - static_cast<double>(mu[b * D + d])) /
                                   std::exp(static_cast<double>(ls[d]));
                        q += z * z;
                    }
                    y[b] = static_cast<T>(c0 - 0.5 * q);
                }
                return;
            }
            case Op::kPpoSurrogate: {
                int B = shape_of(n.args[0])[0];
                const T* lpn = vptr(n.args[0]);
                const T* lpo = vptr(n.args[1]);
                const T* adv = vptr(n.args[2]);
                double eps = n.f0, acc = 0.0;
                for (int b = 0; b < B; ++b) {
                    double rho = std::exp(static_cast<double>(lpn[b]) - static_cast<double>(lpo[b]));
                    double a = static_cast<double>(adv[b]);
                    double clipped = std::min(std::max(rho, 1.0 - eps), 1.0 + eps);
                    acc += std::min(rho * a, clipped * a);
                }
                n.value.data[0] = static_cast<T>(-acc / B);
                return;
            }
            case Op::kGaussEntropy: {
                int D = shape_of(n.args[0])[0];
                const T* ls = vptr(n.args[0]);
                double acc = 0.5 * D * (1.0 + std::log(2.0 * 3.14159265358979323846));
                for (int d = 0; d < D; ++d) acc += static_cast<double>(ls[d]);
                n.value.data[0] = static_cast<T>(acc);
                return;
            }
        }
    }

    struct ConvSrc {
        const T* x1;
        int c1;
        const T* x2;  // nullptr without virtual concat
        int c2;
    };

    ConvSrc conv_src(const Node& n, int sample, std::int64_t pixels) const {
        ConvSrc s{};
        s.x1 = vptr(n.args[0]) + static_cast<std::int64_t>(sample) * pixels * shape_of(n.args[0])[3];
        s.c1 = shape_of(n.args[0])[3];
        if (n.args.size() > 3) {
            s.x2 = vptr(n.args[3]) + static_cast<std::int64_t>(sample) * pixels * shape_of(n.args[3])[3];
            s.c2 = shape_of(n.args[3])[3];
        }
        return s;
    }

    // Gathers one patch row (kh*kw*Cin) for an output pixel straight from the
    // NHWC source(s); zero padding handled by bounds. Interior rows of a
    // single-source conv are one contiguous kw*C span per tap row.
    static void gather_patch(const ConvSrc& s, const ConvDims& d, int oy, int ox, T* row) {
        const int iy0 = oy * d.stride - d.pad;
        const int ix0 = ox * d.stride - d.pad;
        const bool x_interior = ix0 >= 0 && ix0 + d.kw <= d.W;
        for (int ky = 0; ky < d.kh; ++ky) {
            const int iy = iy0 + ky;
            T* dst = row + static_cast<std::int64_t>(ky) * d.kw * d.C;
            if (iy < 0 || iy >= d.H) {
                std::memset(dst, 0, sizeof(T) * static_cast<std::size_t>(d.kw) * d.C);
                continue;
            }
            if (!s.x2 && x_interior) {
                std::memcpy(dst, s.x1 + (static_cast<std::int64_t>(iy) * d.W + ix0) * s.c1,
                            sizeof(T) * static_cast<std::size_t>(d.kw) * s.c1);
                continue;
            }
            for (int kx = 0; kx < d.kw; ++kx) {
                const int ix = ix0 + kx;
                T* cell = dst + static_cast<std::int64_t>(kx) * d.C;
                if (ix < 0 || ix >= d.W) {
                    std::memset(cell, 0, sizeof(T) * static_cast<std::size_t>(d.C));
                    continue;
                }
                std::int64_t off = static_cast<std::int64_t>(iy) * d.W + ix;
                std::memcpy(cell, s.x1 + off * s.c1, sizeof(T) * static_cast<std::size_t>(s.c1));
                if (s.x2) std::memcpy(cell + s.c1, s.x2 + off * s.c2, sizeof(T) * static_cast<std::size_t>(s.c2));
            }
        }
    }

    // im2col over possibly-concatenated sources (backward path).
    static void im2col_src(const ConvSrc& s, const ConvDims& d, T* patches) {
        const int K = d.patch_len();
        for (int oy = 0; oy < d.OH; ++oy)
            for (int ox = 0; ox < d.OW; ++ox)
                gather_patch(s, d, oy, ox, patches + (static_cast<std::int64_t>(oy) * d.OW + ox) * K);
    }

    void fwd_conv(Node& n) {
        const ConvDims& d = n.conv;
        int B = shape_of(n.args[0])[0];
        const T* w = vptr(n.args[1]);
        const T* bias = vptr(n.args[2]);
        T* y = n.value.ptr();
        const int M = d.out_pixels(), K = d.patch_len(), N = d.Cout;
        const std::int64_t in_pixels = static_cast<std::int64_t>(d.H) * d.W;
        const std::int64_t out_sz = static_cast<std::int64_t>(M) * N;

        if constexpr (std::is_same_v<T, float>) {
            if (N <= 4) {
                for (int b = 0; b < B; ++b)
                    fwd_conv_small_cout(n, conv_src(n, b, in_pixels), w, bias, y + b * out_sz);
                return;
            }
            bool cache_valid = false;
            float* bp = packed_weights(n, w, N, K, N, is_frozen(n.args[1]), cache_valid);
            static thread_local std::vector<float> bp_scratch;
            if (bp == nullptr) {
                bp_scratch.resize(static_cast<std::size_t>(detail::packed_b_size(K, N)));
                detail::pack_b(w, N, K, N, bp_scratch.data());
                bp = bp_scratch.data();
            }
            detail::Epilogue ep;
            ep.bias = bias;
            ep.relu = n.act == Act::relu;
            for (int b = 0; b < B; ++b) {
                ConvSrc src = conv_src(n, b, in_pixels);
                auto pack_a = [&](int m0, int mr, int pad, float* out) {
                    // row-major [pad x K] panels gathered straight from the input
                    for (int r = 0; r < mr; ++r) {
                        int m = m0 + r;
                        gather_patch(src, d, m / d.OW, m % d.OW, out + static_cast<std::int64_t>(r) * K);
                    }
                    for (int r = mr; r < pad; ++r)
                        std::memset(out + static_cast<std::int64_t>(r) * K, 0, sizeof(float) * static_cast<std::size_t>(K));
                };
                detail::gemm_packed_driver(pack_a, bp, y + b * out_sz, N, M, N, K, ep, pool);
            }
        } else {
            // reference path (gradient-check mode)
            for (int b = 0; b < B; ++b) {
                ConvSrc src = conv_src(n, b, in_pixels);
                im2col_src(src, d, n.s0.data());
                T* yb = y + b * out_sz;
                for (int m = 0; m < M; ++m)
                    std::memcpy(yb + static_cast<std::int64_t>(m) * N, bias, sizeof(T) * static_cast<std::size_t>(N));
                gemm(n.s0.data(), K, w, N, yb, N, M, N, K, false, true, pool);
                if (n.act == Act::relu)
                    for (std::int64_t i = 0; i < out_sz; ++i) yb[i] = std::max(yb[i], T(0));
            }
        }
    }

    // Direct tap loop for tiny output channel counts (the 2-channel flow
    // heads): per output pixel a few contiguous dot products, no patch matrix.
    void fwd_conv_small_cout(Node& n, const ConvSrc& src, const float* w, const float* bias,
                             float* y) {
        const ConvDims& d = n.conv;
        const int N = d.Cout;
        // wt[n][ky][kx][c], contiguous per output channel
        static thread_local std::vector<float> wt;
        wt.resize(static_cast<std::size_t>(N) * d.kh * d.kw * d.C);
        for (int co = 0; co < N; ++co)
            for (int t = 0; t < d.kh * d.kw; ++t)
                for (int c = 0; c < d.C; ++c)
                    wt[static_cast<std::size_t>((co * d.kh * d.kw + t)) * d.C + c] =
                        w[(static_cast<std::int64_t>(t) * d.C + c) * N + co];
        const bool do_relu = n.act == Act::relu;
        for (int oy = 0; oy < d.OH; ++oy) {
            const int iy0 = oy * d.stride - d.pad;
            for (int ox = 0; ox < d.OW; ++ox) {
                const int ix0 = ox * d.stride - d.pad;
                float* out = y + (static_cast<std::int64_t>(oy) * d.OW + ox) * N;
                if (N == 2) {
                    // both output channels in one pass: each input span read once
                    detail::DotAccum a0, a1;
                    const float* w1 = wt.data() + static_cast<std::size_t>(d.kh) * d.kw * d.C;
                    for (int ky = 0; ky < d.kh; ++ky) {
                        const int iy = iy0 + ky;
                        if (iy < 0 || iy >= d.H) continue;
                        for (int kx = 0; kx < d.kw; ++kx) {
                            const int ix = ix0 + kx;
                            if (ix < 0 || ix >= d.W) continue;
                            const std::int64_t off = static_cast<std::int64_t>(iy) * d.W + ix;
                            const std::size_t woff = static_cast<std::size_t>(ky * d.kw + kx) * d.C;
                            a0.add(src.x1 + off * src.c1, wt.data() + woff, src.c1);
                            a1.add(src.x1 + off * src.c1, w1 + woff, src.c1);
                            if (src.x2) {
                                a0.add(src.x2 + off * src.c2, wt.data() + woff + src.c1, src.c2);
                                a1.add(src.x2 + off * src.c2, w1 + woff + src.c1, src.c2);
                            }
                        }
                    }
                    float v0 = a0.finish() + bias[0];
                    float v1 = a1.finish() + bias[1];
                    out[0] = do_relu ? std::max(v0, 0.0f) : v0;
                    out[1] = do_relu ? std::max(v1, 0.0f) : v1;
                    continue;
                }
                for (int co = 0; co < N; ++co) {
                    detail::DotAccum acc;
                    const float* wbase = wt.data() + static_cast<std::size_t>(co) * d.kh * d.kw * d.C;
                    for (int ky = 0; ky < d.kh; ++ky) {
                        const int iy = iy0 + ky;
                        if (iy < 0 || iy >= d.H) continue;
                        for (int kx = 0; kx < d.kw; ++kx) {
                            const int ix = ix0 + kx;
                            if (ix < 0 || ix >= d.W) continue;
                            const std::int64_t off = static_cast<std::int64_t>(iy) * d.W + ix;
                            const float* wrow = wbase + static_cast<std::size_t>(ky * d.kw + kx) * d.C;
                            acc.add(src.x1 + off * src.c1, wrow, src.c1);
                            if (src.x2) acc.add(src.x2 + off * src.c2, wrow + src.c1, src.c2);
                        }
                    }
                    float v = acc.finish() + bias[co];
                    out[co] = do_relu ? std::max(v, 0.0f) : v;
                }
            }
        }
    }

    void fwd_tconv(Node& n) {
        const TConvDims& d = n.tconv;
        int B = shape_of(n.args[0])[0];
        const T* w = vptr(n.args[1]);
        const T* bias = vptr(n.args[2]);
        T* y = n.value.ptr();
        const std::int64_t in_pixels = static_cast<std::int64_t>(d.H) * d.W;
        // repack w [4,4,Cin,Cout] -> Wm [Cin x 16*Cout] (cached for frozen weights)
        T* wm = n.s1.data();
        if (!(is_frozen(n.args[1]) && n.wcache_valid)) {
            for (int t = 0; t < 16; ++t)
                for (int ci = 0; ci < d.Cin; ++ci)
                    for (int co = 0; co < d.Cout; ++co)
                        wm[static_cast<std::int64_t>(ci) * 16 * d.Cout + t * d.Cout + co] =
                            w[(static_cast<std::int64_t>(t) * d.Cin + ci) * d.Cout + co];
            if (is_frozen(n.args[1])) n.wcache_valid = true;
        }
        const int M = d.H * d.W;
        const std::int64_t out_sz = static_cast<std::int64_t>(d.OH) * d.OW * d.Cout;
        static thread_local std::vector<T> xcat;
        for (int b = 0; b < B; ++b) {
            ConvSrc src = conv_src(n, b, in_pixels);
            const T* xb = src.x1;
            if (src.x2) {  // materialize the concat rows for the gemm
                xcat.resize(static_cast<std::size_t>(M) * d.Cin);
                for (int m = 0; m < M; ++m) {
                    std::memcpy(xcat.data() + static_cast<std::int64_t>(m) * d.Cin, src.x1 + static_cast<std::int64_t>(m) * src.c1,
                                sizeof(T) * static_cast<std::size_t>(src.c1));
                    std::memcpy(xcat.data() + static_cast<std::int64_t>(m) * d.Cin + src.c1,
                                src.x2 + static_cast<std::int64_t>(m) * src.c2, sizeof(T) * static_cast<std::size_t>(src.c2));
                }
                xb = xcat.data();
            }
            gemm(xb, d.Cin, wm, 16 * d.Cout, n.s0.data(), 16 * d.Cout, M, 16 * d.Cout, d.Cin, false,
                 false, pool);
            T* yb = y + b * out_sz;
            for (std::int64_t px = 0; px < static_cast<std::int64_t>(d.OH) * d.OW; ++px)
                std::memcpy(yb + px * d.Cout, bias, sizeof(T) * static_cast<std::size_t>(d.Cout));
            tconv_scatter_add(n.s0.data(), d, yb);
            if (n.act == Act::relu)
                for (std::int64_t i = 0; i < out_sz; ++i) yb[i] = std::max(yb[i], T(0));
        }
    }

    void fwd_fc(Node& n) {
        const Shape& xs = shape_of(n.args[0]);
        int B = xs[0], F = xs[1], G = n.shape[1];
        const T* x = vptr(n.args[0]);
        const T* w = vptr(n.args[1]);
        const T* bias = vptr(n.args[2]);
        T* y = n.value.ptr();
        if constexpr (std::is_same_v<T, float>) {
            gemm_f32(x, F, w, G, y, G, B, G, F, false, false, pool, bias, n.act == Act::relu);
        } else {
            for (int b = 0; b < B; ++b)
                std::memcpy(y + static_cast<std::int64_t>(b) * G, bias, sizeof(T) * static_cast<std::size_t>(G));
            gemm(x, F, w, G, y, G, B, G, F, false, true, pool);
            if (n.act == Act::relu) {
                std::int64_t c = n.value.size();
                for (std::int64_t i = 0; i < c; ++i) y[i] = std::max(y[i], T(0));
            }
        }
    }

    void fwd_lstm(Node& n) {
        const Shape& xs = shape_of(n.args[0]);
        int B = xs[0], F = xs[1], H = shape_of(n.args[1])[1];
        const T* x = vptr(n.args[0]);
        const T* h = vptr(n.args[1]);
        const T* c = vptr(n.args[2]);
        const T* wih = vptr(n.args[3]);
        const T* whh = vptr(n.args[4]);
        const T* bias = vptr(n.args[5]);
        T* gates = n.s0.data();
        for (int b = 0; b < B; ++b)
            std::memcpy(gates + static_cast<std::int64_t>(b) * 4 * H, bias, sizeof(T) * static_cast<std::size_t>(4 * H));
        gemm(x, F, wih, 4 * H, gates, 4 * H, B, 4 * H, F, false, true, pool);
        gemm(h, H, whh, 4 * H, gates, 4 * H, B, 4 * H, H, false, true, pool);
        T* out = n.value.ptr();
        T* tc = n.s1.data();
        for (int b = 0; b < B; ++b) {
            T* g = gates + static_cast<std::int64_t>(b) * 4 * H;
            for (int j = 0; j < 2 * H; ++j) g[j] = sigmoid(g[j]);        // i, f
            for (int j = 2 * H; j < 3 * H; ++j) g[j] = std::tanh(g[j]);  // candidate
            for (int j = 3 * H; j < 4 * H; ++j) g[j] = sigmoid(g[j]);    // o
            for (int j = 0; j < H; ++j) {
                T cn = g[H + j] * c[static_cast<std::int64_t>(b) * H + j] + g[j] * g[2 * H + j];
                T th = std::tanh(cn);
                tc[static_cast<std::int64_t>(b) * H + j] = th;
                out[static_cast<std::int64_t>(b) * 2 * H + j] = g[3 * H + j] * th;  // h'
                out[static_cast<std::int64_t>(b) * 2 * H + H + j] = cn;             // c'
            }
        }
    }

    static T sigmoid(T v) { return T(1) / (T(1) + std::exp(-v)); }

    // ---------------- backward ----------------

    void exec_backward(int idx) {
        Node& n = nodes_[static_cast<std::size_t>(idx)];
        const T* g = n.grad.ptr();
        switch (n.op) {
            case Op::kInput:
            case Op::kParam:
            case Op::kFrozen:
                return;
            case Op::kConv2d:
                return bwd_conv(n);
            case Op::kTConv2d:
                return bwd_tconv(n);
            case Op::kFc:
                return bwd_fc(n);
            case Op::kRelu: {
                if (!wants_grad(n.args[0])) return;
                T* dx = gptr(n.args[0]);
                const T* y = n.value.ptr();
                std::int64_t c = n.value.size();
                for (std::int64_t i = 0; i < c; ++i)
                    if (y[i] > T(0)) dx[i] += g[i];
                return;
            }
            case Op::kConcat: {
                const Shape& as = shape_of(n.args[0]);
                const Shape& bs = shape_of(n.args[1]);
                int ca = as[as.rank - 1], cb = bs[bs.rank - 1];
                std::int64_t rows = n.value.size() / (ca + cb);
                for (int part = 0; part < 2; ++part) {
                    if (!wants_grad(n.args[static_cast<std::size_t>(part)])) continue;
                    T* dst = gptr(n.args[static_cast<std::size_t>(part)]);
                    int off = part == 0 ? 0 : ca;
                    int cc = part == 0 ? ca : cb;
                    for (std::int64_t r = 0; r < rows; ++r)
                        for (int j = 0; j < cc; ++j) dst[r * cc + j] += g[r * (ca + cb) + off + j];
                }
                return;
            }
            case Op::kSlice: {
                if (!wants_grad(n.args[0])) return;
                const Shape& xs = shape_of(n.args[0]);
                int cx = xs[xs.rank - 1], cy = n.i1 - n.i0;
                std::int64_t rows = n.value.size() / cy;
                T* dx = gptr(n.args[0]);
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < cy; ++j) dx[r * cx + n.i0 + j] += g[r * cy + j];
                return;
            }
            case Op::kUpsample2x: {
                if (!wants_grad(n.args[0])) return;
                const Shape& xs = shape_of(n.args[0]);
                int B = xs[0], H = xs[1], W = xs[2], C = xs[3];
                T* dx = gptr(n.args[0]);
                for (int b = 0; b < B; ++b)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) {
                            T* dst = dx + ((static_cast<std::int64_t>(b) * H + h) * W + w) * C;
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dxx = 0; dxx < 2; ++dxx) {
                                    const T* src =
                                        g + ((static_cast<std::int64_t>(b) * 2 * H + 2 * h + dy) * 2 * W + 2 * w + dxx) * C;
                                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                                }
                        }
                return;
            }
            case Op::kAdd:
            case Op::kAddWeighted: {
                T wa = n.op == Op::kAdd ? T(1) : static_cast<T>(n.f0);
                T wb = n.op == Op::kAdd ? T(1) : static_cast<T>(n.f1);
                std::int64_t c = n.value.size();
                if (wants_grad(n.args[0])) {
                    T* da = gptr(n.args[0]);
                    for (std::int64_t i = 0; i < c; ++i) da[i] += wa * g[i];
                }
                if (wants_grad(n.args[1])) {
                    T* db = gptr(n.args[1]);
                    for (std::int64_t i = 0; i < c; ++i) db[i] += wb * g[i];
                }
                return;
            }
            case Op::kScale: {
                if (!wants_grad(n.args[0])) return;
                T* dx = gptr(n.args[0]);
                T c = static_cast<T>(n.f0);
                std::int64_t cnt = n.value.size();
                for (std::int64_t i = 0; i < cnt; ++i) dx[i] += c * g[i];
                return;
            }
            case Op::kFlatten: {
                if (!wants_grad(n.args[0])) return;
                T* dx = gptr(n.args[0]);
                std::int64_t c = n.value.size();
                for (std::int64_t i = 0; i < c; ++i) dx[i] += g[i];
                return;
            }
            case Op::kMulRows: {
                if (!wants_grad(n.args[0])) return;
                const Shape& xs = shape_of(n.args[0]);
                std::int64_t B = xs[0], F = n.value.size() / xs[0];
                const T* m = vptr(n.args[1]);
                T* dx = gptr(n.args[0]);
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t f = 0; f < F; ++f) dx[b * F + f] += g[b * F + f] * m[b];
                return;
            }
            case Op::kLstm:
                return bwd_lstm(n);
            case Op::kEpeSum: {
                if (!wants_grad(n.args[0])) return;
                const T* p = vptr(n.args[0]);
                const T* t = vptr(n.args[1]);
                T* dp = gptr(n.args[0]);
                std::int64_t sites = shape_of(n.args[0]).count() / 2;
                double gs = static_cast<double>(g[0]);
                for (std::int64_t i = 0; i < sites; ++i) {
                    double dx = static_cast<double>(p[2 * i] - t[2 * i]);
                    double dy = static_cast<double>(p[2 * i + 1] - t[2 * i + 1]);
                    double nrm = std::sqrt(dx * dx + dy * dy);
                    if (nrm < 1e-12) continue;  // subgradient 0 at the kink
                    dp[2 * i] += static_cast<T>(gs * dx / nrm);
                    dp[2 * i + 1] += static_cast<T>(gs * dy / nrm);
                }
                return;
            }
            case Op::kMseMean: {
                const T* p = vptr(n.args[0]);
                const T* t = vptr(n.args[1]);
                std::int64_t c = shape_of(n.args[0]).count();
                T s = static_cast<T>(2.0 * static_cast<double>(g[0]) / static_cast<double>(c));
                if (wants_grad(n.args[0])) {
                    T* dp = gptr(n.args[0]);
                    for (std::int64_t i = 0; i < c; ++i) dp[i] += s * (p[i] - t[i]);
                }
                if (wants_grad(n.args[1])) {
                    T* dt = gptr(n.args[1]);
                    for (std::int64_t i = 0; i < c; ++i) dt[i] -= s * (p[i] - t[i]);
                }
                return;
            }
            case Op::kSumAll: {
                if (!wants_grad(n.args[0])) return;
                T* dx = gptr(n.args[0]);
                std::int64_t c = shape_of(n.args[0]).count();
                for (std::int64_t i = 0; i < c; ++i) dx[i] += g[0];
                return;
            }
            case Op::kGaussLogProb: {
                const Shape& ms = shape_of(n.args[0]);
                int B = ms[0], D = ms[1];
                const T* mu = vptr(n.args[0]);
                const T* ls = vptr(n.args[1]);
                const T* a = vptr(n.args[2]);
                T* dmu = wants_grad(n.args[0]) ? gptr(n.args[0]) : nullptr;
                T* dls = wants_grad(n.args[1]) ? gptr(n.args[1]) : nullptr;
                for (int b = 0; b < B; ++b) {
                    double gb = static_cast<double>(g[b]);
                    if (gb == 0.0) continue;
                    for (int d = 0; d < D; ++d) {
                        double sd = std::exp(static_cast<double>(ls[d]));
                        double z = (static_cast<double>(a[b * D + d]) - static_cast<double>(mu[b * D + d])) / sd;
                        if (dmu) dmu[b * D + d] += static_cast<T>(gb * z / sd);
                        if (dls) dls[d] += static_cast<T>(gb * (z * z - 1.0));
                    }
                }
                return;
            }
            case Op::kPpoSurrogate: {
                if (!wants_grad(n.args[0])) return;
                int B = shape_of(n.args[0])[0];
                const T* lpn = vptr(n.args[0]);
                const T* lpo = vptr(n.args[1]);
                const T* adv = vptr(n.args[2]);
                T* dlpn = gptr(n.args[0]);
                double eps = n.f0;
                double gs = static_cast<double>(g[0]);
                for (int b = 0; b < B; ++b) {
                    double rho = std::exp(static_cast<double>(lpn[b]) - static_cast<double>(lpo[b]));
                    double a = static_cast<double>(adv[b]);
                    double clipped = std::min(std::max(rho, 1.0 - eps), 1.0 + eps);
                    // unclipped branch selected by min(); elsewhere derivative is 0
                    double drho = (rho * a <= clipped * a) ? a : 0.0;
                    dlpn[b] += static_cast<T>(gs * (-1.0 / B) * drho * rho);
                }
                return;
            }
            case Op::kGaussEntropy: {
                if (!wants_grad(n.args[0])) return;
                int D = shape_of(n.args[0])[0];
                T* dls = gptr(n.args[0]);
                for (int d = 0; d < D; ++d) dls[d] += g[0];
                return;
            }
        }
    }

    // Scatters patch gradients into the (possibly concatenated) source grads.
    void conv_dx_scatter(Node& n, int sample, const T* dpatches) {
        const ConvDims& d = n.conv;
        const std::int64_t in_pixels = static_cast<std::int64_t>(d.H) * d.W;
        const int c1 = shape_of(n.args[0])[3];
        T* dx1 = wants_grad(n.args[0]) ? gptr(n.args[0]) + sample * in_pixels * c1 : nullptr;
        T* dx2 = nullptr;
        int c2 = 0;
        if (n.args.size() > 3 && wants_grad(n.args[3])) {
            c2 = shape_of(n.args[3])[3];
            dx2 = gptr(n.args[3]) + sample * in_pixels * c2;
        } else if (n.args.size() > 3) {
            c2 = shape_of(n.args[3])[3];
        }
        const int K = d.patch_len();
        for (int oy = 0; oy < d.OH; ++oy) {
            const int iy0 = oy * d.stride - d.pad;
            for (int ox = 0; ox < d.OW; ++ox) {
                const int ix0 = ox * d.stride - d.pad;
                const T* row = dpatches + (static_cast<std::int64_t>(oy) * d.OW + ox) * K;
                for (int ky = 0; ky < d.kh; ++ky) {
                    const int iy = iy0 + ky;
                    if (iy < 0 || iy >= d.H) continue;
                    for (int kx = 0; kx < d.kw; ++kx) {
                        const int ix = ix0 + kx;
                        if (ix < 0 || ix >= d.W) continue;
                        const T* src = row + (static_cast<std::int64_t>(ky) * d.kw + kx) * d.C;
                        std::int64_t off = static_cast<std::int64_t>(iy) * d.W + ix;
                        if (dx1)
                            for (int c = 0; c < c1; ++c) dx1[off * c1 + c] += src[c];
                        if (dx2)
                            for (int c = 0; c < c2; ++c) dx2[off * c2 + c] += src[c + c1];
                    }
                }
            }
        }
    }

    void bwd_conv(Node& n) {
        const ConvDims& d = n.conv;
        int B = shape_of(n.args[0])[0];
        const T* w = vptr(n.args[1]);
        const T* dy = effective_dy(n);
        const int M = d.out_pixels(), K = d.patch_len(), N = d.Cout;
        const std::int64_t in_pixels = static_cast<std::int64_t>(d.H) * d.W;
        const std::int64_t out_sz = static_cast<std::int64_t>(M) * N;
        bool want_x = wants_grad(n.args[0]) || (n.args.size() > 3 && wants_grad(n.args[3]));
        bool want_w = wants_grad(n.args[1]);
        bool want_b = wants_grad(n.args[2]);
        if (want_b) {
            T* db = gptr(n.args[2]);
            for (int b = 0; b < B; ++b) {
                const T* dyb = dy + b * out_sz;
                for (int m = 0; m < M; ++m)
                    for (int c = 0; c < N; ++c) db[c] += dyb[static_cast<std::int64_t>(m) * N + c];
            }
        }
        std::vector<T> wt;
        if (want_x) {  // W^T [Cout x K]
            wt.resize(static_cast<std::size_t>(N) * K);
            for (int k = 0; k < K; ++k)
                for (int c = 0; c < N; ++c) wt[static_cast<std::size_t>(c) * K + k] = w[static_cast<std::int64_t>(k) * N + c];
        }
        std::vector<T> dpatches;
        if (want_x) dpatches.resize(static_cast<std::size_t>(M) * K);
        for (int b = 0; b < B; ++b) {
            const T* dyb = dy + b * out_sz;
            if (want_w) {
                im2col_src(conv_src(n, b, in_pixels), d, n.s0.data());
                gemm(n.s0.data(), K, dyb, N, gptr(n.args[1]), N, K, N, M, true, true, pool);
            }
            if (want_x) {
                gemm(dyb, N, wt.data(), K, dpatches.data(), K, M, K, N, false, false, pool);
                conv_dx_scatter(n, b, dpatches.data());
            }
        }
    }

    void bwd_tconv(Node& n) {
        const TConvDims& d = n.tconv;
        int B = shape_of(n.args[0])[0];
        const T* dy = effective_dy(n);
        const int M = d.H * d.W;
        const int NG = 16 * d.Cout;
        const std::int64_t in_pixels = static_cast<std::int64_t>(M);
        const std::int64_t out_sz = static_cast<std::int64_t>(d.OH) * d.OW * d.Cout;
        const int c1 = shape_of(n.args[0])[3];
        const int c2 = n.args.size() > 3 ? shape_of(n.args[3])[3] : 0;
        bool want_x1 = wants_grad(n.args[0]);
        bool want_x2 = n.args.size() > 3 && wants_grad(n.args[3]);
        bool want_w = wants_grad(n.args[1]);
        bool want_b = wants_grad(n.args[2]);
        if (want_b) {
            T* db = gptr(n.args[2]);
            for (int b = 0; b < B; ++b) {
                const T* dyb = dy + b * out_sz;
                for (std::int64_t px = 0; px < static_cast<std::int64_t>(d.OH) * d.OW; ++px)
                    for (int c = 0; c < d.Cout; ++c) db[c] += dyb[px * d.Cout + c];
            }
        }
        std::vector<T> wmt;  // Wm^T [16*Cout x Cin]
        if (want_x1 || want_x2) {
            const T* w = vptr(n.args[1]);
            wmt.resize(static_cast<std::size_t>(NG) * d.Cin);
            for (int t = 0; t < 16; ++t)
                for (int ci = 0; ci < d.Cin; ++ci)
                    for (int co = 0; co < d.Cout; ++co)
                        wmt[static_cast<std::size_t>(t * d.Cout + co) * d.Cin + ci] =
                            w[(static_cast<std::int64_t>(t) * d.Cin + ci) * d.Cout + co];
        }
        std::vector<T> dwm;
        if (want_w) dwm.assign(static_cast<std::size_t>(d.Cin) * NG, T(0));
        std::vector<T> xcat, dxrows;
        for (int b = 0; b < B; ++b) {
            tconv_gather(dy + b * out_sz, d, n.s0.data());  // dG [M x NG]
            if (want_w) {
                ConvSrc src = conv_src(n, b, in_pixels);
                const T* xb = src.x1;
                if (src.x2) {
                    xcat.resize(static_cast<std::size_t>(M) * d.Cin);
                    for (int m = 0; m < M; ++m) {
                        std::memcpy(xcat.data() + static_cast<std::int64_t>(m) * d.Cin,
                                    src.x1 + static_cast<std::int64_t>(m) * src.c1, sizeof(T) * static_cast<std::size_t>(src.c1));
                        std::memcpy(xcat.data() + static_cast<std::int64_t>(m) * d.Cin + src.c1,
                                    src.x2 + static_cast<std::int64_t>(m) * src.c2, sizeof(T) * static_cast<std::size_t>(src.c2));
                    }
                    xb = xcat.data();
                }
                gemm(xb, d.Cin, n.s0.data(), NG, dwm.data(), NG, d.Cin, NG, M, true, true, pool);
            }
            if (want_x1 || want_x2) {
                dxrows.resize(static_cast<std::size_t>(M) * d.Cin);
                gemm(n.s0.data(), NG, wmt.data(), d.Cin, dxrows.data(), d.Cin, M, d.Cin, NG, false, false, pool);
                if (want_x1) {
                    T* dx1 = gptr(n.args[0]) + static_cast<std::int64_t>(b) * M * c1;
                    for (int m = 0; m < M; ++m)
                        for (int c = 0; c < c1; ++c) dx1[static_cast<std::int64_t>(m) * c1 + c] += dxrows[static_cast<std::size_t>(m) * d.Cin + c];
                }
                if (want_x2) {
                    T* dx2 = gptr(n.args[3]) + static_cast<std::int64_t>(b) * M * c2;
                    for (int m = 0; m < M; ++m)
                        for (int c = 0; c < c2; ++c) dx2[static_cast<std::int64_t>(m) * c2 + c] += dxrows[static_cast<std::size_t>(m) * d.Cin + c1 + c];
                }
            }
        }
        if (want_w) {
            T* dw = gptr(n.args[1]);
            for (int t = 0; t < 16; ++t)
                for (int ci = 0; ci < d.Cin; ++ci)
                    for (int co = 0; co < d.Cout; ++co)
                        dw[(static_cast<std::int64_t>(t) * d.Cin + ci) * d.Cout + co] +=
                            dwm[static_cast<std::size_t>(ci) * NG + t * d.Cout + co];
        }
    }

    void bwd_fc(Node& n) {
        const Shape& xs = shape_of(n.args[0]);
        int B = xs[0], F = xs[1], G = n.shape[1];
        const T* x = vptr(n.args[0]);
        const T* dy = effective_dy(n);
        if (wants_grad(n.args[2])) {
            T* db = gptr(n.args[2]);
            for (int b = 0; b < B; ++b)
                for (int j = 0; j < G; ++j) db[j] += dy[static_cast<std::int64_t>(b) * G + j];
        }
        if (wants_grad(n.args[1]))
            gemm(x, F, dy, G, gptr(n.args[1]), G, F, G, B, true, true, pool);
        if (wants_grad(n.args[0])) {
            const T* w = vptr(n.args[1]);
            std::vector<T> wt(static_cast<std::size_t>(G) * F);
            for (int f = 0; f < F; ++f)
                for (int j = 0; j < G; ++j) wt[static_cast<std::size_t>(j) * F + f] = w[static_cast<std::int64_t>(f) * G + j];
            gemm(dy, G, wt.data(), F, gptr(n.args[0]), F, B, F, G, false, true, pool);
        }
    }

    void bwd_lstm(Node& n) {
        const Shape& xs = shape_of(n.args[0]);
        int B = xs[0], F = xs[1], H = shape_of(n.args[1])[1];
        const T* x = vptr(n.args[0]);
        const T* h = vptr(n.args[1]);
        const T* c = vptr(n.args[2]);
        const T* gates = n.s0.data();
        const T* tc = n.s1.data();
        const T* g = n.grad.ptr();
        std::vector<T> dz(static_cast<std::size_t>(B) * 4 * H);
        T* dc_in = wants_grad(n.args[2]) ? gptr(n.args[2]) : nullptr;
        for (int b = 0; b < B; ++b) {
            const T* gb = gates + static_cast<std::int64_t>(b) * 4 * H;
            T* dzb = dz.data() + static_cast<std::int64_t>(b) * 4 * H;
            for (int j = 0; j < H; ++j) {
                T dh = g[static_cast<std::int64_t>(b) * 2 * H + j];
                T dcn = g[static_cast<std::int64_t>(b) * 2 * H + H + j];
                T i_g = gb[j], f_g = gb[H + j], g_g = gb[2 * H + j], o_g = gb[3 * H + j];
                T th = tc[static_cast<std::int64_t>(b) * H + j];
                T d_c = dcn + dh * o_g * (T(1) - th * th);
                T d_o = dh * th;
                T d_f = d_c * c[static_cast<std::int64_t>(b) * H + j];
                T d_i = d_c * g_g;
                T d_g = d_c * i_g;
                dzb[j] = d_i * i_g * (T(1) - i_g);
                dzb[H + j] = d_f * f_g * (T(1) - f_g);
                dzb[2 * H + j] = d_g * (T(1) - g_g * g_g);
                dzb[3 * H + j] = d_o * o_g * (T(1) - o_g);
                if (dc_in) dc_in[static_cast<std::int64_t>(b) * H + j] += d_c * f_g;
            }
        }
        if (wants_grad(n.args[5])) {
            T* db = gptr(n.args[5]);
            for (int b = 0; b < B; ++b)
                for (int j = 0; j < 4 * H; ++j) db[j] += dz[static_cast<std::size_t>(b) * 4 * H + j];
        }
        if (wants_grad(n.args[3])) gemm(x, F, dz.data(), 4 * H, gptr(n.args[3]), 4 * H, F, 4 * H, B, true, true, pool);
        if (wants_grad(n.args[4])) gemm(h, H, dz.data(), 4 * H, gptr(n.args[4]), 4 * H, H, 4 * H, B, true, true, pool);
        if (wants_grad(n.args[0])) {
            const T* wih = vptr(n.args[3]);
            std::vector<T> wt(static_cast<std::size_t>(4 * H) * F);
            for (int f = 0; f < F; ++f)
                for (int j = 0; j < 4 * H; ++j)
                    wt[static_cast<std::size_t>(j) * F + f] = wih[static_cast<std::int64_t>(f) * 4 * H + j];
            gemm(dz.data(), 4 * H, wt.data(), F, gptr(n.args[0]), F, B, F, 4 * H, false, true, pool);
        }
        if (wants_grad(n.args[1])) {
            const T* whh = vptr(n.args[4]);
            std::vector<T> wt(static_cast<std::size_t>(4 * H) * H);
            for (int f = 0; f < H; ++f)
                for (int j = 0; j < 4 * H; ++j)
                    wt[static_cast<std::size_t>(j) * H + f] = whh[static_cast<std::int64_t>(f) * 4 * H + j];
            gemm(dz.data(), 4 * H, wt.data(), H, gptr(n.args[1]), H, B, H, 4 * H, false, true, pool);
        }
    }

    std::vector<Node> nodes_;
    std::vector<std::uint8_t> active_;
    std::vector<std::pair<Tensor<T>*, Id>> trainable_;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace flowbench::nn
