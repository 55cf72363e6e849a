#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace chmfl {

/// Dense N-dimensional row-major tensor with optional participation in
/// reverse-mode automatic differentiation. Gradients accumulate into `grad`
/// when a Tape records the operations that produced the tensor.
template <typename T>
class Tensor {
public:
    std::vector<std::size_t> shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // empty until first touched by backward()

    using Ptr = std::shared_ptr<Tensor<T>>;

    Tensor() = default;

    Tensor(std::vector<std::size_t> shape_, T fill = T(0), bool rg = false)
        : shape(std::move(shape_)),
          data(count(shape), fill),
          requires_grad(rg) {}

    Tensor(std::vector<std::size_t> shape_, std::vector<T> data_, bool rg = false)
        : shape(std::move(shape_)), data(std::move(data_)), requires_grad(rg) {
        if (count(shape) != data.size())
            throw std::invalid_argument("tensor: shape does not match data length");
    }

    static Ptr create(std::vector<std::size_t> shape, std::vector<T> data, bool rg = false) {
        return std::make_shared<Tensor<T>>(std::move(shape), std::move(data), rg);
    }
    static Ptr zeros(std::vector<std::size_t> shape, bool rg = false) {
        return std::make_shared<Tensor<T>>(std::move(shape), T(0), rg);
    }
    static Ptr ones(std::vector<std::size_t> shape, bool rg = false) {
        return std::make_shared<Tensor<T>>(std::move(shape), T(1), rg);
    }
    static Ptr full(std::vector<std::size_t> shape, T v, bool rg = false) {
        return std::make_shared<Tensor<T>>(std::move(shape), v, rg);
    }
    static Ptr scalar(T v, bool rg = false) {
        return create({1}, {v}, rg);
    }

    std::size_t size() const { return data.size(); }
    bool is_scalar() const { return data.size() == 1; }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t e : s) {
            if (e == 0) throw std::invalid_argument("tensor: zero extent");
            n *= e;
        }
        return n;
    }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }

    /// Deep copy of shape/data (grad not copied).
    Ptr clone() const {
        auto t = create(shape, data, requires_grad);
        return t;
    }

    bool has_nonfinite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return true;
        return false;
    }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

/// Records the backward rule of each operation in execution order.
/// backward() replays them in reverse, accumulating gradients into every
/// reachable tensor that requires them. One tape per forward pass.
template <typename T>
class Tape {
public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    std::size_t size() const { return nodes_.size(); }
    void clear() {
        nodes_.clear();
        outputs_.clear();
    }

    void replay_reverse() const {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    /// Registers an op output so backward() can reset its gradient buffer
    /// before each replay; leaf tensors are never registered and therefore
    /// accumulate across repeated backward() calls.
    void note_output(const TensorPtr<T>& t) { outputs_.push_back(t); }
    const std::vector<TensorPtr<T>>& outputs() const { return outputs_; }

private:
    std::vector<std::function<void()>> nodes_;
    std::vector<TensorPtr<T>> outputs_;
};

namespace detail {

template <typename T>
bool wants_grad(Tape<T>* tape, std::initializer_list<const TensorPtr<T>*> inputs) {
    if (!tape) return false;
    for (const auto* p : inputs)
        if (*p && (*p)->requires_grad) return true;
    return false;
}

template <typename T>
void mark_output(Tape<T>* tape, const TensorPtr<T>& out) {
    out->requires_grad = true;
    out->ensure_grad();
    tape->note_output(out);
}

inline std::vector<std::size_t> strides_of(const std::vector<std::size_t>& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;)
        s[i - 1] = s[i] * shape[i];
    return s;
}

}  // namespace detail

template <typename T>
void check_same_shape(const TensorPtr<T>& a, const TensorPtr<T>& b, const char* op) {
    if (a->shape != b->shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

// ---------------------------------------------------------------------------
// elementwise operations
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b, Tape<T>* tape = nullptr) {
    // scalar-with-tensor is the only allowed broadcast
    if (a->shape != b->shape && !a->is_scalar() && !b->is_scalar())
        throw std::invalid_argument("add: shape mismatch");
    const bool a_sc = a->is_scalar() && !b->is_scalar();
    const bool b_sc = b->is_scalar() && !a->is_scalar();
    auto out = Tensor<T>::zeros(a_sc ? b->shape : a->shape);
    const std::size_t n = out->size();
    for (std::size_t i = 0; i < n; ++i)
        out->data[i] = a->data[a_sc ? 0 : i] + b->data[b_sc ? 0 : i];
    if (detail::wants_grad(tape, {&a, &b})) {
        detail::mark_output(tape, out);
        tape->record([a, b, out, a_sc, b_sc, n] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) a->grad[a_sc ? 0 : i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) b->grad[b_sc ? 0 : i] += out->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b, Tape<T>* tape = nullptr) {
    if (a->shape != b->shape && !a->is_scalar() && !b->is_scalar())
        throw std::invalid_argument("mul: shape mismatch");
    const bool a_sc = a->is_scalar() && !b->is_scalar();
    const bool b_sc = b->is_scalar() && !a->is_scalar();
    auto out = Tensor<T>::zeros(a_sc ? b->shape : a->shape);
    const std::size_t n = out->size();
    for (std::size_t i = 0; i < n; ++i)
        out->data[i] = a->data[a_sc ? 0 : i] * b->data[b_sc ? 0 : i];
    if (detail::wants_grad(tape, {&a, &b})) {
        detail::mark_output(tape, out);
        tape->record([a, b, out, a_sc, b_sc, n] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    a->grad[a_sc ? 0 : i] += out->grad[i] * b->data[b_sc ? 0 : i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    b->grad[b_sc ? 0 : i] += out->grad[i] * a->data[a_sc ? 0 : i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> neg(const TensorPtr<T>& a, Tape<T>* tape = nullptr) {
    auto out = Tensor<T>::zeros(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->data[i] = -a->data[i];
    if (detail::wants_grad(tape, {&a})) {
        detail::mark_output(tape, out);
        tape->record([a, out] {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] -= out->grad[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> sub(const TensorPtr<T>& a, const TensorPtr<T>& b, Tape<T>* tape = nullptr) {
    return add(a, neg(b, tape), tape);
}

template <typename T>
TensorPtr<T> log(const TensorPtr<T>& a, Tape<T>* tape = nullptr) {
    auto out = Tensor<T>::zeros(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) {
        if (a->data[i] <= T(0))
            throw std::domain_error("log: non-positive input");
        out->data[i] = std::log(a->data[i]);
    }
    if (detail::wants_grad(tape, {&a})) {
        detail::mark_output(tape, out);
        tape->record([a, out] {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->size(); ++i)
                a->grad[i] += out->grad[i] / a->data[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> exp(const TensorPtr<T>& a, Tape<T>* tape = nullptr) {
    auto out = Tensor<T>::zeros(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->data[i] = std::exp(a->data[i]);
    if (detail::wants_grad(tape, {&a})) {
        detail::mark_output(tape, out);
        tape->record([a, out] {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->size(); ++i)
                a->grad[i] += out->grad[i] * out->data[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& a, T s, Tape<T>* tape = nullptr) {
    auto out = Tensor<T>::zeros(a->shape);
    for (std::size_t i = 0; i < a->size(); ++i) out->data[i] = a->data[i] * s;
    if (detail::wants_grad(tape, {&a})) {
        detail::mark_output(tape, out);
        tape->record([a, out, s] {
            a->ensure_grad();
            for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i] * s;
        });
    }
    return out;
}

/// Reduce to a scalar by summation.
template <typename T>
TensorPtr<T> sum(const TensorPtr<T>& a, Tape<T>* tape = nullptr) {
    T acc = T(0);
    for (T v : a->data) acc += v;
    auto out = Tensor<T>::scalar(acc);
    if (detail::wants_grad(tape, {&a})) {
        detail::mark_output(tape, out);
        tape->record([a, out] {
            a->ensure_grad();
            const T g = out->grad[0];
            for (std::size_t i = 0; i < a->size(); ++i) a->grad[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b, Tape<T>* tape = nullptr) {
    if (a->shape.size() != 2 || b->shape.size() != 2)
        throw std::invalid_argument("matmul: rank-2 tensors required");
    const std::size_t m = a->shape[0], k = a->shape[1];
    if (b->shape[0] != k)
        throw std::invalid_argument("matmul: inner dimensions disagree");
    const std::size_t n = b->shape[1];
    auto out = Tensor<T>::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a->data[i * k + p];
            const T* brow = &b->data[p * n];
            T* orow = &out->data[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    if (detail::wants_grad(tape, {&a, &b})) {
        detail::mark_output(tape, out);
        tape->record([a, b, out, m, k, n] {
            if (a->requires_grad) {
                a->ensure_grad();  // dA = dC * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        T acc = T(0);
                        const T* grow = &out->grad[i * n];
                        const T* brow = &b->data[p * n];
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        a->grad[i * k + p] += acc;
                    }
            }
            if (b->requires_grad) {
                b->ensure_grad();  // dB = A^T * dC
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t i = 0; i < m; ++i) {
                        const T av = a->data[i * k + p];
                        const T* grow = &out->grad[i * n];
                        T* brow = &b->grad[p * n];
                        for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// concat / narrow
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> concat(const std::vector<TensorPtr<T>>& ts, std::size_t axis,
                    Tape<T>* tape = nullptr) {
    if (ts.empty()) throw std::invalid_argument("concat: no inputs");
    const auto& ref = ts.front()->shape;
    if (axis >= ref.size()) throw std::invalid_argument("concat: axis out of range");
    std::size_t axis_total = 0;
    for (const auto& t : ts) {
        if (t->shape.size() != ref.size())
            throw std::invalid_argument("concat: rank mismatch");
        for (std::size_t d = 0; d < ref.size(); ++d)
            if (d != axis && t->shape[d] != ref[d])
                throw std::invalid_argument("concat: incompatible shapes");
        axis_total += t->shape[axis];
    }
    std::vector<std::size_t> out_shape = ref;
    out_shape[axis] = axis_total;
    auto out = Tensor<T>::zeros(out_shape);

    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
    for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];

    std::size_t offset = 0;  // offset along axis in the output
    for (const auto& t : ts) {
        const std::size_t len = t->shape[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(&t->data[o * len], len,
                        &out->data[o * axis_total * inner + offset * inner]);
        offset += t->shape[axis];
    }

    bool rg = false;
    for (const auto& t : ts)
        if (t->requires_grad) rg = true;
    if (tape && rg) {
        detail::mark_output(tape, out);
        tape->record([ts, out, axis_total, outer, inner, axis] {
            std::size_t off = 0;
            for (const auto& t : ts) {
                const std::size_t len = t->shape[axis] * inner;
                if (t->requires_grad) {
                    t->ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const T* src = &out->grad[o * axis_total * inner + off * inner];
                        T* dst = &t->grad[o * len];
                        for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                    }
                }
                off += t->shape[axis];
            }
        });
    }
    return out;
}

/// Slice `len` extents starting at `start` along `axis` (no gradient).
template <typename T>
TensorPtr<T> narrow(const TensorPtr<T>& t, std::size_t axis, std::size_t start,
                    std::size_t len) {
    if (axis >= t->shape.size()) throw std::invalid_argument("narrow: axis out of range");
    if (start + len > t->shape[axis]) throw std::invalid_argument("narrow: range out of bounds");
    std::vector<std::size_t> out_shape = t->shape;
    out_shape[axis] = len;
    auto out = Tensor<T>::zeros(out_shape);
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= t->shape[d];
    for (std::size_t d = axis + 1; d < t->shape.size(); ++d) inner *= t->shape[d];
    const std::size_t src_len = t->shape[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(&t->data[o * src_len + start * inner], len * inner,
                    &out->data[o * len * inner]);
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Seeds the scalar root with gradient 1 and replays the tape in reverse.
/// Intermediate (op-output) gradients are reset per call, so leaf gradients
/// accumulate exactly one contribution per backward() invocation.
template <typename T>
void backward(const TensorPtr<T>& root, Tape<T>& tape) {
    if (!root->is_scalar())
        throw std::invalid_argument("backward: root must be scalar");
    for (const auto& o : tape.outputs()) o->zero_grad();
    root->ensure_grad();
    root->grad[0] += T(1);
    tape.replay_reverse();
}

}  // namespace chmfl
