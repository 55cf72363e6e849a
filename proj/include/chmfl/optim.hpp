#pragma once

#include <limits>
#include <random>

#include "chmfl/network.hpp"
#include "chmfl/nn.hpp"
#include "chmfl/preprocess.hpp"
#include "chmfl/tensor.hpp"

namespace chmfl {

struct TrainingConfig {
    double w = 0.5;  // CFL weight in [0,1]
    double learning_rate = 1e-4;
    std::size_t batch_size = 1;
    std::size_t max_epochs = 200;
    std::size_t plateau_patience = 10;
    double plateau_epsilon = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const {
        if (w < 0 || w > 1) throw std::invalid_argument("training config: w outside [0,1]");
        if (learning_rate <= 0)
            throw std::invalid_argument("training config: learning_rate must be > 0");
    }
};

// ---------------------------------------------------------------------------
// cross-entropy and the dual-task loss
// ---------------------------------------------------------------------------

/// Softmax cross-entropy against a target probability tensor of the same
/// shape, reduced along `axis` per position; positions are averaged when
/// `average` is set, summed otherwise. Predicted probabilities are clamped
/// below at 1e-12.
template <typename T>
TensorPtr<T> cross_entropy_with_softmax(const TensorPtr<T>& logits,
                                        const TensorPtr<T>& target, std::size_t axis,
                                        bool average, Tape<T>* tape = nullptr) {
    check_same_shape(logits, target, "cross_entropy_with_softmax");
    const std::size_t A = logits->shape[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= logits->shape[d];
    for (std::size_t d = axis + 1; d < logits->shape.size(); ++d) inner *= logits->shape[d];
    const std::size_t positions = outer * inner;
    const T clamp_cap = (T)(-std::log(1e-12));

    T total = T(0);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * A * inner + in;
            T mx = logits->data[base];
            for (std::size_t a = 1; a < A; ++a)
                mx = std::max(mx, logits->data[base + a * inner]);
            T z = T(0);
            for (std::size_t a = 0; a < A; ++a)
                z += std::exp(logits->data[base + a * inner] - mx);
            const T lse = mx + std::log(z);
            for (std::size_t a = 0; a < A; ++a) {
                const T p = target->data[base + a * inner];
                if (p == T(0)) continue;
                const T nll = std::min(lse - logits->data[base + a * inner], clamp_cap);
                total += p * nll;
            }
        }
    if (average) total /= (T)positions;
    auto out = Tensor<T>::scalar(total);

    if (detail::wants_grad(tape, {&logits})) {
        detail::mark_output(tape, out);
        tape->record([logits, target, out, A, outer, inner, average, positions] {
            logits->ensure_grad();
            const T scale = out->grad[0] * (average ? T(1) / (T)positions : T(1));
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * A * inner + in;
                    T mx = logits->data[base];
                    for (std::size_t a = 1; a < A; ++a)
                        mx = std::max(mx, logits->data[base + a * inner]);
                    T z = T(0);
                    for (std::size_t a = 0; a < A; ++a)
                        z += std::exp(logits->data[base + a * inner] - mx);
                    T psum = T(0);
                    for (std::size_t a = 0; a < A; ++a) psum += target->data[base + a * inner];
                    for (std::size_t a = 0; a < A; ++a) {
                        const T q = std::exp(logits->data[base + a * inner] - mx) / z;
                        logits->grad[base + a * inner] +=
                            scale * (q * psum - target->data[base + a * inner]);
                    }
                }
        });
    }
    return out;
}

/// Two-class target probabilities [1,2,D,H,W] from a binary mask [1,1,D,H,W].
template <typename T>
TensorPtr<T> seg_target_from_mask(const TensorPtr<T>& mask) {
    if (mask->shape.size() != 5 || mask->shape[1] != 1)
        throw std::invalid_argument("seg_target_from_mask: expected [1,1,D,H,W]");
    std::vector<std::size_t> shape = mask->shape;
    shape[1] = 2;
    auto t = Tensor<T>::zeros(shape);
    const std::size_t n = mask->size();
    for (std::size_t i = 0; i < n; ++i) {
        const T m = mask->data[i];
        if (m != T(0) && m != T(1))
            throw std::invalid_argument("seg_target_from_mask: mask must be binary");
        t->data[i] = T(1) - m;  // class 0 (background)
        t->data[n + i] = m;     // class 1 (tumor)
    }
    return t;
}

/// L = (1-w) * CE_cls + w * CE_seg, the segmentation term averaged over voxels.
template <typename T>
TensorPtr<T> total_loss(const TensorPtr<T>& dm_logits, const TensorPtr<T>& dm_target,
                        const TensorPtr<T>& seg_logits, const TensorPtr<T>& seg_target,
                        double w, Tape<T>* tape = nullptr,
                        T* cls_out = nullptr, T* seg_out = nullptr) {
    if (w < 0 || w > 1) throw std::invalid_argument("total_loss: w outside [0,1]");
    auto ce_cls = cross_entropy_with_softmax(dm_logits, dm_target, 1, true, tape);
    auto ce_seg = cross_entropy_with_softmax(seg_logits, seg_target, 1, true, tape);
    if (cls_out) *cls_out = ce_cls->data[0];
    if (seg_out) *seg_out = ce_seg->data[0];
    return add(scale(ce_cls, (T)(1.0 - w), tape), scale(ce_seg, (T)w, tape), tape);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
    struct Moments {
        std::vector<T> m;
        std::vector<T> v;
    };
    std::map<std::string, Moments> moments;
    std::size_t t = 0;
};

/// One Adam update over every trainable parameter; consumes the gradients
/// currently held in the parameter tensors.
template <typename T>
void adam_step(ModelParams<T>& params, AdamState<T>& state, const TrainingConfig& cfg) {
    state.t += 1;
    const T b1 = (T)cfg.adam_beta1, b2 = (T)cfg.adam_beta2;
    const T corr1 = T(1) - (T)std::pow(cfg.adam_beta1, (double)state.t);
    const T corr2 = T(1) - (T)std::pow(cfg.adam_beta2, (double)state.t);
    const T lr = (T)cfg.learning_rate, eps = (T)cfg.adam_eps;
    for (auto& [name, p] : params) {
        if (!p->requires_grad) continue;
        if (p->grad.empty())
            throw std::runtime_error("adam_step: missing gradient for " + name);
        auto& mom = state.moments[name];
        if (mom.m.empty()) {
            mom.m.assign(p->size(), T(0));
            mom.v.assign(p->size(), T(0));
        }
        for (std::size_t i = 0; i < p->size(); ++i) {
            const T g = p->grad[i];
            mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * g;
            mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * g * g;
            const T mhat = mom.m[i] / corr1;
            const T vhat = mom.v[i] / corr2;
            p->data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// A preprocessed patient lifted into network tensors.
template <typename T>
struct TrainingExample {
    std::string id;
    TensorPtr<T> pet;         // [1,1,D,H,W]
    TensorPtr<T> ct;          // [1,1,D,H,W]
    TensorPtr<T> mask;        // [1,1,D,H,W], binary
    TensorPtr<T> seg_target;  // [1,2,D,H,W]
    TensorPtr<T> dm_target;   // [1,2] one-hot
    int label = 0;
};

template <typename T>
TrainingExample<T> make_example(const PatientRecord& r) {
    TrainingExample<T> ex;
    ex.id = r.id;
    ex.label = r.dm_label;
    ex.pet = volume_to_tensor<T>(r.pet);
    ex.ct = volume_to_tensor<T>(r.ct);
    ex.mask = volume_to_tensor<T>(r.mask);
    ex.seg_target = seg_target_from_mask(ex.mask);
    ex.dm_target = Tensor<T>::zeros({1, 2});
    ex.dm_target->data[(std::size_t)r.dm_label] = T(1);
    return ex;
}

struct EpochStats {
    std::size_t epoch = 0;
    double mean_loss = 0;
    double mean_cls_loss = 0;
    double mean_seg_loss = 0;
};

/// Batch-size-1 training with seeded shuffling and plateau termination.
/// On return `params` holds the parameters of the best-loss epoch.
template <typename T>
std::vector<EpochStats> train(ModelParams<T>& params, const NetworkConfig& net_cfg,
                              const std::vector<TrainingExample<T>>& dataset,
                              const TrainingConfig& cfg) {
    cfg.validate();
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    std::mt19937_64 rng(cfg.seed);
    AdamState<T> adam;
    std::vector<EpochStats> history;
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);

    double best_loss = std::numeric_limits<double>::infinity();
    ModelParams<T> best_params;
    std::size_t epochs_since_improve = 0;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double sum_loss = 0, sum_cls = 0, sum_seg = 0;
        for (std::size_t idx : order) {
            const auto& ex = dataset[idx];
            Tape<T> tape;
            auto out = forward(params, net_cfg, ex.pet, ex.ct, true, rng, &tape);
            T cls = 0, seg = 0;
            auto loss = total_loss(out.dm_logits, ex.dm_target, out.seg_logits,
                                   ex.seg_target, cfg.w, &tape, &cls, &seg);
            for (auto& [name, p] : params)
                if (p->requires_grad) {
                    // allocate up front: a parameter can legitimately receive
                    // no gradient this step (e.g. all its relu units are dead)
                    p->ensure_grad();
                    p->zero_grad();
                }
            backward(loss, tape);
            adam_step(params, adam, cfg);
            sum_loss += (double)loss->data[0];
            sum_cls += (double)cls;
            sum_seg += (double)seg;
        }
        EpochStats st;
        st.epoch = epoch;
        st.mean_loss = sum_loss / (double)dataset.size();
        st.mean_cls_loss = sum_cls / (double)dataset.size();
        st.mean_seg_loss = sum_seg / (double)dataset.size();
        history.push_back(st);

        if (best_loss - st.mean_loss > cfg.plateau_epsilon) {
            best_loss = st.mean_loss;
            best_params.clear();
            for (const auto& [name, p] : params) best_params.emplace(name, p->clone());
            epochs_since_improve = 0;
        } else {
            ++epochs_since_improve;
        }
        if (epochs_since_improve >= cfg.plateau_patience) break;
    }

    if (!best_params.empty())
        for (auto& [name, p] : params) p->data = best_params.at(name)->data;
    return history;
}

}  // namespace chmfl
