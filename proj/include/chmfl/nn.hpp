#pragma once

#include <array>
#include <cstdint>
#include <random>

#include "chmfl/tensor.hpp"

namespace chmfl {

/// Parameters of a (transposed) 3D convolution. `weight` is laid out
/// [out_ch][in_ch][I][J][K]; stride/padding are per spatial axis (D,H,W).
template <typename T>
struct Conv3dParams {
    TensorPtr<T> weight;
    TensorPtr<T> bias;
    std::array<std::size_t, 3> stride{1, 1, 1};
    std::array<std::size_t, 3> padding{0, 0, 0};
};

template <typename T>
struct BatchNormParams {
    TensorPtr<T> gamma;
    TensorPtr<T> beta;
    TensorPtr<T> running_mean;
    TensorPtr<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);
};

namespace detail {

using idx = std::ptrdiff_t;

// Valid output range [lo, hi) such that in = out*stride + k - pad lies in [0, n_in).
inline void conv_range(idx k, idx pad, idx stride, idx n_in, idx n_out, idx& lo, idx& hi) {
    idx off = k - pad;
    lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
    hi = off >= n_in ? 0 : (n_in - 1 - off) / stride + 1;
    lo = std::min(lo, n_out);
    hi = std::min(hi, n_out);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// 3D convolution (cross-correlation with zero padding)
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> conv3d(const TensorPtr<T>& x, const Conv3dParams<T>& p, Tape<T>* tape = nullptr) {
    using detail::idx;
    if (x->shape.size() != 5) throw std::invalid_argument("conv3d: input must be 5-D");
    const auto& w = p.weight;
    if (w->shape.size() != 5) throw std::invalid_argument("conv3d: weight must be 5-D");
    const idx B = (idx)x->shape[0], C = (idx)x->shape[1];
    const idx D = (idx)x->shape[2], H = (idx)x->shape[3], W = (idx)x->shape[4];
    const idx OC = (idx)w->shape[0], IC = (idx)w->shape[1];
    const idx KD = (idx)w->shape[2], KH = (idx)w->shape[3], KW = (idx)w->shape[4];
    if (IC != C) throw std::invalid_argument("conv3d: channel mismatch");
    if (p.bias->size() != (std::size_t)OC) throw std::invalid_argument("conv3d: bias size mismatch");
    const idx sd = (idx)p.stride[0], sh = (idx)p.stride[1], sw = (idx)p.stride[2];
    const idx pd = (idx)p.padding[0], ph = (idx)p.padding[1], pw = (idx)p.padding[2];
    const idx OD = (D + 2 * pd - KD) / sd + 1;
    const idx OH = (H + 2 * ph - KH) / sh + 1;
    const idx OW = (W + 2 * pw - KW) / sw + 1;
    if (OD < 1 || OH < 1 || OW < 1)
        throw std::invalid_argument("conv3d: non-positive output extent");

    auto out = Tensor<T>::zeros({(std::size_t)B, (std::size_t)OC, (std::size_t)OD,
                                 (std::size_t)OH, (std::size_t)OW});
    const idx in_plane = H * W, in_vol = D * in_plane;
    const idx out_plane = OH * OW, out_vol = OD * out_plane;
    const idx k_vol = KD * KH * KW;

    for (idx b = 0; b < B; ++b) {
        const T* xb = &x->data[(std::size_t)(b * C * in_vol)];
        T* ob = &out->data[(std::size_t)(b * OC * out_vol)];
        for (idx oc = 0; oc < OC; ++oc) {
            T* och = ob + oc * out_vol;
            const T bv = p.bias->data[(std::size_t)oc];
            std::fill(och, och + out_vol, bv);
            for (idx ic = 0; ic < C; ++ic) {
                const T* xch = xb + ic * in_vol;
                const T* wk = &w->data[(std::size_t)((oc * IC + ic) * k_vol)];
                for (idx ki = 0; ki < KD; ++ki)
                    for (idx kj = 0; kj < KH; ++kj)
                        for (idx kk = 0; kk < KW; ++kk) {
                            const T wv = wk[(ki * KH + kj) * KW + kk];
                            idx dlo, dhi, hlo, hhi, wlo, whi;
                            detail::conv_range(ki, pd, sd, D, OD, dlo, dhi);
                            detail::conv_range(kj, ph, sh, H, OH, hlo, hhi);
                            detail::conv_range(kk, pw, sw, W, OW, wlo, whi);
                            for (idx od = dlo; od < dhi; ++od) {
                                const idx id = od * sd + ki - pd;
                                for (idx oh = hlo; oh < hhi; ++oh) {
                                    const idx ih = oh * sh + kj - ph;
                                    const T* xr = xch + id * in_plane + ih * W + (wlo * sw + kk - pw);
                                    T* orow = och + od * out_plane + oh * OW + wlo;
                                    const idx n = whi - wlo;
                                    if (sw == 1) {
                                        for (idx i = 0; i < n; ++i) orow[i] += wv * xr[i];
                                    } else {
                                        for (idx i = 0; i < n; ++i) orow[i] += wv * xr[i * sw];
                                    }
                                }
                            }
                        }
            }
        }
    }

    if (detail::wants_grad(tape, {&x, &p.weight, &p.bias})) {
        detail::mark_output(tape, out);
        auto weight = p.weight;
        auto bias = p.bias;
        auto stride = p.stride;
        auto padding = p.padding;
        tape->record([x, weight, bias, out, stride, padding, B, C, D, H, W, OC, KD, KH, KW,
                      OD, OH, OW, sd, sh, sw, pd, ph, pw, in_plane, in_vol, out_plane,
                      out_vol, k_vol] {
            if (bias->requires_grad) {
                bias->ensure_grad();
                for (idx b = 0; b < B; ++b)
                    for (idx oc = 0; oc < OC; ++oc) {
                        const T* g = &out->grad[(std::size_t)((b * OC + oc) * out_vol)];
                        T acc = T(0);
#pragma omp simd reduction(+ : acc)
                        for (idx i = 0; i < out_vol; ++i) acc += g[i];
                        bias->grad[(std::size_t)oc] += acc;
                    }
            }
            if (weight->requires_grad) {
                weight->ensure_grad();
                for (idx b = 0; b < B; ++b)
                    for (idx oc = 0; oc < OC; ++oc) {
                        const T* g = &out->grad[(std::size_t)((b * OC + oc) * out_vol)];
                        for (idx ic = 0; ic < C; ++ic) {
                            const T* xch = &x->data[(std::size_t)((b * C + ic) * in_vol)];
                            T* gw = &weight->grad[(std::size_t)((oc * C + ic) * k_vol)];
                            for (idx ki = 0; ki < KD; ++ki)
                                for (idx kj = 0; kj < KH; ++kj)
                                    for (idx kk = 0; kk < KW; ++kk) {
                                        idx dlo, dhi, hlo, hhi, wlo, whi;
                                        detail::conv_range(ki, pd, sd, D, OD, dlo, dhi);
                                        detail::conv_range(kj, ph, sh, H, OH, hlo, hhi);
                                        detail::conv_range(kk, pw, sw, W, OW, wlo, whi);
                                        const idx n = whi - wlo;
                                        // accumulate elementwise across rows in a local
                                        // buffer; one horizontal sum per tap instead of
                                        // one per row
                                        constexpr idx BLK = 512;
                                        T acc = T(0);
                                        for (idx c0 = 0; c0 < n; c0 += BLK) {
                                            const idx m = std::min(BLK, n - c0);
                                            T racc[BLK];
                                            for (idx i = 0; i < m; ++i) racc[i] = T(0);
                                            for (idx od = dlo; od < dhi; ++od) {
                                                const idx id = od * sd + ki - pd;
                                                for (idx oh = hlo; oh < hhi; ++oh) {
                                                    const idx ih = oh * sh + kj - ph;
                                                    const T* xr =
                                                        xch + id * in_plane + ih * W +
                                                        ((wlo + c0) * sw + kk - pw);
                                                    const T* gr = g + od * out_plane +
                                                                  oh * OW + wlo + c0;
                                                    if (sw == 1) {
                                                        for (idx i = 0; i < m; ++i)
                                                            racc[i] += gr[i] * xr[i];
                                                    } else {
                                                        for (idx i = 0; i < m; ++i)
                                                            racc[i] += gr[i] * xr[i * sw];
                                                    }
                                                }
                                            }
                                            for (idx i = 0; i < m; ++i) acc += racc[i];
                                        }
                                        gw[(ki * KH + kj) * KW + kk] += acc;
                                    }
                        }
                    }
            }
            if (x->requires_grad) {
                x->ensure_grad();
                for (idx b = 0; b < B; ++b)
                    for (idx ic = 0; ic < C; ++ic) {
                        T* gx = &x->grad[(std::size_t)((b * C + ic) * in_vol)];
                        for (idx oc = 0; oc < OC; ++oc) {
                            const T* g = &out->grad[(std::size_t)((b * OC + oc) * out_vol)];
                            const T* wk = &weight->data[(std::size_t)((oc * C + ic) * k_vol)];
                            for (idx ki = 0; ki < KD; ++ki)
                                for (idx kj = 0; kj < KH; ++kj)
                                    for (idx kk = 0; kk < KW; ++kk) {
                                        const T wv = wk[(ki * KH + kj) * KW + kk];
                                        idx dlo, dhi, hlo, hhi, wlo, whi;
                                        detail::conv_range(ki, pd, sd, D, OD, dlo, dhi);
                                        detail::conv_range(kj, ph, sh, H, OH, hlo, hhi);
                                        detail::conv_range(kk, pw, sw, W, OW, wlo, whi);
                                        for (idx od = dlo; od < dhi; ++od) {
                                            const idx id = od * sd + ki - pd;
                                            for (idx oh = hlo; oh < hhi; ++oh) {
                                                const idx ih = oh * sh + kj - ph;
                                                T* xr = gx + id * in_plane + ih * W +
                                                        (wlo * sw + kk - pw);
                                                const T* gr = g + od * out_plane + oh * OW + wlo;
                                                const idx n = whi - wlo;
                                                if (sw == 1) {
                                                    for (idx i = 0; i < n; ++i)
                                                        xr[i] += wv * gr[i];
                                                } else {
                                                    for (idx i = 0; i < n; ++i)
                                                        xr[i * sw] += wv * gr[i];
                                                }
                                            }
                                        }
                                    }
                        }
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// transposed 3D convolution (adjoint of conv3d's linear map, plus bias)
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> conv_transpose3d(const TensorPtr<T>& x, const Conv3dParams<T>& p,
                              Tape<T>* tape = nullptr) {
    using detail::idx;
    if (x->shape.size() != 5) throw std::invalid_argument("conv_transpose3d: input must be 5-D");
    const auto& w = p.weight;
    const idx B = (idx)x->shape[0], C = (idx)x->shape[1];
    const idx D = (idx)x->shape[2], H = (idx)x->shape[3], W = (idx)x->shape[4];
    const idx OC = (idx)w->shape[0], IC = (idx)w->shape[1];
    const idx KD = (idx)w->shape[2], KH = (idx)w->shape[3], KW = (idx)w->shape[4];
    if (IC != C) throw std::invalid_argument("conv_transpose3d: channel mismatch");
    const idx sd = (idx)p.stride[0], sh = (idx)p.stride[1], sw = (idx)p.stride[2];
    const idx pd = (idx)p.padding[0], ph = (idx)p.padding[1], pw = (idx)p.padding[2];
    const idx OD = (D - 1) * sd + KD - 2 * pd;
    const idx OH = (H - 1) * sh + KH - 2 * ph;
    const idx OW = (W - 1) * sw + KW - 2 * pw;
    if (OD < 1 || OH < 1 || OW < 1)
        throw std::invalid_argument("conv_transpose3d: non-positive output extent");

    auto out = Tensor<T>::zeros({(std::size_t)B, (std::size_t)OC, (std::size_t)OD,
                                 (std::size_t)OH, (std::size_t)OW});
    const idx in_plane = H * W, in_vol = D * in_plane;
    const idx out_plane = OH * OW, out_vol = OD * out_plane;
    const idx k_vol = KD * KH * KW;

    // out position = in*stride + k - pad; the scatter dual of conv3d's gather.
    for (idx b = 0; b < B; ++b) {
        for (idx oc = 0; oc < OC; ++oc) {
            T* och = &out->data[(std::size_t)((b * OC + oc) * out_vol)];
            std::fill(och, och + out_vol, p.bias->data[(std::size_t)oc]);
            for (idx ic = 0; ic < C; ++ic) {
                const T* xch = &x->data[(std::size_t)((b * C + ic) * in_vol)];
                const T* wk = &w->data[(std::size_t)((oc * C + ic) * k_vol)];
                for (idx ki = 0; ki < KD; ++ki)
                    for (idx kj = 0; kj < KH; ++kj)
                        for (idx kk = 0; kk < KW; ++kk) {
                            const T wv = wk[(ki * KH + kj) * KW + kk];
                            idx dlo, dhi, hlo, hhi, wlo, whi;
                            detail::conv_range(ki, pd, sd, OD, D, dlo, dhi);
                            detail::conv_range(kj, ph, sh, OH, H, hlo, hhi);
                            detail::conv_range(kk, pw, sw, OW, W, wlo, whi);
                            for (idx id = dlo; id < dhi; ++id) {
                                const idx od = id * sd + ki - pd;
                                for (idx ih = hlo; ih < hhi; ++ih) {
                                    const idx oh = ih * sh + kj - ph;
                                    const T* xr = xch + id * in_plane + ih * W + wlo;
                                    T* orow = och + od * out_plane + oh * OW +
                                              (wlo * sw + kk - pw);
                                    const idx n = whi - wlo;
                                    if (sw == 1) {
                                        for (idx i = 0; i < n; ++i) orow[i] += wv * xr[i];
                                    } else {
                                        for (idx i = 0; i < n; ++i) orow[i * sw] += wv * xr[i];
                                    }
                                }
                            }
                        }
            }
        }
    }

    if (detail::wants_grad(tape, {&x, &p.weight, &p.bias})) {
        detail::mark_output(tape, out);
        auto weight = p.weight;
        auto bias = p.bias;
        tape->record([x, weight, bias, out, B, C, D, H, W, OC, KD, KH, KW, OD, OH, OW,
                      sd, sh, sw, pd, ph, pw, in_plane, in_vol, out_plane, out_vol, k_vol] {
            if (bias->requires_grad) {
                bias->ensure_grad();
                for (idx b = 0; b < B; ++b)
                    for (idx oc = 0; oc < OC; ++oc) {
                        const T* g = &out->grad[(std::size_t)((b * OC + oc) * out_vol)];
                        T acc = T(0);
#pragma omp simd reduction(+ : acc)
                        for (idx i = 0; i < out_vol; ++i) acc += g[i];
                        bias->grad[(std::size_t)oc] += acc;
                    }
            }
            for (idx b = 0; b < B; ++b)
                for (idx oc = 0; oc < OC; ++oc) {
                    const T* g = &out->grad[(std::size_t)((b * OC + oc) * out_vol)];
                    for (idx ic = 0; ic < C; ++ic) {
                        const T* xch = &x->data[(std::size_t)((b * C + ic) * in_vol)];
                        T* gx = x->requires_grad
                                    ? (x->ensure_grad(),
                                       &x->grad[(std::size_t)((b * C + ic) * in_vol)])
                                    : nullptr;
                        const T* wk = &weight->data[(std::size_t)((oc * C + ic) * k_vol)];
                        T* gw = nullptr;
                        if (weight->requires_grad) {
                            weight->ensure_grad();
                            gw = &weight->grad[(std::size_t)((oc * C + ic) * k_vol)];
                        }
                        for (idx ki = 0; ki < KD; ++ki)
                            for (idx kj = 0; kj < KH; ++kj)
                                for (idx kk = 0; kk < KW; ++kk) {
                                    const T wv = wk[(ki * KH + kj) * KW + kk];
                                    idx dlo, dhi, hlo, hhi, wlo, whi;
                                    detail::conv_range(ki, pd, sd, OD, D, dlo, dhi);
                                    detail::conv_range(kj, ph, sh, OH, H, hlo, hhi);
                                    detail::conv_range(kk, pw, sw, OW, W, wlo, whi);
                                    T wacc = T(0);
                                    for (idx id = dlo; id < dhi; ++id) {
                                        const idx od = id * sd + ki - pd;
                                        for (idx ih = hlo; ih < hhi; ++ih) {
                                            const idx oh = ih * sh + kj - ph;
                                            const T* gr = g + od * out_plane + oh * OW +
                                                          (wlo * sw + kk - pw);
                                            const idx base = id * in_plane + ih * W + wlo;
                                            const idx n = whi - wlo;
                                            if (gx) {
                                                T* xr = gx + base;
                                                if (sw == 1) {
                                                    for (idx i = 0; i < n; ++i)
                                                        xr[i] += wv * gr[i];
                                                } else {
                                                    for (idx i = 0; i < n; ++i)
                                                        xr[i] += wv * gr[i * sw];
                                                }
                                            }
                                            if (gw) {
                                                const T* xr = xch + base;
                                                if (sw == 1) {
#pragma omp simd reduction(+ : wacc)
                                                    for (idx i = 0; i < n; ++i)
                                                        wacc += gr[i] * xr[i];
                                                } else {
#pragma omp simd reduction(+ : wacc)
                                                    for (idx i = 0; i < n; ++i)
                                                        wacc += gr[i * sw] * xr[i];
                                                }
                                            }
                                        }
                                    }
                                    if (gw) gw[(ki * KH + kj) * KW + kk] += wacc;
                                }
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> batch_norm(const TensorPtr<T>& x, const BatchNormParams<T>& p, bool training,
                        Tape<T>* tape = nullptr) {
    if (x->shape.size() < 2) throw std::invalid_argument("batch_norm: need batch and channel axes");
    const std::size_t B = x->shape[0], C = x->shape[1];
    if (p.gamma->size() != C) throw std::invalid_argument("batch_norm: channel mismatch");
    std::size_t S = 1;
    for (std::size_t d = 2; d < x->shape.size(); ++d) S *= x->shape[d];
    const std::size_t n = B * S;
    auto out = Tensor<T>::zeros(x->shape);

    std::vector<T> mean(C), invstd(C);
    if (training) {
        if (n < 2)
            throw std::invalid_argument("batch_norm: fewer than 2 positions per channel");
        for (std::size_t c = 0; c < C; ++c) {
            T m = T(0);
            for (std::size_t b = 0; b < B; ++b) {
                const T* xc = &x->data[(b * C + c) * S];
                for (std::size_t i = 0; i < S; ++i) m += xc[i];
            }
            m /= T(n);
            T var = T(0);
            for (std::size_t b = 0; b < B; ++b) {
                const T* xc = &x->data[(b * C + c) * S];
                for (std::size_t i = 0; i < S; ++i) {
                    const T d = xc[i] - m;
                    var += d * d;
                }
            }
            var /= T(n);  // population variance over batch x spatial
            mean[c] = m;
            invstd[c] = T(1) / std::sqrt(var + p.eps);
            p.running_mean->data[c] = (T(1) - p.momentum) * p.running_mean->data[c] + p.momentum * m;
            const T var_unbiased = var * T(n) / T(n - 1);
            p.running_var->data[c] =
                (T(1) - p.momentum) * p.running_var->data[c] + p.momentum * var_unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = p.running_mean->data[c];
            invstd[c] = T(1) / std::sqrt(p.running_var->data[c] + p.eps);
        }
    }

    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T g = p.gamma->data[c], be = p.beta->data[c];
            const T m = mean[c], is = invstd[c];
            const T* xc = &x->data[(b * C + c) * S];
            T* oc = &out->data[(b * C + c) * S];
            for (std::size_t i = 0; i < S; ++i) oc[i] = g * (xc[i] - m) * is + be;
        }

    if (detail::wants_grad(tape, {&x, &p.gamma, &p.beta})) {
        detail::mark_output(tape, out);
        auto gamma = p.gamma;
        auto beta = p.beta;
        tape->record([x, gamma, beta, out, mean, invstd, training, B, C, S, n] {
            for (std::size_t c = 0; c < C; ++c) {
                const T m = mean[c], is = invstd[c], gm = gamma->data[c];
                // channel-wise reductions over gradient and normalized input
                T sum_gy = T(0), sum_gy_xhat = T(0);
                for (std::size_t b = 0; b < B; ++b) {
                    const T* xc = &x->data[(b * C + c) * S];
                    const T* gy = &out->grad[(b * C + c) * S];
                    for (std::size_t i = 0; i < S; ++i) {
                        sum_gy += gy[i];
                        sum_gy_xhat += gy[i] * (xc[i] - m) * is;
                    }
                }
                if (gamma->requires_grad) {
                    gamma->ensure_grad();
                    gamma->grad[c] += sum_gy_xhat;
                }
                if (beta->requires_grad) {
                    beta->ensure_grad();
                    beta->grad[c] += sum_gy;
                }
                if (x->requires_grad) {
                    x->ensure_grad();
                    for (std::size_t b = 0; b < B; ++b) {
                        const T* xc = &x->data[(b * C + c) * S];
                        const T* gy = &out->grad[(b * C + c) * S];
                        T* gx = &x->grad[(b * C + c) * S];
                        if (training) {
                            const T inv_n = T(1) / T(n);
                            for (std::size_t i = 0; i < S; ++i) {
                                const T xhat = (xc[i] - m) * is;
                                gx[i] += gm * is *
                                         (gy[i] - inv_n * sum_gy - xhat * inv_n * sum_gy_xhat);
                            }
                        } else {
                            for (std::size_t i = 0; i < S; ++i) gx[i] += gm * is * gy[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> elu(const TensorPtr<T>& x, Tape<T>* tape = nullptr) {
    auto out = Tensor<T>::zeros(x->shape);
    for (std::size_t i = 0; i < x->size(); ++i) {
        const T v = x->data[i];
        out->data[i] = v >= T(0) ? v : std::exp(v) - T(1);  // alpha = 1
    }
    if (detail::wants_grad(tape, {&x})) {
        detail::mark_output(tape, out);
        tape->record([x, out] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->size(); ++i)
                x->grad[i] += out->grad[i] * (x->data[i] >= T(0) ? T(1) : out->data[i] + T(1));
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> relu(const TensorPtr<T>& x, Tape<T>* tape = nullptr) {
    auto out = Tensor<T>::zeros(x->shape);
    for (std::size_t i = 0; i < x->size(); ++i)
        out->data[i] = x->data[i] > T(0) ? x->data[i] : T(0);
    if (detail::wants_grad(tape, {&x})) {
        detail::mark_output(tape, out);
        tape->record([x, out] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->size(); ++i)
                if (x->data[i] > T(0)) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

/// Numerically stabilized softmax along `axis`; sums to 1 along that axis.
template <typename T>
TensorPtr<T> softmax(const TensorPtr<T>& x, std::size_t axis, Tape<T>* tape = nullptr) {
    if (axis >= x->shape.size()) throw std::invalid_argument("softmax: axis out of range");
    const std::size_t A = x->shape[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= x->shape[d];
    for (std::size_t d = axis + 1; d < x->shape.size(); ++d) inner *= x->shape[d];
    auto out = Tensor<T>::zeros(x->shape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * A * inner + in;
            T mx = x->data[base];
            for (std::size_t a = 1; a < A; ++a)
                mx = std::max(mx, x->data[base + a * inner]);
            T z = T(0);
            for (std::size_t a = 0; a < A; ++a) {
                const T e = std::exp(x->data[base + a * inner] - mx);
                out->data[base + a * inner] = e;
                z += e;
            }
            for (std::size_t a = 0; a < A; ++a) out->data[base + a * inner] /= z;
        }
    if (detail::wants_grad(tape, {&x})) {
        detail::mark_output(tape, out);
        tape->record([x, out, A, outer, inner] {
            x->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * A * inner + in;
                    T dot = T(0);
                    for (std::size_t a = 0; a < A; ++a)
                        dot += out->grad[base + a * inner] * out->data[base + a * inner];
                    for (std::size_t a = 0; a < A; ++a)
                        x->grad[base + a * inner] +=
                            out->data[base + a * inner] * (out->grad[base + a * inner] - dot);
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling / fully connected / dropout
// ---------------------------------------------------------------------------

/// Global per-channel maximum of a [B,C,D,H,W] map, producing [B,C].
/// Gradient routes to the first-in-row-major argmax.
template <typename T>
TensorPtr<T> adaptive_max_pool_to_vector(const TensorPtr<T>& x, Tape<T>* tape = nullptr) {
    if (x->shape.size() != 5)
        throw std::invalid_argument("adaptive_max_pool_to_vector: input must be 5-D");
    const std::size_t B = x->shape[0], C = x->shape[1];
    const std::size_t S = x->shape[2] * x->shape[3] * x->shape[4];
    auto out = Tensor<T>::zeros({B, C});
    std::vector<std::size_t> arg(B * C);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T* xc = &x->data[(b * C + c) * S];
            std::size_t best = 0;
            for (std::size_t i = 1; i < S; ++i)
                if (xc[i] > xc[best]) best = i;
            out->data[b * C + c] = xc[best];
            arg[b * C + c] = (b * C + c) * S + best;
        }
    if (detail::wants_grad(tape, {&x})) {
        detail::mark_output(tape, out);
        tape->record([x, out, arg] {
            x->ensure_grad();
            for (std::size_t i = 0; i < arg.size(); ++i) x->grad[arg[i]] += out->grad[i];
        });
    }
    return out;
}

/// Affine map y = x W^T + b with x:[B,n], W:[m,n], b:[m].
template <typename T>
TensorPtr<T> fully_connected(const TensorPtr<T>& x, const TensorPtr<T>& weight,
                             const TensorPtr<T>& bias, Tape<T>* tape = nullptr) {
    if (x->shape.size() != 2 || weight->shape.size() != 2)
        throw std::invalid_argument("fully_connected: rank-2 tensors required");
    const std::size_t B = x->shape[0], N = x->shape[1];
    const std::size_t M = weight->shape[0];
    if (weight->shape[1] != N) throw std::invalid_argument("fully_connected: width mismatch");
    if (bias->size() != M) throw std::invalid_argument("fully_connected: bias size mismatch");
    auto out = Tensor<T>::zeros({B, M});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t m = 0; m < M; ++m) {
            const T* xr = &x->data[b * N];
            const T* wr = &weight->data[m * N];
            T acc = bias->data[m];
            for (std::size_t i = 0; i < N; ++i) acc += xr[i] * wr[i];
            out->data[b * M + m] = acc;
        }
    if (detail::wants_grad(tape, {&x, &weight, &bias})) {
        detail::mark_output(tape, out);
        tape->record([x, weight, bias, out, B, N, M] {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t m = 0; m < M; ++m) {
                    const T g = out->grad[b * M + m];
                    if (g == T(0)) continue;
                    if (bias->requires_grad) {
                        bias->ensure_grad();
                        bias->grad[m] += g;
                    }
                    if (x->requires_grad) {
                        x->ensure_grad();
                        const T* wr = &weight->data[m * N];
                        T* gx = &x->grad[b * N];
                        for (std::size_t i = 0; i < N; ++i) gx[i] += g * wr[i];
                    }
                    if (weight->requires_grad) {
                        weight->ensure_grad();
                        const T* xr = &x->data[b * N];
                        T* gw = &weight->grad[m * N];
                        for (std::size_t i = 0; i < N; ++i) gw[i] += g * xr[i];
                    }
                }
        });
    }
    return out;
}

/// Inverted dropout: survivors scaled by 1/(1-p); inference is identity.
template <typename T>
TensorPtr<T> dropout(const TensorPtr<T>& x, double p, bool training, std::mt19937_64& rng,
                     Tape<T>* tape = nullptr) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
    if (!training || p == 0.0) {
        auto out = x->clone();
        if (detail::wants_grad(tape, {&x})) {
            detail::mark_output(tape, out);
            tape->record([x, out] {
                x->ensure_grad();
                for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i];
            });
        }
        return out;
    }
    auto out = Tensor<T>::zeros(x->shape);
    const T inv_keep = T(1) / T(1.0 - p);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto mask = std::make_shared<std::vector<std::uint8_t>>(x->size());
    for (std::size_t i = 0; i < x->size(); ++i) {
        const bool keep = u(rng) >= p;
        (*mask)[i] = keep;
        out->data[i] = keep ? x->data[i] * inv_keep : T(0);
    }
    if (detail::wants_grad(tape, {&x})) {
        detail::mark_output(tape, out);
        tape->record([x, out, mask, inv_keep] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->size(); ++i)
                if ((*mask)[i]) x->grad[i] += out->grad[i] * inv_keep;
        });
    }
    return out;
}

}  // namespace chmfl
