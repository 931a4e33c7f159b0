#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <vector>

#include "dscl/tape.hpp"
#include "dscl/tensor.hpp"

namespace dscl {

template <typename T>
inline bool participates(const Tensor<T>& t) {
    return t.defined() && (t.requires_grad || t.tape_serial >= 0);
}

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatCM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

template <typename T>
inline void require_4d(const Tensor<T>& t, const char* op, const char* what) {
    if (!t.defined() || t.ndims() != 4)
        throw ShapeError(std::string(op) + ": " + what + " must be a 4-d tensor, got " +
                         (t.defined() ? dims_str(t.dims) : std::string("<undefined>")));
}

template <typename T>
inline void require_2d(const Tensor<T>& t, const char* op, const char* what) {
    if (!t.defined() || t.ndims() != 2)
        throw ShapeError(std::string(op) + ": " + what + " must be a 2-d tensor, got " +
                         (t.defined() ? dims_str(t.dims) : std::string("<undefined>")));
}

}  // namespace detail

/// 2-d convolution, NCHW activations, OIHW weights, optional bias.
/// Implemented as im2col + GEMM; the column matrix is kept alive inside the
/// backward closure and reused for both the weight and the input gradient.
template <typename T>
Tensor<T> conv2d(Tape* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int64_t stride, int64_t padding) {
    detail::require_4d(x, "conv2d", "input");
    detail::require_4d(w, "conv2d", "weight");
    const int64_t N = x.dims[0], Cin = x.dims[1], H = x.dims[2], W = x.dims[3];
    const int64_t Cout = w.dims[0], Kh = w.dims[2], Kw = w.dims[3];
    if (w.dims[1] != Cin)
        throw ShapeError("conv2d: weight expects " + std::to_string(w.dims[1]) +
                         " input channels, input has " + std::to_string(Cin));
    if (b.defined() && (b.ndims() != 1 || b.dims[0] != Cout))
        throw ShapeError("conv2d: bias must be [" + std::to_string(Cout) + "], got " +
                         dims_str(b.dims));
    if (stride < 1 || padding < 0)
        throw ShapeError("conv2d: stride must be >=1 and padding >=0");
    const int64_t Hout = (H + 2 * padding - Kh) / stride + 1;
    const int64_t Wout = (W + 2 * padding - Kw) / stride + 1;
    if (H + 2 * padding < Kh || W + 2 * padding < Kw || Hout <= 0 || Wout <= 0)
        throw ShapeError("conv2d: kernel " + std::to_string(Kh) + "x" + std::to_string(Kw) +
                         " does not fit input " + dims_str(x.dims) + " with padding " +
                         std::to_string(padding));

    const int64_t R = Cin * Kh * Kw;  // rows of the column matrix
    const int64_t P = Hout * Wout;    // output positions per image

    auto col = std::make_shared<detail::MatCM<T>>(R, N * P);
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t ho = 0; ho < Hout; ++ho) {
            for (int64_t wo = 0; wo < Wout; ++wo) {
                T* cp = col->data() + (n * P + ho * Wout + wo) * R;  // column is contiguous
                const int64_t h0 = ho * stride - padding;
                const int64_t w0 = wo * stride - padding;
                int64_t r = 0;
                for (int64_t ci = 0; ci < Cin; ++ci) {
                    for (int64_t kh = 0; kh < Kh; ++kh) {
                        const int64_t hi = h0 + kh;
                        for (int64_t kw = 0; kw < Kw; ++kw, ++r) {
                            const int64_t wi = w0 + kw;
                            cp[r] = (hi >= 0 && hi < H && wi >= 0 && wi < W)
                                        ? x.at(n, ci, hi, wi)
                                        : T(0);
                        }
                    }
                }
            }
        }
    }

    Tensor<T> y = Tensor<T>::zeros({N, Cout, Hout, Wout});
    {
        Eigen::Map<const detail::MatRM<T>> Wm(w.ptr(), Cout, R);
        for (int64_t n = 0; n < N; ++n) {
            Eigen::Map<detail::MatRM<T>> Yn(y.ptr() + n * Cout * P, Cout, P);
            Yn.noalias() = Wm * col->middleCols(n * P, P);
        }
        if (b.defined()) {
            for (int64_t n = 0; n < N; ++n)
                for (int64_t co = 0; co < Cout; ++co) {
                    T* row = y.ptr() + (n * Cout + co) * P;
                    const T bias = b[co];
                    for (int64_t p = 0; p < P; ++p) row[p] += bias;
                }
        }
    }
    check_finite(y, "conv2d");

    if (tape && (participates(x) || participates(w) || participates(b))) {
        const bool need_dx = participates(x), need_dw = participates(w),
                   need_db = participates(b);
        Tensor<T> xc = x, wc = w, bc = b, yc = y;
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            const T* dyp = yc.grad().data();
            Eigen::Map<const detail::MatRM<T>> Wm(wc.ptr(), Cout, R);
            if (need_dw) {
                Eigen::Map<detail::MatRM<T>> dW(wc.ensure_grad().data(), Cout, R);
                for (int64_t n = 0; n < N; ++n) {
                    Eigen::Map<const detail::MatRM<T>> dYn(dyp + n * Cout * P, Cout, P);
                    dW.noalias() += dYn * col->middleCols(n * P, P).transpose();
                }
            }
            if (need_db) {
                std::vector<T>& db = bc.ensure_grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t co = 0; co < Cout; ++co) {
                        const T* row = dyp + (n * Cout + co) * P;
                        T s = 0;
                        for (int64_t p = 0; p < P; ++p) s += row[p];
                        db[static_cast<size_t>(co)] += s;
                    }
            }
            if (need_dx) {
                std::vector<T>& dx = xc.ensure_grad();
                detail::MatCM<T> dcol(R, P);
                for (int64_t n = 0; n < N; ++n) {
                    Eigen::Map<const detail::MatRM<T>> dYn(dyp + n * Cout * P, Cout, P);
                    dcol.noalias() = Wm.transpose() * dYn;
                    for (int64_t ho = 0; ho < Hout; ++ho)
                        for (int64_t wo = 0; wo < Wout; ++wo) {
                            const T* cp = dcol.data() + (ho * Wout + wo) * R;
                            const int64_t h0 = ho * stride - padding;
                            const int64_t w0 = wo * stride - padding;
                            int64_t r = 0;
                            for (int64_t ci = 0; ci < Cin; ++ci)
                                for (int64_t kh = 0; kh < Kh; ++kh) {
                                    const int64_t hi = h0 + kh;
                                    for (int64_t kw = 0; kw < Kw; ++kw, ++r) {
                                        const int64_t wi = w0 + kw;
                                        if (hi >= 0 && hi < H && wi >= 0 && wi < W)
                                            dx[static_cast<size_t>(
                                                ((n * Cin + ci) * H + hi) * W + wi)] += cp[r];
                                    }
                                }
                        }
                }
            }
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

/// Batch normalization over N,H,W per channel. In training mode the batch is
/// normalized with its biased variance and the running statistics are updated
/// in place with the unbiased variance; in eval mode the op is a pure affine
/// map through the running statistics. Gradients are defined in both modes.
template <typename T>
Tensor<T> batchnorm2d(Tape* tape, const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                      bool training, double momentum = 0.1, double eps = 1e-5) {
    detail::require_4d(x, "batchnorm2d", "input");
    const int64_t N = x.dims[0], C = x.dims[1], H = x.dims[2], W = x.dims[3];
    for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{
             &gamma, &beta, &running_mean, &running_var}) {
        if (!t->defined() || t->ndims() != 1 || t->dims[0] != C)
            throw ShapeError("batchnorm2d: per-channel vectors must be [" + std::to_string(C) +
                             "]");
    }
    const int64_t HW = H * W;
    const int64_t m = N * HW;  // values per channel

    auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
    auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(C));

    if (training) {
        if (m <= 1)
            throw NumericsError("batchnorm2d: training needs more than one value per channel");
        for (int64_t c = 0; c < C; ++c) {
            double s = 0;
            for (int64_t n = 0; n < N; ++n) {
                const T* p = x.ptr() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) s += static_cast<double>(p[i]);
            }
            const double mu = s / static_cast<double>(m);
            double ss = 0;
            for (int64_t n = 0; n < N; ++n) {
                const T* p = x.ptr() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) {
                    const double d = static_cast<double>(p[i]) - mu;
                    ss += d * d;
                }
            }
            const double var_b = ss / static_cast<double>(m);
            (*mean)[static_cast<size_t>(c)] = static_cast<T>(mu);
            (*invstd)[static_cast<size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var_b + eps));
            const double var_u = var_b * static_cast<double>(m) / static_cast<double>(m - 1);
            running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * mu);
            running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * var_u);
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            (*mean)[static_cast<size_t>(c)] = running_mean[c];
            (*invstd)[static_cast<size_t>(c)] =
                static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps));
        }
    }

    Tensor<T> y = Tensor<T>::zeros(x.dims);
    for (int64_t c = 0; c < C; ++c) {
        const T mu = (*mean)[static_cast<size_t>(c)];
        const T is = (*invstd)[static_cast<size_t>(c)];
        const T g = gamma[c], bb = beta[c];
        for (int64_t n = 0; n < N; ++n) {
            const T* xp = x.ptr() + (n * C + c) * HW;
            T* yp = y.ptr() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) yp[i] = g * (xp[i] - mu) * is + bb;
        }
    }
    check_finite(y, "batchnorm2d");

    if (tape && (participates(x) || participates(gamma) || participates(beta))) {
        const bool need_dx = participates(x), need_dg = participates(gamma),
                   need_db = participates(beta);
        Tensor<T> xc = x, gc = gamma, bc = beta, yc = y;
        const bool train_mode = training;
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            const T* dyp = yc.grad().data();
            for (int64_t c = 0; c < C; ++c) {
                const T mu = (*mean)[static_cast<size_t>(c)];
                const T is = (*invstd)[static_cast<size_t>(c)];
                const T g = gc[c];
                double s1 = 0, s2 = 0;  // sum dy, sum dy*xhat
                for (int64_t n = 0; n < N; ++n) {
                    const T* dp = dyp + (n * C + c) * HW;
                    const T* xp = xc.ptr() + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        const double xh = static_cast<double>((xp[i] - mu) * is);
                        s1 += static_cast<double>(dp[i]);
                        s2 += static_cast<double>(dp[i]) * xh;
                    }
                }
                if (need_dg) gc.ensure_grad()[static_cast<size_t>(c)] += static_cast<T>(s2);
                if (need_db) bc.ensure_grad()[static_cast<size_t>(c)] += static_cast<T>(s1);
                if (need_dx) {
                    std::vector<T>& dx = xc.ensure_grad();
                    if (train_mode) {
                        const T a1 = static_cast<T>(s1 / static_cast<double>(m));
                        const T a2 = static_cast<T>(s2 / static_cast<double>(m));
                        for (int64_t n = 0; n < N; ++n) {
                            const T* dp = dyp + (n * C + c) * HW;
                            const T* xp = xc.ptr() + (n * C + c) * HW;
                            T* dxp = dx.data() + (n * C + c) * HW;
                            for (int64_t i = 0; i < HW; ++i) {
                                const T xh = (xp[i] - mu) * is;
                                dxp[i] += g * is * (dp[i] - a1 - xh * a2);
                            }
                        }
                    } else {
                        for (int64_t n = 0; n < N; ++n) {
                            const T* dp = dyp + (n * C + c) * HW;
                            T* dxp = dx.data() + (n * C + c) * HW;
                            for (int64_t i = 0; i < HW; ++i) dxp[i] += g * is * dp[i];
                        }
                    }
                }
            }
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

template <typename T>
Tensor<T> relu(Tape* tape, const Tensor<T>& x) {
    if (!x.defined()) throw ShapeError("relu: undefined input");
    Tensor<T> y = Tensor<T>::zeros(x.dims);
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    check_finite(y, "relu");
    if (tape && participates(x)) {
        Tensor<T> xc = x, yc = y;
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            std::vector<T>& dx = xc.ensure_grad();
            const std::vector<T>& dy = yc.grad();
            for (int64_t i = 0; i < n; ++i)
                if (xc[i] > T(0)) dx[static_cast<size_t>(i)] += dy[static_cast<size_t>(i)];
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

/// Max pooling with implicit -inf padding; ties break to the first window
/// position in row-major order.
template <typename T>
Tensor<T> maxpool2d(Tape* tape, const Tensor<T>& x, int64_t kernel, int64_t stride,
                    int64_t padding) {
    detail::require_4d(x, "maxpool2d", "input");
    if (kernel < 1 || stride < 1 || padding < 0 || padding >= kernel)
        throw ShapeError("maxpool2d: need kernel>=1, stride>=1, 0<=padding<kernel");
    const int64_t N = x.dims[0], C = x.dims[1], H = x.dims[2], W = x.dims[3];
    const int64_t Hout = (H + 2 * padding - kernel) / stride + 1;
    const int64_t Wout = (W + 2 * padding - kernel) / stride + 1;
    if (H + 2 * padding < kernel || W + 2 * padding < kernel || Hout <= 0 || Wout <= 0)
        throw ShapeError("maxpool2d: window does not fit input " + dims_str(x.dims));

    Tensor<T> y = Tensor<T>::zeros({N, C, Hout, Wout});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(y.numel()), -1);
    int64_t o = 0;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t ho = 0; ho < Hout; ++ho)
                for (int64_t wo = 0; wo < Wout; ++wo, ++o) {
                    T best = -std::numeric_limits<T>::infinity();
                    int64_t best_idx = -1;
                    const int64_t h0 = ho * stride - padding;
                    const int64_t w0 = wo * stride - padding;
                    for (int64_t kh = 0; kh < kernel; ++kh) {
                        const int64_t hi = h0 + kh;
                        if (hi < 0 || hi >= H) continue;
                        for (int64_t kw = 0; kw < kernel; ++kw) {
                            const int64_t wi = w0 + kw;
                            if (wi < 0 || wi >= W) continue;
                            const T v = x.at(n, c, hi, wi);
                            if (v > best) {
                                best = v;
                                best_idx = ((n * C + c) * H + hi) * W + wi;
                            }
                        }
                    }
                    y[o] = best;
                    (*argmax)[static_cast<size_t>(o)] = best_idx;
                }
    check_finite(y, "maxpool2d");

    if (tape && participates(x)) {
        Tensor<T> xc = x, yc = y;
        const int64_t total = y.numel();
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            std::vector<T>& dx = xc.ensure_grad();
            const std::vector<T>& dy = yc.grad();
            for (int64_t i = 0; i < total; ++i)
                dx[static_cast<size_t>((*argmax)[static_cast<size_t>(i)])] +=
                    dy[static_cast<size_t>(i)];
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

/// Average pooling over non-overlapping-capable windows without padding; the
/// windows must tile the input exactly so every output is a mean of a full
/// kernel*kernel patch.
template <typename T>
Tensor<T> avgpool2d(Tape* tape, const Tensor<T>& x, int64_t kernel, int64_t stride) {
    detail::require_4d(x, "avgpool2d", "input");
    if (kernel < 1 || stride < 1)
        throw ShapeError("avgpool2d: need kernel>=1 and stride>=1");
    const int64_t N = x.dims[0], C = x.dims[1], H = x.dims[2], W = x.dims[3];
    if (H < kernel || W < kernel || (H - kernel) % stride != 0 || (W - kernel) % stride != 0)
        throw ShapeError("avgpool2d: windows must tile input " + dims_str(x.dims) +
                         " exactly (kernel " + std::to_string(kernel) + ", stride " +
                         std::to_string(stride) + ")");
    const int64_t Hout = (H - kernel) / stride + 1;
    const int64_t Wout = (W - kernel) / stride + 1;
    const T inv = T(1) / static_cast<T>(kernel * kernel);

    Tensor<T> y = Tensor<T>::zeros({N, C, Hout, Wout});
    int64_t o = 0;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t ho = 0; ho < Hout; ++ho)
                for (int64_t wo = 0; wo < Wout; ++wo, ++o) {
                    double s = 0;
                    for (int64_t kh = 0; kh < kernel; ++kh) {
                        const T* p = x.ptr() + ((n * C + c) * H + ho * stride + kh) * W +
                                     wo * stride;
                        for (int64_t kw = 0; kw < kernel; ++kw) s += static_cast<double>(p[kw]);
                    }
                    y[o] = static_cast<T>(s) * inv;
                }
    check_finite(y, "avgpool2d");

    if (tape && participates(x)) {
        Tensor<T> xc = x, yc = y;
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            std::vector<T>& dx = xc.ensure_grad();
            const std::vector<T>& dy = yc.grad();
            int64_t i = 0;
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t ho = 0; ho < Hout; ++ho)
                        for (int64_t wo = 0; wo < Wout; ++wo, ++i) {
                            const T g = dy[static_cast<size_t>(i)] * inv;
                            for (int64_t kh = 0; kh < kernel; ++kh) {
                                T* dp = dx.data() +
                                        ((n * C + c) * H + ho * stride + kh) * W + wo * stride;
                                for (int64_t kw = 0; kw < kernel; ++kw) dp[kw] += g;
                            }
                        }
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

/// Mean over the spatial extent: [N,C,H,W] -> [N,C,1,1].
template <typename T>
Tensor<T> global_avgpool(Tape* tape, const Tensor<T>& x) {
    detail::require_4d(x, "global_avgpool", "input");
    const int64_t N = x.dims[0], C = x.dims[1], HW = x.dims[2] * x.dims[3];
    Tensor<T> y = Tensor<T>::zeros({N, C, 1, 1});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const T* p = x.ptr() + (n * C + c) * HW;
            double s = 0;
            for (int64_t i = 0; i < HW; ++i) s += static_cast<double>(p[i]);
            y[n * C + c] = static_cast<T>(s / static_cast<double>(HW));
        }
    check_finite(y, "global_avgpool");
    if (tape && participates(x)) {
        Tensor<T> xc = x, yc = y;
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            std::vector<T>& dx = xc.ensure_grad();
            const std::vector<T>& dy = yc.grad();
            const T inv = T(1) / static_cast<T>(HW);
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const T g = dy[static_cast<size_t>(n * C + c)] * inv;
                    T* dp = dx.data() + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) dp[i] += g;
                }
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

/// [N,C,H,W] -> [N, C*H*W] (values copied; layout is already row-major).
template <typename T>
Tensor<T> flatten(Tape* tape, const Tensor<T>& x) {
    detail::require_4d(x, "flatten", "input");
    const int64_t N = x.dims[0], F = x.dims[1] * x.dims[2] * x.dims[3];
    Tensor<T> y = Tensor<T>::zeros({N, F});
    std::copy(x.ptr(), x.ptr() + x.numel(), y.ptr());
    check_finite(y, "flatten");
    if (tape && participates(x)) {
        Tensor<T> xc = x, yc = y;
        const int64_t total = x.numel();
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            std::vector<T>& dx = xc.ensure_grad();
            const std::vector<T>& dy = yc.grad();
            for (int64_t i = 0; i < total; ++i)
                dx[static_cast<size_t>(i)] += dy[static_cast<size_t>(i)];
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

/// Fully connected layer: x [N,F] against w [O,F] plus optional bias [O].
template <typename T>
Tensor<T> linear(Tape* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    detail::require_2d(x, "linear", "input");
    detail::require_2d(w, "linear", "weight");
    const int64_t N = x.dims[0], F = x.dims[1], O = w.dims[0];
    if (w.dims[1] != F)
        throw ShapeError("linear: weight expects " + std::to_string(w.dims[1]) +
                         " features, input has " + std::to_string(F));
    if (b.defined() && (b.ndims() != 1 || b.dims[0] != O))
        throw ShapeError("linear: bias must be [" + std::to_string(O) + "], got " +
                         dims_str(b.dims));
    Tensor<T> y = Tensor<T>::zeros({N, O});
    {
        Eigen::Map<const detail::MatRM<T>> X(x.ptr(), N, F), Wm(w.ptr(), O, F);
        Eigen::Map<detail::MatRM<T>> Y(y.ptr(), N, O);
        Y.noalias() = X * Wm.transpose();
        if (b.defined())
            for (int64_t n = 0; n < N; ++n)
                for (int64_t o = 0; o < O; ++o) y[n * O + o] += b[o];
    }
    check_finite(y, "linear");
    if (tape && (participates(x) || participates(w) || participates(b))) {
        const bool need_dx = participates(x), need_dw = participates(w),
                   need_db = participates(b);
        Tensor<T> xc = x, wc = w, bc = b, yc = y;
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            Eigen::Map<const detail::MatRM<T>> dY(yc.grad().data(), N, O);
            Eigen::Map<const detail::MatRM<T>> X(xc.ptr(), N, F), Wm(wc.ptr(), O, F);
            if (need_dw) {
                Eigen::Map<detail::MatRM<T>> dW(wc.ensure_grad().data(), O, F);
                dW.noalias() += dY.transpose() * X;
            }
            if (need_db) {
                std::vector<T>& db = bc.ensure_grad();
                for (int64_t o = 0; o < O; ++o) {
                    T s = 0;
                    for (int64_t n = 0; n < N; ++n) s += dY(n, o);
                    db[static_cast<size_t>(o)] += s;
                }
            }
            if (need_dx) {
                Eigen::Map<detail::MatRM<T>> dX(xc.ensure_grad().data(), N, F);
                dX.noalias() += dY * Wm;
            }
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

template <typename T>
Tensor<T> elementwise_add(Tape* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.defined() || !b.defined() || a.dims != b.dims)
        throw ShapeError("elementwise_add: operands must share dims, got " +
                         (a.defined() ? dims_str(a.dims) : std::string("<undefined>")) + " vs " +
                         (b.defined() ? dims_str(b.dims) : std::string("<undefined>")));
    Tensor<T> y = Tensor<T>::zeros(a.dims);
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
    check_finite(y, "elementwise_add");
    if (tape && (participates(a) || participates(b))) {
        const bool need_da = participates(a), need_db = participates(b);
        Tensor<T> ac = a, bc = b, yc = y;
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            const std::vector<T>& dy = yc.grad();
            if (need_da) {
                std::vector<T>& da = ac.ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    da[static_cast<size_t>(i)] += dy[static_cast<size_t>(i)];
            }
            if (need_db) {
                std::vector<T>& db = bc.ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    db[static_cast<size_t>(i)] += dy[static_cast<size_t>(i)];
            }
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

/// Concatenate along the channel axis: [N,C1,H,W] ++ [N,C2,H,W].
template <typename T>
Tensor<T> channel_concat(Tape* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_4d(a, "channel_concat", "first input");
    detail::require_4d(b, "channel_concat", "second input");
    if (a.dims[0] != b.dims[0] || a.dims[2] != b.dims[2] || a.dims[3] != b.dims[3])
        throw ShapeError("channel_concat: inputs must agree on N,H,W, got " + dims_str(a.dims) +
                         " vs " + dims_str(b.dims));
    const int64_t N = a.dims[0], C1 = a.dims[1], C2 = b.dims[1], HW = a.dims[2] * a.dims[3];
    Tensor<T> y = Tensor<T>::zeros({N, C1 + C2, a.dims[2], a.dims[3]});
    for (int64_t n = 0; n < N; ++n) {
        std::copy(a.ptr() + n * C1 * HW, a.ptr() + (n + 1) * C1 * HW,
                  y.ptr() + n * (C1 + C2) * HW);
        std::copy(b.ptr() + n * C2 * HW, b.ptr() + (n + 1) * C2 * HW,
                  y.ptr() + (n * (C1 + C2) + C1) * HW);
    }
    check_finite(y, "channel_concat");
    if (tape && (participates(a) || participates(b))) {
        const bool need_da = participates(a), need_db = participates(b);
        Tensor<T> ac = a, bc = b, yc = y;
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            const std::vector<T>& dy = yc.grad();
            for (int64_t n = 0; n < N; ++n) {
                if (need_da) {
                    std::vector<T>& da = ac.ensure_grad();
                    const int64_t src = n * (C1 + C2) * HW, dst = n * C1 * HW;
                    for (int64_t i = 0; i < C1 * HW; ++i)
                        da[static_cast<size_t>(dst + i)] += dy[static_cast<size_t>(src + i)];
                }
                if (need_db) {
                    std::vector<T>& db = bc.ensure_grad();
                    const int64_t src = (n * (C1 + C2) + C1) * HW, dst = n * C2 * HW;
                    for (int64_t i = 0; i < C2 * HW; ++i)
                        db[static_cast<size_t>(dst + i)] += dy[static_cast<size_t>(src + i)];
                }
            }
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

/// Luminance conversion: [N,3,H,W] -> [N,1,H,W]. Default weights are the
/// broadcast-standard 0.299/0.587/0.114 luma coefficients.
template <typename T>
Tensor<T> rgb_to_gray(Tape* tape, const Tensor<T>& x, double cr = 0.299, double cg = 0.587,
                      double cb = 0.114) {
    detail::require_4d(x, "rgb_to_gray", "input");
    if (x.dims[1] != 3)
        throw ShapeError("rgb_to_gray: input must have 3 channels, got " +
                         std::to_string(x.dims[1]));
    const int64_t N = x.dims[0], HW = x.dims[2] * x.dims[3];
    const T wr = static_cast<T>(cr), wg = static_cast<T>(cg), wb = static_cast<T>(cb);
    Tensor<T> y = Tensor<T>::zeros({N, 1, x.dims[2], x.dims[3]});
    for (int64_t n = 0; n < N; ++n) {
        const T* r = x.ptr() + (n * 3 + 0) * HW;
        const T* g = x.ptr() + (n * 3 + 1) * HW;
        const T* b = x.ptr() + (n * 3 + 2) * HW;
        T* yp = y.ptr() + n * HW;
        for (int64_t i = 0; i < HW; ++i) yp[i] = wr * r[i] + wg * g[i] + wb * b[i];
    }
    check_finite(y, "rgb_to_gray");
    if (tape && participates(x)) {
        Tensor<T> xc = x, yc = y;
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            std::vector<T>& dx = xc.ensure_grad();
            const std::vector<T>& dy = yc.grad();
            for (int64_t n = 0; n < N; ++n) {
                const T* dyp = dy.data() + n * HW;
                T* dr = dx.data() + (n * 3 + 0) * HW;
                T* dg = dx.data() + (n * 3 + 1) * HW;
                T* db = dx.data() + (n * 3 + 2) * HW;
                for (int64_t i = 0; i < HW; ++i) {
                    dr[i] += wr * dyp[i];
                    dg[i] += wg * dyp[i];
                    db[i] += wb * dyp[i];
                }
            }
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

/// Row-wise softmax on [N,K], computed against the row maximum.
template <typename T>
Tensor<T> softmax(Tape* tape, const Tensor<T>& x) {
    detail::require_2d(x, "softmax", "input");
    const int64_t N = x.dims[0], K = x.dims[1];
    Tensor<T> y = Tensor<T>::zeros(x.dims);
    for (int64_t n = 0; n < N; ++n) {
        const T* xp = x.ptr() + n * K;
        T* yp = y.ptr() + n * K;
        T mx = xp[0];
        for (int64_t k = 1; k < K; ++k) mx = std::max(mx, xp[k]);
        double s = 0;
        for (int64_t k = 0; k < K; ++k) {
            const double e = std::exp(static_cast<double>(xp[k] - mx));
            yp[k] = static_cast<T>(e);
            s += e;
        }
        const T inv = static_cast<T>(1.0 / s);
        for (int64_t k = 0; k < K; ++k) yp[k] *= inv;
    }
    check_finite(y, "softmax");
    if (tape && participates(x)) {
        Tensor<T> xc = x, yc = y;
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            std::vector<T>& dx = xc.ensure_grad();
            const std::vector<T>& dy = yc.grad();
            for (int64_t n = 0; n < N; ++n) {
                const T* yp = yc.ptr() + n * K;
                const T* dp = dy.data() + n * K;
                double dot = 0;
                for (int64_t k = 0; k < K; ++k)
                    dot += static_cast<double>(dp[k]) * static_cast<double>(yp[k]);
                for (int64_t k = 0; k < K; ++k)
                    dx[static_cast<size_t>(n * K + k)] +=
                        yp[k] * (dp[k] - static_cast<T>(dot));
            }
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

/// Mean cross-entropy of logits [N,K] against integer labels, fused with
/// log-softmax for stability.
template <typename T>
Tensor<T> cross_entropy_with_logits(Tape* tape, const Tensor<T>& logits,
                                    const std::vector<int64_t>& labels) {
    detail::require_2d(logits, "cross_entropy_with_logits", "logits");
    const int64_t N = logits.dims[0], K = logits.dims[1];
    if (static_cast<int64_t>(labels.size()) != N)
        throw ShapeError("cross_entropy_with_logits: " + std::to_string(N) + " rows but " +
                         std::to_string(labels.size()) + " labels");
    for (int64_t l : labels)
        if (l < 0 || l >= K)
            throw ShapeError("cross_entropy_with_logits: label " + std::to_string(l) +
                             " outside [0," + std::to_string(K) + ")");
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(N * K));
    double total = 0;
    for (int64_t n = 0; n < N; ++n) {
        const T* xp = logits.ptr() + n * K;
        T mx = xp[0];
        for (int64_t k = 1; k < K; ++k) mx = std::max(mx, xp[k]);
        double s = 0;
        for (int64_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(xp[k] - mx));
        const double lse = static_cast<double>(mx) + std::log(s);
        for (int64_t k = 0; k < K; ++k)
            (*probs)[static_cast<size_t>(n * K + k)] =
                static_cast<T>(std::exp(static_cast<double>(xp[k]) - lse));
        total += lse - static_cast<double>(xp[labels[static_cast<size_t>(n)]]);
    }
    Tensor<T> y = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(N)));
    check_finite(y, "cross_entropy_with_logits");
    if (tape && participates(logits)) {
        Tensor<T> xc = logits, yc = y;
        auto lab = std::make_shared<std::vector<int64_t>>(labels);
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            const T g = yc.grad()[0];
            std::vector<T>& dx = xc.ensure_grad();
            const T inv = g / static_cast<T>(N);
            for (int64_t n = 0; n < N; ++n)
                for (int64_t k = 0; k < K; ++k) {
                    T p = (*probs)[static_cast<size_t>(n * K + k)];
                    if (k == (*lab)[static_cast<size_t>(n)]) p -= T(1);
                    dx[static_cast<size_t>(n * K + k)] += inv * p;
                }
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

/// Mean KL divergence KL(p_T || q_T) between temperature-softened softmaxes of
/// teacher and student logits ([N,K] each). The teacher side is treated as a
/// constant: gradients flow only into the student logits.
template <typename T>
Tensor<T> kl_divergence_of_softened_logits(Tape* tape, const Tensor<T>& teacher_logits,
                                           const Tensor<T>& student_logits,
                                           double temperature) {
    detail::require_2d(teacher_logits, "kl_divergence_of_softened_logits", "teacher logits");
    detail::require_2d(student_logits, "kl_divergence_of_softened_logits", "student logits");
    if (teacher_logits.dims != student_logits.dims)
        throw ShapeError("kl_divergence_of_softened_logits: teacher " +
                         dims_str(teacher_logits.dims) + " vs student " +
                         dims_str(student_logits.dims));
    if (!(temperature > 0))
        throw ShapeError("kl_divergence_of_softened_logits: temperature must be positive");
    const int64_t N = teacher_logits.dims[0], K = teacher_logits.dims[1];
    auto p = std::make_shared<std::vector<double>>(static_cast<size_t>(N * K));
    auto q = std::make_shared<std::vector<double>>(static_cast<size_t>(N * K));
    auto softened = [&](const Tensor<T>& t, std::vector<double>& out,
                        std::vector<double>* logs) {
        for (int64_t n = 0; n < N; ++n) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t k = 0; k < K; ++k)
                mx = std::max(mx, static_cast<double>(t[n * K + k]) / temperature);
            double s = 0;
            for (int64_t k = 0; k < K; ++k)
                s += std::exp(static_cast<double>(t[n * K + k]) / temperature - mx);
            const double lse = mx + std::log(s);
            for (int64_t k = 0; k < K; ++k) {
                const double lp = static_cast<double>(t[n * K + k]) / temperature - lse;
                out[static_cast<size_t>(n * K + k)] = std::exp(lp);
                if (logs) (*logs)[static_cast<size_t>(n * K + k)] = lp;
            }
        }
    };
    std::vector<double> lp(static_cast<size_t>(N * K)), lq(static_cast<size_t>(N * K));
    softened(teacher_logits, *p, &lp);
    softened(student_logits, *q, &lq);
    double total = 0;
    for (int64_t i = 0; i < N * K; ++i) {
        const double pi = (*p)[static_cast<size_t>(i)];
        if (pi > 0) total += pi * (lp[static_cast<size_t>(i)] - lq[static_cast<size_t>(i)]);
    }
    Tensor<T> y = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(N)));
    check_finite(y, "kl_divergence_of_softened_logits");
    if (tape && participates(student_logits)) {
        Tensor<T> sc = student_logits, yc = y;
        const double temp = temperature;
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            const double g = static_cast<double>(yc.grad()[0]) / (temp * static_cast<double>(N));
            std::vector<T>& ds = sc.ensure_grad();
            for (int64_t i = 0; i < N * K; ++i)
                ds[static_cast<size_t>(i)] += static_cast<T>(
                    g * ((*q)[static_cast<size_t>(i)] - (*p)[static_cast<size_t>(i)]));
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

/// Scalar dot product with a fixed coefficient tensor of identical shape.
/// The coefficients are treated as constants.
template <typename T>
Tensor<T> weighted_sum(Tape* tape, const Tensor<T>& x, const Tensor<T>& coeffs) {
    if (!x.defined() || !coeffs.defined() || x.dims != coeffs.dims)
        throw ShapeError("weighted_sum: operands must share dims");
    double s = 0;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i)
        s += static_cast<double>(x[i]) * static_cast<double>(coeffs[i]);
    Tensor<T> y = Tensor<T>::scalar(static_cast<T>(s));
    check_finite(y, "weighted_sum");
    if (tape && participates(x)) {
        Tensor<T> xc = x, cc = coeffs, yc = y;
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            const T g = yc.grad()[0];
            std::vector<T>& dx = xc.ensure_grad();
            for (int64_t i = 0; i < n; ++i) dx[static_cast<size_t>(i)] += cc[i] * g;
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

/// Scalar sum of squared entries (any shape).
template <typename T>
Tensor<T> sum_squares(Tape* tape, const Tensor<T>& x) {
    if (!x.defined()) throw ShapeError("sum_squares: undefined input");
    double s = 0;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i)
        s += static_cast<double>(x[i]) * static_cast<double>(x[i]);
    Tensor<T> y = Tensor<T>::scalar(static_cast<T>(s));
    check_finite(y, "sum_squares");
    if (tape && participates(x)) {
        Tensor<T> xc = x, yc = y;
        auto fn = [=]() {
            if (!yc.has_grad()) return;
            const T g = yc.grad()[0];
            std::vector<T>& dx = xc.ensure_grad();
            for (int64_t i = 0; i < n; ++i) dx[static_cast<size_t>(i)] += T(2) * xc[i] * g;
        };
        y.tape_serial = tape->record(std::move(fn));
    }
    return y;
}

}  // namespace dscl
