#include "cmrc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cmrc {

namespace {

// c[M,N] += a[M,K] * b[K,N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        T* crow = c + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            T aik = arow[k];
            if (aik == T(0)) continue;
            const T* brow = b + k * N;
            for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
}

// c[M,N] += a[M,K] * b[N,K]^T  (rows of b dotted with rows of a)
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        T* crow = c + i * N;
        for (std::size_t j = 0; j < N; ++j) {
            const T* brow = b + j * K;
            T acc = T(0);
            for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[j] += acc;
        }
    }
}

// c[K,N] += a[M,K]^T * b[M,N]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        const T* brow = b + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            T aik = arow[k];
            if (aik == T(0)) continue;
            T* crow = c + k * N;
            for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
}

Shape drop_last2(const Shape& s) {
    return Shape(s.begin(), s.end() - 2);
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()) + " differ");
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

} // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    bool same = sa == sb;
    if (!same) {
        // broadcasting: b's shape must be a suffix of a's shape
        if (sb.size() >= sa.size() ||
            !std::equal(sb.begin(), sb.end(), sa.end() - static_cast<long>(sb.size())))
            throw ShapeError("add: cannot broadcast " + shape_to_string(sb) + " onto " +
                             shape_to_string(sa));
    }
    std::size_t nb = b.size() == 0 ? 1 : b.size();
    std::vector<T> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % nb];
    Tensor<T> y = Tensor<T>::from_values(sa, std::move(out));

    if (detail::recording<T>({&a, &b})) {
        y.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, yc = y;
        Tape<T>::current()->record("add", {a, b}, y, [ac, bc, yc, nb]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            if (ac.requires_grad()) detail::accumulate(ac, g);
            if (bc.requires_grad()) {
                auto& gb = bc.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape("sub", a, b);
    std::vector<T> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    Tensor<T> y = Tensor<T>::from_values(a.shape(), std::move(out));

    if (detail::recording<T>({&a, &b})) {
        y.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, yc = y;
        Tape<T>::current()->record("sub", {a, b}, y, [ac, bc, yc]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            if (ac.requires_grad()) detail::accumulate(ac, g);
            if (bc.requires_grad()) {
                auto& gb = bc.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape("mul", a, b);
    std::vector<T> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    Tensor<T> y = Tensor<T>::from_values(a.shape(), std::move(out));

    if (detail::recording<T>({&a, &b})) {
        y.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, yc = y;
        Tape<T>::current()->record("mul", {a, b}, y, [ac, bc, yc]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            if (ac.requires_grad()) {
                auto& ga = ac.grad_buffer();
                const auto& bv2 = bc.values();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
            }
            if (bc.requires_grad()) {
                auto& gb = bc.grad_buffer();
                const auto& av2 = ac.values();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    std::vector<T> out(x.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
    Tensor<T> y = Tensor<T>::from_values(x.shape(), std::move(out));

    if (detail::recording<T>({&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        Tape<T>::current()->record("scale", {x}, y, [xc, yc, c]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            auto& gx = xc.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
        });
    }
    return y;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expects rank-2 operands, got " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()));
    std::size_t M = a.extent(0), K = a.extent(1), N = b.extent(1);
    if (b.extent(0) != K)
        throw ShapeError("matmul: inner extents differ: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
    Tensor<T> y = Tensor<T>::zeros({M, N});
    gemm_nn(a.values().data(), b.values().data(), y.mutable_values().data(), M, K, N);

    if (detail::recording<T>({&a, &b})) {
        y.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, yc = y;
        Tape<T>::current()->record("matmul", {a, b}, y, [ac, bc, yc, M, K, N]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            if (ac.requires_grad())
                gemm_nt(g.data(), bc.values().data(), ac.grad_buffer().data(), M, N, K);
            if (bc.requires_grad())
                gemm_tn(ac.values().data(), g.data(), bc.grad_buffer().data(), M, K, N);
        });
    }
    return y;
}

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 3 || a.rank() != b.rank())
        throw ShapeError("batched_matmul: ranks must match and be >= 3");
    if (drop_last2(a.shape()) != drop_last2(b.shape()))
        throw ShapeError("batched_matmul: leading dims differ: " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()));
    std::size_t M = a.extent(a.rank() - 2), K = a.extent(a.rank() - 1);
    std::size_t N = b.extent(b.rank() - 1);
    if (b.extent(b.rank() - 2) != K)
        throw ShapeError("batched_matmul: inner extents differ: " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()));
    Shape out_shape = drop_last2(a.shape());
    std::size_t G = shape_size(out_shape);
    out_shape.push_back(M);
    out_shape.push_back(N);
    Tensor<T> y = Tensor<T>::zeros(out_shape);
    for (std::size_t g = 0; g < G; ++g)
        gemm_nn(a.values().data() + g * M * K, b.values().data() + g * K * N,
                y.mutable_values().data() + g * M * N, M, K, N);

    if (detail::recording<T>({&a, &b})) {
        y.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, yc = y;
        Tape<T>::current()->record("batched_matmul", {a, b}, y, [ac, bc, yc, G, M, K, N]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            for (std::size_t i = 0; i < G; ++i) {
                if (ac.requires_grad())
                    gemm_nt(g.data() + i * M * N, bc.values().data() + i * K * N,
                            ac.grad_buffer().data() + i * M * K, M, N, K);
                if (bc.requires_grad())
                    gemm_tn(ac.values().data() + i * M * K, g.data() + i * M * N,
                            bc.grad_buffer().data() + i * K * N, M, K, N);
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expects rank-2, got " + shape_to_string(x.shape()));
    return permute(x, {1, 0});
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    if (perm.size() != x.rank()) throw ShapeError("permute: permutation rank mismatch");
    std::vector<bool> seen(perm.size(), false);
    for (std::size_t p : perm) {
        if (p >= perm.size() || seen[p]) throw ShapeError("permute: not a permutation");
        seen[p] = true;
    }
    Shape out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.extent(perm[i]);

    auto in_strides = row_major_strides(x.shape());
    auto out_strides = row_major_strides(out_shape);
    std::vector<T> out(x.size());
    const auto& xv = x.values();
    std::size_t r = perm.size();
    // walk the output linearly, gathering from the permuted input offset
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < out.size(); ++o) {
        std::size_t src = 0;
        for (std::size_t d = 0; d < r; ++d) src += idx[d] * in_strides[perm[d]];
        out[o] = xv[src];
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    Tensor<T> y = Tensor<T>::from_values(out_shape, std::move(out));

    if (detail::recording<T>({&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        std::vector<std::size_t> permc = perm;
        Tape<T>::current()->record("permute", {x}, y, [xc, yc, permc, out_shape]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            auto& gx = xc.grad_buffer();
            auto in_strides2 = row_major_strides(xc.shape());
            std::size_t r2 = permc.size();
            std::vector<std::size_t> idx2(r2, 0);
            for (std::size_t o = 0; o < g.size(); ++o) {
                std::size_t src = 0;
                for (std::size_t d = 0; d < r2; ++d) src += idx2[d] * in_strides2[permc[d]];
                gx[src] += g[o];
                for (std::size_t d = r2; d-- > 0;) {
                    if (++idx2[d] < out_shape[d]) break;
                    idx2[d] = 0;
                }
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_size(shape) != x.size())
        throw ShapeError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                         shape_to_string(shape));
    Tensor<T> y = Tensor<T>::from_values(shape, x.values());

    if (detail::recording<T>({&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        Tape<T>::current()->record("reshape", {x}, y, [xc, yc]() mutable {
            if (!yc.has_grad()) return;
            detail::accumulate(xc, yc.grad());
        });
    }
    return y;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
    if (a.rank() != b.rank() || axis >= a.rank())
        throw ShapeError("concat: rank mismatch or bad axis");
    for (std::size_t d = 0; d < a.rank(); ++d)
        if (d != axis && a.extent(d) != b.extent(d))
            throw ShapeError("concat: shapes " + shape_to_string(a.shape()) + " and " +
                             shape_to_string(b.shape()) + " differ off-axis");
    Shape out_shape = a.shape();
    out_shape[axis] += b.extent(axis);

    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.extent(d);
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.extent(d);
    std::size_t wa = a.extent(axis) * inner, wb = b.extent(axis) * inner;

    std::vector<T> out(a.size() + b.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t o = 0; o < outer; ++o) {
        std::memcpy(out.data() + o * (wa + wb), av.data() + o * wa, wa * sizeof(T));
        std::memcpy(out.data() + o * (wa + wb) + wa, bv.data() + o * wb, wb * sizeof(T));
    }
    Tensor<T> y = Tensor<T>::from_values(out_shape, std::move(out));

    if (detail::recording<T>({&a, &b})) {
        y.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, yc = y;
        Tape<T>::current()->record("concat", {a, b}, y, [ac, bc, yc, outer, wa, wb]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            if (ac.requires_grad()) {
                auto& ga = ac.grad_buffer();
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < wa; ++i) ga[o * wa + i] += g[o * (wa + wb) + i];
            }
            if (bc.requires_grad()) {
                auto& gb = bc.grad_buffer();
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < wb; ++i) gb[o * wb + i] += g[o * (wa + wb) + wa + i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("mean_axis: axis out of range");
    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= x.extent(d);
    std::size_t extent = x.extent(axis);
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.extent(d);
    if (extent == 0) throw ShapeError("mean_axis: empty axis");

    Shape out_shape;
    for (std::size_t d = 0; d < x.rank(); ++d)
        if (d != axis) out_shape.push_back(x.extent(d));
    Tensor<T> y = Tensor<T>::zeros(out_shape);
    const auto& xv = x.values();
    auto& yv = y.mutable_values();
    T inv = T(1) / T(extent);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t e = 0; e < extent; ++e)
            for (std::size_t i = 0; i < inner; ++i)
                yv[o * inner + i] += xv[(o * extent + e) * inner + i] * inv;

    if (detail::recording<T>({&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        Tape<T>::current()->record("mean_axis", {x}, y, [xc, yc, outer, extent, inner, inv]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            auto& gx = xc.grad_buffer();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t e = 0; e < extent; ++e)
                    for (std::size_t i = 0; i < inner; ++i)
                        gx[(o * extent + e) * inner + i] += g[o * inner + i] * inv;
        });
    }
    return y;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.values()) acc += v;
    Tensor<T> y = Tensor<T>::scalar(acc);

    if (detail::recording<T>({&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        Tape<T>::current()->record("sum_all", {x}, y, [xc, yc]() mutable {
            if (!yc.has_grad()) return;
            T g = yc.grad()[0];
            auto& gx = xc.grad_buffer();
            for (auto& v : gx) v += g;
        });
    }
    return y;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (x.rank() < 1 || x.extent(x.rank() - 1) == 0)
        throw ShapeError("softmax_rows: last axis must be non-empty");
    std::size_t width = x.extent(x.rank() - 1);
    std::size_t rows = x.size() / width;
    std::vector<T> out(x.size());
    const auto& xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * width;
        T* o = out.data() + r * width;
        T mx = in[0];
        for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, in[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < width; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        T inv = T(1) / sum;
        for (std::size_t j = 0; j < width; ++j) o[j] *= inv;
    }
    Tensor<T> y = Tensor<T>::from_values(x.shape(), std::move(out));

    if (detail::recording<T>({&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        Tape<T>::current()->record("softmax_rows", {x}, y, [xc, yc, rows, width]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            const auto& yv = yc.values();
            auto& gx = xc.grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* yr = yv.data() + r * width;
                const T* gr = g.data() + r * width;
                T dot = T(0);
                for (std::size_t j = 0; j < width; ++j) dot += gr[j] * yr[j];
                T* gxr = gx.data() + r * width;
                for (std::size_t j = 0; j < width; ++j) gxr[j] += yr[j] * (gr[j] - dot);
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475;
    std::vector<T> out(x.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        double v = static_cast<double>(xv[i]);
        out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    Tensor<T> y = Tensor<T>::from_values(x.shape(), std::move(out));

    if (detail::recording<T>({&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        Tape<T>::current()->record("gelu", {x}, y, [xc, yc]() mutable {
            if (!yc.has_grad()) return;
            constexpr double inv_sqrt_2pi = 0.3989422804014327;
            const auto& g = yc.grad();
            const auto& xv2 = xc.values();
            auto& gx = xc.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                double v = static_cast<double>(xv2[i]);
                double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475));
                double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                gx[i] += g[i] * static_cast<T>(cdf + v * pdf);
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> selu(const Tensor<T>& x) {
    const T lam = T(kSeluLambda), alp = T(kSeluAlpha);
    std::vector<T> out(x.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        T v = xv[i];
        out[i] = v > T(0) ? lam * v : lam * alp * (std::exp(v) - T(1));
    }
    Tensor<T> y = Tensor<T>::from_values(x.shape(), std::move(out));

    if (detail::recording<T>({&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        Tape<T>::current()->record("selu", {x}, y, [xc, yc, lam, alp]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            const auto& xv2 = xc.values();
            auto& gx = xc.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                T v = xv2[i];
                gx[i] += g[i] * (v > T(0) ? lam : lam * alp * std::exp(v));
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> exp_elem(const Tensor<T>& x) {
    std::vector<T> out(x.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
    Tensor<T> y = Tensor<T>::from_values(x.shape(), std::move(out));

    if (detail::recording<T>({&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        Tape<T>::current()->record("exp", {x}, y, [xc, yc]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            const auto& yv = yc.values();
            auto& gx = xc.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i];
        });
    }
    return y;
}

template <typename T>
Tensor<T> log1p_elem(const Tensor<T>& x) {
    std::vector<T> out(x.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (xv[i] <= T(-1)) throw ContractError("log1p: input <= -1");
        out[i] = std::log1p(xv[i]);
    }
    Tensor<T> y = Tensor<T>::from_values(x.shape(), std::move(out));

    if (detail::recording<T>({&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        Tape<T>::current()->record("log1p", {x}, y, [xc, yc]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            const auto& xv2 = xc.values();
            auto& gx = xc.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (T(1) + xv2[i]);
        });
    }
    return y;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& sc, const Tensor<T>& sh, T eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank must be >= 1");
    std::size_t width = x.extent(x.rank() - 1);
    if (sc.shape() != Shape{width} || sh.shape() != Shape{width})
        throw ShapeError("layer_norm: scale/shift must have shape [" + std::to_string(width) + "]");
    std::size_t rows = x.size() / width;

    std::vector<T> out(x.size());
    std::vector<T> xhat(x.size());
    std::vector<T> rstd(rows);
    const auto& xv = x.values();
    const auto& scv = sc.values();
    const auto& shv = sh.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * width;
        T mean = T(0);
        for (std::size_t j = 0; j < width; ++j) mean += in[j];
        mean /= T(width);
        T var = T(0);
        for (std::size_t j = 0; j < width; ++j) {
            T d = in[j] - mean;
            var += d * d;
        }
        var /= T(width);
        T rs = T(1) / std::sqrt(var + eps);
        rstd[r] = rs;
        for (std::size_t j = 0; j < width; ++j) {
            T xh = (in[j] - mean) * rs;
            xhat[r * width + j] = xh;
            out[r * width + j] = xh * scv[j] + shv[j];
        }
    }
    Tensor<T> y = Tensor<T>::from_values(x.shape(), std::move(out));

    if (detail::recording<T>({&x, &sc, &sh})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, scc = sc, shc = sh, yc = y;
        auto xh_s = std::make_shared<std::vector<T>>(std::move(xhat));
        auto rs_s = std::make_shared<std::vector<T>>(std::move(rstd));
        Tape<T>::current()->record(
            "layer_norm", {x, sc, sh}, y, [xc, scc, shc, yc, xh_s, rs_s, rows, width]() mutable {
                if (!yc.has_grad()) return;
                const auto& g = yc.grad();
                const auto& scv2 = scc.values();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* gr = g.data() + r * width;
                    const T* xh = xh_s->data() + r * width;
                    if (xc.requires_grad()) {
                        // dxhat = g * scale; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * rstd
                        T m1 = T(0), m2 = T(0);
                        for (std::size_t j = 0; j < width; ++j) {
                            T dxh = gr[j] * scv2[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= T(width);
                        m2 /= T(width);
                        T rs = (*rs_s)[r];
                        T* gx = xc.grad_buffer().data() + r * width;
                        for (std::size_t j = 0; j < width; ++j) {
                            T dxh = gr[j] * scv2[j];
                            gx[j] += (dxh - m1 - xh[j] * m2) * rs;
                        }
                    }
                    if (scc.requires_grad()) {
                        T* gs = scc.grad_buffer().data();
                        for (std::size_t j = 0; j < width; ++j) gs[j] += gr[j] * xh[j];
                    }
                    if (shc.requires_grad()) {
                        T* gb = shc.grad_buffer().data();
                        for (std::size_t j = 0; j < width; ++j) gb[j] += gr[j];
                    }
                }
            });
    }
    return y;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool train, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    if (!train || rate == 0.0) return x;

    auto keep = std::make_shared<std::vector<std::uint8_t>>(x.size());
    T inv_keep = T(1.0 / (1.0 - rate));
    std::vector<T> out(x.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        bool k = rng.uniform() >= rate;
        (*keep)[i] = k;
        out[i] = k ? xv[i] * inv_keep : T(0);
    }
    Tensor<T> y = Tensor<T>::from_values(x.shape(), std::move(out));

    if (detail::recording<T>({&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        Tape<T>::current()->record("dropout", {x}, y, [xc, yc, keep, inv_keep]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            auto& gx = xc.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i)
                if ((*keep)[i]) gx[i] += g[i] * inv_keep;
        });
    }
    return y;
}

template <typename T>
Tensor<T> alpha_dropout(const Tensor<T>& x, double rate, bool train, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("alpha_dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    if (!train || rate == 0.0) return x;

    const double q = 1.0 - rate;
    const double ap = kSeluSaturation;
    const double a = 1.0 / std::sqrt(q * (1.0 + rate * ap * ap));
    const double b = -a * rate * ap;

    auto keep = std::make_shared<std::vector<std::uint8_t>>(x.size());
    std::vector<T> out(x.size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        bool k = rng.uniform() >= rate;
        (*keep)[i] = k;
        double v = k ? static_cast<double>(xv[i]) : ap;
        out[i] = static_cast<T>(a * v + b);
    }
    Tensor<T> y = Tensor<T>::from_values(x.shape(), std::move(out));

    if (detail::recording<T>({&x})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, yc = y;
        T ga = static_cast<T>(a);
        Tape<T>::current()->record("alpha_dropout", {x}, y, [xc, yc, keep, ga]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            auto& gx = xc.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i)
                if ((*keep)[i]) gx[i] += g[i] * ga;
        });
    }
    return y;
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape("mse", a, b);
    if (a.size() == 0) throw ShapeError("mse: empty tensors");
    const auto& av = a.values();
    const auto& bv = b.values();
    T acc = T(0);
    for (std::size_t i = 0; i < av.size(); ++i) {
        T d = av[i] - bv[i];
        acc += d * d;
    }
    T n = T(a.size());
    Tensor<T> y = Tensor<T>::scalar(acc / n);

    if (detail::recording<T>({&a, &b})) {
        y.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, yc = y;
        Tape<T>::current()->record("mse", {a, b}, y, [ac, bc, yc, n]() mutable {
            if (!yc.has_grad()) return;
            T g = yc.grad()[0];
            const auto& av2 = ac.values();
            const auto& bv2 = bc.values();
            T c = T(2) * g / n;
            if (ac.requires_grad()) {
                auto& ga = ac.grad_buffer();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * (av2[i] - bv2[i]);
            }
            if (bc.requires_grad()) {
                auto& gb = bc.grad_buffer();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= c * (av2[i] - bv2[i]);
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> cosine_distance_mean(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape("cosine_distance_mean", a, b);
    if (a.rank() != 2) throw ShapeError("cosine_distance_mean: expects rank-2 inputs");
    std::size_t rows = a.extent(0), width = a.extent(1);
    const auto& av = a.values();
    const auto& bv = b.values();

    auto na_s = std::make_shared<std::vector<T>>(rows);
    auto nb_s = std::make_shared<std::vector<T>>(rows);
    auto cos_s = std::make_shared<std::vector<T>>(rows);
    T acc = T(0);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* ar = av.data() + r * width;
        const T* br = bv.data() + r * width;
        T dot = T(0), na2 = T(0), nb2 = T(0);
        for (std::size_t j = 0; j < width; ++j) {
            dot += ar[j] * br[j];
            na2 += ar[j] * ar[j];
            nb2 += br[j] * br[j];
        }
        if (na2 == T(0))
            throw DataError("cosine_distance_mean: zero-norm row " + std::to_string(r) +
                            " in first input");
        if (nb2 == T(0))
            throw DataError("cosine_distance_mean: zero-norm row " + std::to_string(r) +
                            " in second input");
        T na = std::sqrt(na2), nb = std::sqrt(nb2);
        // rounding can push |cos| a hair past 1; keep 1-cos in [0, 2]
        T c = std::clamp(dot / (na * nb), T(-1), T(1));
        (*na_s)[r] = na;
        (*nb_s)[r] = nb;
        (*cos_s)[r] = c;
        acc += T(1) - c;
    }
    Tensor<T> y = Tensor<T>::scalar(acc / T(rows));

    if (detail::recording<T>({&a, &b})) {
        y.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, yc = y;
        Tape<T>::current()->record(
            "cosine_distance_mean", {a, b}, y, [ac, bc, yc, na_s, nb_s, cos_s, rows, width]() mutable {
                if (!yc.has_grad()) return;
                T g = yc.grad()[0] / T(rows);
                const auto& av2 = ac.values();
                const auto& bv2 = bc.values();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* ar = av2.data() + r * width;
                    const T* br = bv2.data() + r * width;
                    T na = (*na_s)[r], nb = (*nb_s)[r], c = (*cos_s)[r];
                    if (ac.requires_grad()) {
                        T* ga = ac.grad_buffer().data() + r * width;
                        for (std::size_t j = 0; j < width; ++j)
                            ga[j] += -g * (br[j] / (na * nb) - c * ar[j] / (na * na));
                    }
                    if (bc.requires_grad()) {
                        T* gb = bc.grad_buffer().data() + r * width;
                        for (std::size_t j = 0; j < width; ++j)
                            gb[j] += -g * (ar[j] / (na * nb) - c * br[j] / (nb * nb));
                    }
                }
            });
    }
    return y;
}

template <typename T>
Tensor<T> soft_cross_entropy(const Tensor<T>& logits, const Tensor<T>& target) {
    require_same_shape("soft_cross_entropy", logits, target);
    if (logits.rank() != 2) throw ShapeError("soft_cross_entropy: expects rank-2 inputs");
    std::size_t rows = logits.extent(0), width = logits.extent(1);
    const auto& lv = logits.values();
    const auto& tv = target.values();

    for (std::size_t r = 0; r < rows; ++r) {
        T s = T(0);
        for (std::size_t j = 0; j < width; ++j) s += tv[r * width + j];
        if (std::abs(static_cast<double>(s) - 1.0) > 1e-4)
            throw ContractError("soft_cross_entropy: target row " + std::to_string(r) +
                                " sums to " + std::to_string(static_cast<double>(s)) +
                                ", not a distribution");
    }

    T acc = T(0);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = lv.data() + r * width;
        T mx = in[0];
        for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, in[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < width; ++j) sum += std::exp(in[j] - mx);
        T lse = mx + std::log(sum);
        for (std::size_t j = 0; j < width; ++j) acc -= tv[r * width + j] * (in[j] - lse);
    }
    Tensor<T> y = Tensor<T>::scalar(acc / T(rows));

    if (detail::recording<T>({&logits})) {
        y.set_requires_grad(true);
        Tensor<T> lc = logits, tc = target, yc = y;
        Tape<T>::current()->record(
            "soft_cross_entropy", {logits}, y, [lc, tc, yc, rows, width]() mutable {
                if (!yc.has_grad()) return;
                T g = yc.grad()[0] / T(rows);
                const auto& lv2 = lc.values();
                const auto& tv2 = tc.values();
                auto& gl = lc.grad_buffer();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* in = lv2.data() + r * width;
                    T mx = in[0];
                    for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, in[j]);
                    T sum = T(0);
                    for (std::size_t j = 0; j < width; ++j) sum += std::exp(in[j] - mx);
                    T trow = T(0);
                    for (std::size_t j = 0; j < width; ++j) trow += tv2[r * width + j];
                    for (std::size_t j = 0; j < width; ++j) {
                        T p = std::exp(in[j] - mx) / sum;
                        gl[r * width + j] += g * (p * trow - tv2[r * width + j]);
                    }
                }
            });
    }
    return y;
}

template <typename T>
Tensor<T> cosine_sim_matrix(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(1))
        throw ShapeError("cosine_sim_matrix: expects BxP and MxP, got " +
                         shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
    if (a.extent(1) == 0) throw ShapeError("cosine_sim_matrix: empty feature axis");
    if (detail::recording<T>({&a, &b}))
        throw ContractError("cosine_sim_matrix is inference-only and has no backward rule");

    std::size_t B = a.extent(0), M = b.extent(0), P = a.extent(1);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> na(B), nb(M);
    for (std::size_t i = 0; i < B; ++i) {
        T s = T(0);
        for (std::size_t j = 0; j < P; ++j) s += av[i * P + j] * av[i * P + j];
        if (s == T(0))
            throw DataError("cosine_sim_matrix: zero-norm row " + std::to_string(i) +
                            " in first input");
        na[i] = std::sqrt(s);
    }
    for (std::size_t i = 0; i < M; ++i) {
        T s = T(0);
        for (std::size_t j = 0; j < P; ++j) s += bv[i * P + j] * bv[i * P + j];
        if (s == T(0))
            throw DataError("cosine_sim_matrix: zero-norm row " + std::to_string(i) +
                            " in second input");
        nb[i] = std::sqrt(s);
    }
    Tensor<T> y = Tensor<T>::zeros({B, M});
    auto& yv = y.mutable_values();
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t m = 0; m < M; ++m) {
            T dot = T(0);
            for (std::size_t j = 0; j < P; ++j) dot += av[i * P + j] * bv[m * P + j];
            yv[i * M + m] = dot / (na[i] * nb[m]);
        }
    }
    return y;
}

template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token) {
    if (x.rank() != 3 || token.rank() != 1 || token.extent(0) != x.extent(2))
        throw ShapeError("prepend_token: expects (B,T,D) and (D)");
    std::size_t B = x.extent(0), Tn = x.extent(1), D = x.extent(2);
    Tensor<T> y = Tensor<T>::zeros({B, Tn + 1, D});
    const auto& xv = x.values();
    const auto& tv = token.values();
    auto& yv = y.mutable_values();
    for (std::size_t b = 0; b < B; ++b) {
        std::memcpy(yv.data() + b * (Tn + 1) * D, tv.data(), D * sizeof(T));
        std::memcpy(yv.data() + b * (Tn + 1) * D + D, xv.data() + b * Tn * D, Tn * D * sizeof(T));
    }

    if (detail::recording<T>({&x, &token})) {
        y.set_requires_grad(true);
        Tensor<T> xc = x, tc = token, yc = y;
        Tape<T>::current()->record("prepend_token", {x, token}, y, [xc, tc, yc, B, Tn, D]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            if (tc.requires_grad()) {
                auto& gt = tc.grad_buffer();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t d = 0; d < D; ++d) gt[d] += g[b * (Tn + 1) * D + d];
            }
            if (xc.requires_grad()) {
                auto& gx = xc.grad_buffer();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t i = 0; i < Tn * D; ++i)
                        gx[b * Tn * D + i] += g[b * (Tn + 1) * D + D + i];
            }
        });
    }
    return y;
}

#define CMRC_INSTANTIATE_OPS(T)                                                                    \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> scale<T>(const Tensor<T>&, T);                                              \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> batched_matmul<T>(const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> transpose<T>(const Tensor<T>&);                                             \
    template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::size_t>&);              \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                        \
    template Tensor<T> concat<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);                 \
    template Tensor<T> mean_axis<T>(const Tensor<T>&, std::size_t);                                \
    template Tensor<T> sum_all<T>(const Tensor<T>&);                                               \
    template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                          \
    template Tensor<T> gelu<T>(const Tensor<T>&);                                                  \
    template Tensor<T> selu<T>(const Tensor<T>&);                                                  \
    template Tensor<T> exp_elem<T>(const Tensor<T>&);                                              \
    template Tensor<T> log1p_elem<T>(const Tensor<T>&);                                            \
    template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
    template Tensor<T> dropout<T>(const Tensor<T>&, double, bool, Rng&);                           \
    template Tensor<T> alpha_dropout<T>(const Tensor<T>&, double, bool, Rng&);                     \
    template Tensor<T> mse<T>(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> cosine_distance_mean<T>(const Tensor<T>&, const Tensor<T>&);                \
    template Tensor<T> soft_cross_entropy<T>(const Tensor<T>&, const Tensor<T>&);                  \
    template Tensor<T> cosine_sim_matrix<T>(const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> prepend_token<T>(const Tensor<T>&, const Tensor<T>&);

CMRC_INSTANTIATE_OPS(float)
CMRC_INSTANTIATE_OPS(double)

#undef CMRC_INSTANTIATE_OPS

} // namespace cmrc
