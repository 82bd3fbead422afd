/*
 * Copyright 2026 The MultiMorph-CPP Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Low-level numeric kernels shared by the plain field API and the
// differentiable ops. Volumes are dense [Z,Y,X] blocks; a 2-D volume has
// Z = 1 and its two vector components map to the Y and X axes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace mm::kern {

struct Vol3 {
    int nz = 1, ny = 1, nx = 1;
    std::size_t size() const { return static_cast<std::size_t>(nz) * ny * nx; }
    std::size_t index(int z, int y, int x) const {
        return (static_cast<std::size_t>(z) * ny + y) * nx + x;
    }
};

/// Clamps a coordinate to [0, n-1] and splits it into a base index i0 in
/// [0, n-2] (or 0 when n == 1) and a fraction f with coord = i0 + f.
/// `inside` is false when clamping changed the coordinate.
template <class T>
inline void split_coord(T c, int n, int& i0, T& f, bool& inside) {
    inside = true;
    if (n == 1) {
        i0 = 0;
        f = T(0);
        inside = false;
        return;
    }
    const T hi = static_cast<T>(n - 1);
    if (!(c >= T(0))) {
        c = T(0);
        inside = false;
    } else if (c > hi) {
        c = hi;
        inside = false;
    }
    int i = static_cast<int>(std::floor(c));
    if (i > n - 2) i = n - 2;
    i0 = i;
    f = c - static_cast<T>(i);
}

/// Linear sample of one [Z,Y,X] block at (cz, cy, cx); dz/dy/dx receive the
/// partial derivatives with respect to the coordinates (zero where clamped).
/// (1 - f) a + f b, exact at f = 0 and f = 1.
template <class T>
inline T lerp(T a, T b, T f) {
    return (T(1) - f) * a + f * b;
}

template <class T>
inline T sample(const T* src, const Vol3& v, int dims, T cz, T cy, T cx, T* dz = nullptr, T* dy = nullptr,
                T* dx = nullptr) {
    int y0, x0;
    T fy, fx;
    bool iny, inx;
    split_coord(cy, v.ny, y0, fy, iny);
    split_coord(cx, v.nx, x0, fx, inx);
    if (dims == 2) {
        const T* row0 = src + static_cast<std::size_t>(y0) * v.nx;
        const T* row1 = row0 + v.nx;
        const T a = row0[x0], b = row0[x0 + 1], c = row1[x0], d = row1[x0 + 1];
        const T top = lerp(a, b, fx);
        const T bot = lerp(c, d, fx);
        if (dy) *dy = iny ? (bot - top) : T(0);
        if (dx) *dx = inx ? ((b - a) + fy * ((d - c) - (b - a))) : T(0);
        if (dz) *dz = T(0);
        return lerp(top, bot, fy);
    }
    int z0;
    T fz;
    bool inz;
    split_coord(cz, v.nz, z0, fz, inz);
    const std::size_t sy = static_cast<std::size_t>(v.nx);
    const std::size_t sz = static_cast<std::size_t>(v.ny) * v.nx;
    const T* p = src + z0 * sz + y0 * sy + x0;
    const T c000 = p[0], c001 = p[1], c010 = p[sy], c011 = p[sy + 1];
    const T c100 = p[sz], c101 = p[sz + 1], c110 = p[sz + sy], c111 = p[sz + sy + 1];
    const T c00 = lerp(c000, c001, fx), c01 = lerp(c010, c011, fx);
    const T c10 = lerp(c100, c101, fx), c11 = lerp(c110, c111, fx);
    const T c0 = lerp(c00, c01, fy), c1 = lerp(c10, c11, fy);
    if (dz) *dz = inz ? (c1 - c0) : T(0);
    if (dy) *dy = iny ? ((c01 - c00) + fz * ((c11 - c10) - (c01 - c00))) : T(0);
    if (dx) {
        if (!inx) {
            *dx = T(0);
        } else {
            const T g00 = c001 - c000, g01 = c011 - c010, g10 = c101 - c100, g11 = c111 - c110;
            const T g0 = g00 + fy * (g01 - g00), g1 = g10 + fy * (g11 - g10);
            *dx = g0 + fz * (g1 - g0);
        }
    }
    return lerp(c0, c1, fz);
}

/// Scatters `g` into the interpolation neighbours of (cz, cy, cx); the
/// adjoint of `sample` with respect to the source values.
template <class T>
inline void scatter(T* dst, const Vol3& v, int dims, T cz, T cy, T cx, T g) {
    int y0, x0;
    T fy, fx;
    bool in;
    split_coord(cy, v.ny, y0, fy, in);
    split_coord(cx, v.nx, x0, fx, in);
    if (dims == 2) {
        T* row0 = dst + static_cast<std::size_t>(y0) * v.nx;
        T* row1 = row0 + v.nx;
        row0[x0] += g * (T(1) - fy) * (T(1) - fx);
        row0[x0 + 1] += g * (T(1) - fy) * fx;
        row1[x0] += g * fy * (T(1) - fx);
        row1[x0 + 1] += g * fy * fx;
        return;
    }
    int z0;
    T fz;
    split_coord(cz, v.nz, z0, fz, in);
    const std::size_t sy = static_cast<std::size_t>(v.nx);
    const std::size_t sz = static_cast<std::size_t>(v.ny) * v.nx;
    T* p = dst + z0 * sz + y0 * sy + x0;
    const T wz[2] = {T(1) - fz, fz}, wy[2] = {T(1) - fy, fy}, wx[2] = {T(1) - fx, fx};
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) p[a * sz + b * sy + c] += g * wz[a] * wy[b] * wx[c];
}

/// Pullback of `channels` [Z,Y,X] blocks of src through displacement `disp`
/// (`dims` blocks, channel k along spatial axis k).
template <class T>
void warp_blocks(const T* src, int channels, const T* disp, int dims, const Vol3& v, T* out) {
    const std::size_t n = v.size();
    const T* uz = dims == 3 ? disp : nullptr;
    const T* uy = disp + (dims == 3 ? n : 0);
    const T* ux = uy + n;
    for (int z = 0; z < v.nz; ++z)
        for (int y = 0; y < v.ny; ++y)
            for (int x = 0; x < v.nx; ++x) {
                const std::size_t i = v.index(z, y, x);
                const T cz = static_cast<T>(z) + (uz ? uz[i] : T(0));
                const T cy = static_cast<T>(y) + uy[i];
                const T cx = static_cast<T>(x) + ux[i];
                for (int c = 0; c < channels; ++c) out[c * n + i] = sample(src + c * n, v, dims, cz, cy, cx);
            }
}

/// Truncated box sum with half-width r along every spatial axis.
template <class T>
void box_sum(const T* in, const Vol3& v, int dims, int r, T* out) {
    std::vector<double> a(in, in + v.size()), b(v.size());
    auto pass = [&](int axis) {
        const int n = axis == 0 ? v.nz : axis == 1 ? v.ny : v.nx;
        const std::size_t stride = axis == 0 ? static_cast<std::size_t>(v.ny) * v.nx
                                 : axis == 1 ? static_cast<std::size_t>(v.nx) : 1;
        std::vector<double> prefix(static_cast<std::size_t>(n) + 1);
        for (int z = 0; z < (axis == 0 ? 1 : v.nz); ++z)
            for (int y = 0; y < (axis == 1 ? 1 : v.ny); ++y)
                for (int x = 0; x < (axis == 2 ? 1 : v.nx); ++x) {
                    const std::size_t base = v.index(z, y, x);
                    prefix[0] = 0.0;
                    for (int i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + a[base + i * stride];
                    for (int i = 0; i < n; ++i) {
                        const int lo = std::max(0, i - r), hi = std::min(n - 1, i + r);
                        b[base + i * stride] = prefix[hi + 1] - prefix[lo];
                    }
                }
        std::swap(a, b);
    };
    if (dims == 3) pass(0);
    pass(1);
    pass(2);
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(a[i]);
}

/// In-place separable Gaussian smoothing with replicated borders.
template <class T>
void gaussian_smooth(T* data, const Vol3& v, int dims, double sigma) {
    if (sigma <= 0.0) return;
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * static_cast<std::size_t>(r) + 1);
    double s = 0.0;
    for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& w : k) w /= s;
    std::vector<double> line;
    auto pass = [&](int axis) {
        const int n = axis == 0 ? v.nz : axis == 1 ? v.ny : v.nx;
        const std::size_t stride = axis == 0 ? static_cast<std::size_t>(v.ny) * v.nx
                                 : axis == 1 ? static_cast<std::size_t>(v.nx) : 1;
        line.resize(static_cast<std::size_t>(n));
        for (int z = 0; z < (axis == 0 ? 1 : v.nz); ++z)
            for (int y = 0; y < (axis == 1 ? 1 : v.ny); ++y)
                for (int x = 0; x < (axis == 2 ? 1 : v.nx); ++x) {
                    const std::size_t base = v.index(z, y, x);
                    for (int i = 0; i < n; ++i) {
                        double acc = 0.0;
                        for (int j = -r; j <= r; ++j) {
                            const int q = std::clamp(i + j, 0, n - 1);
                            acc += k[j + r] * static_cast<double>(data[base + q * stride]);
                        }
                        line[i] = acc;
                    }
                    for (int i = 0; i < n; ++i) data[base + i * stride] = static_cast<T>(line[i]);
                }
    };
    if (dims == 3) pass(0);
    pass(1);
    pass(2);
}

} // namespace mm::kern
