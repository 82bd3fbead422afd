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

#include "multimorph/fields.hpp"

#include <algorithm>
#include <cmath>

#include "multimorph/errors.hpp"
#include "multimorph/kernels.hpp"

namespace mm {

namespace {

kern::Vol3 vol_of(const Grid& g) {
    const auto s = g.shape3();
    return {s[0], s[1], s[2]};
}

template <class F>
void require_finite(const F& f, const char* what) {
    for (float x : f.data)
        if (!std::isfinite(x)) throw ValidationError(std::string(what) + ": non-finite value");
}

void compose_into(const Grid& g, const float* a, const float* b, float* out) {
    const auto v = vol_of(g);
    const std::size_t n = v.size();
    const int d = g.dims;
    std::vector<float> sampled(static_cast<std::size_t>(d) * n);
    kern::warp_blocks(a, d, b, d, v, sampled.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(d) * n; ++i) out[i] = b[i] + sampled[i];
}

} // namespace

DisplacementField integrate_svf(const VelocityField& v, int steps) {
    if (steps < 1) throw ValidationError("integrate_svf: steps must be >= 1");
    require_finite(v, "integrate_svf");
    DisplacementField u(v.grid);
    const float s = static_cast<float>(std::ldexp(1.0, -steps));
    for (std::size_t i = 0; i < u.data.size(); ++i) u.data[i] = v.data[i] * s;
    std::vector<float> next(u.data.size());
    for (int k = 0; k < steps; ++k) {
        compose_into(u.grid, u.data.data(), u.data.data(), next.data());
        std::swap(u.data, next);
    }
    return u;
}

DisplacementField compose(const DisplacementField& a, const DisplacementField& b) {
    require_same_grid(a.grid, b.grid, "compose");
    DisplacementField out(b.grid);
    compose_into(b.grid, a.data.data(), b.data.data(), out.data.data());
    return out;
}

ImageVolume warp_image(const ImageVolume& x, const DisplacementField& phi) {
    require_same_grid(x.grid, phi.grid, "warp_image");
    ImageVolume out(x.grid);
    kern::warp_blocks(x.data.data(), 1, phi.data.data(), phi.grid.dims, vol_of(x.grid), out.data.data());
    return out;
}

ProbSeg warp_seg(const ProbSeg& s, const DisplacementField& phi) {
    require_same_grid(s.grid, phi.grid, "warp_seg");
    ProbSeg out(s.grid, s.classes);
    kern::warp_blocks(s.data.data(), s.classes, phi.data.data(), phi.grid.dims, vol_of(s.grid), out.data.data());
    renormalize(out);
    return out;
}

void renormalize(ProbSeg& s, float floor) {
    const std::size_t n = s.grid.voxels();
    for (std::size_t i = 0; i < n; ++i) {
        float sum = 0.0f;
        for (int k = 0; k < s.classes; ++k) sum += s.data[k * n + i];
        sum = std::max(sum, floor);
        for (int k = 0; k < s.classes; ++k) s.data[k * n + i] /= sum;
    }
}

double max_sum_deviation(const ProbSeg& s) {
    const std::size_t n = s.grid.voxels();
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (int k = 0; k < s.classes; ++k) sum += s.data[k * n + i];
        worst = std::max(worst, std::abs(sum - 1.0));
    }
    return worst;
}

ScalarField jacobian_det(const DisplacementField& phi) {
    const Grid& g = phi.grid;
    const int d = g.dims;
    for (int a = 0; a < d; ++a)
        if (g.extent[a] < 3) throw ValidationError("jacobian_det: extents must be >= 3");
    const auto v = vol_of(g);
    const std::size_t n = v.size();
    ScalarField out{g, std::vector<double>(n)};
    // derivative of channel c along grid axis a (grid axes map to z/y/x tail)
    auto deriv = [&](int c, int a, int z, int y, int x) -> double {
        const float* f = phi.channel(c);
        int pos[3] = {z, y, x};
        const int axis = a + (3 - d);
        const int ext = axis == 0 ? v.nz : axis == 1 ? v.ny : v.nx;
        int lo[3] = {z, y, x}, hi[3] = {z, y, x};
        double h = 2.0;
        if (pos[axis] == 0) {
            hi[axis] += 1;
            h = 1.0;
        } else if (pos[axis] == ext - 1) {
            lo[axis] -= 1;
            h = 1.0;
        } else {
            lo[axis] -= 1;
            hi[axis] += 1;
        }
        return (static_cast<double>(f[v.index(hi[0], hi[1], hi[2])]) - f[v.index(lo[0], lo[1], lo[2])]) / h;
    };
    for (int z = 0; z < v.nz; ++z)
        for (int y = 0; y < v.ny; ++y)
            for (int x = 0; x < v.nx; ++x) {
                double J[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
                for (int c = 0; c < d; ++c)
                    for (int a = 0; a < d; ++a) J[c][a] += deriv(c, a, z, y, x);
                double det;
                if (d == 2) {
                    det = J[0][0] * J[1][1] - J[0][1] * J[1][0];
                } else {
                    det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                          J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                          J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
                }
                out.data[v.index(z, y, x)] = det;
            }
    return out;
}

std::size_t count_folds(const DisplacementField& phi) {
    const auto det = jacobian_det(phi);
    return static_cast<std::size_t>(std::count_if(det.data.begin(), det.data.end(), [](double x) { return x <= 0.0; }));
}

namespace {

template <class F>
double mean_field_energy(std::span<const F> fs) {
    if (fs.empty()) throw ValidationError("centrality: needs at least one field");
    const Grid& g = fs[0].grid;
    for (const auto& f : fs) require_same_grid(g, f.grid, "centrality");
    const std::size_t n = g.voxels();
    const double m = static_cast<double>(fs.size());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (int c = 0; c < g.dims; ++c) {
            double s = 0.0;
            for (const auto& f : fs) s += f.data[c * n + i];
            s /= m;
            sq += s * s;
        }
        total += sq;
    }
    return total / static_cast<double>(n);
}

} // namespace

double centrality(std::span<const DisplacementField> us) { return mean_field_energy(us); }

double velocity_centrality(std::span<const VelocityField> vs) { return mean_field_energy(vs); }

VelocityField negate(const VelocityField& v) {
    VelocityField out(v.grid);
    for (std::size_t i = 0; i < v.data.size(); ++i) out.data[i] = -v.data[i];
    return out;
}

std::vector<float> smooth_noise(const Grid& g, double sigma, std::mt19937_64& rng) {
    // Noise is drawn on a grid padded by the kernel radius and cropped after
    // smoothing, so the statistics do not change near the border.
    const int pad = sigma > 0.0 ? std::max(1, static_cast<int>(std::ceil(3.0 * sigma))) : 0;
    const auto s3 = g.shape3();
    const int pz = g.dims == 3 ? pad : 0;
    const kern::Vol3 big{s3[0] + 2 * pz, s3[1] + 2 * pad, s3[2] + 2 * pad};
    const kern::Vol3 vol = vol_of(g);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<float> work(big.size());
    for (auto& x : work) x = static_cast<float>(normal(rng));
    kern::gaussian_smooth(work.data(), big, g.dims, sigma);
    std::vector<float> out(vol.size());
    for (int z = 0; z < vol.nz; ++z)
        for (int y = 0; y < vol.ny; ++y)
            for (int x = 0; x < vol.nx; ++x) out[vol.index(z, y, x)] = work[big.index(z + pz, y + pad, x + pad)];
    return out;
}

VelocityField random_smooth_field(const Grid& g, double sigma, double amplitude, std::mt19937_64& rng) {
    VelocityField v(g);
    const std::size_t S = g.voxels();
    for (int c = 0; c < g.dims; ++c) {
        auto n = smooth_noise(g, sigma, rng);
        std::copy(n.begin(), n.end(), v.channel(c));
    }
    double peak = 0.0;
    for (std::size_t i = 0; i < S; ++i) {
        double n2 = 0.0;
        for (int c = 0; c < g.dims; ++c) n2 += static_cast<double>(v.channel(c)[i]) * v.channel(c)[i];
        peak = std::max(peak, std::sqrt(n2));
    }
    const float s = peak > 0.0 ? static_cast<float>(amplitude / peak) : 0.0f;
    for (auto& x : v.data) x *= s;
    return v;
}

} // namespace mm
