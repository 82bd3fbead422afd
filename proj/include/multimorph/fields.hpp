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

// Deformation-field core. Fields are displacements u in voxel units with
// phi(p) = p + u(p); all interpolation is (bi/tri)linear with clamp-to-edge.

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "multimorph/grid.hpp"

namespace mm {

inline constexpr int kDefaultIntegrationSteps = 7;

/// Scaling and squaring: u0 = v / 2^steps, then u <- compose(u, u) `steps` times.
DisplacementField integrate_svf(const VelocityField& v, int steps = kDefaultIntegrationSteps);

/// u(p) = b(p) + a(p + b(p)), i.e. (p + a) after (p + b).
DisplacementField compose(const DisplacementField& a, const DisplacementField& b);

/// out(p) = x(p + u(p))
ImageVolume warp_image(const ImageVolume& x, const DisplacementField& phi);

/// Warps each class channel, then renormalizes every voxel to sum to one.
ProbSeg warp_seg(const ProbSeg& s, const DisplacementField& phi);

/// det(I + grad u) with central differences inside and one-sided
/// differences on the boundary.
ScalarField jacobian_det(const DisplacementField& phi);

/// Voxels with det J <= 0.
std::size_t count_folds(const DisplacementField& phi);

/// (1/|Omega|) sum_p |mean_i u_i(p)|^2
double centrality(std::span<const DisplacementField> us);
double velocity_centrality(std::span<const VelocityField> vs);

/// Returns -v.
VelocityField negate(const VelocityField& v);

/// Unit white noise smoothed by a Gaussian of width `sigma` (voxels).
std::vector<float> smooth_noise(const Grid& g, double sigma, std::mt19937_64& rng);

/// Gaussian-smoothed white noise rescaled so that its largest vector
/// magnitude equals `amplitude` (a zero field stays zero).
VelocityField random_smooth_field(const Grid& g, double sigma, double amplitude, std::mt19937_64& rng);

/// Renormalizes each voxel's class probabilities to sum to one; sums below
/// `floor` are replaced by `floor`.
void renormalize(ProbSeg& s, float floor = 1e-6f);

/// Largest deviation of any voxel's channel sum from one.
double max_sum_deviation(const ProbSeg& s);

} // namespace mm
