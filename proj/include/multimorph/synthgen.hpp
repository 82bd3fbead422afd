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

// Domain-randomized toy data: procedural labelmaps, per-group random
// structure intensities and acquisition-style corruption.

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "multimorph/group.hpp"
#include "multimorph/rng.hpp"

namespace mm {

struct SynthConfig {
    Grid grid = Grid::make2(64, 64);
    int classes = 6;                 // background included
    double sigma_within = 0.02;
    double bias_sigma = 12.0;
    double bias_amplitude = 0.3;
    double gamma_log_range = 0.3;
    double noise_sigma = 0.02;
    double warp_amplitude = 3.0;
    double warp_sigma = 6.0;
    int integration_steps = 7;

    void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// Undeformed template: outer shell, interior, inner ring, then blobs.
std::vector<int> base_labels(const SynthConfig& cfg);

/// Base template deformed by a random smooth diffeomorphism; one-hot.
ProbSeg gen_labelmap(const SynthConfig& cfg, const SeedPath& seed);

/// The displacement that gen_labelmap applies for `seed`.
DisplacementField labelmap_warp(const SynthConfig& cfg, const SeedPath& seed);

/// One set of K structure intensities per group; members get per-voxel
/// jitter and independent corruption.
GroupBatch synth_group(const std::vector<ProbSeg>& labelmaps, const SynthConfig& cfg, const SeedPath& seed);

/// Bias field exp(B), then x^gamma, then additive noise, then clamp to [0,1].
ImageVolume corrupt_image(const ImageVolume& x, const SynthConfig& cfg, const SeedPath& seed);

/// m fresh labelmaps plus synth_group, all derived from `seed`.
GroupBatch random_synth_group(const SynthConfig& cfg, int m, const SeedPath& seed);

/// Writes `groups` groups of `m` members under `dir` with manifest.jsonl.
/// Each group gets its own modality tag so sampling by modality keeps
/// groups intact. Returns the manifest path.
std::filesystem::path write_synth_dataset(const std::filesystem::path& dir, const SynthConfig& cfg, int groups, int m,
                                          std::uint64_t seed);

} // namespace mm
