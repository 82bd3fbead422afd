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

// Classical iterative unbiased atlas: per-member velocity fields optimized
// directly against a template that is re-estimated between rounds.

#include <utility>
#include <vector>

#include <json.hpp>

#include "multimorph/atlas.hpp"

namespace mm {

struct IterConfig {
    int outer_iterations = 20;
    int inner_steps = 50;
    /// Largest per-voxel velocity change of one inner step, in voxels.
    /// Halved whenever a step would increase the objective.
    double step_size = 0.1;
    double lambda_reg = 1.0;
    double smooth_sigma = 1.0;   // Gaussian applied to each update
    bool center_fields = true;
    int lncc_window = 9;
    double epsilon = 1e-5;
    int integration_steps = 7;

    void validate() const;
};

void to_json(nlohmann::json& j, const IterConfig& c);
void from_json(const nlohmann::json& j, IterConfig& c);

/// Throws DivergenceError (with the outer iteration) on a non-finite objective.
AtlasResult iterative_atlas(const GroupBatch& group, const IterConfig& cfg);

/// Objective after each template re-estimation; entry 0 is the initial value.
std::vector<std::pair<int, double>> objective_trace(const AtlasResult& result);

} // namespace mm
