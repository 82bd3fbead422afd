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

// Atlas construction from a trained model, atlas segmentation and manifest
// based subgroup selection.

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "multimorph/groupnet.hpp"
#include "multimorph/tensorio.hpp"

namespace mm {

struct AtlasResult {
    ImageVolume atlas;
    std::optional<ProbSeg> seg;
    std::vector<VelocityField> velocities;
    std::vector<DisplacementField> displacements;
    std::vector<ImageVolume> warped;
    double seconds = 0.0;
    std::vector<std::string> ids;
    /// (outer iteration, objective); only filled by the iterative baseline.
    std::vector<std::pair<int, double>> trace;
};

/// Forward, integrate, warp and average. Wall time covers the whole path.
AtlasResult build_atlas(const ModelParams& params, const NetConfig& cfg, const GroupBatch& group);

/// Voxelwise mean of the maps, renormalized to sum to one.
ProbSeg build_atlas_seg(const std::vector<ProbSeg>& warped_segs);

/// Mean of warped images and, for members with segs, of warped segs.
void aggregate(AtlasResult& r, const GroupBatch& group);

struct SubgroupFilter {
    std::optional<std::string> modality;
    std::optional<double> age_min;   // inclusive
    std::optional<double> age_max;   // exclusive
    std::optional<std::string> diagnosis;
    std::optional<std::vector<std::string>> ids;
    std::optional<std::size_t> max_size;

    void validate() const;
    /// Throws ValidationError when the record lacks a field the filter uses.
    bool matches(const SubjectRecord& r) const;
};

/// Matching records in manifest order, truncated to max_size.
std::vector<SubjectRecord> select_records(const DatasetManifest& manifest, const SubgroupFilter& filter);

/// Loads images (min-max normalized) and segs for the records.
GroupBatch load_group(const std::vector<SubjectRecord>& records);

GroupBatch subgroup_select(const DatasetManifest& manifest, const SubgroupFilter& filter);

/// Summary numbers for the JSON sidecar: time, folds, centrality.
nlohmann::json atlas_metrics(const AtlasResult& r);

/// atlas, seg and per-member fields as tensor containers plus metrics.json.
void write_atlas(const std::filesystem::path& dir, const AtlasResult& r, const nlohmann::json& extra = {});

} // namespace mm
