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

#include "multimorph/atlas.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

#include "multimorph/errors.hpp"
#include "multimorph/fields.hpp"

namespace mm {

namespace {

ImageVolume mean_image(const std::vector<ImageVolume>& xs) {
    const std::size_t S = xs.at(0).data.size();
    std::vector<double> acc(S, 0.0);
    for (const auto& x : xs)
        for (std::size_t i = 0; i < S; ++i) acc[i] += x.data[i];
    ImageVolume out(xs[0].grid);
    const double inv = 1.0 / static_cast<double>(xs.size());
    for (std::size_t i = 0; i < S; ++i) out.data[i] = static_cast<float>(acc[i] * inv);
    return out;
}

} // namespace

ProbSeg build_atlas_seg(const std::vector<ProbSeg>& warped_segs) {
    if (warped_segs.empty()) throw ValidationError("build_atlas_seg: no segmentations");
    const auto& first = warped_segs[0];
    for (const auto& s : warped_segs) {
        require_same_grid(first.grid, s.grid, "build_atlas_seg");
        if (s.classes != first.classes) throw ValidationError("build_atlas_seg: class counts differ");
    }
    const std::size_t n = first.data.size();
    std::vector<double> acc(n, 0.0);
    for (const auto& s : warped_segs)
        for (std::size_t i = 0; i < n; ++i) acc[i] += s.data[i];
    ProbSeg out(first.grid, first.classes);
    const double inv = 1.0 / static_cast<double>(warped_segs.size());
    for (std::size_t i = 0; i < n; ++i) out.data[i] = static_cast<float>(acc[i] * inv);
    renormalize(out);
    return out;
}

void aggregate(AtlasResult& r, const GroupBatch& group) {
    r.warped.clear();
    std::vector<ProbSeg> segs;
    for (std::size_t i = 0; i < group.size(); ++i) {
        const auto& mem = group.members[i];
        r.warped.push_back(warp_image(mem.image, r.displacements[i]));
        if (mem.seg) segs.push_back(warp_seg(*mem.seg, r.displacements[i]));
    }
    r.atlas = mean_image(r.warped);
    if (!segs.empty()) r.seg = build_atlas_seg(segs);
    else r.seg.reset();
    r.ids.clear();
    for (const auto& m : group.members) r.ids.push_back(m.id);
}

AtlasResult build_atlas(const ModelParams& params, const NetConfig& cfg, const GroupBatch& group) {
    const auto t0 = std::chrono::steady_clock::now();
    AtlasResult r;
    r.velocities = forward(group, params, cfg);
    for (const auto& v : r.velocities) r.displacements.push_back(integrate_svf(v, cfg.integration_steps));
    aggregate(r, group);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

void SubgroupFilter::validate() const {
    if (!modality && !age_min && !age_max && !diagnosis && !ids && !max_size)
        throw ValidationError("subgroup filter needs at least one criterion");
    if (age_min && age_max && !(*age_min < *age_max)) throw ValidationError("age interval is empty");
    if (max_size && *max_size == 0) throw ValidationError("max size must be positive");
    if (ids && ids->empty()) throw ValidationError("id list is empty");
}

bool SubgroupFilter::matches(const SubjectRecord& r) const {
    if (modality && r.modality != *modality) return false;
    if (age_min || age_max) {
        if (!r.age) throw ValidationError("record " + r.id + " has no age");
        if (age_min && *r.age < *age_min) return false;
        if (age_max && *r.age >= *age_max) return false;
    }
    if (diagnosis) {
        if (!r.diagnosis) throw ValidationError("record " + r.id + " has no diagnosis");
        if (*r.diagnosis != *diagnosis) return false;
    }
    if (ids && std::find(ids->begin(), ids->end(), r.id) == ids->end()) return false;
    return true;
}

std::vector<SubjectRecord> select_records(const DatasetManifest& manifest, const SubgroupFilter& filter) {
    filter.validate();
    if (filter.ids)
        for (const auto& id : *filter.ids)
            if (!manifest.find(id)) throw ValidationError("unknown id " + id);
    std::vector<SubjectRecord> out;
    for (const auto& r : manifest.records) {
        if (filter.max_size && out.size() >= *filter.max_size) break;
        if (filter.matches(r)) out.push_back(r);
    }
    if (out.empty()) throw ValidationError("subgroup selection is empty");
    return out;
}

GroupBatch load_group(const std::vector<SubjectRecord>& records) {
    GroupBatch g;
    for (const auto& r : records) {
        GroupMember m;
        m.id = r.id;
        m.image = read_image(r.image_path);
        if (r.seg_path) m.seg = read_seg(*r.seg_path);
        m.meta["modality"] = r.modality;
        if (r.age) m.meta["age"] = *r.age;
        if (r.diagnosis) m.meta["diagnosis"] = *r.diagnosis;
        m.meta["split"] = to_string(r.split);
        g.members.push_back(std::move(m));
    }
    g.validate();
    return g;
}

GroupBatch subgroup_select(const DatasetManifest& manifest, const SubgroupFilter& filter) {
    return load_group(select_records(manifest, filter));
}

nlohmann::json atlas_metrics(const AtlasResult& r) {
    std::size_t folds = 0;
    for (const auto& u : r.displacements) folds += count_folds(u);
    const std::size_t voxels = r.atlas.grid.voxels() * std::max<std::size_t>(1, r.displacements.size());
    nlohmann::json j;
    j["members"] = r.ids.size();
    j["ids"] = r.ids;
    j["seconds"] = r.seconds;
    j["folds"] = folds;
    j["fold_fraction"] = static_cast<double>(folds) / static_cast<double>(voxels);
    j["centrality"] = r.displacements.empty() ? 0.0 : centrality(r.displacements);
    j["velocity_centrality"] = r.velocities.empty() ? 0.0 : velocity_centrality(r.velocities);
    if (!r.trace.empty()) {
        nlohmann::json t = nlohmann::json::array();
        for (const auto& [it, obj] : r.trace) t.push_back({it, obj});
        j["objective_trace"] = t;
    }
    return j;
}

void write_atlas(const std::filesystem::path& dir, const AtlasResult& r, const nlohmann::json& extra) {
    std::filesystem::create_directories(dir / "fields");
    write_image(dir / "atlas.tensor", r.atlas);
    if (r.seg) write_seg(dir / "atlas_seg.tensor", *r.seg);
    for (std::size_t i = 0; i < r.displacements.size(); ++i) {
        const std::string id = i < r.ids.size() ? r.ids[i] : std::to_string(i);
        write_field(dir / "fields" / (id + "_velocity.tensor"), r.velocities[i].grid, r.velocities[i].data, "velocity");
        write_field(dir / "fields" / (id + "_displacement.tensor"), r.displacements[i].grid, r.displacements[i].data,
                    "displacement");
    }
    auto metrics = atlas_metrics(r);
    if (!extra.is_null())
        for (auto it = extra.begin(); it != extra.end(); ++it) metrics[it.key()] = it.value();
    std::ofstream out(dir / "metrics.json");
    if (!out) throw IoError("cannot write " + (dir / "metrics.json").string());
    out << metrics.dump(2) << "\n";
}

} // namespace mm
