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

#include "multimorph/group.hpp"

#include "multimorph/errors.hpp"

namespace mm {

const Grid& GroupBatch::grid() const {
    if (members.empty()) throw ValidationError("group is empty");
    return members.front().image.grid;
}

void GroupBatch::validate() const {
    if (members.empty()) throw ValidationError("group must contain at least one member");
    const Grid& g = grid();
    g.validate();
    int classes = -1;
    std::string modality;
    for (const auto& m : members) {
        require_same_grid(g, m.image.grid, "group member image");
        if (m.image.data.size() != g.voxels()) throw ValidationError("group member image has wrong size");
        if (m.seg) {
            require_same_grid(g, m.seg->grid, "group member segmentation");
            if (classes < 0) classes = m.seg->classes;
            if (m.seg->classes != classes) throw ValidationError("group members disagree on class count");
        }
        if (m.meta.contains("modality") && m.meta["modality"].is_string()) {
            const auto mod = m.meta["modality"].get<std::string>();
            if (modality.empty()) modality = mod;
            else if (mod != modality) throw ValidationError("group mixes modalities '" + modality + "' and '" + mod + "'");
        }
    }
}

bool GroupBatch::any_seg() const {
    for (const auto& m : members)
        if (m.seg) return true;
    return false;
}

GroupBatch GroupBatch::subset(const std::vector<std::size_t>& indices) const {
    GroupBatch out;
    for (auto i : indices) out.members.push_back(members.at(i));
    return out;
}

} // namespace mm
