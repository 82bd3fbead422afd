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

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "multimorph/autodiff.hpp"
#include "multimorph/grid.hpp"

namespace mm {

struct GroupMember {
    std::string id;
    ImageVolume image;
    std::optional<ProbSeg> seg;
    nlohmann::json meta = nlohmann::json::object();
};

/// Ordered set of m images on a common grid.
struct GroupBatch {
    std::vector<GroupMember> members;

    std::size_t size() const { return members.size(); }
    const Grid& grid() const;
    /// m >= 1, identical grids, consistent seg class counts and a single
    /// modality (when members carry one).
    void validate() const;
    bool any_seg() const;
    GroupBatch subset(const std::vector<std::size_t>& indices) const;
};

// Conversions into [N, C, Z, Y, X] tensors.
template <class T>
ad::Tensor<T> image_tensor(const GroupBatch& g);
/// Members without a segmentation get an all-zero block.
template <class T>
ad::Tensor<T> seg_tensor(const GroupBatch& g, int classes);
template <class T, class Field>
ad::Tensor<T> field_tensor(const std::vector<Field>& fields);

template <class Field, class T>
std::vector<Field> fields_from(const ad::Tensor<T>& t, const Grid& g);
template <class T>
std::vector<ImageVolume> images_from(const ad::Tensor<T>& t, const Grid& g);
template <class T>
std::vector<ProbSeg> segs_from(const ad::Tensor<T>& t, const Grid& g);

ad::Shape shape_for(const Grid& g, int n, int c);

} // namespace mm

// --- implementation -------------------------------------------------------

namespace mm {

inline ad::Shape shape_for(const Grid& g, int n, int c) {
    const auto s = g.shape3();
    return {n, c, s[0], s[1], s[2]};
}

template <class T>
ad::Tensor<T> image_tensor(const GroupBatch& g) {
    const Grid& grid = g.grid();
    const std::size_t S = grid.voxels();
    ad::Tensor<T> t(shape_for(grid, static_cast<int>(g.size()), 1));
    for (std::size_t n = 0; n < g.size(); ++n)
        for (std::size_t i = 0; i < S; ++i) t.data[n * S + i] = static_cast<T>(g.members[n].image.data[i]);
    return t;
}

template <class T>
ad::Tensor<T> seg_tensor(const GroupBatch& g, int classes) {
    const Grid& grid = g.grid();
    const std::size_t block = grid.voxels() * static_cast<std::size_t>(classes);
    ad::Tensor<T> t(shape_for(grid, static_cast<int>(g.size()), classes));
    for (std::size_t n = 0; n < g.size(); ++n) {
        if (!g.members[n].seg) continue;
        const auto& s = g.members[n].seg->data;
        for (std::size_t i = 0; i < block; ++i) t.data[n * block + i] = static_cast<T>(s[i]);
    }
    return t;
}

template <class T, class Field>
ad::Tensor<T> field_tensor(const std::vector<Field>& fields) {
    const Grid& grid = fields.at(0).grid;
    const std::size_t block = grid.voxels() * static_cast<std::size_t>(grid.dims);
    ad::Tensor<T> t(shape_for(grid, static_cast<int>(fields.size()), grid.dims));
    for (std::size_t n = 0; n < fields.size(); ++n)
        for (std::size_t i = 0; i < block; ++i) t.data[n * block + i] = static_cast<T>(fields[n].data[i]);
    return t;
}

template <class Field, class T>
std::vector<Field> fields_from(const ad::Tensor<T>& t, const Grid& g) {
    const std::size_t block = g.voxels() * static_cast<std::size_t>(g.dims);
    std::vector<Field> out;
    for (int n = 0; n < t.n(); ++n) {
        Field f(g);
        for (std::size_t i = 0; i < block; ++i) f.data[i] = static_cast<float>(t.data[n * block + i]);
        out.push_back(std::move(f));
    }
    return out;
}

template <class T>
std::vector<ImageVolume> images_from(const ad::Tensor<T>& t, const Grid& g) {
    const std::size_t S = g.voxels();
    std::vector<ImageVolume> out;
    for (int n = 0; n < t.n(); ++n) {
        ImageVolume img(g);
        for (std::size_t i = 0; i < S; ++i) img.data[i] = static_cast<float>(t.data[n * S + i]);
        out.push_back(std::move(img));
    }
    return out;
}

template <class T>
std::vector<ProbSeg> segs_from(const ad::Tensor<T>& t, const Grid& g) {
    const std::size_t block = g.voxels() * static_cast<std::size_t>(t.c());
    std::vector<ProbSeg> out;
    for (int n = 0; n < t.n(); ++n) {
        ProbSeg s(g, t.c());
        for (std::size_t i = 0; i < block; ++i) s.data[i] = static_cast<float>(t.data[n * block + i]);
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace mm
