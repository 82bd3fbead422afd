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

#include "multimorph/grid.hpp"

#include <algorithm>
#include <cmath>

#include "multimorph/errors.hpp"
#include "multimorph/tensorio.hpp"

namespace mm {

Grid Grid::make2(int n0, int n1) {
    Grid g;
    g.dims = 2;
    g.extent = {n0, n1, 1};
    g.validate();
    return g;
}

Grid Grid::make3(int n0, int n1, int n2) {
    Grid g;
    g.dims = 3;
    g.extent = {n0, n1, n2};
    g.validate();
    return g;
}

std::size_t Grid::voxels() const {
    std::size_t n = 1;
    for (int a = 0; a < dims; ++a) n *= static_cast<std::size_t>(extent[a]);
    return n;
}

std::array<int, 3> Grid::shape3() const {
    if (dims == 2) return {1, extent[0], extent[1]};
    return extent;
}

bool Grid::same_shape(const Grid& o) const {
    if (dims != o.dims) return false;
    for (int a = 0; a < dims; ++a)
        if (extent[a] != o.extent[a]) return false;
    return true;
}

std::string Grid::describe() const {
    std::string s = "[";
    for (int a = 0; a < dims; ++a) s += (a ? "x" : "") + std::to_string(extent[a]);
    return s + "]";
}

void Grid::validate() const {
    if (dims != 2 && dims != 3) throw ValidationError("grid dims must be 2 or 3");
    for (int a = 0; a < dims; ++a)
        if (extent[a] < 2) throw ValidationError("grid extents must be >= 2, got " + describe());
}

void require_same_grid(const Grid& a, const Grid& b, const char* what) {
    if (!a.same_shape(b))
        throw ValidationError(std::string(what) + ": grid mismatch " + a.describe() + " vs " + b.describe());
}

ProbSeg ProbSeg::from_labels(const Grid& g, int k, const std::vector<int>& labels) {
    if (labels.size() != g.voxels()) throw ValidationError("label count does not match grid");
    ProbSeg s(g, k);
    const std::size_t n = g.voxels();
    for (std::size_t i = 0; i < n; ++i) {
        const int l = labels[i];
        if (l < 0 || l >= k) throw ValidationError("label out of range");
        s.data[static_cast<std::size_t>(l) * n + i] = 1.0f;
    }
    return s;
}

std::vector<int> ProbSeg::argmax() const {
    const std::size_t n = grid.voxels();
    std::vector<int> out(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        float best = data[i];
        for (int k = 1; k < classes; ++k) {
            const float v = data[static_cast<std::size_t>(k) * n + i];
            if (v > best) {
                best = v;
                out[i] = k;
            }
        }
    }
    return out;
}

namespace {

std::vector<std::int64_t> spatial_shape(const Grid& g) {
    std::vector<std::int64_t> s;
    for (int a = 0; a < g.dims; ++a) s.push_back(g.extent[a]);
    return s;
}

std::vector<double> spacing_of(const Grid& g) { return {g.spacing.begin(), g.spacing.begin() + g.dims}; }

Grid grid_from(const TensorFile& f, std::size_t leading) {
    const auto& shape = f.data.shape;
    if (shape.size() < leading + 2 || shape.size() > leading + 3)
        throw FormatError("tensor rank does not describe a 2D or 3D volume");
    Grid g;
    g.dims = static_cast<int>(shape.size() - leading);
    for (int a = 0; a < g.dims; ++a) g.extent[a] = static_cast<int>(shape[leading + a]);
    if (f.meta.spacing.size() == static_cast<std::size_t>(g.dims))
        for (int a = 0; a < g.dims; ++a) g.spacing[a] = f.meta.spacing[a];
    g.validate();
    return g;
}

} // namespace

void write_image(const std::filesystem::path& p, const ImageVolume& img) {
    TensorMeta meta;
    meta.spacing = spacing_of(img.grid);
    meta.extra["kind"] = "image";
    write_tensor(p, {spatial_shape(img.grid), img.data}, meta);
}

ImageVolume read_image(const std::filesystem::path& p, bool normalize) {
    auto f = read_tensor(p);
    // Accept an explicit singleton channel axis.
    std::size_t lead = f.data.shape.size() - f.meta.spacing.size();
    if (f.meta.spacing.empty()) lead = (f.data.shape.size() == 4 || (f.data.shape.size() == 3 && f.data.shape[0] == 1)) ? 1 : 0;
    if (lead == 1 && f.data.shape[0] != 1) throw FormatError("image tensor must have a single channel");
    ImageVolume img;
    img.grid = grid_from(f, lead);
    img.data = std::move(f.data.values);
    if (normalize && !img.data.empty()) {
        const auto [lo, hi] = std::minmax_element(img.data.begin(), img.data.end());
        const float a = *lo, b = *hi;
        const float scale = (b > a) ? 1.0f / (b - a) : 0.0f;
        for (auto& v : img.data) v = (v - a) * scale;
    }
    return img;
}

void write_seg(const std::filesystem::path& p, const ProbSeg& seg) {
    TensorMeta meta;
    meta.spacing = spacing_of(seg.grid);
    meta.extra["kind"] = "probseg";
    auto shape = spatial_shape(seg.grid);
    shape.insert(shape.begin(), seg.classes);
    write_tensor(p, {shape, seg.data}, meta);
}

ProbSeg read_seg(const std::filesystem::path& p) {
    auto f = read_tensor(p);
    ProbSeg s;
    s.grid = grid_from(f, 1);
    s.classes = static_cast<int>(f.data.shape[0]);
    s.data = std::move(f.data.values);
    return s;
}

void write_field(const std::filesystem::path& p, const Grid& g, const std::vector<float>& data,
                 const std::string& kind) {
    TensorMeta meta;
    meta.spacing = spacing_of(g);
    meta.extra["kind"] = kind;
    auto shape = spatial_shape(g);
    shape.insert(shape.begin(), static_cast<std::int64_t>(data.size() / g.voxels()));
    write_tensor(p, {shape, data}, meta);
}

} // namespace mm
