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

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mm {

/// Regular d-dimensional voxel grid, d in {2,3}. Axis 0 is the slowest
/// varying axis in memory; channel k of a vector field displaces along
/// axis k.
struct Grid {
    int dims = 2;
    std::array<int, 3> extent{1, 1, 1};       // first `dims` entries used
    std::array<double, 3> spacing{1.0, 1.0, 1.0};

    static Grid make2(int n0, int n1);
    static Grid make3(int n0, int n1, int n2);

    std::size_t voxels() const;
    /// Extents padded to three axes (a 2D grid becomes {1, n0, n1}).
    std::array<int, 3> shape3() const;
    bool same_shape(const Grid& other) const;
    std::string describe() const;
    /// Throws ValidationError unless dims is 2 or 3 and every extent >= 2.
    void validate() const;
};

void require_same_grid(const Grid& a, const Grid& b, const char* what);

/// Scalar intensity volume.
struct ImageVolume {
    Grid grid;
    std::vector<float> data;

    ImageVolume() = default;
    explicit ImageVolume(const Grid& g, float fill = 0.0f) : grid(g), data(g.voxels(), fill) {}
};

/// K-channel per-voxel class probabilities, channel-major.
struct ProbSeg {
    Grid grid;
    int classes = 0;
    std::vector<float> data;

    ProbSeg() = default;
    ProbSeg(const Grid& g, int k) : grid(g), classes(k), data(g.voxels() * static_cast<std::size_t>(k), 0.0f) {}

    float* channel(int k) { return data.data() + static_cast<std::size_t>(k) * grid.voxels(); }
    const float* channel(int k) const { return data.data() + static_cast<std::size_t>(k) * grid.voxels(); }

    /// One-hot map from integer labels in [0, k).
    static ProbSeg from_labels(const Grid& g, int k, const std::vector<int>& labels);
    /// Argmax labels; ties go to the lowest channel index.
    std::vector<int> argmax() const;
};

struct VelocityTag {};
struct DisplacementTag {};

/// d-channel vector field in voxel units, channel-major.
template <class Tag>
struct VectorField {
    Grid grid;
    std::vector<float> data;

    VectorField() = default;
    explicit VectorField(const Grid& g) : grid(g), data(g.voxels() * static_cast<std::size_t>(g.dims), 0.0f) {}

    float* channel(int c) { return data.data() + static_cast<std::size_t>(c) * grid.voxels(); }
    const float* channel(int c) const { return data.data() + static_cast<std::size_t>(c) * grid.voxels(); }
};

using VelocityField = VectorField<VelocityTag>;
using DisplacementField = VectorField<DisplacementTag>;

/// Per-voxel scalar map (e.g. Jacobian determinants).
struct ScalarField {
    Grid grid;
    std::vector<double> data;
};

// Serialization through tensorio: images are stored with shape = extents,
// segmentations and vector fields with a leading channel axis.
void write_image(const std::filesystem::path& p, const ImageVolume& img);
/// Reads an image and min-max normalizes intensities into [0,1].
ImageVolume read_image(const std::filesystem::path& p, bool normalize = true);
void write_seg(const std::filesystem::path& p, const ProbSeg& seg);
ProbSeg read_seg(const std::filesystem::path& p);
void write_field(const std::filesystem::path& p, const Grid& g, const std::vector<float>& data, const std::string& kind);

} // namespace mm
