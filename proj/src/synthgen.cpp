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

#include "multimorph/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "multimorph/errors.hpp"
#include "multimorph/fields.hpp"
#include "multimorph/tensorio.hpp"

namespace mm {

namespace {

Grid grid_from_extents(const std::vector<int>& e) {
    if (e.size() == 2) return Grid::make2(e[0], e[1]);
    if (e.size() == 3) return Grid::make3(e[0], e[1], e[2]);
    throw ValidationError("grid needs 2 or 3 extents");
}

std::vector<int> extents_of(const Grid& g) {
    return std::vector<int>(g.extent.begin(), g.extent.begin() + g.dims);
}

} // namespace

void SynthConfig::validate() const {
    grid.validate();
    if (classes < 2) throw ValidationError("synthetic data needs at least 2 classes");
    for (double s : {sigma_within, bias_sigma, bias_amplitude, gamma_log_range, noise_sigma, warp_amplitude, warp_sigma})
        if (!(s >= 0.0)) throw ValidationError("synthesis magnitudes must be nonnegative");
    if (integration_steps < 1) throw ValidationError("integration_steps must be >= 1");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = {{"grid", extents_of(c.grid)},
         {"classes", c.classes},
         {"sigma_within", c.sigma_within},
         {"bias_sigma", c.bias_sigma},
         {"bias_amplitude", c.bias_amplitude},
         {"gamma_log_range", c.gamma_log_range},
         {"noise_sigma", c.noise_sigma},
         {"warp_amplitude", c.warp_amplitude},
         {"warp_sigma", c.warp_sigma},
         {"integration_steps", c.integration_steps}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
    if (j.contains("grid")) c.grid = grid_from_extents(j.at("grid").get<std::vector<int>>());
    c.classes = j.value("classes", c.classes);
    c.sigma_within = j.value("sigma_within", c.sigma_within);
    c.bias_sigma = j.value("bias_sigma", c.bias_sigma);
    c.bias_amplitude = j.value("bias_amplitude", c.bias_amplitude);
    c.gamma_log_range = j.value("gamma_log_range", c.gamma_log_range);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.warp_amplitude = j.value("warp_amplitude", c.warp_amplitude);
    c.warp_sigma = j.value("warp_sigma", c.warp_sigma);
    c.integration_steps = j.value("integration_steps", c.integration_steps);
}

std::vector<int> base_labels(const SynthConfig& cfg) {
    cfg.validate();
    const Grid& g = cfg.grid;
    const auto s3 = g.shape3();

    // Shapes in normalized [-1,1] coordinates, painted in order: an outer
    // shell, the filled interior, an inner ring and two blobs; extra
    // classes add blobs on the diagonals.
    struct Shape {
        double cy, cx, ay, ax, inner;   // inner > 0 makes an annulus
    };
    std::vector<Shape> shapes{{0.0, 0.0, 0.82, 0.70, 0.0},
                              {0.0, 0.0, 0.70, 0.58, 0.0},
                              {0.0, 0.0, 0.42, 0.34, 0.70},
                              {0.56, 0.0, 0.21, 0.21, 0.0},
                              {-0.56, 0.0, 0.21, 0.21, 0.0}};
    for (int extra = 0; static_cast<int>(shapes.size()) < cfg.classes - 1; ++extra) {
        const double ang = M_PI / 4 + extra * M_PI / 2 + (extra / 4) * 0.35;
        const double rad = 0.50 - 0.04 * (extra / 4);
        shapes.push_back({rad * std::sin(ang), 0.85 * rad * std::cos(ang), 0.11, 0.11, 0.0});
    }
    shapes.resize(static_cast<std::size_t>(cfg.classes - 1));

    std::vector<int> labels(g.voxels(), 0);
    for (int z = 0; z < s3[0]; ++z)
        for (int y = 0; y < s3[1]; ++y)
            for (int x = 0; x < s3[2]; ++x) {
                const double ny = 2.0 * (y + 0.5) / s3[1] - 1.0;
                const double nx = 2.0 * (x + 0.5) / s3[2] - 1.0;
                const double nz = g.dims == 3 ? 2.0 * (z + 0.5) / s3[0] - 1.0 : 0.0;
                int lab = 0;
                for (std::size_t k = 0; k < shapes.size(); ++k) {
                    const Shape& sh = shapes[k];
                    double r = (ny - sh.cy) * (ny - sh.cy) / (sh.ay * sh.ay) + (nx - sh.cx) * (nx - sh.cx) / (sh.ax * sh.ax);
                    if (g.dims == 3) r += nz * nz / (sh.ay * sh.ay);
                    if (r <= 1.0 && r >= sh.inner * sh.inner) lab = static_cast<int>(k) + 1;
                }
                labels[(static_cast<std::size_t>(z) * s3[1] + y) * s3[2] + x] = lab;
            }
    return labels;
}

DisplacementField labelmap_warp(const SynthConfig& cfg, const SeedPath& seed) {
    cfg.validate();
    // The amplitude is the RMS of each velocity component, so typical
    // displacements are a few voxels rather than only the peak.
    auto rng = seed.child(0).engine();
    VelocityField v(cfg.grid);
    const std::size_t S = cfg.grid.voxels();
    for (int c = 0; c < cfg.grid.dims; ++c) {
        auto n = smooth_noise(cfg.grid, cfg.warp_sigma, rng);
        double ss = 0.0;
        for (float e : n) ss += static_cast<double>(e) * e;
        const double rms = std::sqrt(ss / static_cast<double>(S));
        const double s = rms > 0.0 ? cfg.warp_amplitude / rms : 0.0;
        for (std::size_t i = 0; i < S; ++i) v.data[c * S + i] = static_cast<float>(s * n[i]);
    }
    return integrate_svf(v, cfg.integration_steps);
}

ProbSeg gen_labelmap(const SynthConfig& cfg, const SeedPath& seed) {
    auto base = ProbSeg::from_labels(cfg.grid, cfg.classes, base_labels(cfg));
    if (cfg.warp_amplitude == 0.0) return base;
    auto warped = warp_seg(base, labelmap_warp(cfg, seed));
    return ProbSeg::from_labels(cfg.grid, cfg.classes, warped.argmax());
}

ImageVolume corrupt_image(const ImageVolume& x, const SynthConfig& cfg, const SeedPath& seed) {
    ImageVolume out = x;
    const std::size_t S = x.grid.voxels();
    if (cfg.bias_amplitude > 0.0) {
        auto rng = seed.child(0).engine();
        auto b = smooth_noise(x.grid, cfg.bias_sigma, rng);
        float peak = 0.0f;
        for (float v : b) peak = std::max(peak, std::abs(v));
        const double s = peak > 0.0f ? cfg.bias_amplitude / peak : 0.0;
        for (std::size_t i = 0; i < S; ++i) out.data[i] = static_cast<float>(out.data[i] * std::exp(s * b[i]));
    }
    if (cfg.gamma_log_range > 0.0) {
        auto rng = seed.child(1).engine();
        std::uniform_real_distribution<double> u(-cfg.gamma_log_range, cfg.gamma_log_range);
        const double gamma = std::exp(u(rng));
        for (auto& v : out.data) v = static_cast<float>(std::pow(std::max(0.0f, v), gamma));
    }
    if (cfg.noise_sigma > 0.0) {
        auto rng = seed.child(2).engine();
        std::normal_distribution<double> n(0.0, cfg.noise_sigma);
        for (auto& v : out.data) v = static_cast<float>(v + n(rng));
    }
    for (auto& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

GroupBatch synth_group(const std::vector<ProbSeg>& labelmaps, const SynthConfig& cfg, const SeedPath& seed) {
    if (labelmaps.empty()) throw ValidationError("synth_group: no labelmaps");
    const Grid& g = labelmaps[0].grid;
    for (const auto& l : labelmaps) {
        require_same_grid(g, l.grid, "synth_group");
        if (l.classes != labelmaps[0].classes) throw ValidationError("synth_group: class count mismatch");
    }
    const int K = labelmaps[0].classes;
    auto mean_rng = seed.child(0).engine();
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::vector<double> means(static_cast<std::size_t>(K));
    for (auto& m : means) m = uni(mean_rng);

    GroupBatch batch;
    for (std::size_t i = 0; i < labelmaps.size(); ++i) {
        const auto labels = labelmaps[i].argmax();
        auto rng = seed.child({1, i}).engine();
        std::normal_distribution<double> jitter(0.0, cfg.sigma_within);
        ImageVolume img(g);
        for (std::size_t p = 0; p < labels.size(); ++p) {
            double v = means[static_cast<std::size_t>(labels[p])];
            if (cfg.sigma_within > 0.0) v += jitter(rng);
            img.data[p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
        GroupMember m;
        m.id = "synth-" + std::to_string(i);
        m.image = corrupt_image(img, cfg, seed.child({2, i}));
        m.seg = labelmaps[i];
        m.meta = {{"synthetic", true}, {"modality", "synthetic"}};
        batch.members.push_back(std::move(m));
    }
    return batch;
}

GroupBatch random_synth_group(const SynthConfig& cfg, int m, const SeedPath& seed) {
    if (m < 1) throw ValidationError("random_synth_group: m must be >= 1");
    std::vector<ProbSeg> maps;
    for (int i = 0; i < m; ++i) maps.push_back(gen_labelmap(cfg, seed.child({0, static_cast<std::uint64_t>(i)})));
    return synth_group(maps, cfg, seed.child(1));
}

std::filesystem::path write_synth_dataset(const std::filesystem::path& dir, const SynthConfig& cfg, int groups, int m,
                                          std::uint64_t seed) {
    if (groups < 1 || m < 1) throw ValidationError("synth dataset needs at least one group and member");
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "segs");
    DatasetManifest manifest;
    const SeedPath root(seed);
    for (int gi = 0; gi < groups; ++gi) {
        char tag[32];
        std::snprintf(tag, sizeof tag, "g%03d", gi);
        auto batch = random_synth_group(cfg, m, root.child(static_cast<std::uint64_t>(gi)));
        for (int i = 0; i < m; ++i) {
            char id[48];
            std::snprintf(id, sizeof id, "%s_m%02d", tag, i);
            const auto& mem = batch.members[static_cast<std::size_t>(i)];
            SubjectRecord r;
            r.id = id;
            r.image_path = dir / "images" / (std::string(id) + ".tensor");
            r.seg_path = dir / "segs" / (std::string(id) + ".tensor");
            r.modality = std::string("synth-") + tag;
            // roughly 80/10/10 by group
            r.split = gi % 10 == 8 ? Split::Val : gi % 10 == 9 ? Split::Test : Split::Train;
            write_image(r.image_path, mem.image);
            write_seg(*r.seg_path, *mem.seg);
            manifest.records.push_back(std::move(r));
        }
    }
    const auto path = dir / "manifest.jsonl";
    write_manifest(path, manifest);
    return path;
}

} // namespace mm
