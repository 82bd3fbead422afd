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

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "multimorph/errors.hpp"
#include "multimorph/fields.hpp"
#include "multimorph/synthgen.hpp"

using namespace mm;

namespace {

SynthConfig clean_config() {
    SynthConfig c;
    c.bias_amplitude = 0.0;
    c.gamma_log_range = 0.0;
    c.noise_sigma = 0.0;
    return c;
}

std::vector<double> class_means(const GroupMember& m, int k) {
    std::vector<double> sum(static_cast<std::size_t>(k), 0.0), cnt(static_cast<std::size_t>(k), 0.0);
    const auto labels = m.seg->argmax();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        sum[static_cast<std::size_t>(labels[i])] += m.image.data[i];
        cnt[static_cast<std::size_t>(labels[i])] += 1.0;
    }
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] /= std::max(1.0, cnt[i]);
    return sum;
}

} // namespace

TEST_CASE("labelmaps are deterministic and one-hot") {
    SynthConfig c;
    auto a = gen_labelmap(c, SeedPath(11));
    auto b = gen_labelmap(c, SeedPath(11));
    CHECK(a.data == b.data);
    auto d = gen_labelmap(c, SeedPath(12));
    CHECK(a.data != d.data);
    for (std::size_t i = 0; i < c.grid.voxels(); ++i) {
        float s = 0.0f;
        for (int k = 0; k < c.classes; ++k) s += a.channel(k)[i];
        REQUIRE(s == 1.0f);
    }
}

TEST_CASE("zero warp amplitude returns the base template") {
    SynthConfig c;
    c.warp_amplitude = 0.0;
    auto m = gen_labelmap(c, SeedPath(5));
    CHECK(m.argmax() == base_labels(c));
}

TEST_CASE("every structure keeps at least one percent of the grid") {
    SynthConfig c;
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto labels = gen_labelmap(c, SeedPath(s)).argmax();
        std::vector<double> frac(static_cast<std::size_t>(c.classes), 0.0);
        for (int l : labels) frac[static_cast<std::size_t>(l)] += 1.0 / static_cast<double>(labels.size());
        for (double f : frac) REQUIRE(f >= 0.01);
    }
}

TEST_CASE("generating warps are fold free at defaults") {
    SynthConfig c;
    for (std::uint64_t s = 0; s < 20; ++s) CHECK(count_folds(labelmap_warp(c, SeedPath(s))) == 0);
}

TEST_CASE("base template supports other class counts and 3-D grids") {
    SynthConfig c;
    c.classes = 9;
    auto l = base_labels(c);
    std::vector<int> seen(9, 0);
    for (int v : l) seen[static_cast<std::size_t>(v)] = 1;
    for (int v : seen) CHECK(v == 1);

    SynthConfig c3;
    c3.grid = Grid::make3(16, 16, 16);
    c3.classes = 3;
    auto l3 = base_labels(c3);
    CHECK(l3.size() == 16u * 16u * 16u);
    CHECK(std::count(l3.begin(), l3.end(), 2) > 0);
}

TEST_CASE("clean groups are piecewise constant") {
    SynthConfig c = clean_config();
    c.sigma_within = 0.0;
    std::vector<ProbSeg> maps{gen_labelmap(c, SeedPath(1)), gen_labelmap(c, SeedPath(2))};
    auto g = synth_group(maps, c, SeedPath(3));
    REQUIRE(g.size() == 2);
    const auto la = maps[0].argmax(), lb = maps[1].argmax();
    for (std::size_t i = 0; i < la.size(); ++i)
        if (la[i] == lb[i]) REQUIRE(g.members[0].image.data[i] == g.members[1].image.data[i]);
}

TEST_CASE("group draws are reproducible") {
    SynthConfig c;
    auto a = random_synth_group(c, 3, SeedPath(42));
    auto b = random_synth_group(c, 3, SeedPath(42));
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(a.members[i].image.data == b.members[i].image.data);
        CHECK(a.members[i].seg->data == b.members[i].seg->data);
    }
}

TEST_CASE("structure means agree within a group and differ across groups") {
    SynthConfig c = clean_config();
    std::vector<ProbSeg> maps;
    for (std::uint64_t s = 0; s < 4; ++s) maps.push_back(gen_labelmap(c, SeedPath(100 + s)));
    auto g = synth_group(maps, c, SeedPath(7));
    auto ref = class_means(g.members[0], c.classes);
    for (std::size_t i = 1; i < g.size(); ++i) {
        auto mu = class_means(g.members[i], c.classes);
        for (int k = 0; k < c.classes; ++k) CHECK(std::abs(mu[k] - ref[k]) < 3 * c.sigma_within);
    }
    auto h = synth_group(maps, c, SeedPath(8));
    auto other = class_means(h.members[0], c.classes);
    double diff = 0.0;
    for (int k = 0; k < c.classes; ++k) diff = std::max(diff, std::abs(other[k] - ref[k]));
    CHECK(diff > 0.1);
}

TEST_CASE("corruption with zero amplitudes is the identity") {
    SynthConfig c = clean_config();
    ImageVolume x(Grid::make2(16, 16));
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] = static_cast<float>(i) / x.data.size();
    CHECK(corrupt_image(x, c, SeedPath(1)).data == x.data);
}

TEST_CASE("noise-only corruption has the configured spread") {
    SynthConfig c = clean_config();
    c.noise_sigma = 0.02;
    ImageVolume x(Grid::make2(100, 100), 0.5f);
    auto y = corrupt_image(x, c, SeedPath(9));
    double ss = 0.0;
    for (std::size_t i = 0; i < y.data.size(); ++i) ss += (y.data[i] - 0.5) * (y.data[i] - 0.5);
    const double sd = std::sqrt(ss / y.data.size());
    CHECK(sd >= 0.017);
    CHECK(sd <= 0.023);
}

TEST_CASE("default synthetic images stay in the unit interval") {
    SynthConfig c;
    for (std::uint64_t s = 0; s < 5; ++s) {
        auto g = random_synth_group(c, 2, SeedPath(s));
        for (const auto& m : g.members)
            for (float v : m.image.data) REQUIRE((v >= 0.0f && v <= 1.0f));
    }
}

TEST_CASE("mismatched labelmap grids are rejected") {
    SynthConfig c;
    std::vector<ProbSeg> maps{gen_labelmap(c, SeedPath(1)), ProbSeg(Grid::make2(8, 8), c.classes)};
    CHECK_THROWS_AS(synth_group(maps, c, SeedPath(1)), ValidationError);
}

TEST_CASE("dataset writer emits a manifest with disjoint splits") {
    SynthConfig c;
    c.grid = Grid::make2(16, 16);
    c.classes = 3;
    const auto dir = std::filesystem::temp_directory_path() / "mm_synth_test";
    std::filesystem::remove_all(dir);
    auto path = write_synth_dataset(dir, c, 10, 2, 3);
    std::ifstream in(path);
    std::string line;
    int n = 0;
    std::set<std::string> splits;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        splits.insert(j.at("split").get<std::string>());
        ++n;
    }
    CHECK(n == 20);
    CHECK(splits.size() == 3);
    std::filesystem::remove_all(dir);
}
