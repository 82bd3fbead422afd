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

#include "multimorph/baseline_iter.hpp"
#include "multimorph/errors.hpp"
#include "multimorph/fields.hpp"

using namespace mm;

namespace {

ImageVolume gaussian_blob(int n, double cx, double sigma) {
    ImageVolume x(Grid::make2(n, n));
    for (int y = 0; y < n; ++y)
        for (int i = 0; i < n; ++i) {
            const double dy = y + 0.5 - n / 2.0, dx = i + 0.5 - cx;
            x.data[static_cast<std::size_t>(y) * n + i] = static_cast<float>(std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)));
        }
    return x;
}

GroupBatch pair(int n, double shift, double sigma) {
    GroupBatch g;
    g.members.push_back({"a", gaussian_blob(n, n / 2.0 - shift, sigma), {}, {}});
    g.members.push_back({"b", gaussian_blob(n, n / 2.0 + shift, sigma), {}, {}});
    return g;
}

double fg_dice(const ImageVolume& a, const ImageVolume& b) {
    double i = 0, na = 0, nb = 0;
    for (std::size_t p = 0; p < a.data.size(); ++p) {
        const bool x = a.data[p] > 0.5f, y = b.data[p] > 0.5f;
        i += x && y;
        na += x;
        nb += y;
    }
    return 2 * i / (na + nb);
}

} // namespace

TEST_CASE("zero outer iterations return the plain mean") {
    auto g = pair(32, 2, 5);
    IterConfig c;
    c.outer_iterations = 0;
    auto r = iterative_atlas(g, c);
    REQUIRE(r.trace.size() == 1);
    for (std::size_t i = 0; i < r.atlas.data.size(); ++i)
        CHECK(r.atlas.data[i] == doctest::Approx(0.5 * (g.members[0].image.data[i] + g.members[1].image.data[i])).epsilon(1e-6));
    for (const auto& v : r.velocities)
        for (float x : v.data) REQUIRE(x == 0.0f);
}

TEST_CASE("identical members sit at the fixed point") {
    GroupBatch g;
    g.members.push_back({"a", gaussian_blob(32, 14, 5), {}, {}});
    g.members.push_back({"b", gaussian_blob(32, 14, 5), {}, {}});
    IterConfig c;
    c.outer_iterations = 3;
    c.inner_steps = 5;
    auto r = iterative_atlas(g, c);
    for (const auto& u : r.displacements)
        for (float x : u.data) REQUIRE(std::abs(x) <= 1e-6);
    for (std::size_t i = 0; i < r.atlas.data.size(); ++i) REQUIRE(std::abs(r.atlas.data[i] - g.members[0].image.data[i]) <= 1e-6);
    for (const auto& [it, f] : objective_trace(r)) CHECK(f == doctest::Approx(r.trace[0].second).epsilon(1e-12));
}

TEST_CASE("objective trace does not increase and fields stay centered") {
    auto g = pair(32, 2, 5);
    IterConfig c;
    c.outer_iterations = 6;
    c.inner_steps = 15;
    auto r = iterative_atlas(g, c);
    const auto tr = objective_trace(r);
    REQUIRE(tr.size() == 7);
    for (std::size_t i = 1; i < tr.size(); ++i) CHECK(tr[i].second <= tr[i - 1].second + 1e-6);
    CHECK(tr.back().second < tr.front().second);
    CHECK(velocity_centrality(r.velocities) <= 1e-10);
    for (const auto& u : r.displacements) CHECK(count_folds(u) == 0);
}

TEST_CASE("translated blob pair aligns") {
    auto g = pair(48, 2, 6);
    IterConfig c;
    c.outer_iterations = 10;
    c.inner_steps = 25;
    auto r = iterative_atlas(g, c);
    const double before = fg_dice(g.members[0].image, g.members[1].image);
    const double after = fg_dice(r.warped[0], r.warped[1]);
    MESSAGE("dice " << before << " -> " << after);
    CHECK(after >= 0.9);
    CHECK(after > before);
}

TEST_CASE("invalid inputs are rejected") {
    IterConfig c;
    GroupBatch one;
    one.members.push_back({"a", gaussian_blob(16, 8, 3), {}, {}});
    CHECK_THROWS_AS(iterative_atlas(one, c), ValidationError);
    c.step_size = 0.0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    IterConfig d;
    nlohmann::json j = d;
    CHECK(j.get<IterConfig>().inner_steps == 50);
}
