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

#include <random>

#include "multimorph/errors.hpp"
#include "multimorph/fields.hpp"
#include "multimorph/losses.hpp"
#include "oracles.hpp"

using namespace mm;

namespace {

ImageVolume random_image(const Grid& g, unsigned seed) {
    ImageVolume x(g);
    auto v = oracle::uniform(g.voxels(), 0, 1, seed);
    for (std::size_t i = 0; i < v.size(); ++i) x.data[i] = static_cast<float>(v[i]);
    return x;
}

ProbSeg blob_seg(const Grid& g, int k, int ci, int cj, int r) {
    const int n1 = g.extent[1];
    std::vector<int> labels(g.voxels(), 0);
    for (int i = 0; i < g.extent[0]; ++i)
        for (int j = 0; j < n1; ++j)
            if ((i - ci) * (i - ci) + (j - cj) * (j - cj) <= r * r) labels[static_cast<std::size_t>(i) * n1 + j] = k - 1;
    return ProbSeg::from_labels(g, k, labels);
}

DisplacementField random_disp(const Grid& g, double amp, unsigned seed) {
    std::mt19937_64 rng(seed);
    auto v = random_smooth_field(g, 2.0, amp, rng);
    DisplacementField u(g);
    u.data = v.data;
    return u;
}

} // namespace

TEST_CASE("lncc self-similarity and affine invariance") {
    const Grid g = Grid::make2(16, 16);
    auto a = random_image(g, 1);
    CHECK(lncc_similarity(a, a) <= 1e-3);
    ImageVolume b(g);
    for (std::size_t i = 0; i < g.voxels(); ++i) b.data[i] = 2 * a.data[i] + 0.1f;
    CHECK(lncc_similarity(a, b) <= 1e-3);
}

TEST_CASE("lncc matches brute-force windowed correlation") {
    const Grid g = Grid::make2(12, 12);
    for (unsigned s = 0; s < 4; ++s) {
        auto a = random_image(g, 10 + s), b = random_image(g, 20 + s);
        std::vector<double> da(a.data.begin(), a.data.end()), db(b.data.begin(), b.data.end());
        const double ref = oracle::lncc_bruteforce(da, db, 12, 12, 5, 1e-5);
        CHECK(std::abs(lncc_similarity(a, b, 5) - ref) < 1e-4);
        CHECK(lncc_similarity(a, b, 5) == doctest::Approx(lncc_similarity(b, a, 5)).epsilon(1e-6));
    }
}

TEST_CASE("lncc rejects windows larger than the grid") {
    const Grid g = Grid::make2(8, 8);
    CHECK_THROWS_AS(lncc_similarity(random_image(g, 1), random_image(g, 2), 9), ValidationError);
}

TEST_CASE("gradient penalty closed forms") {
    const int n = 10;
    const Grid g = Grid::make2(n, n);
    CHECK(grad_penalty(DisplacementField(g)) == 0.0);
    DisplacementField c(g);
    std::fill(c.data.begin(), c.data.end(), 5.0f);
    CHECK(grad_penalty(c) == 0.0);
    DisplacementField r(g);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) r.channel(0)[i * n + j] = static_cast<float>(i);
    CHECK(grad_penalty(r) == doctest::Approx(0.25));
}

TEST_CASE("soft dice closed forms") {
    const Grid g = Grid::make2(4, 4);
    auto p = blob_seg(g, 2, 1, 1, 1);
    CHECK(soft_dice_loss(p, p) == doctest::Approx(0.0).epsilon(1e-6));

    std::vector<int> la(16, 0), lb(16, 0);
    la[0] = la[1] = 1;
    lb[14] = lb[15] = 1;
    CHECK(soft_dice_loss(ProbSeg::from_labels(g, 2, la), ProbSeg::from_labels(g, 2, lb)) ==
          doctest::Approx(1.0).epsilon(1e-5));

    std::vector<int> fa(16, 0), fb(16, 0);
    for (int i : {0, 1, 2, 3}) fa[static_cast<std::size_t>(i)] = 1;
    for (int i : {2, 3, 4, 5}) fb[static_cast<std::size_t>(i)] = 1;
    CHECK(soft_dice_loss(ProbSeg::from_labels(g, 2, fa), ProbSeg::from_labels(g, 2, fb)) ==
          doctest::Approx(0.5).epsilon(1e-5));
    CHECK_THROWS_AS(soft_dice_loss(ProbSeg(g, 2), ProbSeg(g, 3)), ValidationError);
}

TEST_CASE("group loss") {
    const Grid g = Grid::make2(16, 16);
    GroupBatch group;
    for (int i = 0; i < 3; ++i) {
        GroupMember m;
        m.id = "m" + std::to_string(i);
        m.image = random_image(g, 30 + i);
        m.seg = blob_seg(g, 3, 6 + i, 8, 4);
        group.members.push_back(m);
    }
    std::vector<DisplacementField> fields;
    for (int i = 0; i < 3; ++i) fields.push_back(random_disp(g, 1.5, 40 + i));
    auto t = random_image(g, 50);
    auto seg_t = blob_seg(g, 3, 7, 8, 5);
    LossWeights w;

    SUBCASE("identical images with zero fields") {
        GroupBatch same = group;
        for (auto& m : same.members) m.image = t;
        std::vector<DisplacementField> zero(3, DisplacementField(g));
        LossWeights w0;
        w0.gamma_seg = 0;
        CHECK(group_loss(t, std::nullopt, same, zero, w0).total <= 1e-3);
    }
    SUBCASE("weights zeroed gives the mean similarity") {
        LossWeights w0;
        w0.lambda_reg = 0;
        w0.gamma_seg = 0;
        auto l = group_loss(t, seg_t, group, fields, w0);
        double sim = 0;
        for (int i = 0; i < 3; ++i) sim += lncc_similarity(t, warp_image(group.members[i].image, fields[i]));
        CHECK(l.total == doctest::Approx(sim / 3).epsilon(1e-6));
        CHECK(l.total == l.components.at("sim"));
    }
    SUBCASE("recomposition from separately computed terms") {
        auto l = group_loss(t, seg_t, group, fields, w);
        double total = 0;
        for (int i = 0; i < 3; ++i) {
            total += lncc_similarity(t, warp_image(group.members[i].image, fields[i]));
            total += w.lambda_reg * grad_penalty(fields[i]);
            total += w.gamma_seg * soft_dice_loss(seg_t, warp_seg(*group.members[i].seg, fields[i]), w.epsilon);
        }
        CHECK(std::abs(l.total - total / 3) < 1e-6);
        CHECK(l.components.at("seg") > 0.0);
    }
    SUBCASE("members without segmentations skip the seg term") {
        GroupBatch partial = group;
        partial.members[1].seg.reset();
        auto l = group_loss(t, seg_t, partial, fields, w);
        double seg = 0;
        for (int i : {0, 2}) seg += soft_dice_loss(seg_t, warp_seg(*group.members[i].seg, fields[i]), w.epsilon);
        CHECK(l.components.at("seg") == doctest::Approx(seg / 3).epsilon(1e-5));
    }
    SUBCASE("permutation invariance") {
        GroupBatch perm;
        perm.members = {group.members[2], group.members[0], group.members[1]};
        std::vector<DisplacementField> pf{fields[2], fields[0], fields[1]};
        CHECK(group_loss(t, seg_t, perm, pf, w).total ==
              doctest::Approx(group_loss(t, seg_t, group, fields, w).total).epsilon(1e-6));
    }
    SUBCASE("raising lambda never lowers the weighted regularizer") {
        double prev = -1;
        for (double lam : {0.0, 0.5, 1.0, 2.0}) {
            LossWeights wl;
            wl.lambda_reg = lam;
            auto l = group_loss(t, seg_t, group, fields, wl);
            const double weighted = lam * l.components.at("reg");
            CHECK(weighted >= prev);
            prev = weighted;
        }
    }
    SUBCASE("length mismatch") {
        fields.pop_back();
        CHECK_THROWS_AS(group_loss(t, seg_t, group, fields, w), ValidationError);
    }
}
