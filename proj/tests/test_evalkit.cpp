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
#include <sstream>

#include "multimorph/errors.hpp"
#include "multimorph/evalkit.hpp"
#include "multimorph/fields.hpp"

using namespace mm;
namespace fs = std::filesystem;

namespace {

NetConfig small_net(double head = 1e-5) {
    NetConfig c;
    c.enc_widths = {4, 4};
    c.dec_widths = {4, 4};
    c.post_widths = {};
    c.head_init_scale = head;
    return c;
}

SynthConfig small_synth() {
    SynthConfig s;
    s.grid = Grid::make2(32, 32);
    s.warp_sigma = 4.0;
    s.warp_amplitude = 2.0;
    return s;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("hard dice on small maps") {
    const Grid g = Grid::make2(4, 4);
    std::vector<int> a(16, 0), b(16, 0);
    for (int i : {0, 1, 2, 3}) a[i] = 1;
    for (int i : {2, 3, 4, 5}) b[i] = 1;
    auto pa = ProbSeg::from_labels(g, 2, a), pb = ProbSeg::from_labels(g, 2, b);
    CHECK(hard_dice(pa, pb).mean == doctest::Approx(0.5));
    CHECK(hard_dice(pa, pa).mean == 1.0);
    std::vector<int> c(16, 0);
    for (int i : {10, 11}) c[i] = 1;
    CHECK(hard_dice(pa, ProbSeg::from_labels(g, 2, c)).mean == 0.0);
    // absent from both scores 1
    auto three = hard_dice(ProbSeg::from_labels(g, 3, a), ProbSeg::from_labels(g, 3, a));
    REQUIRE(three.per_structure.size() == 2);
    CHECK(three.per_structure[1] == 1.0);
    // ties go to the lowest channel
    ProbSeg tie(g, 2);
    std::fill(tie.data.begin(), tie.data.end(), 0.5f);
    CHECK(hard_dice(tie, ProbSeg::from_labels(g, 2, std::vector<int>(16, 0))).mean == 1.0);
    CHECK_THROWS_AS(hard_dice(pa, ProbSeg::from_labels(g, 3, a)), ValidationError);
}

TEST_CASE("split halves are seeded and disjoint") {
    auto [a, b] = split_halves(20, 3);
    CHECK(a.size() == 10);
    CHECK(b.size() == 10);
    std::vector<int> seen(20, 0);
    for (auto i : a) ++seen[i];
    for (auto i : b) ++seen[i];
    for (int s : seen) CHECK(s == 1);
    CHECK(split_halves(20, 3) == split_halves(20, 3));
    CHECK(split_halves(20, 3) != split_halves(20, 4));
    CHECK_THROWS_AS(split_halves(1, 0), ValidationError);
}

TEST_CASE("transfer on identical members is exact") {
    auto net = small_net(0.05);
    auto p = init_params(net, 2);
    auto one = random_synth_group(small_synth(), 1, SeedPath(4));
    GroupBatch g;
    for (int i = 0; i < 6; ++i) g.members.push_back(one.members[0]);
    auto r = dice_transfer(p, net, g, 1);
    CHECK(r.mean_dice >= 1.0 - 1e-3);
    CHECK(r.total_folds == 0);
}

TEST_CASE("untrained model matches the unregistered baseline") {
    // zero head: fields vanish and the two pipelines coincide
    auto zero_net = small_net(0.0);
    auto zp = init_params(zero_net, 2);
    auto g = random_synth_group(small_synth(), 10, SeedPath(10));
    auto r0 = dice_transfer(zp, zero_net, g, 1);
    CHECK(r0.mean_dice == doctest::Approx(unregistered_transfer(g, 1).mean_dice).epsilon(1e-12));
    CHECK(r0.member_dice.size() == 5);

    // default grid, m = 20, default head scale
    auto net = small_net();
    auto p = init_params(net, 2);
    SynthConfig full;
    auto big = random_synth_group(full, 20, SeedPath(11));
    auto r = dice_transfer(p, net, big, 2);
    auto base = unregistered_transfer(big, 2);
    CHECK(std::abs(r.mean_dice - base.mean_dice) <= 0.02);
    CHECK(base.mean_dice < 0.75);
}

TEST_CASE("held-out labels never reach the atlas") {
    auto net = small_net(0.05);
    auto p = init_params(net, 3);
    auto g = random_synth_group(small_synth(), 6, SeedPath(5));
    auto clean = dice_transfer(p, net, g, 9);
    auto [a, b] = split_halves(6, 9);
    GroupBatch poisoned = g;
    for (auto i : b) std::fill(poisoned.members[i].seg->data.begin(), poisoned.members[i].seg->data.end(), 0.25f);
    auto dirty = dice_transfer(p, net, poisoned, 9);
    REQUIRE(clean.seg_atlas.has_value());
    CHECK(clean.seg_atlas->data == dirty.seg_atlas->data);
    CHECK(clean.centrality == dirty.centrality);

    auto missing = g;
    missing.members[0].seg.reset();
    CHECK_THROWS_AS(dice_transfer(p, net, missing, 9), ValidationError);
}

TEST_CASE("atlas evaluation") {
    auto net = small_net(0.05);
    auto p = init_params(net, 3);
    auto one = random_synth_group(small_synth(), 1, SeedPath(8));
    GroupBatch same;
    for (int i = 0; i < 3; ++i) same.members.push_back(one.members[0]);
    auto r = evaluate_atlas(build_atlas(p, net, same), same);
    CHECK(r.mean_dice == doctest::Approx(1.0));
    CHECK(r.total_folds == 0);
    CHECK(r.centrality <= 1e-8);

    // zero fields: overlap of raw segs with their mean
    auto g = random_synth_group(small_synth(), 4, SeedPath(9));
    AtlasResult zero;
    for (std::size_t i = 0; i < g.size(); ++i) {
        zero.velocities.emplace_back(g.grid());
        zero.displacements.emplace_back(g.grid());
    }
    aggregate(zero, g);
    auto z = evaluate_atlas(zero, g);
    std::vector<ProbSeg> raw;
    for (const auto& m : g.members) raw.push_back(*m.seg);
    const auto mean = build_atlas_seg(raw);
    double expect = 0.0;
    for (const auto& s : raw) expect += hard_dice(s, mean).mean / raw.size();
    CHECK(z.mean_dice == doctest::Approx(expect).epsilon(1e-12));
    CHECK(z.centrality == 0.0);

    // recomputation oracle on a model with visible fields
    auto res = build_atlas(p, net, g);
    auto rep = evaluate_atlas(res, g);
    double d = 0.0;
    std::size_t folds = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        d += hard_dice(warp_seg(*g.members[i].seg, res.displacements[i]), *res.seg).mean / g.size();
        folds += count_folds(res.displacements[i]);
    }
    CHECK(std::abs(rep.mean_dice - d) <= 1e-6);
    CHECK(rep.total_folds == folds);
    CHECK(std::abs(rep.centrality - centrality(res.displacements)) <= 1e-6);
    CHECK(rep.seconds == res.seconds);
}

TEST_CASE("variant names") {
    CHECK(variant_names().size() == 6);
    for (const auto& n : variant_names()) CHECK_NOTHROW(parse_variant(n));
    CHECK_FALSE(parse_variant("nocl_gb_mean").centrality);
    CHECK_FALSE(parse_variant("cl_nogb").group_block);
    CHECK(parse_variant("cl_gb_mean_dice").dice);
    CHECK_THROWS_AS(parse_variant("cl_gb_median"), ValidationError);
}

TEST_CASE("ablation and sweep runners on a tiny budget") {
    const auto dir = fs::temp_directory_path() / "mm_eval_runs";
    fs::remove_all(dir);
    RunOptions opt;
    opt.net = small_net();
    opt.data.synth = small_synth();
    opt.data.synth.grid = Grid::make2(16, 16);
    opt.data.synth.classes = 3;
    opt.train.iterations = 2;
    opt.train.m_hi = 3;
    opt.train.loss.lncc_window = 5;
    opt.heldout = heldout_groups(opt.data.synth, 2, 4, 1);
    opt.out_dir = dir;

    auto rows = run_ablations({"cl_gb_mean"}, opt);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].status == "ok");
    write_ablation_csv(dir / "ablation.csv", rows);
    CHECK_THROWS_AS(run_ablations({"bogus"}, opt), ValidationError);

    SweepSpec spec = SweepSpec::preset("lambda_reg");
    CHECK(spec.values.size() == 5);
    spec.values = {0.5, 1.0, 2.0};
    spec.iterations = 2;
    auto points = run_sweep(spec, opt);
    REQUIRE(points.size() == 3);
    write_sweep_csv(dir / "sweep.csv", spec.parameter, points);
    std::ifstream in(dir / "sweep.csv");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 4);

    auto first = plot_sweep(dir / "sweep.csv", dir / "plots1");
    auto second = plot_sweep(dir / "sweep.csv", dir / "plots2");
    REQUIRE(first.size() == 3);
    for (std::size_t i = 0; i < first.size(); ++i) {
        CHECK(first[i].filename() == second[i].filename());
        CHECK(slurp(first[i]) == slurp(second[i]));
    }
    CHECK(first[0].filename() == "lambda_reg_dice.svg");
    SweepSpec bad;
    bad.values = {1.0};
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    fs::remove_all(dir);
}
