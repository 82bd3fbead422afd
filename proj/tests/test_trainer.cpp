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
#include <limits>

#include "multimorph/errors.hpp"
#include "multimorph/trainer.hpp"

using namespace mm;
namespace fs = std::filesystem;

namespace {

NetConfig tiny_net() {
    NetConfig c;
    c.enc_widths = {4, 4};
    c.dec_widths = {4, 4};
    c.post_widths = {};
    return c;
}

DataSources tiny_synth(int n = 16) {
    DataSources d;
    d.synth.grid = Grid::make2(n, n);
    d.synth.classes = 3;
    d.synth.warp_sigma = 3.0;
    d.synth.warp_amplitude = 1.5;
    return d;
}

TrainConfig tiny_train(std::int64_t iters) {
    TrainConfig t;
    t.iterations = iters;
    t.m_lo = 2;
    t.m_hi = 3;
    t.learning_rate = 1e-3;
    t.loss.lncc_window = 5;
    t.checkpoint_interval = 5;
    t.seed = 17;
    return t;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("mm_trainer_" + name);
    fs::remove_all(p);
    return p;
}

} // namespace

TEST_CASE("synthetic sampling honours group size and provenance") {
    auto d = tiny_synth();
    TrainConfig t;
    t.synthetic_fraction = 1.0;
    t.m_lo = t.m_hi = 4;
    for (int it = 0; it < 5; ++it) {
        auto g = sample_group(d, t, 3, it);
        CHECK(g.size() == 4);
        for (const auto& m : g.members) CHECK(m.meta.value("synthetic", false));
    }
    auto a = sample_group(d, t, 3, 2), b = sample_group(d, t, 3, 2);
    CHECK(a.members[0].image.data == b.members[0].image.data);
}

TEST_CASE("synthetic share follows the configured fraction") {
    const auto dir = scratch("share");
    SynthConfig sc;
    sc.grid = Grid::make2(8, 8);
    sc.classes = 2;
    DataSources d;
    d.synth = sc;
    d.manifest = load_manifest(write_synth_dataset(dir, sc, 1, 3, 1));
    TrainConfig t;
    t.m_lo = t.m_hi = 1;
    int synth = 0;
    const int n = 10000;
    for (int it = 0; it < n; ++it) synth += sample_group(d, t, 99, it).members[0].meta.value("synthetic", false) ? 1 : 0;
    const double share = static_cast<double>(synth) / n;
    MESSAGE("synthetic share " << share);
    CHECK(share >= 0.47);
    CHECK(share <= 0.53);

    // real groups share a modality and are drawn without replacement
    t.synthetic_fraction = 0.0;
    t.m_lo = t.m_hi = 3;
    auto g = sample_group(d, t, 5, 1);
    REQUIRE(g.size() == 3);
    CHECK_FALSE(g.members[0].meta.value("synthetic", true));
    CHECK(g.members[0].id != g.members[1].id);
    CHECK(g.members[1].id != g.members[2].id);
    CHECK(g.members[0].id != g.members[2].id);

    t.m_lo = t.m_hi = 4;
    CHECK_THROWS_AS(sample_group(d, t, 5, 1), ValidationError);
    fs::remove_all(dir);
}

TEST_CASE("zero iterations keep the initial parameters") {
    const auto dir = scratch("zero");
    auto net = tiny_net();
    auto t = tiny_train(0);
    TrainOptions o;
    o.out_dir = dir;
    auto ck = train(t, net, tiny_synth(), o);
    auto init = init_params(net, mix_seed(t.seed, 1));
    auto got = from_named(ck.parameters, net);
    for (std::size_t i = 0; i < init.tensors.size(); ++i) CHECK(got.tensors[i].data == init.tensors[i].data);
    CHECK(read_log(dir / "loss_log.csv").empty());
    fs::remove_all(dir);
}

TEST_CASE("training is deterministic and resumable") {
    auto net = tiny_net();
    auto data = tiny_synth();
    const auto a = scratch("a"), b = scratch("b"), c = scratch("c");
    TrainOptions oa, ob, oc;
    oa.out_dir = a;
    ob.out_dir = b;
    oc.out_dir = c;
    train(tiny_train(20), net, data, oa);
    train(tiny_train(20), net, data, ob);
    const auto la = read_log(a / "loss_log.csv"), lb = read_log(b / "loss_log.csv");
    REQUIRE(la.size() == 20);
    REQUIRE(lb.size() == 20);
    for (std::size_t i = 0; i < la.size(); ++i) CHECK(std::abs(la[i].total - lb[i].total) <= 1e-5);
    CHECK(la.front().total != la.back().total);

    train(tiny_train(10), net, data, oc);
    oc.resume_from = c / "checkpoints" / "iter_0000010";
    train(tiny_train(20), net, data, oc);
    const auto lc = read_log(c / "loss_log.csv");
    REQUIRE(lc.size() == 20);
    for (std::size_t i = 0; i < la.size(); ++i) {
        CHECK(lc[i].iteration == la[i].iteration);
        CHECK(std::abs(lc[i].total - la[i].total) <= 1e-5);
        CHECK(lc[i].m == la[i].m);
    }
    auto fa = load_model(a / "final"), fc = load_model(c / "final");
    CHECK(fa.params.names == fc.params.names);
    for (std::size_t i = 0; i < fa.params.tensors.size(); ++i) CHECK(fa.params.tensors[i].data == fc.params.tensors[i].data);
    for (const auto& p : {a, b, c}) fs::remove_all(p);
}

TEST_CASE("log rows carry every loss component") {
    const auto dir = scratch("cols");
    TrainOptions o;
    o.out_dir = dir;
    int seen = 0;
    o.on_step = [&](const LogRow& r) {
        ++seen;
        CHECK(r.total == doctest::Approx(r.sim + 1.0 * r.reg + 0.5 * r.seg).epsilon(1e-5));
        CHECK(r.synthetic);
    };
    train(tiny_train(3), tiny_net(), tiny_synth(), o);
    CHECK(seen == 3);
    fs::remove_all(dir);
}

TEST_CASE("a non-finite loss aborts and keeps earlier checkpoints") {
    const auto dir = scratch("nan");
    SynthConfig sc;
    sc.grid = Grid::make2(16, 16);
    sc.classes = 3;
    DataSources d;
    d.synth = sc;
    d.manifest = load_manifest(write_synth_dataset(dir / "data", sc, 1, 2, 4));
    ImageVolume bad(sc.grid, std::numeric_limits<float>::quiet_NaN());
    TensorMeta meta;
    meta.allow_nonfinite = true;
    write_tensor(d.manifest->records[0].image_path, {{16, 16}, bad.data}, meta);
    d.synth.gamma_log_range = 0.0;   // x^gamma would map NaN to 0 through max(0, x)
    auto t = tiny_train(5);
    t.synthetic_fraction = 0.0;
    t.m_lo = t.m_hi = 2;
    TrainOptions o;
    o.out_dir = dir / "run";
    CHECK_THROWS_AS(train(t, tiny_net(), d, o), DivergenceError);
    CHECK(fs::exists(dir / "run" / "checkpoints" / "iter_0000000" / "index.json"));
    fs::remove_all(dir);
}

TEST_CASE("ablation network variants all train") {
    for (auto [cl, gb, stat] : {std::tuple{false, true, ad::Statistic::Mean}, std::tuple{true, false, ad::Statistic::Mean},
                                std::tuple{true, true, ad::Statistic::Var}, std::tuple{true, true, ad::Statistic::Max}}) {
        auto net = tiny_net();
        net.use_centrality = cl;
        net.use_group_block = gb;
        net.statistic = stat;
        const auto dir = scratch("variant");
        TrainOptions o;
        o.out_dir = dir;
        auto t = tiny_train(3);
        t.loss.gamma_seg = 0.0;
        CHECK_NOTHROW(train(t, net, tiny_synth(), o));
        fs::remove_all(dir);
    }
}

TEST_CASE("end-to-end gradients match finite differences") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        auto r = gradcheck(GradcheckOptions{}, s);
        CHECK(r.checked >= 50);
        CHECK(r.max_rel < 1e-3);
    }
    GradcheckOptions plain;
    plain.loss.lambda_reg = 0.0;
    plain.loss.gamma_seg = 0.0;
    auto r = gradcheck(plain, 3);
    CHECK(r.checked >= 50);
    CHECK(r.max_rel < 1e-3);

    GradcheckOptions same;
    same.identical = true;
    same.loss.gamma_seg = 0.0;
    r = gradcheck(same, 3);
    CHECK(r.max_rel < 1e-4);
}

TEST_CASE("config validation") {
    TrainConfig t;
    t.m_lo = 3;
    t.m_hi = 2;
    CHECK_THROWS_AS(t.validate(), ValidationError);
    t = TrainConfig{};
    t.synthetic_fraction = 1.5;
    CHECK_THROWS_AS(t.validate(), ValidationError);
    nlohmann::json j = TrainConfig::full_scale();
    auto back = j.get<TrainConfig>();
    CHECK(back.iterations == 80000);
    CHECK(back.m_hi == 12);
}
