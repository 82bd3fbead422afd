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

#include <string>

#include "gradcheck.hpp"
#include "multimorph/autodiff.hpp"

using namespace mm;
using gc::random_tensor;

namespace {

constexpr double kTol = 1e-4;

void expect_ok(const gc::Result& r, const std::string& what) {
    MESSAGE(what << ": max relative error " << r.max_rel << " (" << r.skipped << " skipped)");
    CHECK(r.skipped * 10 <= r.checked);
    CHECK(r.max_abs_grad > 0.0);
    CHECK(r.max_rel < kTol);
}

} // namespace

TEST_CASE("conv gradients, 2-D and 3-D, strided") {
    for (int dims : {2, 3}) {
        for (int stride : {1, 2}) {
            const int kz = dims == 3 ? 3 : 1, z = dims == 3 ? 4 : 1;
            auto x = random_tensor({2, 3, z, 6, 6}, -1, 1, 1);
            auto w = random_tensor({4, 3, kz, 3, 3}, -0.5, 0.5, 2);
            auto b = random_tensor({1, 4, 1, 1, 1}, -0.5, 0.5, 3);
            auto r = gc::check(
                [&](const auto& p) { return gc::project(ad::conv<double>(p[0], p[1], p[2], stride, dims), 4); },
                {x, w, b});
            expect_ok(r, "conv");
        }
    }
}

TEST_CASE("conv matches a direct sum") {
    ad::Tensor<double> x({1, 1, 1, 3, 3}), w({1, 1, 1, 3, 3}), b({1, 1, 1, 1, 1});
    for (int i = 0; i < 9; ++i) x.data[i] = i + 1;
    w.data = {0, 0, 0, 0, 1, 1, 0, 0, 0};
    b.data = {0.5};
    auto y = ad::conv<double>(ad::constant(x), ad::constant(w), ad::constant(b), 1, 2)->value;
    // y(i,j) = x(i,j) + x(i,j+1) with zero padding, plus bias
    std::vector<double> expect = {1 + 2, 2 + 3, 3, 4 + 5, 5 + 6, 6, 7 + 8, 8 + 9, 9};
    for (int i = 0; i < 9; ++i) CHECK(y.data[i] == doctest::Approx(expect[i] + 0.5));
}

TEST_CASE("elementwise and structural op gradients") {
    auto x = random_tensor({3, 2, 1, 4, 4}, -1, 1, 5);
    auto y = random_tensor({3, 2, 1, 4, 4}, -1, 1, 6);
    for (auto& v : x.data)
        if (std::abs(v) < 0.01) v = 0.05;
    expect_ok(gc::check([](const auto& p) { return gc::project(ad::leaky_relu<double>(p[0], 0.2), 1); }, {x}), "leaky");
    expect_ok(gc::check([](const auto& p) { return gc::project(ad::add<double>(p[0], p[1]), 1); }, {x, y}), "add");
    expect_ok(gc::check([](const auto& p) { return gc::project(ad::scale<double>(p[0], -3.0), 1); }, {x}), "scale");
    expect_ok(gc::check([](const auto& p) { return gc::project(ad::concat_channels<double>(p[0], p[1]), 1); },
                        {x, y}),
              "concat");
    expect_ok(gc::check([](const auto& p) { return gc::project(ad::upsample2<double>(p[0], 2), 1); }, {x}), "upsample");
    expect_ok(gc::check([](const auto& p) { return gc::project(ad::center_group<double>(p[0]), 1); }, {x}), "center");
    expect_ok(gc::check([](const auto& p) { return gc::project(ad::group_mean<double>(p[0]), 1); }, {x}), "mean");
    auto pos = random_tensor({2, 3, 1, 4, 4}, 0.1, 1, 8);
    expect_ok(gc::check([](const auto& p) { return gc::project(ad::renormalize_channels<double>(p[0], 1e-6), 1); },
                        {pos}),
              "renormalize");
}

TEST_CASE("group summary gradients for every statistic") {
    auto x = random_tensor({3, 2, 1, 4, 4}, -1, 1, 9);
    for (auto stat : {ad::Statistic::Mean, ad::Statistic::Max, ad::Statistic::Var}) {
        auto r = gc::check([stat](const auto& p) { return gc::project(ad::group_concat<double>(p[0], stat), 2); }, {x});
        expect_ok(r, "group_concat");
    }
}

TEST_CASE("group summary values") {
    ad::Tensor<double> x({3, 1, 1, 1, 2});
    x.data = {1, 4, 3, -2, 2, 7};
    auto mean = ad::group_concat<double>(ad::constant(x), ad::Statistic::Mean)->value;
    auto mx = ad::group_concat<double>(ad::constant(x), ad::Statistic::Max)->value;
    auto var = ad::group_concat<double>(ad::constant(x), ad::Statistic::Var)->value;
    REQUIRE(mean.shape == ad::Shape{3, 2, 1, 1, 2});
    for (int n = 0; n < 3; ++n) {
        CHECK(mean.data[n * 4 + 0] == x.data[n * 2 + 0]);
        CHECK(mean.data[n * 4 + 2] == doctest::Approx(2.0));
        CHECK(mean.data[n * 4 + 3] == doctest::Approx(3.0));
        CHECK(mx.data[n * 4 + 2] == 3.0);
        CHECK(mx.data[n * 4 + 3] == 7.0);
        CHECK(var.data[n * 4 + 2] == doctest::Approx(2.0 / 3.0));
        CHECK(var.data[n * 4 + 3] == doctest::Approx(14.0));
    }
    ad::Tensor<double> single({1, 1, 1, 1, 2});
    single.data = {5, 6};
    auto v1 = ad::group_concat<double>(ad::constant(single), ad::Statistic::Var)->value;
    CHECK(v1.data[2] == 0.0);
    CHECK(v1.data[3] == 0.0);
}

TEST_CASE("grid_sample gradients") {
    for (int dims : {2, 3}) {
        const int z = dims == 3 ? 4 : 1;
        auto src = random_tensor({2, 2, z, 5, 5}, 0, 1, 11);
        auto disp = random_tensor({2, dims, z, 5, 5}, -1.5, 1.5, 12);
        gc::avoid_kinks(disp, 0.02);
        auto r = gc::check([dims](const auto& p) { return gc::project(ad::grid_sample<double>(p[0], p[1], dims), 3); },
                           {src, disp});
        expect_ok(r, "grid_sample");
    }
}

TEST_CASE("scaling-and-squaring gradients") {
    auto v = random_tensor({2, 2, 1, 6, 6}, -0.6, 0.6, 13);
    auto r = gc::check([](const auto& p) { return gc::project(ad::integrate<double>(p[0], 4, 2), 4); }, {v});
    expect_ok(r, "integrate");
}

TEST_CASE("loss op gradients on 8x8 instances") {
    auto t = random_tensor({1, 1, 1, 8, 8}, 0, 1, 21);
    auto w = random_tensor({3, 1, 1, 8, 8}, 0, 1, 22);
    expect_ok(gc::check([](const auto& p) { return ad::lncc_loss<double>(p[0], p[1], 5, 1e-5, 2); }, {t, w}), "lncc");

    auto u = random_tensor({3, 2, 1, 8, 8}, -2, 2, 23);
    expect_ok(gc::check([](const auto& p) { return ad::grad_penalty<double>(p[0], 2); }, {u}), "grad_penalty");

    auto st = random_tensor({1, 3, 1, 8, 8}, 0, 1, 24);
    auto ss = random_tensor({3, 3, 1, 8, 8}, 0, 1, 25);
    expect_ok(gc::check([](const auto& p) { return ad::soft_dice_loss<double>(p[0], p[1], {true, false, true}, 1e-5); },
                        {st, ss}),
              "soft_dice");
}

TEST_CASE("backward accumulates through shared subgraphs") {
    ad::Tensor<double> x({1, 1, 1, 1, 2});
    x.data = {2.0, -1.0};
    auto p = ad::parameter(x);
    auto y = ad::add<double>(p, ad::scale<double>(p, 3.0));   // 4x
    auto s = gc::project(ad::add<double>(y, p), 99);          // 5x
    ad::backward(s);
    auto r = oracle::uniform(2, -1, 1, 99);
    CHECK(p->grad[0] == doctest::Approx(5 * r[0]));
    CHECK(p->grad[1] == doctest::Approx(5 * r[1]));
}
