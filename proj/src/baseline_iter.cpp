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

#include "multimorph/baseline_iter.hpp"

#include <chrono>
#include <cmath>

#include "multimorph/errors.hpp"
#include "multimorph/fields.hpp"
#include "multimorph/kernels.hpp"

namespace mm {

void IterConfig::validate() const {
    if (outer_iterations < 0 || inner_steps < 1) throw ValidationError("iteration counts must be positive");
    if (!(step_size > 0.0)) throw ValidationError("step size must be positive");
    if (!(lambda_reg >= 0.0)) throw ValidationError("lambda must be nonnegative");
    if (!(smooth_sigma >= 0.0)) throw ValidationError("smoothing sigma must be nonnegative");
    if (lncc_window < 3 || lncc_window % 2 == 0) throw ValidationError("lncc window must be odd and >= 3");
    if (!(epsilon > 0.0)) throw ValidationError("epsilon must be positive");
    if (integration_steps < 0) throw ValidationError("integration steps must be nonnegative");
}

void to_json(nlohmann::json& j, const IterConfig& c) {
    j = {{"outer_iterations", c.outer_iterations}, {"inner_steps", c.inner_steps}, {"step_size", c.step_size},
         {"lambda_reg", c.lambda_reg},             {"smooth_sigma", c.smooth_sigma}, {"center_fields", c.center_fields},
         {"lncc_window", c.lncc_window},           {"epsilon", c.epsilon}, {"integration_steps", c.integration_steps}};
}

void from_json(const nlohmann::json& j, IterConfig& c) {
    IterConfig d;
    c.outer_iterations = j.value("outer_iterations", d.outer_iterations);
    c.inner_steps = j.value("inner_steps", d.inner_steps);
    c.step_size = j.value("step_size", d.step_size);
    c.lambda_reg = j.value("lambda_reg", d.lambda_reg);
    c.smooth_sigma = j.value("smooth_sigma", d.smooth_sigma);
    c.center_fields = j.value("center_fields", d.center_fields);
    c.lncc_window = j.value("lncc_window", d.lncc_window);
    c.epsilon = j.value("epsilon", d.epsilon);
    c.integration_steps = j.value("integration_steps", d.integration_steps);
    c.validate();
}

namespace {

using T = double;

struct Problem {
    const IterConfig& cfg;
    int dims;
    ad::Tensor<T> images;   // [m,1,...]
    ad::Tensor<T> templ;    // [1,1,...]

    // Objective (mean over members) and, when `grad` is set, dF/dv.
    double eval(const ad::Tensor<T>& v, ad::Tensor<T>* grad) const {
        auto vv = grad ? ad::parameter(v) : ad::constant(v);
        auto u = ad::integrate(vv, cfg.integration_steps, dims);
        auto warped = ad::grid_sample(ad::constant(images), u, dims);
        auto sim = ad::lncc_loss(ad::constant(templ), warped, cfg.lncc_window, static_cast<T>(cfg.epsilon), dims);
        auto reg = ad::grad_penalty(u, dims);
        auto total = ad::weighted_sum<T>({sim, reg}, {T(1), static_cast<T>(cfg.lambda_reg)});
        if (grad) {
            ad::backward(total);
            *grad = ad::Tensor<T>(v.shape, vv->grad);
        }
        return static_cast<double>(total->value.data[0]);
    }
};

void center(ad::Tensor<T>& t) {
    const int m = t.n();
    const std::size_t block = t.size() / static_cast<std::size_t>(m);
    for (std::size_t i = 0; i < block; ++i) {
        double s = 0.0;
        for (int n = 0; n < m; ++n) s += t.data[n * block + i];
        s /= m;
        for (int n = 0; n < m; ++n) t.data[n * block + i] -= s;
    }
}

void smooth(ad::Tensor<T>& v, double sigma, int dims) {
    const kern::Vol3 vol{v.shape[2], v.shape[3], v.shape[4]};
    const std::size_t S = vol.size();
    for (std::size_t b = 0; b < static_cast<std::size_t>(v.n() * v.c()); ++b)
        kern::gaussian_smooth(v.data.data() + b * S, vol, dims, sigma);
}

ad::Tensor<T> mean_warped(const ad::Tensor<T>& images, const ad::Tensor<T>& v, int dims, int steps) {
    auto u = ad::integrate(ad::constant(v), steps, dims);
    auto w = ad::grid_sample(ad::constant(images), u, dims);
    return ad::group_mean(w)->value;
}

} // namespace

AtlasResult iterative_atlas(const GroupBatch& group, const IterConfig& cfg) {
    cfg.validate();
    group.validate();
    if (group.size() < 2) throw ValidationError("iterative atlas needs at least two members");
    const auto t0 = std::chrono::steady_clock::now();
    const Grid& g = group.grid();
    const int m = static_cast<int>(group.size());
    const int dims = g.dims;

    Problem prob{cfg, dims, image_tensor<T>(group), {}};
    ad::Tensor<T> v(shape_for(g, m, dims));
    prob.templ = ad::group_mean(ad::constant(prob.images))->value;

    AtlasResult r;
    double f = prob.eval(v, nullptr);
    if (!std::isfinite(f)) throw DivergenceError("iterative atlas objective is not finite", 0);
    r.trace.emplace_back(0, f);

    ad::Tensor<T> grad;
    for (int outer = 1; outer <= cfg.outer_iterations; ++outer) {
        double step = cfg.step_size;
        for (int k = 0; k < cfg.inner_steps && step > 1e-6; ++k) {
            f = prob.eval(v, &grad);
            if (!std::isfinite(f)) throw DivergenceError("iterative atlas objective is not finite", outer);
            // The update is smoothed (fluid-style) rather than v itself, so
            // repeated smoothing does not erode the accumulated field. A
            // zero-mean update keeps the fields centered between rounds.
            smooth(grad, cfg.smooth_sigma, dims);
            if (cfg.center_fields) center(grad);
            double gmax = 0.0;
            for (T x : grad.data) gmax = std::max(gmax, std::abs(static_cast<double>(x)));
            if (gmax == 0.0) break;
            while (step > 1e-6) {
                ad::Tensor<T> trial = v;
                const T s = static_cast<T>(step / gmax);
                for (std::size_t i = 0; i < trial.size(); ++i) trial.data[i] -= s * grad.data[i];
                const double ft = prob.eval(trial, nullptr);
                if (std::isfinite(ft) && ft <= f) {
                    v = std::move(trial);
                    f = ft;
                    break;
                }
                step *= 0.5;
            }
        }
        if (cfg.center_fields) center(v);
        f = prob.eval(v, nullptr);
        // The warped mean does not minimize LNCC, so a full template swap can
        // raise the objective slightly. Move toward it with the same halving
        // rule as the field steps; an empty step keeps the old template.
        const auto target = mean_warped(prob.images, v, dims, cfg.integration_steps);
        const auto previous = prob.templ;
        for (double a = 1.0; a >= 1.0 / 64; a *= 0.5) {
            for (std::size_t i = 0; i < target.size(); ++i)
                prob.templ.data[i] = previous.data[i] + static_cast<T>(a) * (target.data[i] - previous.data[i]);
            const double ft = prob.eval(v, nullptr);
            if (std::isfinite(ft) && ft <= f) {
                f = ft;
                break;
            }
            prob.templ = previous;
        }
        if (!std::isfinite(f)) throw DivergenceError("iterative atlas objective is not finite", outer);
        r.trace.emplace_back(outer, f);
    }

    r.velocities = fields_from<VelocityField>(v, g);
    for (const auto& vel : r.velocities) r.displacements.push_back(integrate_svf(vel, cfg.integration_steps));
    aggregate(r, group);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

std::vector<std::pair<int, double>> objective_trace(const AtlasResult& result) { return result.trace; }

} // namespace mm
