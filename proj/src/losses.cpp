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

#include "multimorph/losses.hpp"

#include "multimorph/errors.hpp"

namespace mm {

void LossWeights::validate() const {
    if (lambda_reg < 0.0 || gamma_seg < 0.0) throw ValidationError("loss weights must be nonnegative");
    if (lncc_window < 3 || lncc_window % 2 == 0) throw ValidationError("lncc_window must be odd and >= 3");
    if (!(epsilon > 0.0)) throw ValidationError("epsilon must be positive");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
    j = {{"lambda_reg", w.lambda_reg}, {"gamma_seg", w.gamma_seg}, {"lncc_window", w.lncc_window}, {"epsilon", w.epsilon}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
    w.lambda_reg = j.value("lambda_reg", w.lambda_reg);
    w.gamma_seg = j.value("gamma_seg", w.gamma_seg);
    w.lncc_window = j.value("lncc_window", w.lncc_window);
    w.epsilon = j.value("epsilon", w.epsilon);
}

namespace {

ad::Var<float> image_var(const ImageVolume& x) {
    ad::Tensor<float> t(shape_for(x.grid, 1, 1), x.data);
    return ad::constant(std::move(t));
}

} // namespace

double lncc_similarity(const ImageVolume& a, const ImageVolume& b, int window, double eps) {
    require_same_grid(a.grid, b.grid, "lncc_similarity");
    for (int ax = 0; ax < a.grid.dims; ++ax)
        if (a.grid.extent[ax] < window) throw ValidationError("lncc_similarity: grid smaller than window");
    auto loss = ad::lncc_loss<float>(image_var(a), image_var(b), window, static_cast<float>(eps), a.grid.dims);
    return loss->value.data[0];
}

double grad_penalty(const DisplacementField& u) {
    ad::Tensor<float> t(shape_for(u.grid, 1, u.grid.dims), u.data);
    return ad::grad_penalty<float>(ad::constant(std::move(t)), u.grid.dims)->value.data[0];
}

double soft_dice_loss(const ProbSeg& p, const ProbSeg& q, double eps) {
    if (p.classes != q.classes) throw ValidationError("soft_dice_loss: class count mismatch");
    require_same_grid(p.grid, q.grid, "soft_dice_loss");
    auto pv = ad::constant(ad::Tensor<float>(shape_for(p.grid, 1, p.classes), p.data));
    auto qv = ad::constant(ad::Tensor<float>(shape_for(q.grid, 1, q.classes), q.data));
    return ad::soft_dice_loss<float>(pv, qv, {true}, static_cast<float>(eps))->value.data[0];
}

template <class T>
LossGraph<T> group_loss_graph(const ad::Var<T>& templ, const ad::Var<T>& warped, const ad::Var<T>& disp,
                              const ad::Var<T>& seg_t, const ad::Var<T>& warped_segs,
                              const std::vector<bool>& seg_mask, const LossWeights& w, int dims) {
    LossGraph<T> g;
    const int m = warped->value.n();
    g.sim = ad::lncc_loss<T>(templ, warped, w.lncc_window, static_cast<T>(w.epsilon), dims);
    g.reg = ad::grad_penalty<T>(disp, dims);
    int with_seg = 0;
    for (bool b : seg_mask) with_seg += b ? 1 : 0;
    if (seg_t && warped_segs && with_seg > 0) {
        // soft_dice_loss averages over masked members; rescale to a 1/m mean.
        auto dice = ad::soft_dice_loss<T>(seg_t, warped_segs, seg_mask, static_cast<T>(w.epsilon));
        g.seg = ad::scale<T>(dice, static_cast<T>(with_seg) / static_cast<T>(m));
    } else {
        g.seg = ad::constant(ad::Tensor<T>());
    }
    g.total = ad::weighted_sum<T>({g.sim, g.reg, g.seg},
                                  {T(1), static_cast<T>(w.lambda_reg), static_cast<T>(w.gamma_seg)});
    return g;
}

template LossGraph<float> group_loss_graph<float>(const ad::Var<float>&, const ad::Var<float>&, const ad::Var<float>&,
                                                  const ad::Var<float>&, const ad::Var<float>&, const std::vector<bool>&,
                                                  const LossWeights&, int);
template LossGraph<double> group_loss_graph<double>(const ad::Var<double>&, const ad::Var<double>&,
                                                    const ad::Var<double>&, const ad::Var<double>&,
                                                    const ad::Var<double>&, const std::vector<bool>&,
                                                    const LossWeights&, int);

GroupLoss group_loss(const ImageVolume& t, const std::optional<ProbSeg>& seg_t, const GroupBatch& group,
                     const std::vector<DisplacementField>& fields, const LossWeights& w) {
    group.validate();
    w.validate();
    if (fields.size() != group.size())
        throw ValidationError("group_loss: " + std::to_string(fields.size()) + " fields for " +
                              std::to_string(group.size()) + " members");
    const Grid& g = group.grid();
    require_same_grid(g, t.grid, "group_loss template");
    for (const auto& f : fields) require_same_grid(g, f.grid, "group_loss field");

    auto disp = ad::constant(field_tensor<float>(fields));
    auto images = ad::constant(image_tensor<float>(group));
    auto warped = ad::grid_sample<float>(images, disp, g.dims);
    auto templ = image_var(t);

    ad::Var<float> segt, wsegs;
    std::vector<bool> mask(group.size(), false);
    if (seg_t && group.any_seg()) {
        for (std::size_t i = 0; i < group.size(); ++i) mask[i] = group.members[i].seg.has_value();
        segt = ad::constant(ad::Tensor<float>(shape_for(g, 1, seg_t->classes), seg_t->data));
        auto segs = ad::constant(seg_tensor<float>(group, seg_t->classes));
        wsegs = ad::renormalize_channels<float>(ad::grid_sample<float>(segs, disp, g.dims), 1e-6f);
    }
    auto graph = group_loss_graph<float>(templ, warped, disp, segt, wsegs, mask, w, g.dims);
    GroupLoss out;
    out.total = graph.total->value.data[0];
    out.components["sim"] = graph.sim->value.data[0];
    out.components["reg"] = graph.reg->value.data[0];
    out.components["seg"] = graph.seg->value.data[0];
    return out;
}

} // namespace mm
