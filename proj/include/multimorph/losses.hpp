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

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "multimorph/autodiff.hpp"
#include "multimorph/group.hpp"

namespace mm {

struct LossWeights {
    double lambda_reg = 1.0;
    double gamma_seg = 0.5;
    int lncc_window = 9;
    double epsilon = 1e-5;

    void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

/// 1 - mean_p NCC^2(p) over truncated cubic windows of side `window`.
double lncc_similarity(const ImageVolume& a, const ImageVolume& b, int window = 9, double eps = 1e-5);

/// Mean squared forward difference of u over channels, valid voxels and axes.
double grad_penalty(const DisplacementField& u);

/// 1 - mean over foreground classes of (2 sum pq + eps) / (sum p^2 + sum q^2 + eps).
double soft_dice_loss(const ProbSeg& p, const ProbSeg& q, double eps = 1e-5);

struct GroupLoss {
    double total = 0.0;
    std::map<std::string, double> components;   // "sim", "reg", "seg"
};

/// (1/m) sum_i [lncc(t, x_i o phi_i) + lambda grad_penalty(u_i) + gamma dice(seg_t, seg_i o phi_i)].
/// Segmentation terms only count members that carry a segmentation, and
/// only when `seg_t` is present.
GroupLoss group_loss(const ImageVolume& t, const std::optional<ProbSeg>& seg_t, const GroupBatch& group,
                     const std::vector<DisplacementField>& fields, const LossWeights& w);

/// Differentiable pieces of the group loss.
template <class T>
struct LossGraph {
    ad::Var<T> total, sim, reg, seg;
};

/// `warped` [m,1,...], `disp` [m,d,...]; `seg_t` [1,K,...] and
/// `warped_segs` [m,K,...] may be null when no segmentation term applies.
template <class T>
LossGraph<T> group_loss_graph(const ad::Var<T>& templ, const ad::Var<T>& warped, const ad::Var<T>& disp,
                              const ad::Var<T>& seg_t, const ad::Var<T>& warped_segs,
                              const std::vector<bool>& seg_mask, const LossWeights& w, int dims);

} // namespace mm
