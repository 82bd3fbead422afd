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

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "multimorph/autodiff.hpp"
#include "multimorph/group.hpp"
#include "multimorph/tensorio.hpp"

namespace mm {

struct NetConfig {
    int dims = 2;
    std::vector<int> enc_widths{16, 32, 32, 32};
    std::vector<int> dec_widths{32, 32, 32, 16};
    std::vector<int> post_widths{16, 16};
    ad::Statistic statistic = ad::Statistic::Mean;
    bool use_group_block = true;
    bool use_centrality = true;
    double slope = 0.2;
    double head_init_scale = 1e-5;
    int integration_steps = 7;
    int kernel = 3;

    int depth() const { return static_cast<int>(enc_widths.size()); }
    void validate() const;
    /// Throws ValidationError unless every extent divides by 2^(depth-1).
    void check_grid(const Grid& g) const;
};

std::string to_string(ad::Statistic s);
ad::Statistic parse_statistic(const std::string& s);

void to_json(nlohmann::json& j, const NetConfig& c);
void from_json(const nlohmann::json& j, NetConfig& c);

struct ParamSpec {
    std::string name;
    ad::Shape shape;
};

/// Parameter layout in evaluation order: enc*, dec*, post*, head.
std::vector<ParamSpec> param_specs(const NetConfig& cfg);

struct ModelParams {
    std::vector<std::string> names;
    std::vector<ad::Tensor<float>> tensors;

    std::size_t count() const;
    const ad::Tensor<float>& at(const std::string& name) const;
    ad::Tensor<float>& at(const std::string& name);
    /// Throws unless names and shapes match `param_specs(cfg)`.
    void check(const NetConfig& cfg) const;
};

ModelParams init_params(const NetConfig& cfg, std::uint64_t seed);

struct BlockOptions {
    int dims = 2;
    int stride = 1;
    ad::Statistic statistic = ad::Statistic::Mean;
    bool use_group = true;
    bool activate = true;
    bool residual = true;
    double slope = 0.2;
};

/// [c_i || s(c)] -> shared conv -> leaky ReLU, plus c_i when the block keeps
/// width and resolution. Without `use_group` the summary is not appended.
template <class T>
ad::Var<T> group_block_graph(const ad::Var<T>& x, const ad::Var<T>& weight, const ad::Var<T>& bias,
                             const BlockOptions& opt);

ad::Tensor<float> group_block(const ad::Tensor<float>& features, const ad::Tensor<float>& weight,
                              const ad::Tensor<float>& bias, const BlockOptions& opt);

/// Images [m,1,...] -> velocities [m,d,...]. `params` follow `param_specs`.
template <class T>
ad::Var<T> forward_graph(const ad::Var<T>& images, const std::vector<ad::Var<T>>& params, const NetConfig& cfg);

std::vector<VelocityField> forward(const GroupBatch& group, const ModelParams& params, const NetConfig& cfg);

/// v_i - (1/m) sum_j v_j
std::vector<VelocityField> centrality_project(const std::vector<VelocityField>& vs);

// Checkpoint conversion. The network config lives under "net" in the
// checkpoint config.
std::vector<NamedTensor> to_named(const ModelParams& params);
ModelParams from_named(const std::vector<NamedTensor>& tensors, const NetConfig& cfg);

struct Model {
    NetConfig config;
    ModelParams params;
};

/// Reads a checkpoint directory; throws ValidationError when the stored
/// parameters do not match the stored config.
Model load_model(const std::filesystem::path& dir);

} // namespace mm
