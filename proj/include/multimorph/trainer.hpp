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

// Training loop for the group registration network: group sampling with
// synthetic mixing, in-loop atlas, Adam updates, checkpoints and a CSV log.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "multimorph/groupnet.hpp"
#include "multimorph/losses.hpp"
#include "multimorph/synthgen.hpp"
#include "multimorph/tensorio.hpp"

namespace mm {

struct TrainConfig {
    std::int64_t iterations = 5000;
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    int m_lo = 2;
    int m_hi = 6;
    double synthetic_fraction = 0.5;
    LossWeights loss;
    std::int64_t checkpoint_interval = 1000;
    std::uint64_t seed = 0;

    void validate() const;
    /// Published full-scale schedule (80k iterations, groups of 2..12).
    static TrainConfig full_scale();
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Where training groups come from. Without a manifest every group is
/// synthetic regardless of the configured fraction.
struct DataSources {
    std::optional<DatasetManifest> manifest;
    SynthConfig synth;
};

/// Draws group `iteration` of the run; a pure function of its arguments.
/// Real groups are m distinct train-split members of one modality with
/// corrupt_image augmentation.
GroupBatch sample_group(const DataSources& data, const TrainConfig& cfg, std::uint64_t seed, std::int64_t iteration);

struct LogRow {
    std::int64_t iteration = 0;   // 1-based
    double total = 0, sim = 0, reg = 0, seg = 0;
    int m = 0;
    bool synthetic = false;
};

struct TrainState {
    ModelParams params;
    std::vector<ad::Tensor<float>> moment1, moment2;
    std::int64_t iteration = 0;
    std::map<std::string, double> running;   // EMA of loss components
};

/// Differentiable pieces of one training step.
template <class T>
struct StepGraph {
    LossGraph<T> loss;
    ad::Var<T> velocity, displacement, warped, templ;
};

/// forward -> integrate -> warp -> in-loop atlas and seg atlas -> group loss.
template <class T>
StepGraph<T> step_graph(const GroupBatch& group, const std::vector<ad::Var<T>>& params, const NetConfig& net,
                        const LossWeights& w);

struct TrainOptions {
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> resume_from;
    std::function<void(const LogRow&)> on_step;
};

/// Writes out_dir/loss_log.csv, out_dir/checkpoints/iter_NNNNNNN at the
/// interval and out_dir/final at the end. Returns the final checkpoint.
/// A non-finite loss throws DivergenceError; earlier checkpoints stay.
Checkpoint train(const TrainConfig& cfg, const NetConfig& net, const DataSources& data, const TrainOptions& opt);

Checkpoint make_checkpoint(const TrainState& s, const TrainConfig& cfg, const NetConfig& net, const SynthConfig& synth);
TrainState state_from_checkpoint(const Checkpoint& ck, const NetConfig& net);

std::vector<LogRow> read_log(const std::filesystem::path& csv);

struct GradcheckOptions {
    NetConfig net;           // defaults to a 1-level net with widths 4
    LossWeights loss;        // lncc window 5 so it fits the 8^2 grid
    int grid = 8;
    int m = 2;
    bool identical = false;  // both members the same image
    std::size_t samples = 64;
    double h = 1e-3;
    GradcheckOptions();
};

struct GradcheckReport {
    double max_rel = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;   // stencil crossed a non-differentiable point
};

/// End-to-end parameter gradients of the group loss vs central differences
/// in binary64 on random parameters.
GradcheckReport gradcheck(const GradcheckOptions& opt, std::uint64_t seed);

} // namespace mm
