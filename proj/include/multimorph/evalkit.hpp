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

// Evaluation: hard Dice, the segmentation transfer protocol, atlas metrics,
// and the ablation and sweep runners.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "multimorph/atlas.hpp"
#include "multimorph/trainer.hpp"

namespace mm {

struct DiceScores {
    std::vector<double> per_structure;   // foreground classes 1..K-1
    double mean = 0.0;
};

/// Argmax (lowest index wins ties) then per-structure Dice; structures
/// absent from both maps score 1.
DiceScores hard_dice(const ProbSeg& a, const ProbSeg& b);

struct MetricsReport {
    std::vector<std::string> ids;
    std::vector<double> member_dice;
    double mean_dice = 0.0;
    std::vector<std::size_t> member_folds;
    std::size_t total_folds = 0;
    double fold_fraction = 0.0;   // total folds / (members * voxels)
    double centrality = 0.0;
    double seconds = 0.0;
    int group_size = 0;
    std::string fingerprint;
    std::optional<ProbSeg> seg_atlas;   // transfer source (not serialized)

    nlohmann::json to_json() const;
};

/// Short stable hash of a JSON document.
std::string config_fingerprint(const nlohmann::json& j);

/// Seeded split of 0..m-1 into A (floor(m/2) members) and B (the rest).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_halves(std::size_t m, std::uint64_t seed);

/// Atlas and seg atlas from half A, B's fields from the A+B forward pass,
/// labels carried to each B member through integrate(-v). Folds and
/// centrality are measured on the A+B fields.
MetricsReport dice_transfer(const ModelParams& params, const NetConfig& cfg, const GroupBatch& group, std::uint64_t seed);

/// The same split with identity fields: the unregistered overlap baseline.
MetricsReport unregistered_transfer(const GroupBatch& group, std::uint64_t seed);

/// Warped member segs vs the seg atlas, plus folds and centrality.
MetricsReport evaluate_atlas(const AtlasResult& result, const GroupBatch& group);

/// Fixed synthetic evaluation groups, disjoint from training draws.
std::vector<GroupBatch> heldout_groups(const SynthConfig& cfg, int groups, int m, std::uint64_t seed);

struct EvalSummary {
    double dice_mean = 0, dice_std = 0;
    double folds_mean = 0, folds_std = 0;   // fold fraction per group
    double centrality_mean = 0, centrality_std = 0;
    double baseline_dice_mean = 0;
    std::size_t groups = 0;
};

EvalSummary evaluate_model(const ModelParams& params, const NetConfig& cfg, const std::vector<GroupBatch>& groups,
                           std::uint64_t seed);

// ---------------------------------------------------------------------------
// Ablations

struct Variant {
    std::string name;
    bool centrality = true;
    bool group_block = true;
    ad::Statistic statistic = ad::Statistic::Mean;
    bool dice = false;   // train with the configured gamma; otherwise gamma = 0
};

/// nocl_gb_mean, cl_nogb, cl_gb_var, cl_gb_max, cl_gb_mean, cl_gb_mean_dice
const std::vector<std::string>& variant_names();
Variant parse_variant(const std::string& name);

struct RunOptions {
    TrainConfig train;
    NetConfig net;
    DataSources data;
    std::vector<GroupBatch> heldout;
    std::uint64_t eval_seed = 0;
    std::filesystem::path out_dir;
};

struct AblationRow {
    std::string variant;
    EvalSummary summary;
    double train_seconds = 0.0;
    std::string status = "ok";
};

std::vector<AblationRow> run_ablations(const std::vector<std::string>& variants, const RunOptions& opt);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

// ---------------------------------------------------------------------------
// Sweeps

struct SweepSpec {
    std::string parameter = "lambda_reg";   // or gamma_seg
    std::vector<double> values;
    std::int64_t iterations = 1500;
    std::uint64_t seed = 0;

    void validate() const;
    static SweepSpec preset(const std::string& parameter);
};

struct SweepPoint {
    double value = 0.0;
    EvalSummary summary;
    std::string status = "ok";
};

std::vector<SweepPoint> run_sweep(const SweepSpec& spec, const RunOptions& opt);
void write_sweep_csv(const std::filesystem::path& path, const std::string& parameter,
                     const std::vector<SweepPoint>& points);

/// Line plots (mean with a shaded +-std band) for dice, folds and
/// centrality, written as <parameter>_<metric>.svg. Depends only on the CSV.
std::vector<std::filesystem::path> plot_sweep(const std::filesystem::path& csv, const std::filesystem::path& out_dir);

} // namespace mm
