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

#include "multimorph/evalkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "multimorph/errors.hpp"
#include "multimorph/fields.hpp"
#include "multimorph/rng.hpp"

namespace mm {

DiceScores hard_dice(const ProbSeg& a, const ProbSeg& b) {
    require_same_grid(a.grid, b.grid, "hard_dice");
    if (a.classes != b.classes) throw ValidationError("hard_dice: class counts differ");
    const auto la = a.argmax(), lb = b.argmax();
    const int K = a.classes;
    std::vector<double> inter(static_cast<std::size_t>(K), 0.0), na(inter), nb(inter);
    for (std::size_t i = 0; i < la.size(); ++i) {
        na[static_cast<std::size_t>(la[i])] += 1;
        nb[static_cast<std::size_t>(lb[i])] += 1;
        if (la[i] == lb[i]) inter[static_cast<std::size_t>(la[i])] += 1;
    }
    DiceScores d;
    for (int k = 1; k < K; ++k) {
        const double den = na[k] + nb[k];
        d.per_structure.push_back(den > 0 ? 2.0 * inter[k] / den : 1.0);
    }
    if (!d.per_structure.empty())
        d.mean = std::accumulate(d.per_structure.begin(), d.per_structure.end(), 0.0) / d.per_structure.size();
    else
        d.mean = 1.0;
    return d;
}

nlohmann::json MetricsReport::to_json() const {
    return {{"ids", ids},
            {"member_dice", member_dice},
            {"mean_dice", mean_dice},
            {"member_folds", member_folds},
            {"total_folds", total_folds},
            {"fold_fraction", fold_fraction},
            {"centrality", centrality},
            {"seconds", seconds},
            {"group_size", group_size},
            {"fingerprint", fingerprint}};
}

std::string config_fingerprint(const nlohmann::json& j) {
    // FNV-1a over the canonical dump
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : j.dump()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_halves(std::size_t m, std::uint64_t seed) {
    if (m < 2) throw ValidationError("split needs at least two members");
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    auto rng = SeedPath(seed).child(0).engine();
    for (std::size_t i = m - 1; i > 0; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i);
        std::swap(idx[i], idx[pick(rng)]);
    }
    const std::size_t half = m / 2;
    std::vector<std::size_t> a(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(half));
    std::vector<std::size_t> b(idx.begin() + static_cast<std::ptrdiff_t>(half), idx.end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return {a, b};
}

namespace {

void require_segs(const GroupBatch& g) {
    for (const auto& m : g.members)
        if (!m.seg) throw ValidationError("member " + m.id + " has no segmentation");
}

void fill_field_metrics(MetricsReport& r, const std::vector<DisplacementField>& us) {
    r.member_folds.clear();
    r.total_folds = 0;
    for (const auto& u : us) {
        r.member_folds.push_back(count_folds(u));
        r.total_folds += r.member_folds.back();
    }
    const double voxels = static_cast<double>(us.at(0).grid.voxels()) * static_cast<double>(us.size());
    r.fold_fraction = static_cast<double>(r.total_folds) / voxels;
    r.centrality = centrality(us);
}

void finish_dice(MetricsReport& r) {
    r.mean_dice = r.member_dice.empty()
                      ? 0.0
                      : std::accumulate(r.member_dice.begin(), r.member_dice.end(), 0.0) / r.member_dice.size();
}

// Transfer given A's warped segs and B's velocities.
void transfer(MetricsReport& r, const GroupBatch& group, const std::vector<std::size_t>& a,
              const std::vector<std::size_t>& b, const std::vector<DisplacementField>& ua,
              const std::vector<VelocityField>& vb, int steps) {
    std::vector<ProbSeg> warped;
    for (std::size_t i = 0; i < a.size(); ++i) warped.push_back(warp_seg(*group.members[a[i]].seg, ua[i]));
    const ProbSeg seg_t = build_atlas_seg(warped);
    r.seg_atlas = seg_t;
    for (std::size_t i = 0; i < b.size(); ++i) {
        const auto inv = integrate_svf(negate(vb[i]), steps);
        const auto moved = warp_seg(seg_t, inv);
        r.ids.push_back(group.members[b[i]].id);
        r.member_dice.push_back(hard_dice(moved, *group.members[b[i]].seg).mean);
    }
    finish_dice(r);
}

} // namespace

MetricsReport dice_transfer(const ModelParams& params, const NetConfig& cfg, const GroupBatch& group, std::uint64_t seed) {
    group.validate();
    require_segs(group);
    const auto t0 = std::chrono::steady_clock::now();
    const auto [a, b] = split_halves(group.size(), seed);

    // A alone defines the atlas; B's labels are never read before scoring.
    GroupBatch ga = group.subset(a);
    for (auto& m : ga.members) m.seg.reset();
    const auto atlas_a = build_atlas(params, cfg, ga);

    GroupBatch images_only = group;
    for (auto& m : images_only.members) m.seg.reset();
    const auto vs = forward(images_only, params, cfg);
    std::vector<DisplacementField> us;
    for (const auto& v : vs) us.push_back(integrate_svf(v, cfg.integration_steps));
    std::vector<VelocityField> vb;
    for (auto i : b) vb.push_back(vs[i]);

    MetricsReport r;
    transfer(r, group, a, b, atlas_a.displacements, vb, cfg.integration_steps);
    fill_field_metrics(r, us);
    r.group_size = static_cast<int>(group.size());
    r.fingerprint = config_fingerprint(nlohmann::json(cfg));
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

MetricsReport unregistered_transfer(const GroupBatch& group, std::uint64_t seed) {
    group.validate();
    require_segs(group);
    const auto [a, b] = split_halves(group.size(), seed);
    const Grid& g = group.grid();
    std::vector<DisplacementField> ua(a.size(), DisplacementField(g));
    std::vector<VelocityField> vb(b.size(), VelocityField(g));
    MetricsReport r;
    transfer(r, group, a, b, ua, vb, 1);
    fill_field_metrics(r, std::vector<DisplacementField>(group.size(), DisplacementField(g)));
    r.group_size = static_cast<int>(group.size());
    r.fingerprint = "identity";
    return r;
}

MetricsReport evaluate_atlas(const AtlasResult& result, const GroupBatch& group) {
    if (result.displacements.size() != group.size()) throw ValidationError("evaluate_atlas: result and group differ");
    MetricsReport r;
    r.ids = result.ids;
    if (result.seg) {
        for (std::size_t i = 0; i < group.size(); ++i) {
            if (!group.members[i].seg) continue;
            const auto w = warp_seg(*group.members[i].seg, result.displacements[i]);
            r.member_dice.push_back(hard_dice(w, *result.seg).mean);
        }
    }
    finish_dice(r);
    fill_field_metrics(r, result.displacements);
    r.seconds = result.seconds;
    r.group_size = static_cast<int>(group.size());
    return r;
}

std::vector<GroupBatch> heldout_groups(const SynthConfig& cfg, int groups, int m, std::uint64_t seed) {
    if (groups < 1 || m < 2) throw ValidationError("held-out set needs >= 1 group of >= 2 members");
    std::vector<GroupBatch> out;
    for (int i = 0; i < groups; ++i)
        out.push_back(random_synth_group(cfg, m, SeedPath(seed).child({9, static_cast<std::uint64_t>(i)})));
    return out;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    const double mu = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
    double ss = 0.0;
    for (double x : xs) ss += (x - mu) * (x - mu);
    return {mu, std::sqrt(ss / xs.size())};
}

} // namespace

EvalSummary evaluate_model(const ModelParams& params, const NetConfig& cfg, const std::vector<GroupBatch>& groups,
                           std::uint64_t seed) {
    std::vector<double> dice, folds, cent, base;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        const auto s = mix_seed(seed, i);
        const auto r = dice_transfer(params, cfg, groups[i], s);
        dice.push_back(r.mean_dice);
        folds.push_back(r.fold_fraction);
        cent.push_back(r.centrality);
        base.push_back(unregistered_transfer(groups[i], s).mean_dice);
    }
    EvalSummary e;
    std::tie(e.dice_mean, e.dice_std) = mean_std(dice);
    std::tie(e.folds_mean, e.folds_std) = mean_std(folds);
    std::tie(e.centrality_mean, e.centrality_std) = mean_std(cent);
    e.baseline_dice_mean = mean_std(base).first;
    e.groups = groups.size();
    return e;
}

// ---------------------------------------------------------------------------
// Ablations

const std::vector<std::string>& variant_names() {
    static const std::vector<std::string> names{"nocl_gb_mean", "cl_nogb",    "cl_gb_var",
                                                "cl_gb_max",    "cl_gb_mean", "cl_gb_mean_dice"};
    return names;
}

Variant parse_variant(const std::string& name) {
    Variant v;
    v.name = name;
    if (name == "nocl_gb_mean") v.centrality = false;
    else if (name == "cl_nogb") v.group_block = false;
    else if (name == "cl_gb_var") v.statistic = ad::Statistic::Var;
    else if (name == "cl_gb_max") v.statistic = ad::Statistic::Max;
    else if (name == "cl_gb_mean") {
    } else if (name == "cl_gb_mean_dice") v.dice = true;
    else throw ValidationError("unknown ablation variant: " + name);
    return v;
}

namespace {

std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", x);
    return buf;
}

struct Trained {
    EvalSummary summary;
    double seconds = 0.0;
};

Trained train_and_evaluate(const TrainConfig& tc, const NetConfig& net, const RunOptions& opt,
                           const std::filesystem::path& dir) {
    TrainOptions to;
    to.out_dir = dir;
    const auto t0 = std::chrono::steady_clock::now();
    const auto ck = train(tc, net, opt.data, to);
    Trained t;
    t.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto params = from_named(ck.parameters, net);
    t.summary = evaluate_model(params, net, opt.heldout, opt.eval_seed);
    std::ofstream(dir / "eval.json") << nlohmann::json{{"dice_mean", t.summary.dice_mean},
                                                       {"dice_std", t.summary.dice_std},
                                                       {"folds_mean", t.summary.folds_mean},
                                                       {"centrality_mean", t.summary.centrality_mean},
                                                       {"baseline_dice_mean", t.summary.baseline_dice_mean},
                                                       {"train_seconds", t.seconds}}
                                            .dump(2)
                                     << "\n";
    return t;
}

} // namespace

std::vector<AblationRow> run_ablations(const std::vector<std::string>& variants, const RunOptions& opt) {
    std::vector<Variant> parsed;
    for (const auto& n : variants) parsed.push_back(parse_variant(n));
    if (opt.heldout.empty()) throw ValidationError("ablations need a held-out set");
    std::vector<AblationRow> rows;
    for (const auto& v : parsed) {
        NetConfig net = opt.net;
        net.use_centrality = v.centrality;
        net.use_group_block = v.group_block;
        net.statistic = v.statistic;
        TrainConfig tc = opt.train;
        if (!v.dice) tc.loss.gamma_seg = 0.0;
        AblationRow row;
        row.variant = v.name;
        try {
            const auto t = train_and_evaluate(tc, net, opt, opt.out_dir / v.name);
            row.summary = t.summary;
            row.train_seconds = t.seconds;
        } catch (const std::exception& e) {
            row.status = std::string("failed: ") + e.what();
        }
        rows.push_back(row);
    }
    return rows;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "variant,dice_mean,dice_std,folds_mean,folds_std,centrality_mean,centrality_std,baseline_dice,train_seconds,"
           "status\n";
    for (const auto& r : rows) {
        const auto& s = r.summary;
        std::string status = r.status;
        std::replace(status.begin(), status.end(), ',', ';');
        out << r.variant << ',' << fmt(s.dice_mean) << ',' << fmt(s.dice_std) << ',' << fmt(s.folds_mean) << ','
            << fmt(s.folds_std) << ',' << fmt(s.centrality_mean) << ',' << fmt(s.centrality_std) << ','
            << fmt(s.baseline_dice_mean) << ',' << fmt(r.train_seconds) << ',' << status << "\n";
    }
}

// ---------------------------------------------------------------------------
// Sweeps

void SweepSpec::validate() const {
    if (parameter != "lambda_reg" && parameter != "gamma_seg")
        throw ValidationError("sweep parameter must be lambda_reg or gamma_seg");
    if (values.size() < 2) throw ValidationError("a sweep needs at least two values");
    for (double v : values)
        if (!(v >= 0.0)) throw ValidationError("sweep values must be nonnegative");
    if (iterations < 0) throw ValidationError("sweep iterations must be nonnegative");
}

SweepSpec SweepSpec::preset(const std::string& parameter) {
    SweepSpec s;
    s.parameter = parameter;
    if (parameter == "lambda_reg") s.values = {0.25, 0.5, 1.0, 2.0, 4.0};
    else if (parameter == "gamma_seg") s.values = {0.0, 0.1, 0.3, 0.5, 0.7, 1.0};
    else throw ValidationError("no preset for sweep parameter " + parameter);
    return s;
}

std::vector<SweepPoint> run_sweep(const SweepSpec& spec, const RunOptions& opt) {
    spec.validate();
    if (opt.heldout.empty()) throw ValidationError("sweeps need a held-out set");
    std::vector<SweepPoint> points;
    for (double v : spec.values) {
        TrainConfig tc = opt.train;
        tc.iterations = spec.iterations;
        tc.seed = spec.seed;
        (spec.parameter == "lambda_reg" ? tc.loss.lambda_reg : tc.loss.gamma_seg) = v;
        SweepPoint p;
        p.value = v;
        try {
            p.summary = train_and_evaluate(tc, opt.net, opt, opt.out_dir / (spec.parameter + "_" + fmt(v))).summary;
        } catch (const std::exception& e) {
            p.status = std::string("failed: ") + e.what();
        }
        points.push_back(p);
    }
    return points;
}

void write_sweep_csv(const std::filesystem::path& path, const std::string& parameter,
                     const std::vector<SweepPoint>& points) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "parameter,value,dice_mean,dice_std,folds_mean,folds_std,centrality_mean,centrality_std,status\n";
    for (const auto& p : points) {
        const auto& s = p.summary;
        std::string status = p.status;
        std::replace(status.begin(), status.end(), ',', ';');
        out << parameter << ',' << fmt(p.value) << ',' << fmt(s.dice_mean) << ',' << fmt(s.dice_std) << ','
            << fmt(s.folds_mean) << ',' << fmt(s.folds_std) << ',' << fmt(s.centrality_mean) << ','
            << fmt(s.centrality_std) << ',' << status << "\n";
    }
}

namespace {

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t col(const std::string& name) const {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw FormatError("sweep CSV lacks column " + name);
        return static_cast<std::size_t>(it - header.begin());
    }
};

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) out.push_back(f);
    return out;
}

Table read_table(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot read " + p.string());
    Table t;
    std::string line;
    if (!std::getline(in, line)) throw FormatError("empty CSV " + p.string());
    t.header = split_csv(line);
    while (std::getline(in, line))
        if (!line.empty()) t.rows.push_back(split_csv(line));
    return t;
}

std::string svg_num(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", x);
    return buf;
}

std::string label_num(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", x);
    return buf;
}

std::string line_plot(const std::string& xlabel, const std::string& ylabel, const std::vector<double>& xs,
                      const std::vector<double>& mu, const std::vector<double>& sd) {
    const double W = 480, H = 320, L = 70, R = 20, T = 30, B = 50;
    double x0 = *std::min_element(xs.begin(), xs.end()), x1 = *std::max_element(xs.begin(), xs.end());
    double y0 = std::numeric_limits<double>::infinity(), y1 = -y0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        y0 = std::min(y0, mu[i] - sd[i]);
        y1 = std::max(y1, mu[i] + sd[i]);
    }
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) {
        const double pad = std::max(1e-12, std::abs(y0) * 0.1);
        y0 -= pad;
        y1 += pad;
    }
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<polygon fill=\"#1f77b4\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < xs.size(); ++i) s << svg_num(px(xs[i])) << ',' << svg_num(py(mu[i] + sd[i])) << ' ';
    for (std::size_t i = xs.size(); i-- > 0;) s << svg_num(px(xs[i])) << ',' << svg_num(py(mu[i] - sd[i])) << ' ';
    s << "\"/>\n";
    s << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < xs.size(); ++i) s << svg_num(px(xs[i])) << ',' << svg_num(py(mu[i])) << ' ';
    s << "\"/>\n";
    for (std::size_t i = 0; i < xs.size(); ++i)
        s << "<circle cx=\"" << svg_num(px(xs[i])) << "\" cy=\"" << svg_num(py(mu[i])) << "\" r=\"3\" fill=\"#1f77b4\"/>\n";
    // axes
    s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (double x : xs)
        s << "<text x=\"" << svg_num(px(x)) << "\" y=\"" << H - B + 16 << "\" font-size=\"11\" text-anchor=\"middle\">"
          << label_num(x) << "</text>\n";
    for (int k = 0; k <= 4; ++k) {
        const double y = y0 + (y1 - y0) * k / 4.0;
        s << "<text x=\"" << L - 6 << "\" y=\"" << svg_num(py(y) + 4) << "\" font-size=\"11\" text-anchor=\"end\">"
          << label_num(y) << "</text>\n";
    }
    s << "<text x=\"" << svg_num((L + W - R) / 2) << "\" y=\"" << H - 12 << "\" font-size=\"13\" text-anchor=\"middle\">"
      << xlabel << "</text>\n";
    s << "<text x=\"16\" y=\"" << svg_num((T + H - B) / 2) << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << svg_num((T + H - B) / 2) << ")\">" << ylabel << "</text>\n";
    s << "</svg>\n";
    return s.str();
}

} // namespace

std::vector<std::filesystem::path> plot_sweep(const std::filesystem::path& csv, const std::filesystem::path& out_dir) {
    const Table t = read_table(csv);
    const auto c_par = t.col("parameter"), c_val = t.col("value"), c_status = t.col("status");
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> written;
    std::string parameter;
    for (const char* metric : {"dice", "folds", "centrality"}) {
        const auto c_mu = t.col(std::string(metric) + "_mean"), c_sd = t.col(std::string(metric) + "_std");
        std::vector<double> xs, mu, sd;
        for (const auto& r : t.rows) {
            if (r.size() != t.header.size()) throw FormatError("ragged sweep CSV row");
            if (r[c_status] != "ok") continue;
            parameter = r[c_par];
            xs.push_back(std::stod(r[c_val]));
            mu.push_back(std::stod(r[c_mu]));
            sd.push_back(std::stod(r[c_sd]));
        }
        if (xs.empty()) continue;
        const auto path = out_dir / (parameter + "_" + metric + ".svg");
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write " + path.string());
        out << line_plot(parameter, metric, xs, mu, sd);
        written.push_back(path);
    }
    return written;
}

} // namespace mm
