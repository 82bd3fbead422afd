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

#include "multimorph/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "multimorph/errors.hpp"
#include "multimorph/fields.hpp"
#include "multimorph/grid.hpp"
#include "multimorph/rng.hpp"

namespace mm {

void TrainConfig::validate() const {
    if (iterations < 0) throw ValidationError("iterations must be nonnegative");
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("moment decays must be in [0,1)");
    if (!(adam_epsilon > 0.0)) throw ValidationError("adam epsilon must be positive");
    if (m_lo < 1 || m_hi < m_lo) throw ValidationError("group size range must satisfy 1 <= m_lo <= m_hi");
    if (!(synthetic_fraction >= 0.0 && synthetic_fraction <= 1.0)) throw ValidationError("synthetic fraction must be in [0,1]");
    if (checkpoint_interval < 1) throw ValidationError("checkpoint interval must be positive");
    loss.validate();
}

TrainConfig TrainConfig::full_scale() {
    TrainConfig c;
    c.iterations = 80000;
    c.m_hi = 12;
    c.checkpoint_interval = 5000;
    return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"iterations", c.iterations},
         {"learning_rate", c.learning_rate},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_epsilon", c.adam_epsilon},
         {"m_lo", c.m_lo},
         {"m_hi", c.m_hi},
         {"synthetic_fraction", c.synthetic_fraction},
         {"loss", c.loss},
         {"checkpoint_interval", c.checkpoint_interval},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.iterations = j.value("iterations", d.iterations);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.adam_epsilon = j.value("adam_epsilon", d.adam_epsilon);
    c.m_lo = j.value("m_lo", d.m_lo);
    c.m_hi = j.value("m_hi", d.m_hi);
    c.synthetic_fraction = j.value("synthetic_fraction", d.synthetic_fraction);
    c.loss = j.contains("loss") ? j.at("loss").get<LossWeights>() : d.loss;
    c.checkpoint_interval = j.value("checkpoint_interval", d.checkpoint_interval);
    c.seed = j.value("seed", d.seed);
    c.validate();
}

// ---------------------------------------------------------------------------
// Sampling

namespace {

struct Draw {
    int m;
    bool synthetic;
};

Draw draw_shape(const TrainConfig& cfg, const SeedPath& sp, bool have_real) {
    auto rng = sp.child(0).engine();
    std::uniform_int_distribution<int> size(cfg.m_lo, cfg.m_hi);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    Draw d;
    d.m = size(rng);
    const double u = uni(rng);
    d.synthetic = !have_real || u < cfg.synthetic_fraction;
    return d;
}

GroupBatch sample_real(const DatasetManifest& man, const SynthConfig& aug, int m, const SeedPath& sp) {
    std::map<std::string, std::vector<std::size_t>> by_modality;
    for (std::size_t i = 0; i < man.records.size(); ++i)
        if (man.records[i].split == Split::Train) by_modality[man.records[i].modality].push_back(i);
    std::vector<const std::vector<std::size_t>*> eligible;
    for (const auto& [mod, idx] : by_modality)
        if (static_cast<int>(idx.size()) >= m) eligible.push_back(&idx);
    if (eligible.empty())
        throw ValidationError("no modality has " + std::to_string(m) + " train members for a real group");
    auto rng = sp.child(1).engine();
    std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
    std::vector<std::size_t> pool = *eligible[pick(rng)];
    // partial Fisher-Yates: first m entries become the sample
    for (int i = 0; i < m; ++i) {
        std::uniform_int_distribution<std::size_t> j(static_cast<std::size_t>(i), pool.size() - 1);
        std::swap(pool[static_cast<std::size_t>(i)], pool[j(rng)]);
    }
    GroupBatch g;
    for (int i = 0; i < m; ++i) {
        const auto& r = man.records[pool[static_cast<std::size_t>(i)]];
        GroupMember mem;
        mem.id = r.id;
        mem.image = corrupt_image(read_image(r.image_path), aug, sp.child({2, static_cast<std::uint64_t>(i)}));
        if (r.seg_path) mem.seg = read_seg(*r.seg_path);
        mem.meta = {{"synthetic", false}, {"modality", r.modality}};
        g.members.push_back(std::move(mem));
    }
    g.validate();
    return g;
}

} // namespace

GroupBatch sample_group(const DataSources& data, const TrainConfig& cfg, std::uint64_t seed, std::int64_t iteration) {
    cfg.validate();
    const bool have_real = data.manifest && !data.manifest->records.empty();
    if (!have_real && cfg.synthetic_fraction < 1.0 && data.manifest)
        throw ValidationError("manifest is empty and the synthetic fraction is below 1");
    const SeedPath sp = SeedPath(seed).child({2, static_cast<std::uint64_t>(iteration)});
    const Draw d = draw_shape(cfg, sp, have_real);
    if (d.synthetic) return random_synth_group(data.synth, d.m, sp.child(3));
    return sample_real(*data.manifest, data.synth, d.m, sp);
}

// ---------------------------------------------------------------------------
// Step graph

template <class T>
StepGraph<T> step_graph(const GroupBatch& group, const std::vector<ad::Var<T>>& params, const NetConfig& net,
                        const LossWeights& w) {
    const int dims = net.dims;
    StepGraph<T> s;
    auto x = ad::constant(image_tensor<T>(group));
    s.velocity = forward_graph<T>(x, params, net);
    s.displacement = ad::integrate<T>(s.velocity, net.integration_steps, dims);
    s.warped = ad::grid_sample<T>(x, s.displacement, dims);
    s.templ = ad::group_mean<T>(s.warped);

    ad::Var<T> seg_t, warped_segs;
    std::vector<bool> mask(group.size(), false);
    if (w.gamma_seg > 0.0 && group.any_seg()) {
        int classes = 0;
        for (std::size_t i = 0; i < group.size(); ++i)
            if (group.members[i].seg) {
                mask[i] = true;
                classes = group.members[i].seg->classes;
            }
        auto segs = ad::constant(seg_tensor<T>(group, classes));
        warped_segs = ad::grid_sample<T>(segs, s.displacement, dims);
        // members without a seg contribute zero blocks, which the
        // renormalization removes again
        seg_t = ad::renormalize_channels<T>(ad::group_mean<T>(warped_segs), static_cast<T>(1e-6));
    }
    s.loss = group_loss_graph<T>(s.templ, s.warped, s.displacement, seg_t, warped_segs, mask, w, dims);
    return s;
}

template StepGraph<float> step_graph<float>(const GroupBatch&, const std::vector<ad::Var<float>>&, const NetConfig&,
                                            const LossWeights&);
template StepGraph<double> step_graph<double>(const GroupBatch&, const std::vector<ad::Var<double>>&, const NetConfig&,
                                              const LossWeights&);

// ---------------------------------------------------------------------------
// Checkpoints and logs

Checkpoint make_checkpoint(const TrainState& s, const TrainConfig& cfg, const NetConfig& net, const SynthConfig& synth) {
    Checkpoint ck;
    ck.config = {{"net", net}, {"train", cfg}, {"synth", synth}, {"running", s.running}};
    ck.parameters = to_named(s.params);
    for (std::size_t i = 0; i < s.params.names.size(); ++i) {
        const auto& t1 = s.moment1[i];
        const auto& t2 = s.moment2[i];
        ck.optimizer_state.push_back({"m1/" + s.params.names[i], {std::vector<std::int64_t>(t1.shape.begin(), t1.shape.end()), t1.data}});
        ck.optimizer_state.push_back({"m2/" + s.params.names[i], {std::vector<std::int64_t>(t2.shape.begin(), t2.shape.end()), t2.data}});
    }
    ck.iteration = s.iteration;
    return ck;
}

TrainState state_from_checkpoint(const Checkpoint& ck, const NetConfig& net) {
    TrainState s;
    s.params = from_named(ck.parameters, net);
    s.iteration = ck.iteration;
    std::map<std::string, const TensorData*> opt;
    for (const auto& nt : ck.optimizer_state) opt[nt.name] = &nt.tensor;
    for (std::size_t i = 0; i < s.params.names.size(); ++i) {
        const auto& shape = s.params.tensors[i].shape;
        for (const char* which : {"m1/", "m2/"}) {
            auto it = opt.find(which + s.params.names[i]);
            ad::Tensor<float> t(shape);
            if (it != opt.end()) {
                if (it->second->values.size() != t.size()) throw ValidationError("optimizer state has the wrong size");
                t.data = it->second->values;
            } else if (s.iteration > 0) {
                throw ValidationError("checkpoint lacks optimizer state for " + s.params.names[i]);
            }
            (which[1] == '1' ? s.moment1 : s.moment2).push_back(std::move(t));
        }
    }
    if (ck.config.contains("running")) s.running = ck.config.at("running").get<std::map<std::string, double>>();
    return s;
}

namespace {

const char* kLogHeader = "iteration,total,sim,reg,seg,m,synthetic_flag";

std::string format_row(const LogRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%d,%d", static_cast<long long>(r.iteration), r.total, r.sim,
                  r.reg, r.seg, r.m, r.synthetic ? 1 : 0);
    return buf;
}

} // namespace

std::vector<LogRow> read_log(const std::filesystem::path& csv) {
    std::ifstream in(csv);
    if (!in) throw IoError("cannot read " + csv.string());
    std::string line;
    std::getline(in, line);
    if (line != kLogHeader) throw FormatError("unexpected loss log header in " + csv.string());
    std::vector<LogRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string f;
        std::vector<std::string> cols;
        while (std::getline(ss, f, ',')) cols.push_back(f);
        if (cols.size() != 7) throw FormatError("malformed loss log row: " + line);
        LogRow r;
        r.iteration = std::stoll(cols[0]);
        r.total = std::stod(cols[1]);
        r.sim = std::stod(cols[2]);
        r.reg = std::stod(cols[3]);
        r.seg = std::stod(cols[4]);
        r.m = std::stoi(cols[5]);
        r.synthetic = cols[6] == "1";
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Training

Checkpoint train(const TrainConfig& cfg, const NetConfig& net, const DataSources& data, const TrainOptions& opt) {
    cfg.validate();
    net.validate();
    data.synth.validate();
    if (!data.manifest) {
        if (data.synth.grid.dims != net.dims) throw ValidationError("synthetic grid and network dimensionality differ");
        net.check_grid(data.synth.grid);
    }
    namespace fs = std::filesystem;
    fs::create_directories(opt.out_dir / "checkpoints");
    const fs::path log_path = opt.out_dir / "loss_log.csv";

    TrainState s;
    std::vector<LogRow> kept;
    if (opt.resume_from) {
        auto ck = read_checkpoint(*opt.resume_from);
        if (ck.config.contains("net") && nlohmann::json(net) != ck.config.at("net"))
            throw ValidationError("checkpoint network config differs from the requested one");
        s = state_from_checkpoint(ck, net);
        if (fs::exists(log_path))
            for (const auto& r : read_log(log_path))
                if (r.iteration <= s.iteration) kept.push_back(r);
    } else {
        s.params = init_params(net, mix_seed(cfg.seed, 1));
        for (const auto& t : s.params.tensors) {
            s.moment1.emplace_back(t.shape);
            s.moment2.emplace_back(t.shape);
        }
    }

    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot write " + log_path.string());
    log << kLogHeader << "\n";
    for (const auto& r : kept) log << format_row(r) << "\n";
    log.flush();

    auto save = [&](const fs::path& dir) { write_checkpoint(dir, make_checkpoint(s, cfg, net, data.synth)); };
    if (s.iteration == 0) save(opt.out_dir / "checkpoints" / "iter_0000000");

    const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    while (s.iteration < cfg.iterations) {
        const std::int64_t it = s.iteration + 1;
        GroupBatch g = sample_group(data, cfg, cfg.seed, it);

        std::vector<ad::Var<float>> vars;
        for (const auto& t : s.params.tensors) vars.push_back(ad::parameter(t));
        auto step = step_graph<float>(g, vars, net, cfg.loss);

        LogRow row;
        row.iteration = it;
        row.total = step.loss.total->value.data[0];
        row.sim = step.loss.sim->value.data[0];
        row.reg = step.loss.reg->value.data[0];
        row.seg = step.loss.seg->value.data[0];
        row.m = static_cast<int>(g.size());
        row.synthetic = g.members[0].meta.value("synthetic", false);
        if (!std::isfinite(row.total)) throw DivergenceError("training loss is not finite", it);

        ad::backward(step.loss.total);
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(it));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(it));
        const float lr_t = static_cast<float>(cfg.learning_rate * std::sqrt(bc2) / bc1);
        const float eps_t = static_cast<float>(cfg.adam_epsilon * std::sqrt(bc2));
        for (std::size_t k = 0; k < vars.size(); ++k) {
            const auto& grad = vars[k]->grad;
            if (grad.empty()) continue;
            auto& p = s.params.tensors[k].data;
            auto& m1 = s.moment1[k].data;
            auto& m2 = s.moment2[k].data;
            for (std::size_t i = 0; i < p.size(); ++i) {
                const float gi = grad[i];
                m1[i] = b1 * m1[i] + (1.0f - b1) * gi;
                m2[i] = b2 * m2[i] + (1.0f - b2) * gi * gi;
                p[i] -= lr_t * m1[i] / (std::sqrt(m2[i]) + eps_t);
            }
        }
        s.iteration = it;
        for (const auto& [k, v] : std::map<std::string, double>{{"total", row.total}, {"sim", row.sim}, {"reg", row.reg}, {"seg", row.seg}}) {
            auto found = s.running.find(k);
            s.running[k] = found == s.running.end() ? v : 0.99 * found->second + 0.01 * v;
        }
        log << format_row(row) << "\n";
        log.flush();
        if (opt.on_step) opt.on_step(row);

        if (it % cfg.checkpoint_interval == 0) {
            char name[32];
            std::snprintf(name, sizeof name, "iter_%07lld", static_cast<long long>(it));
            save(opt.out_dir / "checkpoints" / name);
        }
    }
    auto final_ck = make_checkpoint(s, cfg, net, data.synth);
    write_checkpoint(opt.out_dir / "final", final_ck);
    return final_ck;
}

// ---------------------------------------------------------------------------
// Gradient check

GradcheckOptions::GradcheckOptions() {
    net.enc_widths = {4};
    net.dec_widths = {4};
    net.post_widths = {};
    net.head_init_scale = 0.1;
    loss.lncc_window = 5;
}

GradcheckReport gradcheck(const GradcheckOptions& opt, std::uint64_t seed) {
    opt.net.validate();
    opt.loss.validate();
    if (opt.m < 1 || opt.grid < opt.loss.lncc_window) throw ValidationError("gradcheck instance is too small");
    SynthConfig sc;
    sc.grid = opt.net.dims == 3 ? Grid::make3(opt.grid, opt.grid, opt.grid) : Grid::make2(opt.grid, opt.grid);
    sc.classes = 3;
    sc.warp_sigma = 2.0;
    sc.warp_amplitude = 1.0;
    GroupBatch g = random_synth_group(sc, opt.m, SeedPath(seed).child(0));
    if (opt.identical)
        for (auto& mem : g.members) mem = g.members[0];

    const ModelParams p = init_params(opt.net, seed);
    std::vector<ad::Tensor<double>> base;
    for (const auto& t : p.tensors) base.emplace_back(t.shape, std::vector<double>(t.data.begin(), t.data.end()));

    auto eval = [&](const std::vector<ad::Tensor<double>>& values, bool grad, std::vector<ad::Var<double>>* out_vars,
                    std::uint64_t& digest) {
        std::vector<ad::Var<double>> vars;
        for (const auto& t : values) vars.push_back(grad ? ad::parameter(t) : ad::constant(t));
        ad::PieceTrace trace;
        ad::Var<double> total;
        {
            ad::TraceScope scope(trace);
            total = step_graph<double>(g, vars, opt.net, opt.loss).loss.total;
        }
        digest = trace.digest();
        if (grad) {
            ad::backward(total);
            *out_vars = vars;
        }
        return total->value.data[0];
    };

    std::vector<ad::Var<double>> vars;
    std::uint64_t base_digest = 0;
    eval(base, true, &vars, base_digest);

    std::vector<std::pair<std::size_t, std::size_t>> entries;
    for (std::size_t k = 0; k < base.size(); ++k)
        for (std::size_t i = 0; i < base[k].size(); ++i) entries.emplace_back(k, i);
    auto rng = SeedPath(seed).child(1).engine();
    std::shuffle(entries.begin(), entries.end(), rng);

    GradcheckReport rep;
    auto values = base;
    for (const auto& [k, i] : entries) {
        if (rep.checked >= opt.samples) break;
        const double x0 = values[k].data[i];
        std::uint64_t dp = 0, dm = 0;
        values[k].data[i] = x0 + opt.h;
        const double fp = eval(values, false, nullptr, dp);
        values[k].data[i] = x0 - opt.h;
        const double fm = eval(values, false, nullptr, dm);
        values[k].data[i] = x0;
        if (dp != base_digest || dm != base_digest) {
            ++rep.skipped;
            continue;
        }
        const double fd = (fp - fm) / (2 * opt.h);
        const double an = vars[k]->grad.empty() ? 0.0 : vars[k]->grad[i];
        const double denom = std::max({std::abs(an), std::abs(fd), 1e-6});
        rep.max_rel = std::max(rep.max_rel, std::abs(an - fd) / denom);
        ++rep.checked;
    }
    return rep;
}

} // namespace mm
