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

#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <ostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "multimorph/atlas.hpp"
#include "multimorph/baseline_iter.hpp"
#include "multimorph/errors.hpp"
#include "multimorph/evalkit.hpp"
#include "multimorph/synthgen.hpp"
#include "multimorph/trainer.hpp"

namespace mm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Every section of a config file is optional; missing keys keep defaults.
struct RunConfig {
    NetConfig net;
    TrainConfig train;
    SynthConfig synth;
    IterConfig iter;

    void load(const fs::path& path) {
        std::ifstream in(path);
        if (!in) throw ValidationError("cannot open config " + path.string());
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw ValidationError("config " + path.string() + ": " + e.what());
        }
        if (!j.is_object()) throw ValidationError("config must be a JSON object");
        for (auto it = j.begin(); it != j.end(); ++it)
            if (it.key() != "net" && it.key() != "train" && it.key() != "synth" && it.key() != "iter")
                throw ValidationError("config: unknown section '" + it.key() + "'");
        if (j.contains("net")) j.at("net").get_to(net);
        if (j.contains("train")) j.at("train").get_to(train);
        if (j.contains("synth")) j.at("synth").get_to(synth);
        if (j.contains("iter")) j.at("iter").get_to(iter);
    }

    json to_json() const { return {{"net", net}, {"train", train}, {"synth", synth}, {"iter", iter}}; }
};

void write_json(const fs::path& p, const json& j) {
    fs::create_directories(p.parent_path());
    std::ofstream o(p);
    if (!o) throw IoError("cannot write " + p.string());
    o << j.dump(2) << "\n";
}

// Options shared by build-atlas, baseline-atlas and evaluate.
struct FilterFlags {
    std::string modality, diagnosis;
    std::vector<std::string> ids;
    double age_min = 0, age_max = 0;
    std::size_t max_size = 0;
    CLI::App* app = nullptr;

    void attach(CLI::App* a) {
        app = a;
        a->add_option("--modality", modality, "keep records of this modality");
        a->add_option("--age-min", age_min, "inclusive lower age bound");
        a->add_option("--age-max", age_max, "exclusive upper age bound");
        a->add_option("--diagnosis", diagnosis, "keep records with this diagnosis");
        a->add_option("--ids", ids, "explicit subject ids")->delimiter(',');
        a->add_option("--max-size", max_size, "cap the group size");
    }

    SubgroupFilter filter() const {
        SubgroupFilter f;
        if (app->count("--modality")) f.modality = modality;
        if (app->count("--age-min")) f.age_min = age_min;
        if (app->count("--age-max")) f.age_max = age_max;
        if (app->count("--diagnosis")) f.diagnosis = diagnosis;
        if (app->count("--ids")) f.ids = ids;
        if (app->count("--max-size")) f.max_size = max_size;
        f.validate();
        return f;
    }

    json to_json() const {
        json j = json::object();
        if (app->count("--modality")) j["modality"] = modality;
        if (app->count("--age-min")) j["age_min"] = age_min;
        if (app->count("--age-max")) j["age_max"] = age_max;
        if (app->count("--diagnosis")) j["diagnosis"] = diagnosis;
        if (app->count("--ids")) j["ids"] = ids;
        if (app->count("--max-size")) j["max_size"] = max_size;
        return j;
    }
};

json summary_json(const EvalSummary& s) {
    return {{"dice_mean", s.dice_mean},         {"dice_std", s.dice_std},
            {"folds_mean", s.folds_mean},       {"folds_std", s.folds_std},
            {"centrality_mean", s.centrality_mean}, {"centrality_std", s.centrality_std},
            {"baseline_dice_mean", s.baseline_dice_mean}, {"groups", s.groups}};
}

} // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Groupwise atlas construction toolkit"};
    app.name("multimorph");
    app.require_subcommand(1);

    RunConfig rc;
    std::string config_path, out_dir, manifest_path, checkpoint_path;
    std::uint64_t seed = 0;
    std::function<void()> run;

    auto common = [&](CLI::App* s, bool needs_out) {
        s->add_option("--config", config_path, "JSON config with net/train/synth/iter sections")->check(CLI::ExistingFile);
        auto* o = s->add_option("--out", out_dir, "output directory");
        if (needs_out) o->required();
        s->add_option("--seed", seed, "root seed");
    };
    auto resolve = [&] {
        if (!config_path.empty()) rc.load(config_path);
    };
    auto save_config = [&](const std::string& command, json extra = json::object()) {
        json j = rc.to_json();
        j["command"] = command;
        j["seed"] = seed;
        for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
        write_json(fs::path(out_dir) / "config.json", j);
    };

    // ---- synth-data
    int groups = 4, members = 20;
    {
        auto* s = app.add_subcommand("synth-data", "write synthetic groups and a manifest");
        common(s, true);
        s->add_option("--groups", groups, "number of groups");
        s->add_option("--m", members, "members per group");
        s->callback([&] {
            run = [&] {
                resolve();
                rc.synth.validate();
                const auto path = write_synth_dataset(out_dir, rc.synth, groups, members, seed);
                save_config("synth-data", {{"groups", groups}, {"m", members}});
                out << "manifest " << path.string() << "\n";
            };
        });
    }

    // ---- train
    std::int64_t iterations = -1, interval = -1;
    double lambda = -1, gamma = -1, lr = -1, synth_frac = -1;
    std::string resume;
    int log_every = 100;
    {
        auto* s = app.add_subcommand("train", "train the group registration network");
        common(s, true);
        s->add_option("--manifest", manifest_path, "real training data (JSON Lines)")->check(CLI::ExistingFile);
        s->add_option("--iterations", iterations, "optimizer steps");
        s->add_option("--lambda", lambda, "regularization weight");
        s->add_option("--gamma", gamma, "segmentation loss weight");
        s->add_option("--lr", lr, "learning rate");
        s->add_option("--synthetic-fraction", synth_frac, "share of synthetic groups");
        s->add_option("--checkpoint-interval", interval, "steps between checkpoints");
        s->add_option("--resume", resume, "checkpoint directory to continue from")->check(CLI::ExistingDirectory);
        s->add_option("--log-every", log_every, "print every N steps (0 = quiet)");
        s->callback([&, s] {
            run = [&, s] {
                resolve();
                if (s->count("--seed")) rc.train.seed = seed;
                seed = rc.train.seed;
                if (iterations >= 0) rc.train.iterations = iterations;
                if (lambda >= 0) rc.train.loss.lambda_reg = lambda;
                if (gamma >= 0) rc.train.loss.gamma_seg = gamma;
                if (lr >= 0) rc.train.learning_rate = lr;
                if (synth_frac >= 0) rc.train.synthetic_fraction = synth_frac;
                if (interval >= 0) rc.train.checkpoint_interval = interval;
                rc.train.validate();
                rc.net.validate();
                DataSources data;
                data.synth = rc.synth;
                if (!manifest_path.empty()) data.manifest = load_manifest(manifest_path);
                save_config("train", {{"manifest", manifest_path}});
                TrainOptions opt;
                opt.out_dir = out_dir;
                if (!resume.empty()) opt.resume_from = fs::path(resume);
                opt.on_step = [&](const LogRow& r) {
                    if (log_every > 0 && r.iteration % log_every == 0) {
                        char line[160];
                        std::snprintf(line, sizeof line, "iter %lld total %.5f sim %.5f reg %.5f seg %.5f m %d\n",
                                      static_cast<long long>(r.iteration), r.total, r.sim, r.reg, r.seg, r.m);
                        out << line << std::flush;
                    }
                };
                train(rc.train, rc.net, data, opt);
                out << "final checkpoint " << (fs::path(out_dir) / "final").string() << "\n";
            };
        });
    }

    // ---- build-atlas
    FilterFlags bf;
    {
        auto* s = app.add_subcommand("build-atlas", "one forward pass on a selected subgroup");
        common(s, true);
        s->add_option("--checkpoint", checkpoint_path, "trained model directory")->required()->check(CLI::ExistingDirectory);
        s->add_option("--manifest", manifest_path, "dataset manifest")->required()->check(CLI::ExistingFile);
        bf.attach(s);
        s->callback([&] {
            run = [&] {
                resolve();
                const auto model = load_model(checkpoint_path);
                rc.net = model.config;
                const auto group = subgroup_select(load_manifest(manifest_path), bf.filter());
                const auto r = build_atlas(model.params, model.config, group);
                json extra = {{"checkpoint", checkpoint_path}, {"manifest", manifest_path}, {"filter", bf.to_json()}};
                if (r.seg) extra["dice"] = evaluate_atlas(r, group).mean_dice;
                write_atlas(out_dir, r, extra);
                save_config("build-atlas", extra);
                out << "atlas of " << group.size() << " members in " << r.seconds << " s\n";
            };
        });
    }

    // ---- baseline-atlas
    FilterFlags if_;
    int outer = -1, inner = -1;
    double step = -1, smooth = -1, ilambda = -1;
    bool no_center = false;
    {
        auto* s = app.add_subcommand("baseline-atlas", "classical iterative atlas on a selected subgroup");
        common(s, true);
        s->add_option("--manifest", manifest_path, "dataset manifest")->required()->check(CLI::ExistingFile);
        if_.attach(s);
        s->add_option("--outer", outer, "template re-estimation rounds");
        s->add_option("--inner", inner, "field updates per round");
        s->add_option("--step", step, "largest velocity change per update (voxels)");
        s->add_option("--sigma", smooth, "update smoothing (voxels)");
        s->add_option("--lambda", ilambda, "regularization weight");
        s->add_flag("--no-center", no_center, "skip mean-velocity centering");
        s->callback([&] {
            run = [&] {
                resolve();
                if (outer >= 0) rc.iter.outer_iterations = outer;
                if (inner >= 0) rc.iter.inner_steps = inner;
                if (step >= 0) rc.iter.step_size = step;
                if (smooth >= 0) rc.iter.smooth_sigma = smooth;
                if (ilambda >= 0) rc.iter.lambda_reg = ilambda;
                if (no_center) rc.iter.center_fields = false;
                rc.iter.validate();
                const auto group = subgroup_select(load_manifest(manifest_path), if_.filter());
                const auto r = iterative_atlas(group, rc.iter);
                json extra = {{"manifest", manifest_path}, {"filter", if_.to_json()}};
                if (r.seg) extra["dice"] = evaluate_atlas(r, group).mean_dice;
                write_atlas(out_dir, r, extra);
                save_config("baseline-atlas", extra);
                out << "atlas of " << group.size() << " members in " << r.seconds << " s, objective "
                    << r.trace.back().second << "\n";
            };
        });
    }

    // ---- evaluate
    FilterFlags ef;
    int eval_groups = 10, eval_m = 20;
    std::uint64_t heldout_seed = 12345;
    {
        auto* s = app.add_subcommand("evaluate", "segmentation transfer on held-out groups");
        common(s, true);
        s->add_option("--checkpoint", checkpoint_path, "trained model directory")->required()->check(CLI::ExistingDirectory);
        s->add_option("--manifest", manifest_path, "evaluate one selected real group instead")->check(CLI::ExistingFile);
        ef.attach(s);
        s->add_option("--groups", eval_groups, "synthetic held-out groups");
        s->add_option("--m", eval_m, "members per held-out group");
        s->add_option("--heldout-seed", heldout_seed, "seed of the held-out set");
        s->callback([&] {
            run = [&] {
                resolve();
                const auto model = load_model(checkpoint_path);
                rc.net = model.config;
                json result;
                if (!manifest_path.empty()) {
                    const auto group = subgroup_select(load_manifest(manifest_path), ef.filter());
                    const auto rep = dice_transfer(model.params, model.config, group, seed);
                    result = rep.to_json();
                    result["baseline_dice"] = unregistered_transfer(group, seed).mean_dice;
                } else {
                    // held-out data follow the generator the model was trained on
                    const auto cfg = read_checkpoint(checkpoint_path).config;
                    if (cfg.contains("synth")) cfg.at("synth").get_to(rc.synth);
                    const auto held = heldout_groups(rc.synth, eval_groups, eval_m, heldout_seed);
                    result = summary_json(evaluate_model(model.params, model.config, held, seed));
                }
                write_json(fs::path(out_dir) / "eval.json", result);
                save_config("evaluate", {{"checkpoint", checkpoint_path}, {"manifest", manifest_path},
                                         {"groups", eval_groups}, {"m", eval_m}, {"heldout_seed", heldout_seed}});
                out << result.dump(2) << "\n";
            };
        });
    }

    // ---- ablate / sweep share the held-out protocol
    std::vector<std::string> variants;
    std::string parameter = "lambda_reg";
    std::vector<double> values;
    auto run_options = [&] {
        RunOptions opt;
        opt.train = rc.train;
        opt.net = rc.net;
        opt.data.synth = rc.synth;
        if (!manifest_path.empty()) opt.data.manifest = load_manifest(manifest_path);
        opt.heldout = heldout_groups(rc.synth, eval_groups, eval_m, heldout_seed);
        opt.eval_seed = seed;
        opt.out_dir = out_dir;
        return opt;
    };
    auto budget_flags = [&](CLI::App* s) {
        s->add_option("--manifest", manifest_path, "real training data (JSON Lines)")->check(CLI::ExistingFile);
        s->add_option("--iterations", iterations, "training steps per run (default 1500)");
        s->add_option("--groups", eval_groups, "held-out groups");
        s->add_option("--m", eval_m, "members per held-out group");
        s->add_option("--heldout-seed", heldout_seed, "seed of the held-out set");
    };
    {
        auto* s = app.add_subcommand("ablate", "train and evaluate model variants");
        common(s, true);
        budget_flags(s);
        s->add_option("--variants", variants, "subset of variants")->delimiter(',');
        s->callback([&] {
            run = [&] {
                resolve();
                rc.train.iterations = iterations >= 0 ? iterations : 1500;
                if (variants.empty()) variants = variant_names();
                for (const auto& v : variants) parse_variant(v);
                auto opt = run_options();
                save_config("ablate", {{"variants", variants}, {"groups", eval_groups}, {"m", eval_m},
                                       {"heldout_seed", heldout_seed}});
                const auto rows = run_ablations(variants, opt);
                write_ablation_csv(fs::path(out_dir) / "ablation.csv", rows);
                for (const auto& r : rows)
                    out << r.variant << " dice " << r.summary.dice_mean << " folds " << r.summary.folds_mean
                        << " centrality " << r.summary.centrality_mean << " " << r.status << "\n";
            };
        });
    }
    {
        auto* s = app.add_subcommand("sweep", "train and evaluate over one loss weight");
        common(s, true);
        budget_flags(s);
        s->add_option("--parameter", parameter, "lambda_reg or gamma_seg")
            ->check(CLI::IsMember({"lambda_reg", "gamma_seg"}));
        s->add_option("--values", values, "values to try (default preset)")->delimiter(',');
        s->callback([&] {
            run = [&] {
                resolve();
                SweepSpec spec = SweepSpec::preset(parameter);
                if (!values.empty()) spec.values = values;
                if (iterations >= 0) spec.iterations = iterations;
                spec.seed = seed;
                spec.validate();
                auto opt = run_options();
                save_config("sweep", {{"parameter", parameter}, {"values", spec.values},
                                      {"iterations", spec.iterations}, {"groups", eval_groups}, {"m", eval_m},
                                      {"heldout_seed", heldout_seed}});
                const auto points = run_sweep(spec, opt);
                const auto csv = fs::path(out_dir) / "sweep.csv";
                write_sweep_csv(csv, parameter, points);
                for (const auto& p : plot_sweep(csv, fs::path(out_dir) / "plots")) out << "plot " << p.string() << "\n";
            };
        });
    }

    // ---- gradcheck
    std::size_t samples = 64;
    {
        auto* s = app.add_subcommand("gradcheck", "compare analytic and numeric parameter gradients");
        common(s, false);
        s->add_option("--samples", samples, "parameter entries to probe");
        s->callback([&] {
            run = [&] {
                GradcheckOptions opt;
                opt.samples = samples;
                const auto r = gradcheck(opt, seed);
                out << "max relative error " << r.max_rel << " over " << r.checked << " entries (" << r.skipped
                    << " skipped at kinks)\n";
                if (!out_dir.empty())
                    write_json(fs::path(out_dir) / "gradcheck.json",
                               {{"seed", seed}, {"max_rel", r.max_rel}, {"checked", r.checked}, {"skipped", r.skipped}});
            };
        });
    }

    if (argc > 1 && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
        err << "error: unknown subcommand '" << argv[1] << "'\n\n" << app.help();
        return 1;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        run();
        return 0;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception& e) {
        err << "error: bad config value: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "failed: " << e.what() << "\n";
        return 2;
    }
}

} // namespace mm::cli
