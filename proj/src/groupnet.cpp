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

#include "multimorph/groupnet.hpp"

#include <cmath>
#include <random>
#include <utility>

#include "multimorph/errors.hpp"
#include "multimorph/rng.hpp"

namespace mm {

void NetConfig::validate() const {
    if (dims != 2 && dims != 3) throw ValidationError("net dims must be 2 or 3");
    if (enc_widths.empty()) throw ValidationError("encoder needs at least one level");
    if (enc_widths.size() != dec_widths.size()) throw ValidationError("encoder/decoder depths differ");
    auto positive = [](const std::vector<int>& v) {
        for (int w : v)
            if (w <= 0) return false;
        return true;
    };
    if (!positive(enc_widths) || !positive(dec_widths) || !positive(post_widths))
        throw ValidationError("channel widths must be positive");
    if (kernel < 1 || kernel % 2 == 0) throw ValidationError("kernel size must be odd");
    if (integration_steps < 1) throw ValidationError("integration_steps must be >= 1");
    if (!(head_init_scale >= 0.0)) throw ValidationError("head_init_scale must be >= 0");
}

void NetConfig::check_grid(const Grid& g) const {
    if (g.dims != dims)
        throw ValidationError("network built for " + std::to_string(dims) + "-D input, got " + g.describe());
    const int f = 1 << (depth() - 1);
    for (int a = 0; a < g.dims; ++a)
        if (g.extent[a] % f != 0)
            throw ValidationError("grid " + g.describe() + " not divisible by " + std::to_string(f));
}

std::string to_string(ad::Statistic s) {
    switch (s) {
    case ad::Statistic::Mean: return "mean";
    case ad::Statistic::Max: return "max";
    case ad::Statistic::Var: return "var";
    }
    return "mean";
}

ad::Statistic parse_statistic(const std::string& s) {
    if (s == "mean") return ad::Statistic::Mean;
    if (s == "max") return ad::Statistic::Max;
    if (s == "var") return ad::Statistic::Var;
    throw ValidationError("unknown group statistic '" + s + "'");
}

void to_json(nlohmann::json& j, const NetConfig& c) {
    j = {{"dims", c.dims},
         {"enc_widths", c.enc_widths},
         {"dec_widths", c.dec_widths},
         {"post_widths", c.post_widths},
         {"statistic", to_string(c.statistic)},
         {"use_group_block", c.use_group_block},
         {"use_centrality", c.use_centrality},
         {"slope", c.slope},
         {"head_init_scale", c.head_init_scale},
         {"integration_steps", c.integration_steps},
         {"kernel", c.kernel}};
}

void from_json(const nlohmann::json& j, NetConfig& c) {
    c.dims = j.value("dims", c.dims);
    c.enc_widths = j.value("enc_widths", c.enc_widths);
    c.dec_widths = j.value("dec_widths", c.dec_widths);
    c.post_widths = j.value("post_widths", c.post_widths);
    if (j.contains("statistic")) c.statistic = parse_statistic(j.at("statistic").get<std::string>());
    c.use_group_block = j.value("use_group_block", c.use_group_block);
    c.use_centrality = j.value("use_centrality", c.use_centrality);
    c.slope = j.value("slope", c.slope);
    c.head_init_scale = j.value("head_init_scale", c.head_init_scale);
    c.integration_steps = j.value("integration_steps", c.integration_steps);
    c.kernel = j.value("kernel", c.kernel);
}

std::vector<ParamSpec> param_specs(const NetConfig& cfg) {
    cfg.validate();
    const int kz = cfg.dims == 3 ? cfg.kernel : 1;
    const int k = cfg.kernel;
    const int mult = cfg.use_group_block ? 2 : 1;
    std::vector<ParamSpec> out;
    auto layer = [&](const std::string& name, int cin, int cout, bool grouped) {
        const int in = grouped ? cin * mult : cin;
        out.push_back({name + ".weight", {cout, in, kz, k, k}});
        out.push_back({name + ".bias", {1, cout, 1, 1, 1}});
    };
    int c = 1;
    std::vector<int> skips;
    for (std::size_t l = 0; l < cfg.enc_widths.size(); ++l) {
        layer("enc" + std::to_string(l), c, cfg.enc_widths[l], true);
        c = cfg.enc_widths[l];
        skips.push_back(c);
    }
    const int L = cfg.depth();
    for (int l = 0; l < L; ++l) {
        const int cin = l == 0 ? c : c + skips[static_cast<std::size_t>(L - 1 - l)];
        layer("dec" + std::to_string(l), cin, cfg.dec_widths[static_cast<std::size_t>(l)], true);
        c = cfg.dec_widths[static_cast<std::size_t>(l)];
    }
    for (std::size_t l = 0; l < cfg.post_widths.size(); ++l) {
        layer("post" + std::to_string(l), c, cfg.post_widths[l], true);
        c = cfg.post_widths[l];
    }
    layer("head", c, cfg.dims, false);
    return out;
}

std::size_t ModelParams::count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
}

const ad::Tensor<float>& ModelParams::at(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return tensors[i];
    throw ValidationError("no parameter named '" + name + "'");
}

ad::Tensor<float>& ModelParams::at(const std::string& name) {
    return const_cast<ad::Tensor<float>&>(std::as_const(*this).at(name));
}

void ModelParams::check(const NetConfig& cfg) const {
    const auto specs = param_specs(cfg);
    if (specs.size() != names.size() || specs.size() != tensors.size())
        throw ValidationError("parameter count " + std::to_string(names.size()) + " does not match config (" +
                              std::to_string(specs.size()) + ")");
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].name != names[i]) throw ValidationError("parameter " + names[i] + " where " + specs[i].name + " expected");
        if (specs[i].shape != tensors[i].shape || tensors[i].size() != ad::Tensor<float>::count(specs[i].shape))
            throw ValidationError("parameter " + names[i] + " has the wrong shape");
    }
}

ModelParams init_params(const NetConfig& cfg, std::uint64_t seed) {
    const auto specs = param_specs(cfg);
    ModelParams p;
    const SeedPath root(seed);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& s = specs[i];
        ad::Tensor<float> t(s.shape);
        const bool is_weight = s.name.ends_with(".weight");
        if (is_weight) {
            auto eng = root.child(i).engine();
            if (s.name == "head.weight") {
                std::normal_distribution<double> nd(0.0, cfg.head_init_scale);
                for (auto& v : t.data) v = static_cast<float>(nd(eng));
            } else {
                const double fan_in = static_cast<double>(s.shape[1]) * s.shape[2] * s.shape[3] * s.shape[4];
                const double bound = std::sqrt(6.0 / ((1.0 + cfg.slope * cfg.slope) * fan_in));
                std::uniform_real_distribution<double> ud(-bound, bound);
                for (auto& v : t.data) v = static_cast<float>(ud(eng));
            }
        }
        p.names.push_back(s.name);
        p.tensors.push_back(std::move(t));
    }
    return p;
}

template <class T>
ad::Var<T> group_block_graph(const ad::Var<T>& x, const ad::Var<T>& weight, const ad::Var<T>& bias,
                             const BlockOptions& opt) {
    auto in = opt.use_group ? ad::group_concat<T>(x, opt.statistic) : x;
    auto y = ad::conv<T>(in, weight, bias, opt.stride, opt.dims);
    if (opt.activate) y = ad::leaky_relu<T>(y, static_cast<T>(opt.slope));
    if (opt.residual && y->value.shape == x->value.shape) y = ad::add<T>(y, x);
    return y;
}

ad::Tensor<float> group_block(const ad::Tensor<float>& features, const ad::Tensor<float>& weight,
                              const ad::Tensor<float>& bias, const BlockOptions& opt) {
    if (features.n() < 1) throw ValidationError("group_block: empty group");
    if (features.size() != ad::Tensor<float>::count(features.shape))
        throw ValidationError("group_block: feature data does not match its shape");
    return group_block_graph<float>(ad::constant(features), ad::constant(weight), ad::constant(bias), opt)->value;
}

template <class T>
ad::Var<T> forward_graph(const ad::Var<T>& images, const std::vector<ad::Var<T>>& params, const NetConfig& cfg) {
    const auto specs = param_specs(cfg);
    if (params.size() != specs.size())
        throw ValidationError("forward: expected " + std::to_string(specs.size()) + " parameters, got " +
                              std::to_string(params.size()));
    std::size_t next = 0;
    BlockOptions opt;
    opt.dims = cfg.dims;
    opt.statistic = cfg.statistic;
    opt.use_group = cfg.use_group_block;
    opt.slope = cfg.slope;
    auto block = [&](const ad::Var<T>& x, int stride) {
        opt.stride = stride;
        auto y = group_block_graph<T>(x, params[next], params[next + 1], opt);
        next += 2;
        return y;
    };

    const int L = cfg.depth();
    std::vector<ad::Var<T>> skips;
    ad::Var<T> h = images;
    for (int l = 0; l < L; ++l) {
        h = block(h, l == 0 ? 1 : 2);
        skips.push_back(h);
    }
    for (int l = 0; l < L; ++l) {
        if (l > 0) {
            h = ad::upsample2<T>(h, cfg.dims);
            h = ad::concat_channels<T>(h, skips[static_cast<std::size_t>(L - 1 - l)]);
        }
        h = block(h, 1);
    }
    for (std::size_t l = 0; l < cfg.post_widths.size(); ++l) h = block(h, 1);
    auto v = ad::conv<T>(h, params[next], params[next + 1], 1, cfg.dims);
    if (cfg.use_centrality) v = ad::center_group<T>(v);
    return v;
}

template ad::Var<float> group_block_graph<float>(const ad::Var<float>&, const ad::Var<float>&, const ad::Var<float>&,
                                                 const BlockOptions&);
template ad::Var<double> group_block_graph<double>(const ad::Var<double>&, const ad::Var<double>&,
                                                   const ad::Var<double>&, const BlockOptions&);
template ad::Var<float> forward_graph<float>(const ad::Var<float>&, const std::vector<ad::Var<float>>&, const NetConfig&);
template ad::Var<double> forward_graph<double>(const ad::Var<double>&, const std::vector<ad::Var<double>>&,
                                               const NetConfig&);

std::vector<VelocityField> forward(const GroupBatch& group, const ModelParams& params, const NetConfig& cfg) {
    group.validate();
    cfg.check_grid(group.grid());
    params.check(cfg);
    std::vector<ad::Var<float>> vars;
    for (const auto& t : params.tensors) vars.push_back(ad::constant(t));
    auto v = forward_graph<float>(ad::constant(image_tensor<float>(group)), vars, cfg);
    return fields_from<VelocityField>(v->value, group.grid());
}

std::vector<VelocityField> centrality_project(const std::vector<VelocityField>& vs) {
    if (vs.empty()) throw ValidationError("centrality_project: empty list");
    for (const auto& v : vs) require_same_grid(vs[0].grid, v.grid, "centrality_project");
    auto out = ad::center_group<float>(ad::constant(field_tensor<float>(vs)));
    return fields_from<VelocityField>(out->value, vs[0].grid);
}

std::vector<NamedTensor> to_named(const ModelParams& params) {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        const auto& t = params.tensors[i];
        out.push_back({params.names[i], {std::vector<std::int64_t>(t.shape.begin(), t.shape.end()), t.data}});
    }
    return out;
}

ModelParams from_named(const std::vector<NamedTensor>& tensors, const NetConfig& cfg) {
    ModelParams p;
    for (const auto& nt : tensors) {
        if (nt.tensor.shape.size() != 5) throw ValidationError("parameter " + nt.name + " is not 5-D");
        ad::Shape s{};
        for (std::size_t k = 0; k < 5; ++k) s[k] = static_cast<int>(nt.tensor.shape[k]);
        p.names.push_back(nt.name);
        p.tensors.emplace_back(s, nt.tensor.values);
    }
    p.check(cfg);
    return p;
}

Model load_model(const std::filesystem::path& dir) {
    auto ck = read_checkpoint(dir);
    if (!ck.config.contains("net")) throw ValidationError("checkpoint config has no \"net\" section");
    Model m;
    m.config = ck.config.at("net").get<NetConfig>();
    m.config.validate();
    m.params = from_named(ck.parameters, m.config);
    return m;
}

} // namespace mm
