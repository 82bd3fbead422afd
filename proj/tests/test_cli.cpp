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

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "multimorph");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = mm::cli::dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const char* name) {
    const auto d = fs::temp_directory_path() / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

} // namespace

TEST_CASE("usage errors exit 1") {
    auto r = run({"frobnicate"});
    CHECK(r.code == 1);
    CHECK(r.err.find("frobnicate") != std::string::npos);
    CHECK(r.err.find("Usage") != std::string::npos);

    const auto dir = scratch("mm_cli_usage");
    std::ofstream(dir / "m.jsonl") << "";
    r = run({"build-atlas", "--manifest", (dir / "m.jsonl").string(), "--out", "x"});
    CHECK(r.code == 1);
    CHECK(r.err.find("--checkpoint") != std::string::npos);

    r = run({"train", "--out", "x", "--iterations", "many"});
    CHECK(r.code == 1);
    CHECK(r.err.find("--iterations") != std::string::npos);

    CHECK(run({}).code == 1);
    CHECK(run({"--help"}).code == 0);
}

TEST_CASE("gradcheck prints the error") {
    auto r = run({"gradcheck", "--seed", "7"});
    CHECK(r.code == 0);
    CHECK(r.out.find("max relative error") != std::string::npos);
}

TEST_CASE("configs are validated and written back") {
    const auto dir = scratch("mm_cli_cfg");
    {
        std::ofstream(dir / "bad.json") << R"({"nets": {}})";
        std::ofstream(dir / "neg.json") << R"({"synth": {"classes": 1}})";
        std::ofstream(dir / "ok.json") << R"({"synth": {"grid": [16, 16], "classes": 3}})";
    }
    CHECK(run({"synth-data", "--config", (dir / "bad.json").string(), "--out", (dir / "a").string()}).code == 1);
    CHECK(run({"synth-data", "--config", (dir / "neg.json").string(), "--out", (dir / "b").string()}).code == 1);

    auto r = run({"synth-data", "--config", (dir / "ok.json").string(), "--out", (dir / "c").string(), "--groups",
                  "1", "--m", "2", "--seed", "3"});
    REQUIRE(r.code == 0);
    std::ifstream in(dir / "c" / "config.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j.at("synth").at("classes") == 3);
    CHECK(j.at("seed") == 3);
    CHECK(fs::exists(dir / "c" / "manifest.jsonl"));

    // an empty selection is bad input, not a crash
    r = run({"baseline-atlas", "--manifest", (dir / "c" / "manifest.jsonl").string(), "--modality", "none", "--out",
             (dir / "d").string()});
    CHECK(r.code == 1);
    fs::remove_all(dir);
}

TEST_CASE("runtime failures exit 2") {
    const auto dir = scratch("mm_cli_rt");
    std::ofstream(dir / "tiny.json") << R"({"net": {"enc_widths": [4], "dec_widths": [4], "post_widths": []},
        "synth": {"grid": [8, 8], "classes": 3}, "train": {"m_hi": 2, "loss": {"lncc_window": 5}}})";
    REQUIRE(run({"train", "--config", (dir / "tiny.json").string(), "--out", (dir / "run").string(), "--iterations",
                 "1", "--log-every", "0"})
                .code == 0);
    // a truncated parameter file cannot be decoded
    fs::path victim;
    for (const auto& e : fs::recursive_directory_iterator(dir / "run" / "final"))
        if (e.path().extension() == ".tensor") victim = e.path();
    REQUIRE(!victim.empty());
    fs::resize_file(victim, 20);
    auto r = run({"evaluate", "--checkpoint", (dir / "run" / "final").string(), "--out", (dir / "e").string(),
                  "--groups", "1", "--m", "2"});
    CHECK(r.code == 2);
    CHECK(r.err.find("truncated") != std::string::npos);
    fs::remove_all(dir);
}
