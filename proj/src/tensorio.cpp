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

#include "multimorph/tensorio.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "multimorph/errors.hpp"

namespace mm {

using nlohmann::json;

std::int64_t TensorData::numel() const {
    std::int64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

namespace {

constexpr std::int64_t kMaxElements = std::int64_t{1} << 40;

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
    if (shape.empty()) throw ValidationError("tensor shape must have at least one axis");
    std::int64_t n = 1;
    for (auto s : shape) {
        if (s <= 0) throw ValidationError("tensor shape has a non-positive extent");
        if (n > kMaxElements / s) throw ValidationError("tensor shape is too large to represent");
        n *= s;
    }
    return n;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

} // namespace

std::string encode_tensor(const TensorData& values, const TensorMeta& meta) {
    const std::int64_t n = checked_numel(values.shape);
    if (n != static_cast<std::int64_t>(values.values.size()))
        throw ValidationError("tensor value count " + std::to_string(values.values.size()) +
                              " does not match shape product " + std::to_string(n));
    if (!meta.allow_nonfinite) {
        for (float v : values.values)
            if (!std::isfinite(v)) throw ValidationError("tensor contains non-finite values");
    }
    if (meta.spacing.size() > values.shape.size())
        throw ValidationError("more spacing entries than tensor axes");

    json header;
    header["shape"] = values.shape;
    header["dtype"] = "f32";
    header["order"] = "C";
    const std::size_t lead = values.shape.size() - meta.spacing.size();
    std::int64_t channels = 1;
    for (std::size_t i = 0; i < lead; ++i) channels *= values.shape[i];
    header["channels"] = channels;
    header["spacing"] = meta.spacing;
    json extra = meta.extra.is_object() ? meta.extra : json::object();
    if (meta.allow_nonfinite) extra["allow_nonfinite"] = true;
    header["meta"] = extra;

    const std::string text = header.dump();
    std::string out;
    out.reserve(8 + text.size() + 4 * static_cast<std::size_t>(n));
    put_u64_le(out, text.size());
    out += text;
    const std::size_t offset = out.size();
    out.resize(offset + 4 * static_cast<std::size_t>(n));
    auto* dst = reinterpret_cast<unsigned char*>(out.data() + offset);
    for (std::int64_t i = 0; i < n; ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(values.values[static_cast<std::size_t>(i)]);
        dst[4 * i + 0] = static_cast<unsigned char>(bits & 0xFF);
        dst[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xFF);
        dst[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xFF);
        dst[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xFF);
    }
    return out;
}

TensorFile decode_tensor(const std::string& bytes) {
    if (bytes.size() < 8) throw FormatError("tensor file truncated: missing header length");
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint64_t hlen = get_u64_le(raw);
    if (hlen > bytes.size() - 8) throw FormatError("tensor file truncated: header shorter than declared");

    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed tensor header JSON: ") + e.what());
    }
    if (!header.is_object()) throw FormatError("malformed tensor header JSON: not an object");

    const std::string dtype = header.value("dtype", "");
    if (dtype != "f32") throw FormatError("unsupported element type '" + dtype + "'");
    if (header.value("order", "C") != "C") throw FormatError("unsupported axis order");

    TensorFile out;
    try {
        out.data.shape = header.at("shape").get<std::vector<std::int64_t>>();
        if (header.contains("spacing")) out.meta.spacing = header["spacing"].get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed tensor header fields: ") + e.what());
    }
    std::int64_t n = 0;
    try {
        n = checked_numel(out.data.shape);
    } catch (const ValidationError& e) {
        throw FormatError(e.what());
    }
    if (header.contains("meta") && header["meta"].is_object()) out.meta.extra = header["meta"];
    out.meta.allow_nonfinite = out.meta.extra.value("allow_nonfinite", false);
    out.meta.extra.erase("allow_nonfinite");

    const std::uint64_t payload = bytes.size() - 8 - hlen;
    const std::uint64_t expected = 4 * static_cast<std::uint64_t>(n);
    if (payload != expected)
        throw FormatError("tensor payload length " + std::to_string(payload) + " does not match shape (" +
                          std::to_string(expected) + " bytes expected)" +
                          (payload < expected ? ": truncated" : ""));

    out.data.values.resize(static_cast<std::size_t>(n));
    const unsigned char* src = raw + 8 + hlen;
    for (std::int64_t i = 0; i < n; ++i) {
        const std::uint32_t bits = static_cast<std::uint32_t>(src[4 * i]) |
                                   (static_cast<std::uint32_t>(src[4 * i + 1]) << 8) |
                                   (static_cast<std::uint32_t>(src[4 * i + 2]) << 16) |
                                   (static_cast<std::uint32_t>(src[4 * i + 3]) << 24);
        out.data.values[static_cast<std::size_t>(i)] = std::bit_cast<float>(bits);
    }
    return out;
}

void write_tensor(const fs::path& path, const TensorData& values, const TensorMeta& meta) {
    write_file(path, encode_tensor(values, meta));
}

TensorFile read_tensor(const fs::path& path) { return decode_tensor(read_file(path)); }

// ---------------------------------------------------------------------------

std::string to_string(Split s) {
    switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    }
    return "train";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw ValidationError("unknown split '" + s + "' (expected train, val or test)");
}

const SubjectRecord* DatasetManifest::find(const std::string& id) const {
    for (const auto& r : records)
        if (r.id == id) return &r;
    return nullptr;
}

DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    const fs::path base = path.parent_path();
    auto resolve = [&](const std::string& p) {
        fs::path q(p);
        return q.is_absolute() ? q : base / q;
    };

    DatasetManifest manifest;
    std::set<std::string> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ValidationError(where + ": malformed JSON: " + e.what());
        }
        if (!j.is_object()) throw ValidationError(where + ": record is not an object");

        SubjectRecord r;
        if (!j.contains("id") || !j["id"].is_string()) throw ValidationError(where + ": missing id");
        r.id = j["id"].get<std::string>();
        if (!seen.insert(r.id).second) throw ValidationError(where + ": duplicate id '" + r.id + "'");
        if (!j.contains("image_path") || !j["image_path"].is_string())
            throw ValidationError(where + ": missing image_path for '" + r.id + "'");
        r.image_path = resolve(j["image_path"].get<std::string>());
        if (!fs::exists(r.image_path))
            throw ValidationError(where + ": image_path does not exist: " + r.image_path.string());
        if (j.contains("seg_path") && !j["seg_path"].is_null()) {
            r.seg_path = resolve(j["seg_path"].get<std::string>());
            if (!fs::exists(*r.seg_path))
                throw ValidationError(where + ": seg_path does not exist: " + r.seg_path->string());
        }
        if (j.contains("modality") && j["modality"].is_string()) r.modality = j["modality"].get<std::string>();
        if (j.contains("age") && j["age"].is_number()) r.age = j["age"].get<double>();
        if (j.contains("diagnosis") && j["diagnosis"].is_string())
            r.diagnosis = j["diagnosis"].get<std::string>();
        try {
            r.split = parse_split(j.value("split", "train"));
        } catch (const ValidationError& e) {
            throw ValidationError(where + ": " + e.what());
        }
        manifest.records.push_back(std::move(r));
    }
    return manifest;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
    const fs::path base = path.parent_path();
    auto rel = [&](const fs::path& p) {
        if (base.empty()) return p.generic_string();
        std::error_code ec;
        auto r = fs::relative(p, base, ec);
        return (ec || r.empty()) ? p.generic_string() : r.generic_string();
    };
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest " + path.string());
    for (const auto& r : manifest.records) {
        json j;
        j["id"] = r.id;
        j["image_path"] = rel(r.image_path);
        if (r.seg_path) j["seg_path"] = rel(*r.seg_path);
        j["modality"] = r.modality;
        if (r.age) j["age"] = *r.age;
        if (r.diagnosis) j["diagnosis"] = *r.diagnosis;
        j["split"] = to_string(r.split);
        out << j.dump() << '\n';
    }
}

// ---------------------------------------------------------------------------

namespace {

std::string tensor_file_name(const std::string& name) {
    std::string out;
    for (char c : name) out.push_back((std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-') ? c : '.');
    return out + ".tensor";
}

json index_entries(const std::vector<NamedTensor>& ts, const std::string& sub) {
    json arr = json::array();
    for (const auto& t : ts)
        arr.push_back({{"name", t.name}, {"file", sub + "/" + tensor_file_name(t.name)}, {"shape", t.tensor.shape}});
    return arr;
}

std::vector<NamedTensor> load_entries(const fs::path& dir, const json& arr) {
    std::vector<NamedTensor> out;
    for (const auto& e : arr) {
        NamedTensor t;
        t.name = e.at("name").get<std::string>();
        const fs::path file = dir / e.at("file").get<std::string>();
        if (!fs::exists(file)) throw FormatError("checkpoint tensor missing on disk: " + t.name);
        t.tensor = read_tensor(file).data;
        if (t.tensor.shape != e.at("shape").get<std::vector<std::int64_t>>())
            throw FormatError("checkpoint tensor '" + t.name + "' has a shape different from the index");
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace

void write_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
    std::error_code ec;
    fs::create_directories(dir / "params", ec);
    fs::create_directories(dir / "optim", ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir.string());
    for (const auto& t : ckpt.parameters) write_tensor(dir / "params" / tensor_file_name(t.name), t.tensor);
    for (const auto& t : ckpt.optimizer_state) write_tensor(dir / "optim" / tensor_file_name(t.name), t.tensor);
    json index;
    index["parameters"] = index_entries(ckpt.parameters, "params");
    index["optimizer"] = index_entries(ckpt.optimizer_state, "optim");
    index["iteration"] = ckpt.iteration;
    write_file(dir / "config.json", ckpt.config.dump(2) + "\n");
    write_file(dir / "index.json", index.dump(2) + "\n");
}

Checkpoint read_checkpoint(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("checkpoint directory not found: " + dir.string());
    Checkpoint ckpt;
    try {
        ckpt.config = json::parse(read_file(dir / "config.json"));
        const json index = json::parse(read_file(dir / "index.json"));
        ckpt.parameters = load_entries(dir, index.at("parameters"));
        if (index.contains("optimizer")) ckpt.optimizer_state = load_entries(dir, index["optimizer"]);
        ckpt.iteration = index.value("iteration", std::int64_t{0});
    } catch (const json::exception& e) {
        throw FormatError("malformed checkpoint in " + dir.string() + ": " + e.what());
    }
    return ckpt;
}

} // namespace mm
