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

// Portable tensor container, dataset manifests and checkpoint directories.
//
// Container layout:
//   [u64 little-endian header length][UTF-8 JSON header][raw f32 LE payload]
// The header carries "shape", "dtype" ("f32"), "order" ("C"), "channels",
// "spacing" (one entry per spatial axis, mm) and a free-form "meta" object.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace mm {

namespace fs = std::filesystem;

struct TensorData {
    std::vector<std::int64_t> shape;
    std::vector<float> values;

    std::int64_t numel() const;
};

struct TensorMeta {
    std::vector<double> spacing;           // spatial axes only
    nlohmann::json extra = nlohmann::json::object();
    bool allow_nonfinite = false;
};

void write_tensor(const fs::path& path, const TensorData& values, const TensorMeta& meta = {});

struct TensorFile {
    TensorData data;
    TensorMeta meta;
};

TensorFile read_tensor(const fs::path& path);

/// Encodes the container into memory. write_tensor is a thin wrapper.
std::string encode_tensor(const TensorData& values, const TensorMeta& meta);
TensorFile decode_tensor(const std::string& bytes);

// ---------------------------------------------------------------------------
// Dataset manifest (JSON Lines)

enum class Split { Train, Val, Test };

std::string to_string(Split s);
Split parse_split(const std::string& s);

struct SubjectRecord {
    std::string id;
    fs::path image_path;                   // resolved
    std::optional<fs::path> seg_path;      // resolved
    std::string modality = "unknown";
    std::optional<double> age;
    std::optional<std::string> diagnosis;
    Split split = Split::Train;
};

struct DatasetManifest {
    std::vector<SubjectRecord> records;

    std::size_t size() const { return records.size(); }
    const SubjectRecord* find(const std::string& id) const;
};

/// Relative paths in the file are resolved against the manifest's directory.
DatasetManifest load_manifest(const fs::path& path);

/// Paths are written relative to the manifest's directory when possible.
void write_manifest(const fs::path& path, const DatasetManifest& manifest);

// ---------------------------------------------------------------------------
// Checkpoints

struct NamedTensor {
    std::string name;
    TensorData tensor;
};

struct Checkpoint {
    nlohmann::json config = nlohmann::json::object();
    std::vector<NamedTensor> parameters;
    std::vector<NamedTensor> optimizer_state;
    std::int64_t iteration = 0;
};

/// Writes config.json, index.json and one container per tensor under `dir`.
void write_checkpoint(const fs::path& dir, const Checkpoint& ckpt);

/// Validates that every indexed tensor exists with the recorded shape.
Checkpoint read_checkpoint(const fs::path& dir);

} // namespace mm
