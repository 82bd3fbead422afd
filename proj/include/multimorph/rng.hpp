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
#include <initializer_list>
#include <random>
#include <vector>

namespace mm {

/// SplitMix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Derives a child stream seed: child = mix(parent, index).
constexpr std::uint64_t mix_seed(std::uint64_t parent, std::uint64_t index) noexcept {
    return splitmix64(parent ^ splitmix64(index + 0x632BE59BD9B4E019ULL));
}

/// Root seed plus a list of derivation indices. Two equal paths always
/// produce the same engine state.
class SeedPath {
public:
    SeedPath() = default;
    explicit SeedPath(std::uint64_t root) : root_(root) {}

    SeedPath child(std::uint64_t index) const {
        SeedPath out = *this;
        out.indices_.push_back(index);
        return out;
    }

    SeedPath child(std::initializer_list<std::uint64_t> indices) const {
        SeedPath out = *this;
        out.indices_.insert(out.indices_.end(), indices.begin(), indices.end());
        return out;
    }

    std::uint64_t value() const noexcept {
        std::uint64_t s = splitmix64(root_);
        for (auto i : indices_) s = mix_seed(s, i);
        return s;
    }

    std::mt19937_64 engine() const { return std::mt19937_64(value()); }

    std::uint64_t root() const noexcept { return root_; }
    const std::vector<std::uint64_t>& indices() const noexcept { return indices_; }

    bool operator==(const SeedPath&) const = default;

private:
    std::uint64_t root_ = 0;
    std::vector<std::uint64_t> indices_;
};

} // namespace mm
