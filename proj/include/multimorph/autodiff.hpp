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

// Minimal reverse-mode differentiation over 5-D tensors laid out as
// [N, C, Z, Y, X]. N is the group (member) axis; a 2-D problem has Z = 1.
// Every op is instantiated for float (training) and double (gradient checks).

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace mm::ad {

using Shape = std::array<int, 5>;

template <class T>
struct Tensor {
    Shape shape{1, 1, 1, 1, 1};
    std::vector<T> data;

    Tensor() : data(1, T(0)) {}
    explicit Tensor(const Shape& s, T fill = T(0)) : shape(s), data(count(s), fill) {}
    Tensor(const Shape& s, std::vector<T> values) : shape(s), data(std::move(values)) {}

    static std::size_t count(const Shape& s) {
        std::size_t n = 1;
        for (int v : s) n *= static_cast<std::size_t>(v);
        return n;
    }
    std::size_t size() const { return data.size(); }
    int n() const { return shape[0]; }
    int c() const { return shape[1]; }
    std::size_t spatial() const {
        return static_cast<std::size_t>(shape[2]) * shape[3] * shape[4];
    }
};

template <class T>
struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    bool requires_grad = false;

    T* grad_data() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad.data();
    }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> constant(Tensor<T> value);

template <class T>
Var<T> parameter(Tensor<T> value);

/// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
template <class T>
void backward(const Var<T>& root);

enum class Statistic { Mean, Max, Var };

/// Digest of the branch every piecewise op takes (activation sign,
/// interpolation cell, argmax, clamps). Two evaluations with equal digests
/// lie on the same smooth piece of the graph function.
class PieceTrace {
public:
    void note(std::uint64_t piece) noexcept;
    std::uint64_t digest() const noexcept { return digest_; }

private:
    std::uint64_t digest_ = 0x84222325CBF29CE4ULL;
};

/// Makes `trace` the recording target of the calling thread while alive.
class TraceScope {
public:
    explicit TraceScope(PieceTrace& trace);
    ~TraceScope();
    TraceScope(const TraceScope&) = delete;
    TraceScope& operator=(const TraceScope&) = delete;

private:
    PieceTrace* previous_;
};

PieceTrace* active_trace() noexcept;

// --- layers ---------------------------------------------------------------

/// Zero-padded convolution with odd kernel; the kernel depth is 1 for 2-D.
template <class T>
Var<T> conv(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int dims);

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope);

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <class T>
Var<T> scale(const Var<T>& x, T s);

/// [N,C,...] -> [N,2C,...]: every member's channels followed by the group
/// summary over N.
template <class T>
Var<T> group_concat(const Var<T>& x, Statistic stat);

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

/// Nearest-neighbour x2 upsampling of the spatial axes.
template <class T>
Var<T> upsample2(const Var<T>& x, int dims);

/// x_n - mean_n x_n
template <class T>
Var<T> center_group(const Var<T>& x);

/// [N,...] -> [1,...]
template <class T>
Var<T> group_mean(const Var<T>& x);

// --- spatial transforms ---------------------------------------------------

/// out[n,c,p] = src[n,c](p + disp[n,:,p]) with (bi/tri)linear interpolation
/// and clamp-to-edge. disp has `dims` channels in voxel units.
template <class T>
Var<T> grid_sample(const Var<T>& src, const Var<T>& disp, int dims);

/// Scaling and squaring: u = v / 2^steps, then u <- u + u(p + u), `steps` times.
template <class T>
Var<T> integrate(const Var<T>& velocity, int steps, int dims);

/// Divides each voxel's channels by their sum (sum floored at `floor`).
template <class T>
Var<T> renormalize_channels(const Var<T>& x, T floor);

// --- losses (scalar outputs) ----------------------------------------------

/// mean_n [1 - mean_p NCC^2(template, warped_n)] with truncated cubic windows.
/// `templ` has N = 1 and is shared by all members.
template <class T>
Var<T> lncc_loss(const Var<T>& templ, const Var<T>& warped, int window, T eps, int dims);

/// mean_n of the mean squared forward difference of u_n over channels and axes.
template <class T>
Var<T> grad_penalty(const Var<T>& u, int dims);

/// mean over members with mask[n] of the foreground soft-Dice loss between
/// the shared map `templ` (N = 1) and member maps. Returns 0 if no member is
/// selected.
template <class T>
Var<T> soft_dice_loss(const Var<T>& templ, const Var<T>& segs, const std::vector<bool>& mask, T eps);

template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights);

} // namespace mm::ad
