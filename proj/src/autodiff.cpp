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

#include "multimorph/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include <Eigen/Core>

#include "multimorph/errors.hpp"
#include "multimorph/kernels.hpp"

namespace mm::ad {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    bool any = false;
    for (const auto& p : parents) any = any || (p && p->requires_grad);
    if (any) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return node;
}

kern::Vol3 vol_of(const Shape& s) { return {s[2], s[3], s[4]}; }

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (int i = 0; i < 5; ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw ValidationError(msg);
}

// Mean over the leading (group) axis, accumulated in double so that a group
// of identical members reproduces the member exactly.
template <class T>
std::vector<T> member_mean(const T* in, int N, std::size_t block) {
    std::vector<double> acc(block, 0.0);
    for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < block; ++i) acc[i] += in[n * block + i];
    std::vector<T> out(block);
    for (std::size_t i = 0; i < block; ++i) out[i] = static_cast<T>(acc[i] / N);
    return out;
}

thread_local PieceTrace* g_trace = nullptr;

} // namespace

void PieceTrace::note(std::uint64_t piece) noexcept {
    digest_ = (digest_ ^ piece) * 0x100000001B3ULL;
    digest_ ^= digest_ >> 29;
}

TraceScope::TraceScope(PieceTrace& trace) : previous_(g_trace) { g_trace = &trace; }
TraceScope::~TraceScope() { g_trace = previous_; }
PieceTrace* active_trace() noexcept { return g_trace; }

template <class T>
Var<T> constant(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return node;
}

template <class T>
Var<T> parameter(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    return node;
}

template <class T>
void backward(const Var<T>& root) {
    require(root && root->value.size() == 1, "backward() needs a single-element root");
    if (!root->requires_grad) return;
    // Iterative post-order DFS for a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->grad_data()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
    int cin, cout, kz, ky, kx, pz, py, px, sz, sy, sx;
    int iz, iy, ix, oz, oy, ox;
    std::size_t rows() const { return static_cast<std::size_t>(cin) * kz * ky * kx; }
    std::size_t cols() const { return static_cast<std::size_t>(oz) * oy * ox; }
    std::size_t in_size() const { return static_cast<std::size_t>(cin) * iz * iy * ix; }
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
    const std::size_t P = g.cols();
    std::size_t row = 0;
    for (int c = 0; c < g.cin; ++c)
        for (int dz = 0; dz < g.kz; ++dz)
            for (int dy = 0; dy < g.ky; ++dy)
                for (int dx = 0; dx < g.kx; ++dx, ++row) {
                    T* out = col + row * P;
                    std::size_t j = 0;
                    for (int oz = 0; oz < g.oz; ++oz) {
                        const int z = oz * g.sz - g.pz + dz;
                        for (int oy = 0; oy < g.oy; ++oy) {
                            const int y = oy * g.sy - g.py + dy;
                            const bool zy_ok = z >= 0 && z < g.iz && y >= 0 && y < g.iy;
                            const T* src = x + ((static_cast<std::size_t>(c) * g.iz + (zy_ok ? z : 0)) * g.iy +
                                                (zy_ok ? y : 0)) * g.ix;
                            for (int ox = 0; ox < g.ox; ++ox, ++j) {
                                const int xx = ox * g.sx - g.px + dx;
                                out[j] = (zy_ok && xx >= 0 && xx < g.ix) ? src[xx] : T(0);
                            }
                        }
                    }
                }
}

template <class T>
void col2im(const T* col, const ConvGeom& g, T* dx_out) {
    const std::size_t P = g.cols();
    std::size_t row = 0;
    for (int c = 0; c < g.cin; ++c)
        for (int dz = 0; dz < g.kz; ++dz)
            for (int dy = 0; dy < g.ky; ++dy)
                for (int dx = 0; dx < g.kx; ++dx, ++row) {
                    const T* in = col + row * P;
                    std::size_t j = 0;
                    for (int oz = 0; oz < g.oz; ++oz) {
                        const int z = oz * g.sz - g.pz + dz;
                        for (int oy = 0; oy < g.oy; ++oy) {
                            const int y = oy * g.sy - g.py + dy;
                            if (!(z >= 0 && z < g.iz && y >= 0 && y < g.iy)) {
                                j += static_cast<std::size_t>(g.ox);
                                continue;
                            }
                            T* dst = dx_out + ((static_cast<std::size_t>(c) * g.iz + z) * g.iy + y) * g.ix;
                            for (int ox = 0; ox < g.ox; ++ox, ++j) {
                                const int xx = ox * g.sx - g.px + dx;
                                if (xx >= 0 && xx < g.ix) dst[xx] += in[j];
                            }
                        }
                    }
                }
}

} // namespace

template <class T>
Var<T> conv(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int dims) {
    const Shape& xs = x->value.shape;
    const Shape& ws = weight->value.shape;
    require(ws[1] == xs[1], "conv: weight expects " + std::to_string(ws[1]) + " input channels, got " +
                                std::to_string(xs[1]) + " (input " + shape_str(xs) + ")");
    require(ws[2] % 2 == 1 && ws[3] % 2 == 1 && ws[4] % 2 == 1, "conv: kernel sizes must be odd");
    require(dims == 3 || ws[2] == 1, "conv: 2-D convolution needs kernel depth 1");
    require(!bias || static_cast<int>(bias->value.size()) == ws[0], "conv: bias size mismatch");
    ConvGeom g{};
    g.cin = ws[1];
    g.cout = ws[0];
    g.kz = ws[2];
    g.ky = ws[3];
    g.kx = ws[4];
    g.pz = g.kz / 2;
    g.py = g.ky / 2;
    g.px = g.kx / 2;
    g.sz = dims == 3 ? stride : 1;
    g.sy = stride;
    g.sx = stride;
    g.iz = xs[2];
    g.iy = xs[3];
    g.ix = xs[4];
    g.oz = (g.iz + 2 * g.pz - g.kz) / g.sz + 1;
    g.oy = (g.iy + 2 * g.py - g.ky) / g.sy + 1;
    g.ox = (g.ix + 2 * g.px - g.kx) / g.sx + 1;

    const int N = xs[0];
    Tensor<T> out({N, g.cout, g.oz, g.oy, g.ox});
    const std::size_t P = g.cols(), R = g.rows();
    std::vector<T> col(R * P);
    Eigen::Map<const RowMat<T>> W(weight->value.data.data(), g.cout, static_cast<Eigen::Index>(R));
    for (int n = 0; n < N; ++n) {
        im2col(x->value.data.data() + n * g.in_size(), g, col.data());
        Eigen::Map<const RowMat<T>> C(col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(P));
        Eigen::Map<RowMat<T>> O(out.data.data() + n * g.cout * P, g.cout, static_cast<Eigen::Index>(P));
        O.noalias() = W * C;
        if (bias)
            for (int co = 0; co < g.cout; ++co) O.row(co).array() += bias->value.data[co];
    }

    std::vector<Var<T>> parents{x, weight};
    if (bias) parents.push_back(bias);
    return make_node<T>(std::move(out), parents, [g, N](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        Node<T>& wn = *self.parents[1];
        Node<T>* bn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        const std::size_t P = g.cols(), R = g.rows();
        std::vector<T> col(R * P), dcol;
        Eigen::Map<const RowMat<T>> W(wn.value.data.data(), g.cout, static_cast<Eigen::Index>(R));
        for (int n = 0; n < N; ++n) {
            Eigen::Map<const RowMat<T>> G(self.grad.data() + n * g.cout * P, g.cout, static_cast<Eigen::Index>(P));
            if (wn.requires_grad) {
                im2col(xn.value.data.data() + n * g.in_size(), g, col.data());
                Eigen::Map<const RowMat<T>> C(col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(P));
                Eigen::Map<RowMat<T>> dW(wn.grad_data(), g.cout, static_cast<Eigen::Index>(R));
                dW.noalias() += G * C.transpose();
            }
            if (bn && bn->requires_grad) {
                T* db = bn->grad_data();
                // plain loop: Eigen's vectorized sum peels by address, which
                // would make the result depend on allocation alignment
                for (int co = 0; co < g.cout; ++co) {
                    const T* row = self.grad.data() + (n * g.cout + co) * P;
                    double acc = 0.0;
                    for (std::size_t q = 0; q < P; ++q) acc += row[q];
                    db[co] += static_cast<T>(acc);
                }
            }
            if (xn.requires_grad) {
                dcol.resize(R * P);
                Eigen::Map<RowMat<T>> DC(dcol.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(P));
                DC.noalias() = W.transpose() * G;
                col2im(dcol.data(), g, xn.grad_data() + n * g.in_size());
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
    Tensor<T> out(x->value.shape);
    const auto& in = x->value.data;
    for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = in[i] > T(0) ? in[i] : slope * in[i];
    if (auto* tr = active_trace())
        for (std::size_t i = 0; i < in.size(); ++i) tr->note(in[i] > T(0) ? i * 2 + 1 : i * 2);
    return make_node<T>(std::move(out), {x}, [slope](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        T* dx = xn.grad_data();
        const auto& in = xn.value.data;
        for (std::size_t i = 0; i < in.size(); ++i) dx[i] += in[i] > T(0) ? self.grad[i] : slope * self.grad[i];
    });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require(a->value.shape == b->value.shape,
            "add: shape mismatch " + shape_str(a->value.shape) + " vs " + shape_str(b->value.shape));
    Tensor<T> out(a->value.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a->value.data[i] + b->value.data[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            T* d = p->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
    Tensor<T> out(x->value.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = s * x->value.data[i];
    return make_node<T>(std::move(out), {x}, [s](Node<T>& self) {
        T* d = self.parents[0]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += s * self.grad[i];
    });
}

template <class T>
Var<T> group_concat(const Var<T>& x, Statistic stat) {
    const Shape s = x->value.shape;
    const int N = s[0], C = s[1];
    const std::size_t S = x->value.spatial(), block = C * S;
    require(N >= 1, "group_concat: empty group");
    const T* in = x->value.data.data();

    std::vector<T> summary(block, T(0));
    std::vector<int> argmax;
    if (stat == Statistic::Max) {
        argmax.assign(block, 0);
        for (std::size_t i = 0; i < block; ++i) {
            T best = in[i];
            for (int n = 1; n < N; ++n)
                if (in[n * block + i] > best) {
                    best = in[n * block + i];
                    argmax[i] = n;
                }
            summary[i] = best;
        }
        if (auto* tr = active_trace())
            for (std::size_t i = 0; i < block; ++i) tr->note(static_cast<std::uint64_t>(argmax[i]) + i * 64);
    } else {
        summary = member_mean(in, N, block);
        if (stat == Statistic::Var) {
            std::vector<T> var(block, T(0));
            for (int n = 0; n < N; ++n)
                for (std::size_t i = 0; i < block; ++i) {
                    const T d = in[n * block + i] - summary[i];
                    var[i] += d * d;
                }
            for (auto& v : var) v /= static_cast<T>(N);
            // keep the mean for the backward pass
            std::swap(var, summary);
            Tensor<T> out({N, 2 * C, s[2], s[3], s[4]});
            for (int n = 0; n < N; ++n) {
                std::copy(in + n * block, in + (n + 1) * block, out.data.begin() + 2 * n * block);
                std::copy(summary.begin(), summary.end(), out.data.begin() + (2 * n + 1) * block);
            }
            std::vector<T> mean = std::move(var);
            return make_node<T>(std::move(out), {x}, [N, block, mean = std::move(mean)](Node<T>& self) {
                Node<T>& xn = *self.parents[0];
                T* dx = xn.grad_data();
                const T* xv = xn.value.data.data();
                std::vector<T> G(block, T(0));
                for (int n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < block; ++i) {
                        dx[n * block + i] += self.grad[2 * n * block + i];
                        G[i] += self.grad[(2 * n + 1) * block + i];
                    }
                for (int n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < block; ++i)
                        dx[n * block + i] += G[i] * T(2) * (xv[n * block + i] - mean[i]) / static_cast<T>(N);
            });
        }
    }

    Tensor<T> out({N, 2 * C, s[2], s[3], s[4]});
    for (int n = 0; n < N; ++n) {
        std::copy(in + n * block, in + (n + 1) * block, out.data.begin() + 2 * n * block);
        std::copy(summary.begin(), summary.end(), out.data.begin() + (2 * n + 1) * block);
    }
    return make_node<T>(std::move(out), {x}, [N, block, stat, argmax = std::move(argmax)](Node<T>& self) {
        T* dx = self.parents[0]->grad_data();
        std::vector<T> G(block, T(0));
        for (int n = 0; n < N; ++n)
            for (std::size_t i = 0; i < block; ++i) {
                dx[n * block + i] += self.grad[2 * n * block + i];
                G[i] += self.grad[(2 * n + 1) * block + i];
            }
        if (stat == Statistic::Max) {
            for (std::size_t i = 0; i < block; ++i) dx[argmax[i] * block + i] += G[i];
        } else {
            for (int n = 0; n < N; ++n)
                for (std::size_t i = 0; i < block; ++i) dx[n * block + i] += G[i] / static_cast<T>(N);
        }
    });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const Shape sa = a->value.shape, sb = b->value.shape;
    require(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3] && sa[4] == sb[4],
            "concat_channels: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    const int N = sa[0];
    const std::size_t ba = a->value.size() / N, bb = b->value.size() / N;
    Tensor<T> out({N, sa[1] + sb[1], sa[2], sa[3], sa[4]});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a->value.data.begin() + n * ba, ba, out.data.begin() + n * (ba + bb));
        std::copy_n(b->value.data.begin() + n * bb, bb, out.data.begin() + n * (ba + bb) + ba);
    }
    return make_node<T>(std::move(out), {a, b}, [N, ba, bb](Node<T>& self) {
        Node<T>& an = *self.parents[0];
        Node<T>& bn = *self.parents[1];
        for (int n = 0; n < N; ++n) {
            const T* g = self.grad.data() + n * (ba + bb);
            if (an.requires_grad) {
                T* d = an.grad_data() + n * ba;
                for (std::size_t i = 0; i < ba; ++i) d[i] += g[i];
            }
            if (bn.requires_grad) {
                T* d = bn.grad_data() + n * bb;
                for (std::size_t i = 0; i < bb; ++i) d[i] += g[ba + i];
            }
        }
    });
}

template <class T>
Var<T> upsample2(const Var<T>& x, int dims) {
    const Shape s = x->value.shape;
    const int fz = dims == 3 ? 2 : 1;
    const Shape os{s[0], s[1], s[2] * fz, s[3] * 2, s[4] * 2};
    Tensor<T> out(os);
    const int planes = s[0] * s[1];
    for (int pl = 0; pl < planes; ++pl)
        for (int z = 0; z < os[2]; ++z)
            for (int y = 0; y < os[3]; ++y)
                for (int xx = 0; xx < os[4]; ++xx)
                    out.data[((static_cast<std::size_t>(pl) * os[2] + z) * os[3] + y) * os[4] + xx] =
                        x->value.data[((static_cast<std::size_t>(pl) * s[2] + z / fz) * s[3] + y / 2) * s[4] + xx / 2];
    return make_node<T>(std::move(out), {x}, [s, os, fz, planes](Node<T>& self) {
        T* d = self.parents[0]->grad_data();
        for (int pl = 0; pl < planes; ++pl)
            for (int z = 0; z < os[2]; ++z)
                for (int y = 0; y < os[3]; ++y)
                    for (int xx = 0; xx < os[4]; ++xx)
                        d[((static_cast<std::size_t>(pl) * s[2] + z / fz) * s[3] + y / 2) * s[4] + xx / 2] +=
                            self.grad[((static_cast<std::size_t>(pl) * os[2] + z) * os[3] + y) * os[4] + xx];
    });
}

template <class T>
Var<T> center_group(const Var<T>& x) {
    const int N = x->value.shape[0];
    const std::size_t block = x->value.size() / N;
    const std::vector<T> mean = member_mean(x->value.data.data(), N, block);
    Tensor<T> out(x->value.shape);
    for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < block; ++i) out.data[n * block + i] = x->value.data[n * block + i] - mean[i];
    return make_node<T>(std::move(out), {x}, [N, block](Node<T>& self) {
        std::vector<T> gm(block, T(0));
        for (int n = 0; n < N; ++n)
            for (std::size_t i = 0; i < block; ++i) gm[i] += self.grad[n * block + i];
        for (auto& v : gm) v /= static_cast<T>(N);
        T* d = self.parents[0]->grad_data();
        for (int n = 0; n < N; ++n)
            for (std::size_t i = 0; i < block; ++i) d[n * block + i] += self.grad[n * block + i] - gm[i];
    });
}

template <class T>
Var<T> group_mean(const Var<T>& x) {
    const Shape s = x->value.shape;
    const int N = s[0];
    const std::size_t block = x->value.size() / N;
    Tensor<T> out({1, s[1], s[2], s[3], s[4]}, member_mean(x->value.data.data(), N, block));
    return make_node<T>(std::move(out), {x}, [N, block](Node<T>& self) {
        T* d = self.parents[0]->grad_data();
        for (int n = 0; n < N; ++n)
            for (std::size_t i = 0; i < block; ++i) d[n * block + i] += self.grad[i] / static_cast<T>(N);
    });
}

// ---------------------------------------------------------------------------
// Spatial transforms

template <class T>
Var<T> grid_sample(const Var<T>& src, const Var<T>& disp, int dims) {
    const Shape ss = src->value.shape, ds = disp->value.shape;
    require(ss[0] == ds[0] && ss[2] == ds[2] && ss[3] == ds[3] && ss[4] == ds[4],
            "grid_sample: shape mismatch " + shape_str(ss) + " vs " + shape_str(ds));
    require(ds[1] == dims, "grid_sample: displacement needs one channel per spatial axis");
    const int N = ss[0], C = ss[1];
    const kern::Vol3 v = vol_of(ss);
    const std::size_t n = v.size();
    Tensor<T> out(ss);
    for (int m = 0; m < N; ++m)
        kern::warp_blocks(src->value.data.data() + m * C * n, C, disp->value.data.data() + m * dims * n, dims, v,
                          out.data.data() + m * C * n);
    if (auto* tr = active_trace()) {
        const int ext[3] = {v.nz, v.ny, v.nx};
        for (int m = 0; m < N; ++m)
            for (int z = 0; z < v.nz; ++z)
                for (int y = 0; y < v.ny; ++y)
                    for (int x = 0; x < v.nx; ++x) {
                        const int pos[3] = {z, y, x};
                        const std::size_t i = v.index(z, y, x);
                        for (int a = 0; a < dims; ++a) {
                            const int axis = 3 - dims + a;
                            const T c = static_cast<T>(pos[axis]) + disp->value.data[(m * dims + a) * n + i];
                            int i0;
                            T f;
                            bool inside;
                            kern::split_coord(c, ext[axis], i0, f, inside);
                            // a coordinate exactly on a lattice point is a kink
                            const bool on_node = inside && f == T(0);
                            tr->note((static_cast<std::uint64_t>(i0) << 2) | (inside ? 1u : 0u) | (on_node ? 2u : 0u));
                        }
                    }
    }
    return make_node<T>(std::move(out), {src, disp}, [N, C, v, dims](Node<T>& self) {
        Node<T>& sn = *self.parents[0];
        Node<T>& dn = *self.parents[1];
        const std::size_t n = v.size();
        T* dsrc = sn.requires_grad ? sn.grad_data() : nullptr;
        T* ddisp = dn.requires_grad ? dn.grad_data() : nullptr;
        for (int m = 0; m < N; ++m) {
            const T* src = sn.value.data.data() + m * C * n;
            const T* u = dn.value.data.data() + m * dims * n;
            const T* uz = dims == 3 ? u : nullptr;
            const T* uy = u + (dims == 3 ? n : 0);
            const T* ux = uy + n;
            const T* g = self.grad.data() + m * C * n;
            for (int z = 0; z < v.nz; ++z)
                for (int y = 0; y < v.ny; ++y)
                    for (int x = 0; x < v.nx; ++x) {
                        const std::size_t i = v.index(z, y, x);
                        const T cz = static_cast<T>(z) + (uz ? uz[i] : T(0));
                        const T cy = static_cast<T>(y) + uy[i];
                        const T cx = static_cast<T>(x) + ux[i];
                        T gz = 0, gy = 0, gx = 0;
                        for (int c = 0; c < C; ++c) {
                            const T gc = g[c * n + i];
                            if (gc == T(0)) continue;
                            if (ddisp) {
                                T dz, dy, dx;
                                kern::sample(src + c * n, v, dims, cz, cy, cx, &dz, &dy, &dx);
                                gz += gc * dz;
                                gy += gc * dy;
                                gx += gc * dx;
                            }
                            if (dsrc) kern::scatter(dsrc + (m * C + c) * n, v, dims, cz, cy, cx, gc);
                        }
                        if (ddisp) {
                            T* d = ddisp + m * dims * n;
                            if (dims == 3) {
                                d[i] += gz;
                                d[n + i] += gy;
                                d[2 * n + i] += gx;
                            } else {
                                d[i] += gy;
                                d[n + i] += gx;
                            }
                        }
                    }
        }
    });
}

template <class T>
Var<T> integrate(const Var<T>& velocity, int steps, int dims) {
    require(steps >= 1, "integrate: steps must be >= 1");
    Var<T> u = scale(velocity, static_cast<T>(std::ldexp(1.0, -steps)));
    for (int s = 0; s < steps; ++s) u = add(u, grid_sample(u, u, dims));
    return u;
}

template <class T>
Var<T> renormalize_channels(const Var<T>& x, T floor) {
    const Shape s = x->value.shape;
    const int N = s[0], C = s[1];
    const std::size_t S = x->value.spatial();
    Tensor<T> out(s);
    std::vector<T> sums(static_cast<std::size_t>(N) * S, T(0));
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (std::size_t i = 0; i < S; ++i) sums[n * S + i] += x->value.data[(n * C + c) * S + i];
    if (auto* tr = active_trace())
        for (std::size_t i = 0; i < sums.size(); ++i) tr->note(sums[i] < floor ? i : ~i);
    for (auto& v : sums) v = std::max(v, floor);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (std::size_t i = 0; i < S; ++i)
                out.data[(n * C + c) * S + i] = x->value.data[(n * C + c) * S + i] / sums[n * S + i];
    return make_node<T>(std::move(out), {x}, [N, C, S, floor](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        T* d = xn.grad_data();
        const T* xv = xn.value.data.data();
        for (int n = 0; n < N; ++n)
            for (std::size_t i = 0; i < S; ++i) {
                T raw = 0, gx = 0;
                for (int c = 0; c < C; ++c) {
                    raw += xv[(n * C + c) * S + i];
                    gx += self.grad[(n * C + c) * S + i] * xv[(n * C + c) * S + i];
                }
                if (raw >= floor) {
                    for (int c = 0; c < C; ++c)
                        d[(n * C + c) * S + i] += self.grad[(n * C + c) * S + i] / raw - gx / (raw * raw);
                } else {
                    for (int c = 0; c < C; ++c) d[(n * C + c) * S + i] += self.grad[(n * C + c) * S + i] / floor;
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Losses

template <class T>
Var<T> lncc_loss(const Var<T>& templ, const Var<T>& warped, int window, T eps, int dims) {
    const Shape ts = templ->value.shape, ws = warped->value.shape;
    require(ts[0] == 1 && ts[1] == 1 && ws[1] == 1, "lncc_loss: expects single-channel inputs");
    require(ts[2] == ws[2] && ts[3] == ws[3] && ts[4] == ws[4], "lncc_loss: grid mismatch");
    require(window >= 1 && window % 2 == 1, "lncc_loss: window must be odd");
    const kern::Vol3 v = vol_of(ts);
    const int r = window / 2;
    require(v.ny >= window && v.nx >= window && (dims == 2 || v.nz >= window),
            "lncc_loss: grid smaller than window");
    const int N = ws[0];
    const std::size_t S = v.size();

    std::vector<T> ones(S, T(1)), count(S);
    kern::box_sum(ones.data(), v, dims, r, count.data());
    const T* I = templ->value.data.data();
    std::vector<T> II(S), SI(S), SII(S);
    for (std::size_t i = 0; i < S; ++i) II[i] = I[i] * I[i];
    kern::box_sum(I, v, dims, r, SI.data());
    kern::box_sum(II.data(), v, dims, r, SII.data());

    // Per member: cross, varI, varJ, D and the means needed in backward.
    struct Cache {
        std::vector<T> cross, varI, varJ, D, meanJ;
    };
    auto caches = std::make_shared<std::vector<Cache>>(N);
    double total = 0.0;
    std::vector<T> JJ(S), IJ(S), SJ(S), SJJ(S), SIJ(S);
    for (int n = 0; n < N; ++n) {
        const T* J = warped->value.data.data() + n * S;
        for (std::size_t i = 0; i < S; ++i) {
            JJ[i] = J[i] * J[i];
            IJ[i] = I[i] * J[i];
        }
        kern::box_sum(J, v, dims, r, SJ.data());
        kern::box_sum(JJ.data(), v, dims, r, SJJ.data());
        kern::box_sum(IJ.data(), v, dims, r, SIJ.data());
        Cache& c = (*caches)[n];
        c.cross.resize(S);
        c.varI.resize(S);
        c.varJ.resize(S);
        c.D.resize(S);
        c.meanJ.resize(S);
        double acc = 0.0;
        for (std::size_t i = 0; i < S; ++i) {
            const T cnt = count[i];
            c.meanJ[i] = SJ[i] / cnt;
            c.cross[i] = SIJ[i] - SI[i] * SJ[i] / cnt;
            c.varI[i] = std::max(T(0), SII[i] - SI[i] * SI[i] / cnt);
            c.varJ[i] = std::max(T(0), SJJ[i] - SJ[i] * SJ[i] / cnt);
            if (auto* tr = active_trace()) tr->note((c.varI[i] > T(0) ? 1u : 0u) | (c.varJ[i] > T(0) ? 2u : 0u));
            c.D[i] = c.varI[i] * c.varJ[i] + eps;
            acc += static_cast<double>(c.cross[i] * c.cross[i] / c.D[i]);
        }
        total += 1.0 - acc / static_cast<double>(S);
    }
    std::vector<T> meanI(S);
    for (std::size_t i = 0; i < S; ++i) meanI[i] = SI[i] / count[i];

    Tensor<T> out;
    out.data[0] = static_cast<T>(total / N);
    return make_node<T>(std::move(out), {templ, warped},
                        [N, S, v, dims, r, caches, meanI = std::move(meanI)](Node<T>& self) {
        Node<T>& tn = *self.parents[0];
        Node<T>& wn = *self.parents[1];
        const T g = self.grad[0] * T(-1) / (static_cast<T>(S) * static_cast<T>(N));
        const T* I = tn.value.data.data();
        std::vector<T> a(S), bI(S), bJ(S), tmp(S), Ba(S), BaJ(S), BaI(S), BbI(S), BbIm(S), BbJ(S), BbJm(S);
        T* dI = tn.requires_grad ? tn.grad_data() : nullptr;
        T* dJall = wn.requires_grad ? wn.grad_data() : nullptr;
        for (int n = 0; n < N; ++n) {
            const Cache& c = (*caches)[n];
            const T* J = wn.value.data.data() + n * S;
            for (std::size_t i = 0; i < S; ++i) {
                const T q = c.cross[i] / c.D[i];
                a[i] = g * T(2) * q;
                const T q2 = g * T(2) * q * q;
                bI[i] = q2 * c.varJ[i];
                bJ[i] = q2 * c.varI[i];
            }
            kern::box_sum(a.data(), v, dims, r, Ba.data());
            if (dI) {
                for (std::size_t i = 0; i < S; ++i) tmp[i] = a[i] * c.meanJ[i];
                kern::box_sum(tmp.data(), v, dims, r, BaJ.data());
                kern::box_sum(bI.data(), v, dims, r, BbI.data());
                for (std::size_t i = 0; i < S; ++i) tmp[i] = bI[i] * meanI[i];
                kern::box_sum(tmp.data(), v, dims, r, BbIm.data());
                for (std::size_t i = 0; i < S; ++i)
                    dI[i] += J[i] * Ba[i] - BaJ[i] - I[i] * BbI[i] + BbIm[i];
            }
            if (dJall) {
                T* dJ = dJall + n * S;
                for (std::size_t i = 0; i < S; ++i) tmp[i] = a[i] * meanI[i];
                kern::box_sum(tmp.data(), v, dims, r, BaI.data());
                kern::box_sum(bJ.data(), v, dims, r, BbJ.data());
                for (std::size_t i = 0; i < S; ++i) tmp[i] = bJ[i] * c.meanJ[i];
                kern::box_sum(tmp.data(), v, dims, r, BbJm.data());
                for (std::size_t i = 0; i < S; ++i)
                    dJ[i] += I[i] * Ba[i] - BaI[i] - J[i] * BbJ[i] + BbJm[i];
            }
        }
    });
}

template <class T>
Var<T> grad_penalty(const Var<T>& u, int dims) {
    const Shape s = u->value.shape;
    const int N = s[0], C = s[1];
    const kern::Vol3 v = vol_of(s);
    const std::size_t S = v.size();
    // axis -> (stride, count of valid forward differences per channel)
    std::vector<std::pair<std::size_t, std::size_t>> axes;
    if (dims == 3) axes.push_back({static_cast<std::size_t>(v.ny) * v.nx, static_cast<std::size_t>(v.nz - 1) * v.ny * v.nx});
    axes.push_back({static_cast<std::size_t>(v.nx), static_cast<std::size_t>(v.nz) * (v.ny - 1) * v.nx});
    axes.push_back({1, static_cast<std::size_t>(v.nz) * v.ny * (v.nx - 1)});
    const int A = static_cast<int>(axes.size());

    auto valid = [v, dims, A](std::size_t i, int a) {
        const int x = static_cast<int>(i % v.nx);
        const int y = static_cast<int>((i / v.nx) % v.ny);
        const int z = static_cast<int>(i / (static_cast<std::size_t>(v.nx) * v.ny));
        if (dims == 3 && a == 0) return z + 1 < v.nz;
        if (a == A - 2) return y + 1 < v.ny;
        return x + 1 < v.nx;
    };

    double total = 0.0;
    for (int n = 0; n < N; ++n)
        for (int a = 0; a < A; ++a) {
            double acc = 0.0;
            for (int c = 0; c < C; ++c) {
                const T* f = u->value.data.data() + (n * C + c) * S;
                for (std::size_t i = 0; i < S; ++i)
                    if (valid(i, a)) {
                        const double d = static_cast<double>(f[i + axes[a].first]) - f[i];
                        acc += d * d;
                    }
            }
            total += acc / (static_cast<double>(C) * axes[a].second * A);
        }
    Tensor<T> out;
    out.data[0] = static_cast<T>(total / N);
    return make_node<T>(std::move(out), {u}, [N, C, S, A, axes, valid](Node<T>& self) {
        Node<T>& un = *self.parents[0];
        T* d = un.grad_data();
        for (int n = 0; n < N; ++n)
            for (int a = 0; a < A; ++a) {
                const T w = self.grad[0] * T(2) / (static_cast<T>(C) * static_cast<T>(axes[a].second) * A * N);
                for (int c = 0; c < C; ++c) {
                    const T* f = un.value.data.data() + (n * C + c) * S;
                    T* df = d + (n * C + c) * S;
                    for (std::size_t i = 0; i < S; ++i)
                        if (valid(i, a)) {
                            const T diff = f[i + axes[a].first] - f[i];
                            df[i + axes[a].first] += w * diff;
                            df[i] -= w * diff;
                        }
                }
            }
    });
}

template <class T>
Var<T> soft_dice_loss(const Var<T>& templ, const Var<T>& segs, const std::vector<bool>& mask, T eps) {
    const Shape ts = templ->value.shape, ss = segs->value.shape;
    require(ts[0] == 1 && ts[1] == ss[1] && ts[2] == ss[2] && ts[3] == ss[3] && ts[4] == ss[4],
            "soft_dice_loss: class count or grid mismatch");
    require(ss[1] >= 2, "soft_dice_loss: needs at least one foreground class");
    const int N = ss[0], K = ss[1];
    require(static_cast<int>(mask.size()) == N, "soft_dice_loss: mask length mismatch");
    const std::size_t S = templ->value.spatial();
    int members = 0;
    for (bool b : mask) members += b ? 1 : 0;

    struct Terms {
        std::vector<T> num, den;
    };
    auto terms = std::make_shared<std::vector<Terms>>(N);
    const T* P = templ->value.data.data();
    double total = 0.0;
    for (int n = 0; n < N; ++n) {
        if (!mask[n]) continue;
        Terms& t = (*terms)[n];
        t.num.assign(K, T(0));
        t.den.assign(K, T(0));
        const T* Q = segs->value.data.data() + n * K * S;
        double dice = 0.0;
        for (int k = 1; k < K; ++k) {
            double pq = 0, pp = 0, qq = 0;
            for (std::size_t i = 0; i < S; ++i) {
                const double p = P[k * S + i], q = Q[k * S + i];
                pq += p * q;
                pp += p * p;
                qq += q * q;
            }
            t.num[k] = static_cast<T>(2.0 * pq) + eps;
            t.den[k] = static_cast<T>(pp + qq) + eps;
            dice += static_cast<double>(t.num[k] / t.den[k]);
        }
        total += 1.0 - dice / (K - 1);
    }
    Tensor<T> out;
    out.data[0] = members ? static_cast<T>(total / members) : T(0);
    return make_node<T>(std::move(out), {templ, segs}, [N, K, S, members, mask, terms](Node<T>& self) {
        if (!members) return;
        Node<T>& tn = *self.parents[0];
        Node<T>& sn = *self.parents[1];
        const T g = self.grad[0] * T(-1) / (static_cast<T>(K - 1) * members);
        const T* P = tn.value.data.data();
        T* dP = tn.requires_grad ? tn.grad_data() : nullptr;
        T* dQall = sn.requires_grad ? sn.grad_data() : nullptr;
        for (int n = 0; n < N; ++n) {
            if (!mask[n]) continue;
            const Terms& t = (*terms)[n];
            const T* Q = sn.value.data.data() + n * K * S;
            for (int k = 1; k < K; ++k) {
                const T inv = T(1) / t.den[k];
                const T r = t.num[k] * inv * inv;
                for (std::size_t i = 0; i < S; ++i) {
                    const T p = P[k * S + i], q = Q[k * S + i];
                    if (dP) dP[k * S + i] += g * (T(2) * q * inv - r * T(2) * p);
                    if (dQall) dQall[(n * K + k) * S + i] += g * (T(2) * p * inv - r * T(2) * q);
                }
            }
        }
    });
}

template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
    require(terms.size() == weights.size(), "weighted_sum: size mismatch");
    Tensor<T> out;
    T acc = 0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        require(terms[i]->value.size() == 1, "weighted_sum: terms must be scalars");
        acc += weights[i] * terms[i]->value.data[0];
    }
    out.data[0] = acc;
    return make_node<T>(std::move(out), terms, [weights](Node<T>& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i)
            if (self.parents[i]->requires_grad) self.parents[i]->grad_data()[0] += weights[i] * self.grad[0];
    });
}

#define MM_AD_INSTANTIATE(T)                                                                          \
    template Var<T> constant<T>(Tensor<T>);                                                           \
    template Var<T> parameter<T>(Tensor<T>);                                                          \
    template void backward<T>(const Var<T>&);                                                         \
    template Var<T> conv<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                   \
    template Var<T> leaky_relu<T>(const Var<T>&, T);                                                  \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                             \
    template Var<T> scale<T>(const Var<T>&, T);                                                       \
    template Var<T> group_concat<T>(const Var<T>&, Statistic);                                        \
    template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                                 \
    template Var<T> upsample2<T>(const Var<T>&, int);                                                 \
    template Var<T> center_group<T>(const Var<T>&);                                                   \
    template Var<T> group_mean<T>(const Var<T>&);                                                     \
    template Var<T> grid_sample<T>(const Var<T>&, const Var<T>&, int);                                \
    template Var<T> integrate<T>(const Var<T>&, int, int);                                            \
    template Var<T> renormalize_channels<T>(const Var<T>&, T);                                        \
    template Var<T> lncc_loss<T>(const Var<T>&, const Var<T>&, int, T, int);                          \
    template Var<T> grad_penalty<T>(const Var<T>&, int);                                              \
    template Var<T> soft_dice_loss<T>(const Var<T>&, const Var<T>&, const std::vector<bool>&, T);     \
    template Var<T> weighted_sum<T>(const std::vector<Var<T>>&, const std::vector<T>&);

MM_AD_INSTANTIATE(float)
MM_AD_INSTANTIATE(double)

} // namespace mm::ad
