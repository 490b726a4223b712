#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <cblas.h>

#include <json.hpp>

#include "dsodetect/common.hpp"
#include "dsodetect/image.hpp"

extern "C" void openblas_set_num_threads(int);

namespace dso {

// ---------------------------------------------------------------------------
// Architecture descriptor
// ---------------------------------------------------------------------------

struct LayerSpec {
    std::string type;  // conv | bn | relu | avgpool | resblock | gap | dense
    int in = 0;
    int out = 0;
    int kernel = 0;
    int stride = 1;
    int pad = 0;
};

struct ArchDescriptor {
    int in_c = 3;
    int in_h = 224;
    int in_w = 224;
    std::vector<LayerSpec> layers;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["input"] = {in_c, in_h, in_w};
        nlohmann::json ls = nlohmann::json::array();
        for (const auto& l : layers) {
            nlohmann::json jl;
            jl["type"] = l.type;
            if (l.in) jl["in"] = l.in;
            if (l.out) jl["out"] = l.out;
            if (l.kernel) jl["kernel"] = l.kernel;
            if (l.stride != 1) jl["stride"] = l.stride;
            if (l.pad) jl["pad"] = l.pad;
            ls.push_back(std::move(jl));
        }
        j["layers"] = std::move(ls);
        return j;
    }

    static ArchDescriptor from_json(const nlohmann::json& j) {
        ArchDescriptor a;
        const auto& in = j.at("input");
        a.in_c = in.at(0).get<int>();
        a.in_h = in.at(1).get<int>();
        a.in_w = in.at(2).get<int>();
        for (const auto& jl : j.at("layers")) {
            LayerSpec l;
            l.type = jl.at("type").get<std::string>();
            l.in = jl.value("in", 0);
            l.out = jl.value("out", 0);
            l.kernel = jl.value("kernel", 0);
            l.stride = jl.value("stride", 1);
            l.pad = jl.value("pad", 0);
            a.layers.push_back(std::move(l));
        }
        return a;
    }
};

// Desk-scale default: three residual blocks (16/32/64), global average
// pooling and a single-logit head, sized to train in minutes on a CPU.
inline ArchDescriptor desk_arch(int in_h = 224, int in_w = 224) {
    ArchDescriptor a;
    a.in_c = 3;
    a.in_h = in_h;
    a.in_w = in_w;
    a.layers = {
        {"avgpool", 0, 0, 2, 1, 0},
        {"conv", 3, 16, 3, 2, 1},
        {"bn", 16, 0, 0, 1, 0},
        {"relu", 0, 0, 0, 1, 0},
        {"resblock", 16, 16, 3, 1, 1},
        {"resblock", 16, 32, 3, 2, 1},
        {"resblock", 32, 64, 3, 2, 1},
        {"gap", 0, 0, 0, 1, 0},
        {"dense", 64, 1, 0, 1, 0},
    };
    return a;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ParamTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> values;
    bool trainable = true;  // false for BN running statistics

    std::size_t count() const { return values.size(); }
};

struct ModelParams {
    ArchDescriptor arch;
    std::vector<ParamTensor> tensors;

    long long param_count() const {
        long long acc = 0;
        for (const auto& t : tensors)
            if (t.trainable) acc += static_cast<long long>(t.count());
        return acc;
    }

    const ParamTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

enum class Target { kPresent, kAbsent };

// ---------------------------------------------------------------------------
// Execution plan (descriptor expanded to primitive nodes)
// ---------------------------------------------------------------------------

namespace nndetail {

struct Shape {
    int c = 0, h = 0, w = 0;
    std::size_t count() const { return static_cast<std::size_t>(c) * h * w; }
};

struct Node {
    enum Kind { kConv, kBn, kRelu, kAvgPool, kGap, kDense, kAdd } kind;
    int in0 = -1, in1 = -1, out = -1;  // activation buffer ids
    // param tensor indices
    int w = -1, b = -1, gamma = -1, beta = -1, rmean = -1, rvar = -1;
    int kernel = 0, stride = 1, pad = 0, cin = 0, cout = 0;
    int stash = -1;  // bn: normalized activations, for the train backward
};

struct Plan {
    std::vector<Node> nodes;
    std::vector<Shape> buffers;  // buffer 0 = network input
    std::vector<Shape> stashes;
    int out_buffer = -1;
};

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

// Expands the descriptor into primitive nodes, allocating parameter
// tensors along the way (when params is empty it is filled with
// shape-only tensors; otherwise shapes are validated against it).
inline Plan build_plan(const ArchDescriptor& arch, std::vector<ParamTensor>& params) {
    const bool create = params.empty();
    std::size_t cursor = 0;
    auto claim = [&](const std::string& name, std::vector<int> shape, bool trainable) {
        std::size_t want = 1;
        for (int d : shape) want *= static_cast<std::size_t>(d);
        if (create) {
            ParamTensor t;
            t.name = name;
            t.shape = std::move(shape);
            t.values.assign(want, 0.0f);
            t.trainable = trainable;
            params.push_back(std::move(t));
            return static_cast<int>(params.size() - 1);
        }
        if (cursor >= params.size() || params[cursor].count() != want)
            throw ConfigError("model parameters do not match architecture at tensor '" + name + "'");
        return static_cast<int>(cursor++);
    };

    Plan plan;
    plan.buffers.push_back({arch.in_c, arch.in_h, arch.in_w});
    int cur = 0;
    int layer_idx = 0;

    auto add_buffer = [&](Shape s) {
        plan.buffers.push_back(s);
        return static_cast<int>(plan.buffers.size() - 1);
    };
    auto add_stash = [&](Shape s) {
        plan.stashes.push_back(s);
        return static_cast<int>(plan.stashes.size() - 1);
    };

    auto emit_conv = [&](const std::string& name, int bin, int cin, int cout, int k, int stride,
                         int pad) {
        const Shape si = plan.buffers[bin];
        if (si.c != cin) throw ConfigError("conv '" + name + "': channel mismatch");
        Node n;
        n.kind = Node::kConv;
        n.in0 = bin;
        n.cin = cin;
        n.cout = cout;
        n.kernel = k;
        n.stride = stride;
        n.pad = pad;
        n.w = claim(name + ".w", {cout, cin, k, k}, true);
        n.b = claim(name + ".b", {cout}, true);
        n.out = add_buffer({cout, conv_out_dim(si.h, k, stride, pad), conv_out_dim(si.w, k, stride, pad)});
        plan.nodes.push_back(n);
        return n.out;
    };
    auto emit_bn = [&](const std::string& name, int bin) {
        const Shape s = plan.buffers[bin];
        Node n;
        n.kind = Node::kBn;
        n.in0 = bin;
        n.cin = n.cout = s.c;
        n.gamma = claim(name + ".gamma", {s.c}, true);
        n.beta = claim(name + ".beta", {s.c}, true);
        n.rmean = claim(name + ".running_mean", {s.c}, false);
        n.rvar = claim(name + ".running_var", {s.c}, false);
        n.out = add_buffer(s);
        n.stash = add_stash(s);
        plan.nodes.push_back(n);
        return n.out;
    };
    auto emit_relu = [&](int bin) {
        Node n;
        n.kind = Node::kRelu;
        n.in0 = bin;
        n.out = add_buffer(plan.buffers[bin]);
        plan.nodes.push_back(n);
        return n.out;
    };
    auto emit_add = [&](int a, int b) {
        Node n;
        n.kind = Node::kAdd;
        n.in0 = a;
        n.in1 = b;
        n.out = add_buffer(plan.buffers[a]);
        plan.nodes.push_back(n);
        return n.out;
    };

    for (const auto& l : arch.layers) {
        const std::string id = "layer" + std::to_string(layer_idx);
        const Shape s = plan.buffers[cur];
        if (l.type == "conv") {
            cur = emit_conv(id + ".conv", cur, l.in, l.out, l.kernel, l.stride, l.pad);
        } else if (l.type == "bn") {
            cur = emit_bn(id + ".bn", cur);
        } else if (l.type == "relu") {
            cur = emit_relu(cur);
        } else if (l.type == "avgpool") {
            if (l.kernel <= 0 || s.h % l.kernel || s.w % l.kernel)
                throw ConfigError("avgpool: input not divisible by kernel");
            Node n;
            n.kind = Node::kAvgPool;
            n.in0 = cur;
            n.kernel = l.kernel;
            n.out = add_buffer({s.c, s.h / l.kernel, s.w / l.kernel});
            plan.nodes.push_back(n);
            cur = n.out;
        } else if (l.type == "resblock") {
            const int bin = cur;
            int t = emit_conv(id + ".conv1", bin, l.in, l.out, 3, l.stride, 1);
            t = emit_bn(id + ".bn1", t);
            t = emit_relu(t);
            t = emit_conv(id + ".conv2", t, l.out, l.out, 3, 1, 1);
            t = emit_bn(id + ".bn2", t);
            int sc = bin;
            if (l.in != l.out || l.stride != 1) {
                sc = emit_conv(id + ".downsample", bin, l.in, l.out, 1, l.stride, 0);
                sc = emit_bn(id + ".bn_sc", sc);
            }
            t = emit_add(t, sc);
            cur = emit_relu(t);
        } else if (l.type == "gap") {
            Node n;
            n.kind = Node::kGap;
            n.in0 = cur;
            n.out = add_buffer({s.c, 1, 1});
            plan.nodes.push_back(n);
            cur = n.out;
        } else if (l.type == "dense") {
            const int features = static_cast<int>(s.count());
            if (l.in != features)
                throw ConfigError("dense: expected " + std::to_string(features) + " inputs, spec says " +
                                  std::to_string(l.in));
            Node n;
            n.kind = Node::kDense;
            n.in0 = cur;
            n.cin = features;
            n.cout = l.out;
            n.w = claim(id + ".dense.w", {l.out, features}, true);
            n.b = claim(id + ".dense.b", {l.out}, true);
            n.out = add_buffer({l.out, 1, 1});
            plan.nodes.push_back(n);
            cur = n.out;
        } else {
            throw ConfigError("unknown layer type '" + l.type + "'");
        }
        ++layer_idx;
    }
    if (plan.buffers[cur].count() != 1)
        throw ConfigError("architecture must end in a single logit");
    if (!create && cursor != params.size())
        throw ConfigError("model has extra parameter tensors");
    plan.out_buffer = cur;
    return plan;
}

inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, a, lda, b, ldb, beta, c, ldc);
}
inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <class T>
void im2col(const T* x, int cin, int h, int w, int k, int stride, int pad, int oh, int ow, T* col) {
    for (int c = 0; c < cin; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                T* row = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) *
                                   (static_cast<std::size_t>(oh) * ow);
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < ow; ++ox) row[oy * ow + ox] = T(0);
                        continue;
                    }
                    const T* src = x + (static_cast<std::size_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        row[oy * ow + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im(const T* col, int cin, int h, int w, int k, int stride, int pad, int oh, int ow, T* x) {
    std::fill(x, x + static_cast<std::size_t>(cin) * h * w, T(0));
    for (int c = 0; c < cin; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const T* row = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) *
                                         (static_cast<std::size_t>(oh) * ow);
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = x + (static_cast<std::size_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

template <class T>
std::vector<T>& scratch() {
    thread_local std::vector<T> buf;
    return buf;
}

inline void pin_blas_threads() {
    static const bool done = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)done;
}

}  // namespace nndetail

// ---------------------------------------------------------------------------
// Network: executable instantiation of (arch, params) with forward and
// backward passes. T is float in production and double in numerical tests.
// All reductions run in a fixed order, so results are bit-reproducible for
// any jobs count.
// ---------------------------------------------------------------------------

template <class T>
class Network {
public:
    explicit Network(const ModelParams& params) : arch_(params.arch) {
        nndetail::pin_blas_threads();
        std::vector<ParamTensor> shapes = params.tensors;
        plan_ = nndetail::build_plan(arch_, shapes);
        params_.resize(params.tensors.size());
        grads_.resize(params.tensors.size());
        trainable_.resize(params.tensors.size());
        for (std::size_t i = 0; i < params.tensors.size(); ++i) {
            params_[i].assign(params.tensors[i].values.begin(), params.tensors[i].values.end());
            grads_[i].assign(params.tensors[i].count(), T(0));
            trainable_[i] = params.tensors[i].trainable;
        }
    }

    int input_c() const { return arch_.in_c; }
    int input_h() const { return arch_.in_h; }
    int input_w() const { return arch_.in_w; }
    std::size_t input_count() const { return plan_.buffers[0].count(); }

    // input: n samples, CHW, contiguous. Returns one logit per sample.
    std::vector<T> forward(const T* input, int n, bool train_mode, int jobs = 1) {
        ensure_buffers(n);
        std::copy(input, input + static_cast<std::size_t>(n) * input_count(), acts_[0].begin());
        for (const auto& node : plan_.nodes) node_forward(node, n, train_mode, jobs);
        const auto& out = acts_[plan_.out_buffer];
        return std::vector<T>(out.begin(), out.begin() + n);
    }

    // Backward from per-sample logit gradients. Accumulates parameter
    // gradients (call zero_grads() between batches) and, if requested,
    // returns input gradients (n x input_count, CHW).
    std::vector<T> backward(const std::vector<T>& dlogit, bool train_mode, bool want_input_grad,
                            int jobs = 1) {
        const int n = static_cast<int>(dlogit.size());
        for (auto& g : gacts_) std::fill(g.begin(), g.end(), T(0));
        auto& gout = gacts_[plan_.out_buffer];
        for (int i = 0; i < n; ++i) gout[i] = dlogit[i];
        for (auto it = plan_.nodes.rbegin(); it != plan_.nodes.rend(); ++it)
            node_backward(*it, n, train_mode, jobs);
        if (!want_input_grad) return {};
        const auto& gin = gacts_[0];
        return std::vector<T>(gin.begin(), gin.begin() + static_cast<std::size_t>(n) * input_count());
    }

    void zero_grads() {
        for (std::size_t i = 0; i < grads_.size(); ++i)
            if (trainable_[i]) std::fill(grads_[i].begin(), grads_[i].end(), T(0));
    }

    std::vector<std::vector<T>>& weights() { return params_; }
    const std::vector<std::vector<T>>& grads() const { return grads_; }
    bool tensor_trainable(std::size_t i) const { return trainable_[i]; }

    void export_params(ModelParams& out) const {
        for (std::size_t i = 0; i < out.tensors.size(); ++i) {
            auto& dst = out.tensors[i].values;
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<float>(params_[i][k]);
        }
    }

private:
    ArchDescriptor arch_;
    nndetail::Plan plan_;
    std::vector<std::vector<T>> params_, grads_;
    std::vector<bool> trainable_;
    std::vector<std::vector<T>> acts_, gacts_, stash_;
    std::vector<T> bn_inv_std_;  // per node*channel, train-mode cache
    int cap_n_ = 0;

    void ensure_buffers(int n) {
        if (n <= cap_n_ && !acts_.empty()) return;
        acts_.resize(plan_.buffers.size());
        gacts_.resize(plan_.buffers.size());
        for (std::size_t b = 0; b < plan_.buffers.size(); ++b) {
            acts_[b].assign(plan_.buffers[b].count() * n, T(0));
            gacts_[b].assign(plan_.buffers[b].count() * n, T(0));
        }
        stash_.resize(plan_.stashes.size());
        for (std::size_t s = 0; s < plan_.stashes.size(); ++s)
            stash_[s].assign(plan_.stashes[s].count() * n, T(0));
        std::size_t bn_channels = 0;
        for (const auto& node : plan_.nodes)
            if (node.kind == nndetail::Node::kBn) bn_channels += static_cast<std::size_t>(node.cin);
        bn_inv_std_.assign(std::max<std::size_t>(bn_channels, 1), T(0));
        cap_n_ = n;
    }

    T* act(int buf, int sample) {
        return acts_[buf].data() + plan_.buffers[buf].count() * sample;
    }
    T* gact(int buf, int sample) {
        return gacts_[buf].data() + plan_.buffers[buf].count() * sample;
    }

    std::size_t bn_cache_offset(const nndetail::Node& target) const {
        std::size_t off = 0;
        for (const auto& node : plan_.nodes) {
            if (&node == &target) break;
            if (node.kind == nndetail::Node::kBn) off += static_cast<std::size_t>(node.cin);
        }
        return off;
    }

    void node_forward(const nndetail::Node& node, int n, bool train_mode, int jobs) {
        using nndetail::Node;
        const auto& si = plan_.buffers[node.in0];
        const auto& so = plan_.buffers[node.out];
        switch (node.kind) {
            case Node::kConv: {
                const int oh = so.h, ow = so.w;
                const std::size_t col_size =
                    static_cast<std::size_t>(node.cin) * node.kernel * node.kernel * oh * ow;
                parallel_for(n, jobs, [&](std::size_t i) {
                    auto& col = nndetail::scratch<T>();
                    if (col.size() < col_size) col.resize(col_size);
                    nndetail::im2col(act(node.in0, static_cast<int>(i)), node.cin, si.h, si.w,
                                     node.kernel, node.stride, node.pad, oh, ow, col.data());
                    T* out = act(node.out, static_cast<int>(i));
                    nndetail::gemm(false, false, node.cout, oh * ow,
                                   node.cin * node.kernel * node.kernel, T(1),
                                   params_[node.w].data(), node.cin * node.kernel * node.kernel,
                                   col.data(), oh * ow, T(0), out, oh * ow);
                    const T* bias = params_[node.b].data();
                    for (int c = 0; c < node.cout; ++c) {
                        T* row = out + static_cast<std::size_t>(c) * oh * ow;
                        for (int p = 0; p < oh * ow; ++p) row[p] += bias[c];
                    }
                });
                break;
            }
            case Node::kBn: {
                const int ch = node.cin;
                const std::size_t hw = static_cast<std::size_t>(si.h) * si.w;
                const std::size_t per = plan_.buffers[node.in0].count();
                const T eps = T(1e-5);
                T* inv_std_cache = bn_inv_std_.data() + bn_cache_offset(node);
                if (train_mode) {
                    const double m_count = static_cast<double>(n) * hw;
                    parallel_for(ch, jobs, [&](std::size_t c) {
                        double mean = 0.0;
                        for (int i = 0; i < n; ++i) {
                            const T* x = acts_[node.in0].data() + per * i + hw * c;
                            for (std::size_t p = 0; p < hw; ++p) mean += static_cast<double>(x[p]);
                        }
                        mean /= m_count;
                        double var = 0.0;
                        for (int i = 0; i < n; ++i) {
                            const T* x = acts_[node.in0].data() + per * i + hw * c;
                            for (std::size_t p = 0; p < hw; ++p) {
                                const double d = static_cast<double>(x[p]) - mean;
                                var += d * d;
                            }
                        }
                        var /= m_count;
                        const T inv_std = T(1) / std::sqrt(static_cast<T>(var) + eps);
                        inv_std_cache[c] = inv_std;
                        const T g = params_[node.gamma][c], bt = params_[node.beta][c];
                        for (int i = 0; i < n; ++i) {
                            const T* x = acts_[node.in0].data() + per * i + hw * c;
                            T* y = acts_[node.out].data() + per * i + hw * c;
                            T* xh = stash_[node.stash].data() + per * i + hw * c;
                            for (std::size_t p = 0; p < hw; ++p) {
                                const T v = (x[p] - static_cast<T>(mean)) * inv_std;
                                xh[p] = v;
                                y[p] = g * v + bt;
                            }
                        }
                        // torch convention: biased var normalizes, unbiased var
                        // goes into the running estimate
                        const double unbiased =
                            m_count > 1.0 ? var * m_count / (m_count - 1.0) : var;
                        const T momentum = T(0.1);
                        params_[node.rmean][c] =
                            (T(1) - momentum) * params_[node.rmean][c] + momentum * static_cast<T>(mean);
                        params_[node.rvar][c] =
                            (T(1) - momentum) * params_[node.rvar][c] + momentum * static_cast<T>(unbiased);
                    });
                } else {
                    parallel_for(ch, jobs, [&](std::size_t c) {
                        const T inv_std = T(1) / std::sqrt(params_[node.rvar][c] + eps);
                        const T g = params_[node.gamma][c], bt = params_[node.beta][c];
                        const T mean = params_[node.rmean][c];
                        for (int i = 0; i < n; ++i) {
                            const T* x = acts_[node.in0].data() + per * i + hw * c;
                            T* y = acts_[node.out].data() + per * i + hw * c;
                            for (std::size_t p = 0; p < hw; ++p) y[p] = g * (x[p] - mean) * inv_std + bt;
                        }
                    });
                }
                break;
            }
            case Node::kRelu: {
                const std::size_t per = plan_.buffers[node.in0].count();
                parallel_for(n, jobs, [&](std::size_t i) {
                    const T* x = act(node.in0, static_cast<int>(i));
                    T* y = act(node.out, static_cast<int>(i));
                    for (std::size_t p = 0; p < per; ++p) y[p] = x[p] > T(0) ? x[p] : T(0);
                });
                break;
            }
            case Node::kAvgPool: {
                const int k = node.kernel;
                const T inv = T(1) / static_cast<T>(k * k);
                parallel_for(n, jobs, [&](std::size_t i) {
                    const T* x = act(node.in0, static_cast<int>(i));
                    T* y = act(node.out, static_cast<int>(i));
                    for (int c = 0; c < si.c; ++c) {
                        for (int oy = 0; oy < so.h; ++oy) {
                            for (int ox = 0; ox < so.w; ++ox) {
                                T acc = T(0);
                                for (int ky = 0; ky < k; ++ky)
                                    for (int kx = 0; kx < k; ++kx)
                                        acc += x[(static_cast<std::size_t>(c) * si.h + oy * k + ky) * si.w +
                                                 ox * k + kx];
                                y[(static_cast<std::size_t>(c) * so.h + oy) * so.w + ox] = acc * inv;
                            }
                        }
                    }
                });
                break;
            }
            case Node::kGap: {
                const std::size_t hw = static_cast<std::size_t>(si.h) * si.w;
                const T inv = T(1) / static_cast<T>(hw);
                parallel_for(n, jobs, [&](std::size_t i) {
                    const T* x = act(node.in0, static_cast<int>(i));
                    T* y = act(node.out, static_cast<int>(i));
                    for (int c = 0; c < si.c; ++c) {
                        T acc = T(0);
                        const T* px = x + hw * c;
                        for (std::size_t p = 0; p < hw; ++p) acc += px[p];
                        y[c] = acc * inv;
                    }
                });
                break;
            }
            case Node::kDense: {
                parallel_for(n, jobs, [&](std::size_t i) {
                    const T* x = act(node.in0, static_cast<int>(i));
                    T* y = act(node.out, static_cast<int>(i));
                    for (int o = 0; o < node.cout; ++o) {
                        const T* wrow = params_[node.w].data() + static_cast<std::size_t>(o) * node.cin;
                        T acc = params_[node.b][o];
                        for (int k = 0; k < node.cin; ++k) acc += wrow[k] * x[k];
                        y[o] = acc;
                    }
                });
                break;
            }
            case Node::kAdd: {
                const std::size_t per = plan_.buffers[node.out].count();
                parallel_for(n, jobs, [&](std::size_t i) {
                    const T* a = act(node.in0, static_cast<int>(i));
                    const T* b = act(node.in1, static_cast<int>(i));
                    T* y = act(node.out, static_cast<int>(i));
                    for (std::size_t p = 0; p < per; ++p) y[p] = a[p] + b[p];
                });
                break;
            }
        }
    }

    void node_backward(const nndetail::Node& node, int n, bool train_mode, int jobs) {
        using nndetail::Node;
        const auto& si = plan_.buffers[node.in0];
        const auto& so = plan_.buffers[node.out];
        switch (node.kind) {
            case Node::kConv: {
                const int oh = so.h, ow = so.w;
                const int kk = node.cin * node.kernel * node.kernel;
                const std::size_t wsize = params_[node.w].size();
                // per-sample weight-gradient slabs, reduced in sample order
                std::vector<T> dw_slab(static_cast<std::size_t>(n) * wsize, T(0));
                std::vector<T> db_slab(static_cast<std::size_t>(n) * node.cout, T(0));
                parallel_for(n, jobs, [&](std::size_t i) {
                    auto& buf = nndetail::scratch<T>();
                    const std::size_t col_size = static_cast<std::size_t>(kk) * oh * ow;
                    if (buf.size() < 2 * col_size) buf.resize(2 * col_size);
                    T* col = buf.data();
                    T* dcol = buf.data() + col_size;
                    const T* dy = gact(node.out, static_cast<int>(i));
                    nndetail::im2col(act(node.in0, static_cast<int>(i)), node.cin, si.h, si.w,
                                     node.kernel, node.stride, node.pad, oh, ow, col);
                    nndetail::gemm(false, true, node.cout, kk, oh * ow, T(1), dy, oh * ow, col,
                                   oh * ow, T(0), dw_slab.data() + i * wsize, kk);
                    T* db = db_slab.data() + i * node.cout;
                    for (int c = 0; c < node.cout; ++c) {
                        const T* row = dy + static_cast<std::size_t>(c) * oh * ow;
                        T acc = T(0);
                        for (int p = 0; p < oh * ow; ++p) acc += row[p];
                        db[c] = acc;
                    }
                    nndetail::gemm(true, false, kk, oh * ow, node.cout, T(1),
                                   params_[node.w].data(), kk, dy, oh * ow, T(0), dcol, oh * ow);
                    // col2im into a local, then accumulate (the input buffer may
                    // already hold the shortcut branch's gradient)
                    std::vector<T> dxi(si.count());
                    nndetail::col2im(dcol, node.cin, si.h, si.w, node.kernel, node.stride, node.pad,
                                     oh, ow, dxi.data());
                    T* gin = gact(node.in0, static_cast<int>(i));
                    for (std::size_t p = 0; p < dxi.size(); ++p) gin[p] += dxi[p];
                });
                for (int i = 0; i < n; ++i) {
                    const T* dw = dw_slab.data() + static_cast<std::size_t>(i) * wsize;
                    for (std::size_t p = 0; p < wsize; ++p) grads_[node.w][p] += dw[p];
                    const T* db = db_slab.data() + static_cast<std::size_t>(i) * node.cout;
                    for (int c = 0; c < node.cout; ++c) grads_[node.b][c] += db[c];
                }
                break;
            }
            case Node::kBn: {
                const int ch = node.cin;
                const std::size_t hw = static_cast<std::size_t>(si.h) * si.w;
                const std::size_t per = plan_.buffers[node.in0].count();
                const T eps = T(1e-5);
                const T* inv_std_cache = bn_inv_std_.data() + bn_cache_offset(node);
                if (train_mode) {
                    const double m_count = static_cast<double>(n) * hw;
                    parallel_for(ch, jobs, [&](std::size_t c) {
                        double sum_dy = 0.0, sum_dy_xh = 0.0;
                        for (int i = 0; i < n; ++i) {
                            const T* dy = gacts_[node.out].data() + per * i + hw * c;
                            const T* xh = stash_[node.stash].data() + per * i + hw * c;
                            for (std::size_t p = 0; p < hw; ++p) {
                                sum_dy += static_cast<double>(dy[p]);
                                sum_dy_xh += static_cast<double>(dy[p]) * static_cast<double>(xh[p]);
                            }
                        }
                        grads_[node.beta][c] += static_cast<T>(sum_dy);
                        grads_[node.gamma][c] += static_cast<T>(sum_dy_xh);
                        const T g = params_[node.gamma][c];
                        const T k1 = static_cast<T>(sum_dy / m_count);
                        const T k2 = static_cast<T>(sum_dy_xh / m_count);
                        const T gi = g * inv_std_cache[c];
                        for (int i = 0; i < n; ++i) {
                            const T* dy = gacts_[node.out].data() + per * i + hw * c;
                            const T* xh = stash_[node.stash].data() + per * i + hw * c;
                            T* dx = gacts_[node.in0].data() + per * i + hw * c;
                            for (std::size_t p = 0; p < hw; ++p)
                                dx[p] += gi * (dy[p] - k1 - xh[p] * k2);
                        }
                    });
                } else {
                    parallel_for(ch, jobs, [&](std::size_t c) {
                        const T inv_std = T(1) / std::sqrt(params_[node.rvar][c] + eps);
                        const T gi = params_[node.gamma][c] * inv_std;
                        for (int i = 0; i < n; ++i) {
                            const T* dy = gacts_[node.out].data() + per * i + hw * c;
                            T* dx = gacts_[node.in0].data() + per * i + hw * c;
                            for (std::size_t p = 0; p < hw; ++p) dx[p] += dy[p] * gi;
                        }
                    });
                }
                break;
            }
            case Node::kRelu: {
                const std::size_t per = plan_.buffers[node.in0].count();
                parallel_for(n, jobs, [&](std::size_t i) {
                    const T* y = act(node.out, static_cast<int>(i));
                    const T* dy = gact(node.out, static_cast<int>(i));
                    T* dx = gact(node.in0, static_cast<int>(i));
                    for (std::size_t p = 0; p < per; ++p)
                        if (y[p] > T(0)) dx[p] += dy[p];
                });
                break;
            }
            case Node::kAvgPool: {
                const int k = node.kernel;
                const T inv = T(1) / static_cast<T>(k * k);
                parallel_for(n, jobs, [&](std::size_t i) {
                    const T* dy = gact(node.out, static_cast<int>(i));
                    T* dx = gact(node.in0, static_cast<int>(i));
                    for (int c = 0; c < si.c; ++c) {
                        for (int oy = 0; oy < so.h; ++oy) {
                            for (int ox = 0; ox < so.w; ++ox) {
                                const T g = dy[(static_cast<std::size_t>(c) * so.h + oy) * so.w + ox] * inv;
                                for (int ky = 0; ky < k; ++ky)
                                    for (int kx = 0; kx < k; ++kx)
                                        dx[(static_cast<std::size_t>(c) * si.h + oy * k + ky) * si.w +
                                           ox * k + kx] += g;
                            }
                        }
                    }
                });
                break;
            }
            case Node::kGap: {
                const std::size_t hw = static_cast<std::size_t>(si.h) * si.w;
                const T inv = T(1) / static_cast<T>(hw);
                parallel_for(n, jobs, [&](std::size_t i) {
                    const T* dy = gact(node.out, static_cast<int>(i));
                    T* dx = gact(node.in0, static_cast<int>(i));
                    for (int c = 0; c < si.c; ++c) {
                        const T g = dy[c] * inv;
                        T* px = dx + hw * c;
                        for (std::size_t p = 0; p < hw; ++p) px[p] += g;
                    }
                });
                break;
            }
            case Node::kDense: {
                std::vector<T> dw_slab(static_cast<std::size_t>(n) * params_[node.w].size(), T(0));
                parallel_for(n, jobs, [&](std::size_t i) {
                    const T* x = act(node.in0, static_cast<int>(i));
                    const T* dy = gact(node.out, static_cast<int>(i));
                    T* dx = gact(node.in0, static_cast<int>(i));
                    T* dw = dw_slab.data() + i * params_[node.w].size();
                    for (int o = 0; o < node.cout; ++o) {
                        const T* wrow = params_[node.w].data() + static_cast<std::size_t>(o) * node.cin;
                        T* dwrow = dw + static_cast<std::size_t>(o) * node.cin;
                        for (int k = 0; k < node.cin; ++k) {
                            dwrow[k] = dy[o] * x[k];
                            dx[k] += dy[o] * wrow[k];
                        }
                    }
                });
                for (int i = 0; i < n; ++i) {
                    const T* dw = dw_slab.data() + static_cast<std::size_t>(i) * params_[node.w].size();
                    for (std::size_t p = 0; p < params_[node.w].size(); ++p) grads_[node.w][p] += dw[p];
                    const T* dy = gacts_[node.out].data() + plan_.buffers[node.out].count() * i;
                    for (int o = 0; o < node.cout; ++o) grads_[node.b][o] += dy[o];
                }
                break;
            }
            case Node::kAdd: {
                const std::size_t per = plan_.buffers[node.out].count();
                parallel_for(n, jobs, [&](std::size_t i) {
                    const T* dy = gact(node.out, static_cast<int>(i));
                    T* da = gact(node.in0, static_cast<int>(i));
                    T* db = gact(node.in1, static_cast<int>(i));
                    for (std::size_t p = 0; p < per; ++p) {
                        da[p] += dy[p];
                        db[p] += dy[p];
                    }
                });
                break;
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Parameter initialization and single-patch convenience API
// ---------------------------------------------------------------------------

// He-style initialization, seeded; BN starts at identity with zero
// running mean / unit running variance.
inline ModelParams init_params(const ArchDescriptor& arch, std::uint64_t seed) {
    ModelParams params;
    params.arch = arch;
    nndetail::build_plan(arch, params.tensors);
    Rng rng(derive_seed(seed, 777));
    for (auto& t : params.tensors) {
        const auto ends_with = [&](const char* suffix) {
            const std::string s(suffix);
            return t.name.size() >= s.size() && t.name.compare(t.name.size() - s.size(), s.size(), s) == 0;
        };
        if (ends_with(".w")) {
            std::size_t fan_in = 1;
            for (std::size_t d = 1; d < t.shape.size(); ++d) fan_in *= static_cast<std::size_t>(t.shape[d]);
            const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (auto& v : t.values) v = static_cast<float>(rng.normal(0.0, std_dev));
        } else if (ends_with(".gamma") || ends_with(".running_var")) {
            std::fill(t.values.begin(), t.values.end(), 1.0f);
        }
        // biases, beta, running_mean stay zero
    }
    return params;
}

inline std::vector<float> image_to_chw(const Image& img) {
    std::vector<float> out(static_cast<std::size_t>(img.channels) * img.height * img.width);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                out[(static_cast<std::size_t>(c) * img.height + y) * img.width + x] = img.at(y, x, c);
    return out;
}

inline void check_patch_shape(const ModelParams& params, const Image& patch) {
    if (patch.channels != params.arch.in_c || patch.height != params.arch.in_h ||
        patch.width != params.arch.in_w)
        throw DomainError("patch shape does not match model input");
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// P(dso_present) for one patch. Builds a throwaway network; hot paths
// should hold a Network and batch their calls.
inline double forward_prob(const ModelParams& params, const Image& patch) {
    check_patch_shape(params, patch);
    Network<float> net(params);
    const auto chw = image_to_chw(patch);
    const auto logit = net.forward(chw.data(), 1, false);
    return sigmoid(logit[0]);
}

// d(score for target)/d(input pixel); score is the pre-sigmoid logit for
// dso_present (negated for dso_absent). Returned as an HWC image.
inline Image input_gradient(const ModelParams& params, const Image& patch, Target target) {
    check_patch_shape(params, patch);
    Network<float> net(params);
    const auto chw = image_to_chw(patch);
    net.forward(chw.data(), 1, false);
    const float sign = target == Target::kPresent ? 1.0f : -1.0f;
    const auto gin = net.backward({sign}, false, true);
    Image grad(patch.height, patch.width, patch.channels);
    for (int c = 0; c < patch.channels; ++c)
        for (int y = 0; y < patch.height; ++y)
            for (int x = 0; x < patch.width; ++x)
                grad.at(y, x, c) =
                    gin[(static_cast<std::size_t>(c) * patch.height + y) * patch.width + x];
    return grad;
}

}  // namespace dso
