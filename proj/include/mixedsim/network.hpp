#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <variant>
#include <vector>

#include "mixedsim/crossbar.hpp"
#include "mixedsim/dataset.hpp"
#include "mixedsim/faults.hpp"
#include "mixedsim/mapping.hpp"
#include "mixedsim/models.hpp"
#include "mixedsim/noise.hpp"
#include "mixedsim/rng.hpp"

namespace mixedsim {

// ---------------------------------------------------------------------
// Layers. Feature maps are stored channel-major: [ch][h][w] per sample.
// ---------------------------------------------------------------------

struct DenseLayer {
    int in = 0, out = 0;
    std::vector<double> w;  // out x in, row-major
    std::vector<double> b;  // out
};

struct ConvLayer {
    int in_h = 0, in_w = 0, in_ch = 0, out_ch = 0, k = 5;  // same padding, stride 1
    std::vector<double> w;  // out_ch x in_ch x k x k
    std::vector<double> b;  // out_ch
};

struct BatchNormLayer {
    int features = 0;
    int spatial = 1;  // replicates per feature per sample
    std::vector<double> gamma, beta, run_mean, run_var;
    double eps = 1e-5;
    double momentum = 0.1;
};

struct ReluLayer {
    int size = 0;
};

struct MaxPoolLayer {
    int in_h = 0, in_w = 0, ch = 0;  // 2x2, stride 2
};

using Layer = std::variant<DenseLayer, ConvLayer, BatchNormLayer, ReluLayer, MaxPoolLayer>;

struct Network {
    int in_h = 16, in_w = 16, in_ch = 1;
    int classes = 10;
    std::vector<Layer> layers;
};

inline int layer_out_dim(const Layer& l, int in_dim) {
    return std::visit(
        [&](const auto& x) -> int {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, DenseLayer>) {
                if (in_dim != x.in) throw std::invalid_argument("dense input dim mismatch");
                return x.out;
            } else if constexpr (std::is_same_v<T, ConvLayer>) {
                if (in_dim != x.in_h * x.in_w * x.in_ch)
                    throw std::invalid_argument("conv input dim mismatch");
                return x.in_h * x.in_w * x.out_ch;
            } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
                if (in_dim != x.features * x.spatial)
                    throw std::invalid_argument("batch norm dim mismatch");
                return in_dim;
            } else if constexpr (std::is_same_v<T, ReluLayer>) {
                if (in_dim != x.size) throw std::invalid_argument("relu dim mismatch");
                return in_dim;
            } else {
                if (in_dim != x.in_h * x.in_w * x.ch)
                    throw std::invalid_argument("pool input dim mismatch");
                if (x.in_h % 2 != 0 || x.in_w % 2 != 0)
                    throw std::invalid_argument("pool needs even input dims");
                return (x.in_h / 2) * (x.in_w / 2) * x.ch;
            }
        },
        l);
}

inline void validate_network(const Network& net) {
    int dim = net.in_h * net.in_w * net.in_ch;
    for (const auto& l : net.layers) dim = layer_out_dim(l, dim);
    if (dim != net.classes) throw std::invalid_argument("network output dim != classes");
}

inline bool is_weight_layer(const Layer& l) {
    return std::holds_alternative<DenseLayer>(l) || std::holds_alternative<ConvLayer>(l);
}

inline std::size_t weight_layer_count(const Network& net) {
    std::size_t n = 0;
    for (const auto& l : net.layers)
        if (is_weight_layer(l)) ++n;
    return n;
}

// conv 5x5x8 -> pool -> conv 5x5x16 -> pool -> dense 64 -> dense 10,
// batch norm before every ReLU, on 16x16 single-channel inputs.
inline Network make_mini_convnet(std::uint64_t seed) {
    Network net;
    CounterRng rng(seed, rng_stream::kWeightsInit);
    std::uint64_t ctr = 0;
    auto he_fill = [&](std::vector<double>& w, int fan_in) {
        const double s = std::sqrt(2.0 / fan_in);
        for (double& v : w) v = rng.normal(ctr++, 0.0, s);
    };

    ConvLayer c1{16, 16, 1, 8, 5};
    c1.w.resize(static_cast<std::size_t>(c1.out_ch) * c1.in_ch * c1.k * c1.k);
    c1.b.assign(c1.out_ch, 0.0);
    he_fill(c1.w, c1.in_ch * c1.k * c1.k);
    net.layers.emplace_back(c1);
    net.layers.emplace_back(BatchNormLayer{8, 256, std::vector<double>(8, 1.0),
                                           std::vector<double>(8, 0.0),
                                           std::vector<double>(8, 0.0),
                                           std::vector<double>(8, 1.0)});
    net.layers.emplace_back(ReluLayer{8 * 256});
    net.layers.emplace_back(MaxPoolLayer{16, 16, 8});

    ConvLayer c2{8, 8, 8, 16, 5};
    c2.w.resize(static_cast<std::size_t>(c2.out_ch) * c2.in_ch * c2.k * c2.k);
    c2.b.assign(c2.out_ch, 0.0);
    he_fill(c2.w, c2.in_ch * c2.k * c2.k);
    net.layers.emplace_back(c2);
    net.layers.emplace_back(BatchNormLayer{16, 64, std::vector<double>(16, 1.0),
                                           std::vector<double>(16, 0.0),
                                           std::vector<double>(16, 0.0),
                                           std::vector<double>(16, 1.0)});
    net.layers.emplace_back(ReluLayer{16 * 64});
    net.layers.emplace_back(MaxPoolLayer{8, 8, 16});

    DenseLayer d1{256, 64};
    d1.w.resize(static_cast<std::size_t>(d1.out) * d1.in);
    d1.b.assign(d1.out, 0.0);
    he_fill(d1.w, d1.in);
    net.layers.emplace_back(d1);
    net.layers.emplace_back(BatchNormLayer{64, 1, std::vector<double>(64, 1.0),
                                           std::vector<double>(64, 0.0),
                                           std::vector<double>(64, 0.0),
                                           std::vector<double>(64, 1.0)});
    net.layers.emplace_back(ReluLayer{64});

    DenseLayer d2{64, 10};
    d2.w.resize(static_cast<std::size_t>(d2.out) * d2.in);
    d2.b.assign(d2.out, 0.0);
    he_fill(d2.w, d2.in);
    net.layers.emplace_back(d2);

    validate_network(net);
    return net;
}

// ---------------------------------------------------------------------
// Analog context: per weight-layer device configuration and effective
// device pairs, consumed by the imperfect forward pass.
// ---------------------------------------------------------------------

struct AnalogLayer {
    MappingConfig mapping;
    LayerNoiseConfig noise;
    DeviceModelSet models;
    double x_max = 1.0;   // calibrated software input range of this layer
    double x_clip = 1.0;  // dynamic-range clip factor (<= 1)
    double state_lo = 0.0, state_hi = 0.0;
};

struct EffectiveLayer {
    std::vector<DevicePair> pairs;  // per weight
    std::size_t uncompensatable = 0;
    std::size_t faulty_pairs = 0;
};

struct AnalogContext {
    const std::vector<AnalogLayer>* layers = nullptr;
    const std::vector<EffectiveLayer>* eff = nullptr;  // needed for nonlinearity/noise
    bool nonlinearity = false;
    std::optional<std::uint64_t> noise_seed;
    std::uint64_t sample_base = 0;
};

// ---------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------

struct LayerCache {
    std::vector<double> in;       // layer input batch (post clip for analog layers)
    std::vector<double> xhat;     // batch norm normalized values
    std::vector<double> inv_std;  // per feature
    std::vector<int> argmax;      // max pool winners
};

namespace detail {

inline void conv_forward_sample(const ConvLayer& l, const double* in, double* out) {
    const int p = l.k / 2;
    for (int oc = 0; oc < l.out_ch; ++oc) {
        for (int i = 0; i < l.in_h; ++i) {
            for (int j = 0; j < l.in_w; ++j) {
                double acc = l.b[oc];
                for (int ic = 0; ic < l.in_ch; ++ic) {
                    const double* ip = in + static_cast<std::size_t>(ic) * l.in_h * l.in_w;
                    const double* wp =
                        l.w.data() + (static_cast<std::size_t>(oc) * l.in_ch + ic) * l.k * l.k;
                    for (int u = 0; u < l.k; ++u) {
                        const int r = i + u - p;
                        if (r < 0 || r >= l.in_h) continue;
                        for (int v = 0; v < l.k; ++v) {
                            const int c = j + v - p;
                            if (c < 0 || c >= l.in_w) continue;
                            acc += wp[u * l.k + v] * ip[r * l.in_w + c];
                        }
                    }
                }
                out[(static_cast<std::size_t>(oc) * l.in_h + i) * l.in_w + j] = acc;
            }
        }
    }
}

inline void conv_backward_sample(const ConvLayer& l, const double* in, const double* dy,
                                 double* dx, double* dw, double* db) {
    const int p = l.k / 2;
    for (int oc = 0; oc < l.out_ch; ++oc) {
        for (int i = 0; i < l.in_h; ++i) {
            for (int j = 0; j < l.in_w; ++j) {
                const double g = dy[(static_cast<std::size_t>(oc) * l.in_h + i) * l.in_w + j];
                db[oc] += g;
                for (int ic = 0; ic < l.in_ch; ++ic) {
                    const double* ip = in + static_cast<std::size_t>(ic) * l.in_h * l.in_w;
                    double* dxp = dx + static_cast<std::size_t>(ic) * l.in_h * l.in_w;
                    const std::size_t wbase =
                        (static_cast<std::size_t>(oc) * l.in_ch + ic) * l.k * l.k;
                    for (int u = 0; u < l.k; ++u) {
                        const int r = i + u - p;
                        if (r < 0 || r >= l.in_h) continue;
                        for (int v = 0; v < l.k; ++v) {
                            const int c = j + v - p;
                            if (c < 0 || c >= l.in_w) continue;
                            dw[wbase + u * l.k + v] += g * ip[r * l.in_w + c];
                            dxp[r * l.in_w + c] += g * l.w[wbase + u * l.k + v];
                        }
                    }
                }
            }
        }
    }
}

// static per-product nonlinearity error, in software units
inline double nl_product_error(const AnalogLayer& al, const DevicePair& pr, double x) {
    const double x_max = al.x_max * al.x_clip;
    const double xn = std::clamp(x / x_max, 0.0, 1.0);
    if (xn == 0.0) return 0.0;
    const NonlinearityModel& m = al.models.nonlinearity;
    double dy_hw, unit;
    if (al.mapping.technology == Technology::Memristor) {
        dy_hw = nl_error(m, pr.plus, xn) - nl_error(m, pr.minus, xn);
        unit = x_max * al.mapping.w_max / al.mapping.range;
    } else {
        dy_hw = nl_error(m, pr.plus / al.noise.i_max, xn) - nl_error(m, pr.minus / al.noise.i_max, xn);
        unit = x_max * al.mapping.w_max * al.noise.i_max / al.mapping.range;
    }
    return dy_hw * unit;
}

}  // namespace detail

// Forward pass over a batch. When `train` is set, batch-norm uses batch
// statistics and updates running stats (net is mutated). Accumulation
// order is fixed (sample-major, then the loops written here), so results
// are platform-stable.
// tap_weight_layer >= 0 captures that weight layer's preactivations.
inline void forward_network(Network& net, const double* x, int n,
                            std::vector<std::vector<double>>& acts,
                            std::vector<LayerCache>* caches, bool train,
                            const AnalogContext* actx = nullptr, int tap_weight_layer = -1,
                            std::vector<double>* tap = nullptr) {
    const int in_dim = net.in_h * net.in_w * net.in_ch;
    acts.resize(net.layers.size() + 1);
    acts[0].assign(x, x + static_cast<std::size_t>(n) * in_dim);
    if (caches) caches->resize(net.layers.size());

    int wl = -1;  // weight-layer index
    int dim = in_dim;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const int out_dim = layer_out_dim(net.layers[li], dim);
        std::vector<double>& in = acts[li];
        std::vector<double>& out = acts[li + 1];
        out.assign(static_cast<std::size_t>(n) * out_dim, 0.0);

        const bool weighty = is_weight_layer(net.layers[li]);
        const AnalogLayer* al = nullptr;
        const EffectiveLayer* el = nullptr;
        if (weighty) {
            ++wl;
            if (actx && actx->layers && static_cast<std::size_t>(wl) < actx->layers->size()) {
                al = &(*actx->layers)[wl];
                if (actx->eff && static_cast<std::size_t>(wl) < actx->eff->size())
                    el = &(*actx->eff)[wl];
            }
        }
        // dynamic-range clipping saturates this layer's inputs
        if (al && al->x_clip < 1.0) {
            const double bound = al->x_max * al->x_clip;
            for (double& v : in) v = std::min(v, bound);
        }
        if (caches) (*caches)[li].in = in;

        std::visit(
            [&](auto& l) {
                using T = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<T, DenseLayer>) {
                    for (int s = 0; s < n; ++s) {
                        const double* ip = in.data() + static_cast<std::size_t>(s) * l.in;
                        double* op = out.data() + static_cast<std::size_t>(s) * l.out;
                        for (int o = 0; o < l.out; ++o) {
                            const double* wp = l.w.data() + static_cast<std::size_t>(o) * l.in;
                            double acc = l.b[o];
                            for (int i = 0; i < l.in; ++i) acc += wp[i] * ip[i];
                            op[o] = acc;
                        }
                        if (al && el && actx->nonlinearity) {
                            for (int o = 0; o < l.out; ++o) {
                                double err = 0.0;
                                for (int i = 0; i < l.in; ++i)
                                    err += detail::nl_product_error(
                                        *al, el->pairs[static_cast<std::size_t>(o) * l.in + i],
                                        ip[i]);
                                op[o] += err;
                            }
                        }
                        if (al && el && actx->noise_seed && al->noise.enabled) {
                            LayerNoiseConfig ncfg = al->noise;
                            ncfg.x_max = al->x_max * al->x_clip;
                            std::vector<double> xin(l.in);
                            for (int i = 0; i < l.in; ++i)
                                xin[i] = std::clamp(ip[i], 0.0, ncfg.x_max);
                            std::vector<DevicePair> row(l.in);
                            for (int o = 0; o < l.out; ++o) {
                                for (int i = 0; i < l.in; ++i)
                                    row[i] = el->pairs[static_cast<std::size_t>(o) * l.in + i];
                                const double var =
                                    preactivation_noise_var(ncfg, row, xin);
                                op[o] += sample_preactivation_noise(
                                    var, *actx->noise_seed, static_cast<std::uint64_t>(wl),
                                    actx->sample_base + s, static_cast<std::uint64_t>(o));
                            }
                        }
                    }
                } else if constexpr (std::is_same_v<T, ConvLayer>) {
                    const int hw = l.in_h * l.in_w;
                    const int p = l.k / 2;
                    for (int s = 0; s < n; ++s) {
                        const double* ip = in.data() + static_cast<std::size_t>(s) * dim;
                        double* op = out.data() + static_cast<std::size_t>(s) * out_dim;
                        detail::conv_forward_sample(l, ip, op);
                        if (al && el && (actx->nonlinearity || actx->noise_seed)) {
                            LayerNoiseConfig ncfg = al->noise;
                            ncfg.x_max = al->x_max * al->x_clip;
                            const int win = l.in_ch * l.k * l.k;
                            std::vector<double> xin(win);
                            std::vector<DevicePair> row(win);
                            for (int oc = 0; oc < l.out_ch; ++oc) {
                                for (int i = 0; i < l.in_h; ++i) {
                                    for (int j = 0; j < l.in_w; ++j) {
                                        int idx = 0;
                                        for (int ic = 0; ic < l.in_ch; ++ic) {
                                            for (int u = 0; u < l.k; ++u) {
                                                for (int v = 0; v < l.k; ++v, ++idx) {
                                                    const int r = i + u - p, c = j + v - p;
                                                    const bool ok = r >= 0 && r < l.in_h &&
                                                                    c >= 0 && c < l.in_w;
                                                    xin[idx] = ok ? ip[(static_cast<std::size_t>(
                                                                           ic) *
                                                                            l.in_h +
                                                                        r) *
                                                                           l.in_w +
                                                                       c]
                                                                  : 0.0;
                                                    row[idx] = el->pairs
                                                                   [((static_cast<std::size_t>(
                                                                          oc) *
                                                                          l.in_ch +
                                                                      ic) *
                                                                         l.k +
                                                                     u) *
                                                                        l.k +
                                                                    v];
                                                }
                                            }
                                        }
                                        double& o = op[(static_cast<std::size_t>(oc) * l.in_h +
                                                        i) *
                                                           l.in_w +
                                                       j];
                                        if (actx->nonlinearity) {
                                            for (int q = 0; q < win; ++q)
                                                if (xin[q] > 0.0)
                                                    o += detail::nl_product_error(*al, row[q],
                                                                                  xin[q]);
                                        }
                                        if (actx->noise_seed && al->noise.enabled) {
                                            std::vector<double> xc(win);
                                            for (int q = 0; q < win; ++q)
                                                xc[q] = std::clamp(xin[q], 0.0, ncfg.x_max);
                                            const double var =
                                                preactivation_noise_var(ncfg, row, xc);
                                            o += sample_preactivation_noise(
                                                var, *actx->noise_seed,
                                                static_cast<std::uint64_t>(wl),
                                                actx->sample_base + s,
                                                (static_cast<std::uint64_t>(oc) * l.in_h + i) *
                                                        l.in_w +
                                                    j);
                                        }
                                    }
                                }
                            }
                        }
                        (void)hw;
                    }
                } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
                    const int F = l.features, S = l.spatial;
                    LayerCache* c = caches ? &(*caches)[li] : nullptr;
                    std::vector<double> mu(F, 0.0), var(F, 0.0);
                    if (train) {
                        const double cnt = static_cast<double>(n) * S;
                        for (int s = 0; s < n; ++s)
                            for (int f = 0; f < F; ++f) {
                                const double* ip =
                                    in.data() + (static_cast<std::size_t>(s) * F + f) * S;
                                for (int t = 0; t < S; ++t) mu[f] += ip[t];
                            }
                        for (int f = 0; f < F; ++f) mu[f] /= cnt;
                        for (int s = 0; s < n; ++s)
                            for (int f = 0; f < F; ++f) {
                                const double* ip =
                                    in.data() + (static_cast<std::size_t>(s) * F + f) * S;
                                for (int t = 0; t < S; ++t) {
                                    const double d = ip[t] - mu[f];
                                    var[f] += d * d;
                                }
                            }
                        for (int f = 0; f < F; ++f) var[f] /= cnt;
                        for (int f = 0; f < F; ++f) {
                            l.run_mean[f] = (1.0 - l.momentum) * l.run_mean[f] + l.momentum * mu[f];
                            l.run_var[f] = (1.0 - l.momentum) * l.run_var[f] + l.momentum * var[f];
                        }
                    } else {
                        mu = l.run_mean;
                        var = l.run_var;
                    }
                    if (c) {
                        c->inv_std.resize(F);
                        c->xhat.resize(in.size());
                    }
                    std::vector<double> inv_std(F);
                    for (int f = 0; f < F; ++f) inv_std[f] = 1.0 / std::sqrt(var[f] + l.eps);
                    for (int s = 0; s < n; ++s) {
                        for (int f = 0; f < F; ++f) {
                            const std::size_t base = (static_cast<std::size_t>(s) * F + f) * S;
                            for (int t = 0; t < S; ++t) {
                                const double xh = (in[base + t] - mu[f]) * inv_std[f];
                                if (c) c->xhat[base + t] = xh;
                                out[base + t] = l.gamma[f] * xh + l.beta[f];
                            }
                        }
                    }
                    if (c) c->inv_std = inv_std;
                } else if constexpr (std::is_same_v<T, ReluLayer>) {
                    for (std::size_t i = 0; i < in.size(); ++i)
                        out[i] = in[i] > 0.0 ? in[i] : 0.0;
                } else {  // MaxPoolLayer
                    const int oh = l.in_h / 2, ow = l.in_w / 2;
                    LayerCache* c = caches ? &(*caches)[li] : nullptr;
                    if (c) c->argmax.assign(static_cast<std::size_t>(n) * out_dim, 0);
                    for (int s = 0; s < n; ++s) {
                        const double* ip = in.data() + static_cast<std::size_t>(s) * dim;
                        double* op = out.data() + static_cast<std::size_t>(s) * out_dim;
                        for (int ch = 0; ch < l.ch; ++ch) {
                            for (int i = 0; i < oh; ++i) {
                                for (int j = 0; j < ow; ++j) {
                                    int best = -1;
                                    double bv = -1e300;
                                    for (int u = 0; u < 2; ++u) {
                                        for (int v = 0; v < 2; ++v) {
                                            const int idx = (ch * l.in_h + 2 * i + u) * l.in_w +
                                                            2 * j + v;
                                            if (ip[idx] > bv) {
                                                bv = ip[idx];
                                                best = idx;
                                            }
                                        }
                                    }
                                    const int oidx = (ch * oh + i) * ow + j;
                                    op[oidx] = bv;
                                    if (c)
                                        c->argmax[static_cast<std::size_t>(s) * out_dim + oidx] =
                                            best;
                                }
                            }
                        }
                    }
                }
            },
            net.layers[li]);

        if (weighty && wl == tap_weight_layer && tap)
            tap->insert(tap->end(), out.begin(), out.end());
        dim = out_dim;
    }
}

// ---------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------

struct GradBuffers {
    // aligned with layers: weight layers use [wslot], BN uses [gslot]
    std::vector<std::vector<double>> dw, db, dgamma, dbeta;
};

inline GradBuffers make_grad_buffers(const Network& net) {
    GradBuffers g;
    for (const auto& l : net.layers) {
        if (const auto* d = std::get_if<DenseLayer>(&l)) {
            g.dw.emplace_back(d->w.size(), 0.0);
            g.db.emplace_back(d->b.size(), 0.0);
        } else if (const auto* c = std::get_if<ConvLayer>(&l)) {
            g.dw.emplace_back(c->w.size(), 0.0);
            g.db.emplace_back(c->b.size(), 0.0);
        } else if (const auto* bn = std::get_if<BatchNormLayer>(&l)) {
            g.dgamma.emplace_back(bn->gamma.size(), 0.0);
            g.dbeta.emplace_back(bn->beta.size(), 0.0);
        }
    }
    return g;
}

inline void zero_grads(GradBuffers& g) {
    for (auto& v : g.dw) std::fill(v.begin(), v.end(), 0.0);
    for (auto& v : g.db) std::fill(v.begin(), v.end(), 0.0);
    for (auto& v : g.dgamma) std::fill(v.begin(), v.end(), 0.0);
    for (auto& v : g.dbeta) std::fill(v.begin(), v.end(), 0.0);
}

// Softmax cross-entropy over the last activation; returns mean loss and
// writes d(loss)/d(logits) into dlogits.
inline double softmax_xent(const std::vector<double>& logits, const int* labels, int n,
                           int classes, std::vector<double>& dlogits) {
    dlogits.assign(logits.size(), 0.0);
    double loss = 0.0;
    for (int s = 0; s < n; ++s) {
        const double* lp = logits.data() + static_cast<std::size_t>(s) * classes;
        double* dp = dlogits.data() + static_cast<std::size_t>(s) * classes;
        double mx = lp[0];
        for (int c = 1; c < classes; ++c) mx = std::max(mx, lp[c]);
        double z = 0.0;
        for (int c = 0; c < classes; ++c) z += std::exp(lp[c] - mx);
        const double logz = std::log(z) + mx;
        loss += logz - lp[labels[s]];
        for (int c = 0; c < classes; ++c) dp[c] = std::exp(lp[c] - logz) / n;
        dp[labels[s]] -= 1.0 / n;
    }
    return loss / n;
}

inline void backward_network(const Network& net, const std::vector<std::vector<double>>& acts,
                             const std::vector<LayerCache>& caches,
                             const std::vector<double>& dout_last, int n, GradBuffers& grads) {
    std::vector<double> dout = dout_last;
    int wslot = static_cast<int>(grads.dw.size());
    int gslot = static_cast<int>(grads.dgamma.size());
    for (int li = static_cast<int>(net.layers.size()) - 1; li >= 0; --li) {
        const std::vector<double>& in = caches[li].in;
        std::vector<double> din(in.size(), 0.0);
        std::visit(
            [&](const auto& l) {
                using T = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<T, DenseLayer>) {
                    --wslot;
                    auto& dw = grads.dw[wslot];
                    auto& db = grads.db[wslot];
                    for (int s = 0; s < n; ++s) {
                        const double* ip = in.data() + static_cast<std::size_t>(s) * l.in;
                        const double* gp = dout.data() + static_cast<std::size_t>(s) * l.out;
                        double* dip = din.data() + static_cast<std::size_t>(s) * l.in;
                        for (int o = 0; o < l.out; ++o) {
                            const double g = gp[o];
                            db[o] += g;
                            const double* wp = l.w.data() + static_cast<std::size_t>(o) * l.in;
                            double* dwp = dw.data() + static_cast<std::size_t>(o) * l.in;
                            for (int i = 0; i < l.in; ++i) {
                                dwp[i] += g * ip[i];
                                dip[i] += g * wp[i];
                            }
                        }
                    }
                } else if constexpr (std::is_same_v<T, ConvLayer>) {
                    --wslot;
                    auto& dw = grads.dw[wslot];
                    auto& db = grads.db[wslot];
                    const int idim = l.in_h * l.in_w * l.in_ch;
                    const int odim = l.in_h * l.in_w * l.out_ch;
                    for (int s = 0; s < n; ++s)
                        detail::conv_backward_sample(
                            l, in.data() + static_cast<std::size_t>(s) * idim,
                            dout.data() + static_cast<std::size_t>(s) * odim,
                            din.data() + static_cast<std::size_t>(s) * idim, dw.data(), db.data());
                } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
                    --gslot;
                    auto& dg = grads.dgamma[gslot];
                    auto& dbta = grads.dbeta[gslot];
                    const int F = l.features, S = l.spatial;
                    const auto& c = caches[li];
                    const double cnt = static_cast<double>(n) * S;
                    std::vector<double> sum_dy(F, 0.0), sum_dyx(F, 0.0);
                    for (int s = 0; s < n; ++s) {
                        for (int f = 0; f < F; ++f) {
                            const std::size_t base = (static_cast<std::size_t>(s) * F + f) * S;
                            for (int t = 0; t < S; ++t) {
                                sum_dy[f] += dout[base + t];
                                sum_dyx[f] += dout[base + t] * c.xhat[base + t];
                            }
                        }
                    }
                    for (int f = 0; f < F; ++f) {
                        dg[f] += sum_dyx[f];
                        dbta[f] += sum_dy[f];
                    }
                    for (int s = 0; s < n; ++s) {
                        for (int f = 0; f < F; ++f) {
                            const std::size_t base = (static_cast<std::size_t>(s) * F + f) * S;
                            const double k = l.gamma[f] * c.inv_std[f];
                            for (int t = 0; t < S; ++t) {
                                din[base + t] =
                                    k * (dout[base + t] - sum_dy[f] / cnt -
                                         c.xhat[base + t] * sum_dyx[f] / cnt);
                            }
                        }
                    }
                } else if constexpr (std::is_same_v<T, ReluLayer>) {
                    for (std::size_t i = 0; i < in.size(); ++i)
                        din[i] = in[i] > 0.0 ? dout[i] : 0.0;
                } else {  // MaxPoolLayer
                    const int oh = l.in_h / 2, ow = l.in_w / 2;
                    const int odim = oh * ow * l.ch;
                    const int idim = l.in_h * l.in_w * l.ch;
                    const auto& am = caches[li].argmax;
                    for (int s = 0; s < n; ++s) {
                        for (int o = 0; o < odim; ++o) {
                            din[static_cast<std::size_t>(s) * idim +
                                am[static_cast<std::size_t>(s) * odim + o]] +=
                                dout[static_cast<std::size_t>(s) * odim + o];
                        }
                    }
                }
            },
            net.layers[li]);
        dout = std::move(din);
    }
}

// ---------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------

struct TrainConfig {
    bool use_adam = true;
    double lr = 1e-3;
    double momentum = 0.9;
    double weight_decay = 0.0;
    double lr_decay = 1.0;  // per-epoch multiplier
    int epochs = 30;
    int batch_size = 32;
    std::uint64_t seed = 1;
    double disturb_sigma = 0.0;  // relative weight disturbance before each update
    bool bn_only = false;        // update only batch-norm parameters
    // per-batch weight perturbation (temperature sweep etc.); mutates the
    // effective copy used for forward/backward while gradients land on the
    // master weights (straight-through)
    std::function<void(int, const Network&, Network&)> perturb_hook;
    const std::vector<AnalogLayer>* analog = nullptr;  // for noise-in-forward
    std::optional<std::uint64_t> noise_seed;
};

struct TrainHistory {
    std::vector<double> loss;     // per epoch
    std::vector<double> val_acc;  // per epoch
    bool diverged = false;
    int batches_run = 0;
};

inline double accuracy(Network net, const Dataset& ds, const AnalogContext* actx = nullptr) {
    validate_network(net);
    const int bs = 64;
    std::size_t correct = 0;
    std::vector<std::vector<double>> acts;
    for (std::size_t off = 0; off < ds.size(); off += bs) {
        const int n = static_cast<int>(std::min<std::size_t>(bs, ds.size() - off));
        AnalogContext local;
        if (actx) {
            local = *actx;
            local.sample_base = off;
        }
        forward_network(net, ds.sample(off), n, acts, nullptr, false, actx ? &local : nullptr);
        const std::vector<double>& logits = acts.back();
        for (int s = 0; s < n; ++s) {
            const double* lp = logits.data() + static_cast<std::size_t>(s) * ds.classes;
            int arg = 0;
            for (int c = 1; c < ds.classes; ++c)
                if (lp[c] > lp[arg]) arg = c;
            if (arg == ds.labels[off + s]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace detail {

struct Optimizer {
    const TrainConfig* cfg;
    int step = 0;
    std::vector<std::vector<double>> m1w, m2w, m1b, m2b, m1g, m2g, m1bt, m2bt;

    void init(const GradBuffers& g) {
        auto zl = [](const std::vector<std::vector<double>>& src) {
            std::vector<std::vector<double>> out;
            for (const auto& v : src) out.emplace_back(v.size(), 0.0);
            return out;
        };
        m1w = zl(g.dw);
        m2w = zl(g.dw);
        m1b = zl(g.db);
        m2b = zl(g.db);
        m1g = zl(g.dgamma);
        m2g = zl(g.dgamma);
        m1bt = zl(g.dbeta);
        m2bt = zl(g.dbeta);
    }

    void update_vec(std::vector<double>& p, const std::vector<double>& grad,
                    std::vector<double>& m1, std::vector<double>& m2, double lr, double wd) {
        if (cfg->use_adam) {
            const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
            const double bc1 = 1.0 - std::pow(b1, step);
            const double bc2 = 1.0 - std::pow(b2, step);
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double g = grad[i] + wd * p[i];
                m1[i] = b1 * m1[i] + (1.0 - b1) * g;
                m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
                p[i] -= lr * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + eps);
            }
        } else {
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double g = grad[i] + wd * p[i];
                m1[i] = cfg->momentum * m1[i] + g;
                p[i] -= lr * m1[i];
            }
        }
    }

    void apply(Network& net, const GradBuffers& g, double lr) {
        ++step;
        int ws = 0, gs = 0;
        for (auto& l : net.layers) {
            if (auto* d = std::get_if<DenseLayer>(&l)) {
                if (!cfg->bn_only) {
                    update_vec(d->w, g.dw[ws], m1w[ws], m2w[ws], lr, cfg->weight_decay);
                    update_vec(d->b, g.db[ws], m1b[ws], m2b[ws], lr, 0.0);
                }
                ++ws;
            } else if (auto* cv = std::get_if<ConvLayer>(&l)) {
                if (!cfg->bn_only) {
                    update_vec(cv->w, g.dw[ws], m1w[ws], m2w[ws], lr, cfg->weight_decay);
                    update_vec(cv->b, g.db[ws], m1b[ws], m2b[ws], lr, 0.0);
                }
                ++ws;
            } else if (auto* bn = std::get_if<BatchNormLayer>(&l)) {
                update_vec(bn->gamma, g.dgamma[gs], m1g[gs], m2g[gs], lr, 0.0);
                update_vec(bn->beta, g.dbeta[gs], m1bt[gs], m2bt[gs], lr, 0.0);
                ++gs;
            }
        }
    }
};

inline void disturb_weights(Network& net, double sigma, std::uint64_t seed, int batch) {
    CounterRng rng(seed, rng_stream::kDisturb);
    std::uint64_t ctr = static_cast<std::uint64_t>(batch) << 24;
    for (auto& l : net.layers) {
        std::vector<double>* w = nullptr;
        if (auto* d = std::get_if<DenseLayer>(&l)) w = &d->w;
        if (auto* c = std::get_if<ConvLayer>(&l)) w = &c->w;
        if (!w) continue;
        for (double& v : *w) v *= 1.0 + rng.normal(ctr++, 0.0, sigma);
    }
}

}  // namespace detail

inline TrainHistory train(Network& net, const Dataset& train_ds, const Dataset& val_ds,
                          const TrainConfig& cfg) {
    validate_network(net);
    TrainHistory hist;
    GradBuffers grads = make_grad_buffers(net);
    detail::Optimizer opt{&cfg};
    opt.init(grads);
    CounterRng shuffle_rng(cfg.seed, rng_stream::kShuffle);

    std::vector<std::size_t> order(train_ds.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t dim = train_ds.sample_dim();
    std::vector<double> bx;
    std::vector<int> by;
    std::vector<std::vector<double>> acts;
    std::vector<LayerCache> caches;
    std::vector<double> dlogits;
    double lr = cfg.lr;
    int global_batch = 0;

    const bool needs_copy = static_cast<bool>(cfg.perturb_hook) || cfg.disturb_sigma > 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // deterministic Fisher-Yates keyed by (seed, epoch, i)
        for (std::size_t i = order.size() - 1; i > 0; --i) {
            const std::uint64_t k =
                static_cast<std::uint64_t>(epoch) * order.size() + i;
            const std::size_t j = static_cast<std::size_t>(shuffle_rng.uniform(k) * (i + 1));
            std::swap(order[i], order[std::min(j, i)]);
        }
        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
            const int n =
                static_cast<int>(std::min<std::size_t>(cfg.batch_size, order.size() - off));
            bx.resize(static_cast<std::size_t>(n) * dim);
            by.resize(n);
            for (int s = 0; s < n; ++s) {
                std::copy_n(train_ds.sample(order[off + s]), dim, bx.begin() + s * dim);
                by[s] = train_ds.labels[order[off + s]];
            }

            Network effective = net;  // cheap relative to the epoch cost
            if (cfg.perturb_hook) cfg.perturb_hook(global_batch, net, effective);
            if (cfg.disturb_sigma > 0.0)
                detail::disturb_weights(effective, cfg.disturb_sigma, cfg.seed, global_batch);
            Network& fwd_net = needs_copy ? effective : net;

            AnalogContext actx;
            const bool use_noise = cfg.analog && cfg.noise_seed.has_value();
            std::vector<EffectiveLayer> eff;
            if (use_noise) {
                eff = std::vector<EffectiveLayer>();  // pairs built below
                // map master weights into pairs for the noise formulas
                int wl = 0;
                for (const auto& l : fwd_net.layers) {
                    const std::vector<double>* w = nullptr;
                    if (const auto* d = std::get_if<DenseLayer>(&l)) w = &d->w;
                    if (const auto* c = std::get_if<ConvLayer>(&l)) w = &c->w;
                    if (!w) continue;
                    EffectiveLayer e;
                    const MappingConfig& mc = (*cfg.analog)[wl].mapping;
                    e.pairs.resize(w->size());
                    for (std::size_t i = 0; i < w->size(); ++i)
                        e.pairs[i] = map_weight(
                            mc, std::clamp((*w)[i], -mc.w_max, mc.w_max));
                    eff.push_back(std::move(e));
                    ++wl;
                }
                actx.layers = cfg.analog;
                actx.eff = &eff;
                actx.noise_seed = cfg.noise_seed;
                actx.sample_base = static_cast<std::uint64_t>(global_batch) * cfg.batch_size;
            }

            forward_network(fwd_net, bx.data(), n, acts, &caches, true,
                            use_noise ? &actx : nullptr);
            const double loss = softmax_xent(acts.back(), by.data(), n, net.classes, dlogits);
            if (!std::isfinite(loss)) {
                hist.diverged = true;
                return hist;
            }
            epoch_loss += loss;
            ++batches;
            zero_grads(grads);
            backward_network(fwd_net, acts, caches, dlogits, n, grads);
            if (needs_copy) {
                // straight-through: copy the effective net's BN running stats
                // back so eval statistics track what training saw
                for (std::size_t li = 0; li < net.layers.size(); ++li) {
                    auto* dst = std::get_if<BatchNormLayer>(&net.layers[li]);
                    const auto* src = std::get_if<BatchNormLayer>(&effective.layers[li]);
                    if (dst && src) {
                        dst->run_mean = src->run_mean;
                        dst->run_var = src->run_var;
                    }
                }
            }
            opt.apply(net, grads, lr);
            ++global_batch;
        }
        hist.loss.push_back(epoch_loss / std::max(batches, 1));
        hist.val_acc.push_back(accuracy(net, val_ds));
        hist.batches_run = global_batch;
        lr *= cfg.lr_decay;
    }
    return hist;
}

// ---------------------------------------------------------------------
// Imperfection stack: state-level effects become effective weights.
// ---------------------------------------------------------------------

struct TuningErrorSpec {
    double sigma = 0.0;  // relative per-device error
    std::uint64_t seed = 0;
};

enum class FaultCompensation { None, Retune, RetuneColumn };

struct FaultSpec {
    double ppm = 0.0;
    double frac_high = 1.0 / 3.0, frac_low = 1.0 / 3.0, frac_random = 1.0 / 3.0;
    std::uint64_t seed = 0;
    FaultCompensation compensation = FaultCompensation::None;
};

struct ImperfectionStack {
    std::optional<double> temperature;  // deg C
    bool static_nonlinearity = false;
    std::optional<TuningErrorSpec> tuning_error;
    std::optional<FaultSpec> faults;
    std::optional<std::uint64_t> noise_seed;
};

// Calibrate per-layer mapping and signal ranges against the network and
// a calibration batch: w_max from the weights, x_max from clean forward
// activations.
inline std::vector<AnalogLayer> prepare_analog(Network& net, Technology tech, MapScheme scheme,
                                               const Dataset& calib, std::size_t calib_n = 256) {
    std::vector<AnalogLayer> out;
    const DeviceModelSet& models = default_models(tech);
    for (const auto& l : net.layers) {
        const std::vector<double>* w = nullptr;
        if (const auto* d = std::get_if<DenseLayer>(&l)) w = &d->w;
        if (const auto* c = std::get_if<ConvLayer>(&l)) w = &c->w;
        if (!w) continue;
        AnalogLayer al;
        al.mapping.technology = tech;
        al.mapping.scheme = scheme;
        if (tech == Technology::Memristor) {
            al.mapping.floor = 10.0;
            al.mapping.range = 90.0;
            al.mapping.bias = 55.0;
        } else {
            al.mapping.floor = 3.0;
            al.mapping.range = 30.0;
            al.mapping.bias = 15.0;
        }
        double wmax = 0.0;
        for (double v : *w) wmax = std::max(wmax, std::abs(v));
        al.mapping.w_max = std::max(wmax, 1e-9);
        al.noise.technology = tech;
        al.noise.scheme = scheme;
        al.noise.delta_g_max = al.mapping.range;
        al.noise.delta_i_max = al.mapping.range;
        al.noise.w_max = al.mapping.w_max;
        al.models = models;
        if (scheme == MapScheme::Map1) {
            al.state_lo = std::min(al.mapping.floor_for(0.0), al.mapping.floor_for(1.0));
            al.state_hi = std::max(al.mapping.floor_for(0.0), al.mapping.floor_for(1.0)) +
                          al.mapping.range;
        } else {
            al.state_lo = std::min(al.mapping.bias_for(0.0), al.mapping.bias_for(1.0)) -
                          al.mapping.range / 2.0;
            al.state_hi = std::max(al.mapping.bias_for(0.0), al.mapping.bias_for(1.0)) +
                          al.mapping.range / 2.0;
        }
        out.push_back(std::move(al));
    }
    // calibrate x_max per weight layer from clean activations
    const std::size_t n = std::min(calib_n, calib.size());
    std::vector<std::vector<double>> acts;
    forward_network(net, calib.sample(0), static_cast<int>(n), acts, nullptr, false);
    int wl = 0, dim_in = net.in_h * net.in_w * net.in_ch;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        if (is_weight_layer(net.layers[li])) {
            double mx = 0.0;
            for (double v : acts[li]) mx = std::max(mx, v);
            out[wl].x_max = std::max(mx, 1e-9);
            out[wl].noise.x_max = out[wl].x_max;
            ++wl;
        }
        dim_in = layer_out_dim(net.layers[li], dim_in);
    }
    return out;
}

// Applies the state-level effects (tuning error, faults with optional
// compensation, temperature) to a copy of the network: weights pass
// through map -> perturb -> unmap, faults override device states, and
// the average-error column folds into the layer bias.
struct EffectiveBuild {
    Network net;
    std::vector<EffectiveLayer> layers;
};

inline EffectiveBuild build_effective(const Network& master,
                                      const std::vector<AnalogLayer>& analog,
                                      const ImperfectionStack& stack, const Dataset& calib,
                                      std::size_t calib_n = 256) {
    EffectiveBuild out;
    out.net = master;
    out.layers.resize(analog.size());

    // with no active state-level effect the weights must pass through
    // bit-exactly (no map/unmap round-trip)
    const bool state_identity =
        !stack.tuning_error && !(stack.faults && stack.faults->ppm > 0.0) &&
        (!stack.temperature ||
         (!analog.empty() && *stack.temperature == analog[0].models.temperature.t0));

    // tap the inputs of every weight layer on the calibration batch for
    // the compensation column (clean network inputs)
    std::vector<std::vector<double>> calib_inputs;
    const bool want_column = stack.faults &&
                             stack.faults->compensation == FaultCompensation::RetuneColumn;
    std::size_t ncal = std::min(calib_n, calib.size());
    if (want_column) {
        std::vector<std::vector<double>> acts;
        Network tmp = master;
        forward_network(tmp, calib.sample(0), static_cast<int>(ncal), acts, nullptr, false);
        int wl = 0;
        for (std::size_t li = 0; li < master.layers.size(); ++li) {
            if (is_weight_layer(master.layers[li])) {
                calib_inputs.push_back(acts[li]);
                ++wl;
            }
        }
    }

    int wl = 0;
    for (std::size_t li = 0; li < out.net.layers.size(); ++li) {
        std::vector<double>* w = nullptr;
        std::vector<double>* b = nullptr;
        if (auto* d = std::get_if<DenseLayer>(&out.net.layers[li])) {
            w = &d->w;
            b = &d->b;
        }
        if (auto* c = std::get_if<ConvLayer>(&out.net.layers[li])) {
            w = &c->w;
            b = &c->b;
        }
        if (!w) continue;
        const AnalogLayer& al = analog[wl];
        EffectiveLayer& el = out.layers[wl];
        const std::size_t nw = w->size();
        el.pairs.resize(nw);

        std::vector<double> clean = *w;
        FaultMap fmap;
        if (stack.faults && stack.faults->ppm > 0.0) {
            fmap = inject_faults(2 * nw, stack.faults->ppm, stack.faults->frac_high,
                                 stack.faults->frac_low, stack.faults->frac_random,
                                 stack.faults->seed ^ CounterRng::mix(wl + 1), al.state_lo,
                                 al.state_hi);
        } else {
            fmap.tags.resize(2 * nw);
        }
        CounterRng terng(stack.tuning_error ? stack.tuning_error->seed : 0,
                         rng_stream::kDisturb + 100 + wl);

        for (std::size_t i = 0; i < nw; ++i) {
            const double wv = std::clamp(clean[i], -al.mapping.w_max, al.mapping.w_max);
            DevicePair pr = map_weight(al.mapping, wv);
            if (stack.tuning_error && stack.tuning_error->sigma > 0.0) {
                pr.plus = std::clamp(
                    pr.plus * (1.0 + terng.normal(2 * i, 0.0, stack.tuning_error->sigma)),
                    al.state_lo, al.state_hi);
                pr.minus = std::clamp(
                    pr.minus * (1.0 + terng.normal(2 * i + 1, 0.0, stack.tuning_error->sigma)),
                    al.state_lo, al.state_hi);
            }
            const FaultTag fp = fmap.tags[2 * i];
            const FaultTag fm = fmap.tags[2 * i + 1];
            auto stuck_value = [&](const FaultTag& t) {
                switch (t.kind) {
                    case FaultKind::StuckHigh: return al.state_hi;
                    case FaultKind::StuckLow: return al.state_lo;
                    default: return t.g_x;
                }
            };
            if (fp.kind != FaultKind::Healthy || fm.kind != FaultKind::Healthy) {
                ++el.faulty_pairs;
                if (fp.kind != FaultKind::Healthy && fm.kind != FaultKind::Healthy) {
                    ++el.uncompensatable;
                    pr.plus = stuck_value(fp);
                    pr.minus = stuck_value(fm);
                } else if (stack.faults->compensation == FaultCompensation::None) {
                    if (fp.kind != FaultKind::Healthy) pr.plus = stuck_value(fp);
                    if (fm.kind != FaultKind::Healthy) pr.minus = stuck_value(fm);
                } else {
                    const bool plus_faulty = fp.kind != FaultKind::Healthy;
                    const FaultTag& t = plus_faulty ? fp : fm;
                    auto rr = pair_retune(al.mapping, wv,
                                          plus_faulty ? FaultLeg::Plus : FaultLeg::Minus, t.kind,
                                          t.g_x, al.state_lo, al.state_hi);
                    pr = rr.pair;
                }
            }
            // temperature drift of both legs
            if (stack.temperature && *stack.temperature != al.models.temperature.t0) {
                auto shift_leg = [&](double g) {
                    double w0 = g / al.state_hi;
                    if (al.mapping.technology == Technology::Memristor)
                        w0 = std::clamp(w0, 1e-3, 1.0);
                    else
                        w0 = std::clamp(w0, 0.0, 1.0);
                    const double sh =
                        temp_weight_shift(al.models.temperature, w0, *stack.temperature);
                    return std::clamp(g * (1.0 + sh), 0.0, al.state_hi * 1.5);
                };
                pr.plus = shift_leg(pr.plus);
                pr.minus = shift_leg(pr.minus);
            }
            el.pairs[i] = pr;
            if (!state_identity) (*w)[i] = unmap_pair(al.mapping, pr);
        }

        // average-error compensation column: cancel the mean preactivation
        // shift per neuron over the calibration batch (additive per-neuron
        // constant folded into the layer bias)
        if (want_column && stack.faults && stack.faults->ppm > 0.0) {
            const std::vector<double>& cin = calib_inputs[wl];
            int out_dim = 0, in_dim = 0;
            if (const auto* d = std::get_if<DenseLayer>(&out.net.layers[li])) {
                out_dim = d->out;
                in_dim = d->in;
                const std::size_t batch = cin.size() / in_dim;
                for (int o = 0; o < out_dim; ++o) {
                    double shift = 0.0;
                    for (std::size_t s = 0; s < batch; ++s) {
                        const double* ip = cin.data() + s * in_dim;
                        for (int i2 = 0; i2 < in_dim; ++i2)
                            shift += ip[i2] * ((*w)[static_cast<std::size_t>(o) * in_dim + i2] -
                                               clean[static_cast<std::size_t>(o) * in_dim + i2]);
                    }
                    (*b)[o] -= shift / static_cast<double>(batch);
                }
            } else if (const auto* c = std::get_if<ConvLayer>(&out.net.layers[li])) {
                // per output channel: mean over batch and spatial positions
                const int idim = c->in_h * c->in_w * c->in_ch;
                const std::size_t batch = cin.size() / idim;
                std::vector<double> wdiff(w->size());
                for (std::size_t i2 = 0; i2 < w->size(); ++i2) wdiff[i2] = (*w)[i2] - clean[i2];
                ConvLayer diff = *c;
                diff.w = wdiff;
                diff.b.assign(c->out_ch, 0.0);
                std::vector<double> y(static_cast<std::size_t>(c->in_h) * c->in_w * c->out_ch);
                std::vector<double> mean_shift(c->out_ch, 0.0);
                for (std::size_t s = 0; s < batch; ++s) {
                    detail::conv_forward_sample(diff, cin.data() + s * idim, y.data());
                    for (int oc = 0; oc < c->out_ch; ++oc) {
                        const double* yp = y.data() + static_cast<std::size_t>(oc) * c->in_h * c->in_w;
                        for (int t = 0; t < c->in_h * c->in_w; ++t) mean_shift[oc] += yp[t];
                    }
                }
                for (int oc = 0; oc < c->out_ch; ++oc)
                    (*b)[oc] -= mean_shift[oc] /
                                (static_cast<double>(batch) * c->in_h * c->in_w);
            }
        }
        ++wl;
    }
    return out;
}

// ---------------------------------------------------------------------
// Evaluation under a stack
// ---------------------------------------------------------------------

struct DropReport {
    double clean_acc = 0.0;
    double mean_drop = 0.0;  // percentage points
    double std_drop = 0.0;
    std::vector<double> per_seed_drop;
    std::size_t uncompensatable = 0;
};

inline double evaluate_with_stack(const Network& master, const std::vector<AnalogLayer>& analog,
                                  const ImperfectionStack& stack, const Dataset& ds,
                                  const Dataset& calib, std::size_t* uncomp = nullptr) {
    EffectiveBuild eff = build_effective(master, analog, stack, calib);
    if (uncomp) {
        *uncomp = 0;
        for (const auto& l : eff.layers) *uncomp += l.uncompensatable;
    }
    AnalogContext actx;
    actx.layers = &analog;
    actx.eff = &eff.layers;
    actx.nonlinearity = stack.static_nonlinearity;
    actx.noise_seed = stack.noise_seed;
    return accuracy(eff.net, ds, &actx);
}

// drop = clean - perturbed accuracy in percentage points; stochastic
// effects (noise seed, fault seed) are re-drawn per listed seed.
inline DropReport evaluate_accuracy_drop(const Network& master,
                                         const std::vector<AnalogLayer>& analog,
                                         ImperfectionStack stack, const Dataset& ds,
                                         const Dataset& calib,
                                         const std::vector<std::uint64_t>& seeds) {
    DropReport rep;
    Network clean_net = master;
    rep.clean_acc = accuracy(clean_net, ds);
    std::vector<std::uint64_t> use_seeds = seeds.empty() ? std::vector<std::uint64_t>{0} : seeds;
    double sum = 0.0, sum2 = 0.0;
    for (std::uint64_t s : use_seeds) {
        ImperfectionStack st = stack;
        if (st.faults) st.faults->seed = st.faults->seed ^ CounterRng::mix(s);
        if (st.noise_seed) st.noise_seed = *st.noise_seed ^ CounterRng::mix(s + 1);
        if (st.tuning_error) st.tuning_error->seed = st.tuning_error->seed ^ CounterRng::mix(s + 2);
        std::size_t uncomp = 0;
        const double acc = evaluate_with_stack(master, analog, st, ds, calib, &uncomp);
        rep.uncompensatable += uncomp;
        const double drop = (rep.clean_acc - acc) * 100.0;
        rep.per_seed_drop.push_back(drop);
        sum += drop;
        sum2 += drop * drop;
    }
    const double n = static_cast<double>(use_seeds.size());
    rep.mean_drop = sum / n;
    rep.std_drop = std::sqrt(std::max(0.0, sum2 / n - rep.mean_drop * rep.mean_drop));
    return rep;
}

struct PercentileRow {
    int neuron = 0;
    std::vector<double> values;  // one per requested percentile
};

inline std::vector<PercentileRow> preactivation_percentiles(
    const Network& master, const std::vector<AnalogLayer>& analog, const ImperfectionStack& stack,
    const Dataset& ds, const Dataset& calib, int weight_layer, const std::vector<int>& neurons,
    const std::vector<double>& percentiles) {
    EffectiveBuild eff = build_effective(master, analog, stack, calib);
    AnalogContext actx;
    actx.layers = &analog;
    actx.eff = &eff.layers;
    actx.nonlinearity = stack.static_nonlinearity;
    actx.noise_seed = stack.noise_seed;

    std::vector<double> tap;
    std::vector<std::vector<double>> acts;
    const int bs = 64;
    for (std::size_t off = 0; off < ds.size(); off += bs) {
        const int n = static_cast<int>(std::min<std::size_t>(bs, ds.size() - off));
        AnalogContext local = actx;
        local.sample_base = off;
        forward_network(eff.net, ds.sample(off), n, acts, nullptr, false, &local, weight_layer,
                        &tap);
    }
    // tap holds per-sample blocks of the weight layer's full output
    int wl = -1, dim = master.in_h * master.in_w * master.in_ch, out_dim = 0;
    for (const auto& l : master.layers) {
        const int od = layer_out_dim(l, dim);
        if (is_weight_layer(l)) {
            ++wl;
            if (wl == weight_layer) {
                out_dim = od;
                break;
            }
        }
        dim = od;
    }
    if (out_dim == 0) throw std::invalid_argument("weight layer index out of range");
    const std::size_t samples = tap.size() / out_dim;

    std::vector<PercentileRow> rows;
    for (int nrn : neurons) {
        if (nrn < 0 || nrn >= out_dim) throw std::invalid_argument("neuron index out of range");
        std::vector<double> vals(samples);
        for (std::size_t s = 0; s < samples; ++s) vals[s] = tap[s * out_dim + nrn];
        std::sort(vals.begin(), vals.end());
        PercentileRow row;
        row.neuron = nrn;
        for (double p : percentiles) row.values.push_back(quantile_sorted(vals, p / 100.0));
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace mixedsim
