#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "layoutforge/camera.hpp"
#include "layoutforge/field.hpp"  // ParamBlock
#include "layoutforge/image.hpp"
#include "layoutforge/parallel.hpp"
#include "layoutforge/rng.hpp"

namespace layoutforge {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

/// DDPM-style schedule. Timesteps run 0..steps with alpha_bar[0] = 1 (clean);
/// betas ramp linearly over t = 1..steps.
struct NoiseSchedule {
    int steps = 1000;
    double beta_min = 1e-4;
    double beta_max = 2e-2;
    std::vector<double> betas;      // betas[0] == 0
    std::vector<double> alpha_bar;  // cumulative product of (1 - beta)
    bool snr_weighting = false;
    double t_lo = 0.02, t_hi = 0.98;

    static NoiseSchedule linear(int steps = 1000, double beta_min = 1e-4,
                                double beta_max = 2e-2) {
        NoiseSchedule s;
        s.steps = steps;
        s.beta_min = beta_min;
        s.beta_max = beta_max;
        s.betas.assign(static_cast<size_t>(steps) + 1, 0.0);
        s.alpha_bar.assign(static_cast<size_t>(steps) + 1, 1.0);
        for (int t = 1; t <= steps; ++t) {
            s.betas[static_cast<size_t>(t)] =
                beta_min + (beta_max - beta_min) * (t - 1) / std::max(1, steps - 1);
            s.alpha_bar[static_cast<size_t>(t)] =
                s.alpha_bar[static_cast<size_t>(t) - 1] * (1.0 - s.betas[static_cast<size_t>(t)]);
        }
        return s;
    }

    double omega(int t) const {
        if (!snr_weighting) return 1.0;
        double ab = alpha_bar[static_cast<size_t>(t)];
        return (1.0 - ab);  // ~1/SNR-weighted residual scale
    }

    /// t ~ U(t_lo, t_hi) * steps, at least 1.
    int sample_t(Rng& rng) const {
        int t = static_cast<int>(std::lround(rng.uniform(t_lo, t_hi) * steps));
        return std::clamp(t, 1, steps);
    }
};

inline Image gaussian_like(int channels, int height, int width, Rng& rng) {
    Image n(channels, height, width);
    for (auto& v : n.data) v = rng.normal();
    return n;
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
inline Image perturb(const NoiseSchedule& schedule, const Image& x0, int t, const Image& eps) {
    if (!x0.same_shape(eps)) throw std::invalid_argument("perturb: shape mismatch");
    if (t < 0 || t > schedule.steps) throw std::invalid_argument("perturb: t out of range");
    double ab = schedule.alpha_bar[static_cast<size_t>(t)];
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Image out = x0;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
    return out;
}

// ---------------------------------------------------------------------------
// 3x3 convolution kernels (pad 1), double precision
// ---------------------------------------------------------------------------

namespace convnet {

inline void conv3x3_forward(const Image& in, const double* w, const double* bias, int out_ch,
                            Image& out) {
    int height = in.height, width = in.width, in_ch = in.channels;
    out = Image(out_ch, height, width);
    parallel_for(out_ch, [&](int64_t oc) {
        double* dst = out.channel(static_cast<int>(oc));
        double b = bias[oc];
        for (int i = 0; i < height * width; ++i) dst[i] = b;
        for (int ic = 0; ic < in_ch; ++ic) {
            const double* src = in.channel(ic);
            const double* wk = w + (static_cast<size_t>(oc) * in_ch + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                int dy = ky - 1;
                int y0 = std::max(0, -dy), y1 = std::min(height, height - dy);
                for (int kx = 0; kx < 3; ++kx) {
                    int dx = kx - 1;
                    double wv = wk[ky * 3 + kx];
                    int x0 = std::max(0, -dx), x1 = std::min(width, width - dx);
                    for (int y = y0; y < y1; ++y) {
                        double* drow = dst + static_cast<size_t>(y) * width;
                        const double* srow = src + static_cast<size_t>(y + dy) * width + dx;
                        for (int x = x0; x < x1; ++x) drow[x] += wv * srow[x];
                    }
                }
            }
        }
    });
}

/// Weight/bias gradients and (optionally) the input adjoint.
inline void conv3x3_backward(const Image& in, const double* w, int out_ch, const Image& dout,
                             double* dw, double* dbias, Image* din) {
    int height = in.height, width = in.width, in_ch = in.channels;
    parallel_for(out_ch, [&](int64_t oc) {
        const double* gsrc = dout.channel(static_cast<int>(oc));
        double db = 0.0;
        for (int i = 0; i < height * width; ++i) db += gsrc[i];
        dbias[oc] += db;
        for (int ic = 0; ic < in_ch; ++ic) {
            const double* src = in.channel(ic);
            double* wk = dw + (static_cast<size_t>(oc) * in_ch + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                int dy = ky - 1;
                int y0 = std::max(0, -dy), y1 = std::min(height, height - dy);
                for (int kx = 0; kx < 3; ++kx) {
                    int dx = kx - 1;
                    int x0 = std::max(0, -dx), x1 = std::min(width, width - dx);
                    double acc = 0.0;
                    for (int y = y0; y < y1; ++y) {
                        const double* grow = gsrc + static_cast<size_t>(y) * width;
                        const double* srow = src + static_cast<size_t>(y + dy) * width + dx;
                        for (int x = x0; x < x1; ++x) acc += grow[x] * srow[x];
                    }
                    wk[ky * 3 + kx] += acc;
                }
            }
        }
    });
    if (!din) return;
    *din = Image(in_ch, height, width);
    parallel_for(in_ch, [&](int64_t ic) {
        double* dst = din->channel(static_cast<int>(ic));
        for (int oc = 0; oc < out_ch; ++oc) {
            const double* gsrc = dout.channel(oc);
            const double* wk = w + (static_cast<size_t>(oc) * in_ch + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                int dy = ky - 1;
                // din row y receives from dout row y - dy
                int y0 = std::max(0, dy), y1 = std::min(height, height + dy);
                for (int kx = 0; kx < 3; ++kx) {
                    int dx = kx - 1;
                    double wv = wk[ky * 3 + kx];
                    int x0 = std::max(0, dx), x1 = std::min(width, width + dx);
                    for (int y = y0; y < y1; ++y) {
                        double* drow = dst + static_cast<size_t>(y) * width;
                        const double* grow = gsrc + static_cast<size_t>(y - dy) * width - dx;
                        for (int x = x0; x < x1; ++x) drow[x] += wv * grow[x];
                    }
                }
            }
        }
    });
}

}  // namespace convnet

// ---------------------------------------------------------------------------
// Denoisers
// ---------------------------------------------------------------------------

/// Noise-prediction interface: eps_hat = predict_noise(x_t, t, condition, y).
struct Denoiser {
    virtual ~Denoiser() = default;
    virtual Image predict_noise(const Image& x_t, int t, const Image& condition,
                                int style) const = 0;
    virtual int condition_channels() const = 0;
};

struct ToyDenoiserConfig {
    int image_channels = 3;
    int condition_channels = 0;
    int layers = 4;       // total convolutions, >= 2
    int channels = 32;    // hidden width
    int time_dim = 32;    // sinusoidal embedding size
    int style_count = 3;
};

inline void sinusoidal_embedding(int t, int dim, double* out) {
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
        out[2 * i] = std::sin(t * freq);
        out[2 * i + 1] = std::cos(t * freq);
    }
    if (dim % 2) out[dim - 1] = 0.0;
}

namespace convnet {

/// Materialized double-precision weights for one forward/backward pass.
struct WeightView {
    std::vector<std::vector<double>> conv_w;
    std::vector<std::vector<double>> conv_b;
    std::vector<double> time_w;  // channels x time_dim
    std::vector<double> time_b;  // channels
    const float* style_embed = nullptr;  // style_count x channels
    std::vector<double> camera_bias;     // channels; empty when absent
};

struct Cache {
    Image input;             // x_t ++ condition
    std::vector<Image> pre;  // pre-activation per conv
    std::vector<Image> act;  // post-activation (input to the next conv)
    std::vector<double> time_emb;
    int t = 0;
    int style = 0;
};

struct Grads {
    std::vector<std::vector<double>> conv_w, conv_b;
    std::vector<double> time_w, time_b;
    std::vector<double> style;        // gradient of the used style's embedding row
    std::vector<double> camera_bias;  // gradient of the per-channel camera bias
};

inline Image forward(const ToyDenoiserConfig& cfg, const WeightView& wv, const Image& x_t,
                     const Image& condition, int t, int style, Cache* cache) {
    if (condition.channels != cfg.condition_channels || condition.height != x_t.height ||
        condition.width != x_t.width)
        throw std::invalid_argument("denoiser: condition resolution mismatch with image");
    if (style < 0 || style >= cfg.style_count)
        throw std::invalid_argument("denoiser: style id out of range");

    Image input(cfg.image_channels + cfg.condition_channels, x_t.height, x_t.width);
    std::copy(x_t.data.begin(), x_t.data.end(), input.data.begin());
    std::copy(condition.data.begin(), condition.data.end(),
              input.data.begin() + x_t.data.size());

    std::vector<double> emb(static_cast<size_t>(cfg.time_dim));
    sinusoidal_embedding(t, cfg.time_dim, emb.data());

    Cache local;
    Cache& c = cache ? *cache : local;
    c.input = std::move(input);
    c.time_emb = emb;
    c.t = t;
    c.style = style;
    c.pre.clear();
    c.act.clear();

    const Image* cur = &c.input;
    Image out;
    for (int l = 0; l < cfg.layers; ++l) {
        int out_ch = (l + 1 == cfg.layers) ? cfg.image_channels : cfg.channels;
        conv3x3_forward(*cur, wv.conv_w[static_cast<size_t>(l)].data(),
                        wv.conv_b[static_cast<size_t>(l)].data(), out_ch, out);
        if (l == 0) {
            // timestep + style (+ camera) biases enter after the first conv
            for (int ch = 0; ch < cfg.channels; ++ch) {
                double bias = wv.time_b[static_cast<size_t>(ch)];
                for (int i = 0; i < cfg.time_dim; ++i)
                    bias += wv.time_w[static_cast<size_t>(ch) * cfg.time_dim + i] * emb[static_cast<size_t>(i)];
                bias += static_cast<double>(
                    wv.style_embed[static_cast<size_t>(style) * cfg.channels + ch]);
                if (!wv.camera_bias.empty()) bias += wv.camera_bias[static_cast<size_t>(ch)];
                double* row = out.channel(ch);
                for (int i = 0; i < out.height * out.width; ++i) row[i] += bias;
            }
        }
        if (l + 1 == cfg.layers) {
            if (cache) c.pre.push_back(out);
            return out;
        }
        c.pre.push_back(out);
        Image activated = out;
        for (auto& v : activated.data) v = silu(v);
        c.act.push_back(std::move(activated));
        cur = &c.act.back();
    }
    return out;  // unreachable for layers >= 1
}

inline Grads backward(const ToyDenoiserConfig& cfg, const WeightView& wv, const Cache& cache,
                      const Image& dout) {
    Grads g;
    g.conv_w.resize(static_cast<size_t>(cfg.layers));
    g.conv_b.resize(static_cast<size_t>(cfg.layers));
    for (int l = 0; l < cfg.layers; ++l) {
        g.conv_w[static_cast<size_t>(l)].assign(wv.conv_w[static_cast<size_t>(l)].size(), 0.0);
        g.conv_b[static_cast<size_t>(l)].assign(wv.conv_b[static_cast<size_t>(l)].size(), 0.0);
    }
    g.time_w.assign(wv.time_w.size(), 0.0);
    g.time_b.assign(wv.time_b.size(), 0.0);
    g.style.assign(static_cast<size_t>(cfg.channels), 0.0);
    g.camera_bias.assign(static_cast<size_t>(cfg.channels), 0.0);

    Image delta = dout;
    for (int l = cfg.layers - 1; l >= 0; --l) {
        const Image& input = (l == 0) ? cache.input : cache.act[static_cast<size_t>(l) - 1];
        int out_ch = (l + 1 == cfg.layers) ? cfg.image_channels : cfg.channels;
        if (l + 1 < cfg.layers) {
            // delta currently holds d(post-activation); convert through SiLU.
            const Image& pre = cache.pre[static_cast<size_t>(l)];
            for (size_t i = 0; i < delta.data.size(); ++i)
                delta.data[i] *= silu_derivative(pre.data[i]);
        }
        if (l == 0) {
            for (int ch = 0; ch < cfg.channels; ++ch) {
                const double* row = delta.channel(ch);
                double s = 0.0;
                for (int i = 0; i < delta.height * delta.width; ++i) s += row[i];
                g.time_b[static_cast<size_t>(ch)] += s;
                for (int i = 0; i < cfg.time_dim; ++i)
                    g.time_w[static_cast<size_t>(ch) * cfg.time_dim + i] +=
                        s * cache.time_emb[static_cast<size_t>(i)];
                g.style[static_cast<size_t>(ch)] += s;
                g.camera_bias[static_cast<size_t>(ch)] += s;
            }
        }
        Image din;
        conv3x3_backward(input, wv.conv_w[static_cast<size_t>(l)].data(), out_ch, delta,
                         g.conv_w[static_cast<size_t>(l)].data(),
                         g.conv_b[static_cast<size_t>(l)].data(), l > 0 ? &din : nullptr);
        if (l > 0) delta = std::move(din);
    }
    return g;
}

}  // namespace convnet

/// Small convolutional noise predictor: consumes x_t concatenated with the
/// condition channels, with a sinusoidal timestep embedding and a learned
/// per-style bias added after the first convolution.
struct ToyDenoiser : Denoiser {
    ToyDenoiserConfig cfg;
    std::vector<ParamBlock> convs;  // weights then bias, per layer
    ParamBlock time_proj;           // channels x time_dim weights then channels bias
    ParamBlock style_embed;         // style_count x channels

    ToyDenoiser() = default;
    explicit ToyDenoiser(const ToyDenoiserConfig& config, uint64_t seed = 7) { init(config, seed); }

    void init(const ToyDenoiserConfig& config, uint64_t seed) {
        cfg = config;
        if (cfg.layers < 2) throw ValidationError("toy denoiser: need at least 2 layers");
        Rng rng(mix_seed(seed, 0xd0u));
        convs.assign(static_cast<size_t>(cfg.layers), {});
        int in_ch = cfg.image_channels + cfg.condition_channels;
        for (int l = 0; l < cfg.layers; ++l) {
            int out_ch = (l + 1 == cfg.layers) ? cfg.image_channels : cfg.channels;
            auto& block = convs[static_cast<size_t>(l)];
            block.resize(static_cast<size_t>(out_ch) * in_ch * 9 + out_ch);
            double a = std::sqrt(6.0 / (in_ch * 9 + out_ch * 9));
            if (l + 1 == cfg.layers) a *= 0.1;
            for (size_t i = 0; i < static_cast<size_t>(out_ch) * in_ch * 9; ++i)
                block.w[i] = static_cast<float>(rng.uniform(-a, a));
            in_ch = out_ch;
        }
        time_proj.resize(static_cast<size_t>(cfg.channels) * cfg.time_dim + cfg.channels);
        double a = std::sqrt(6.0 / (cfg.time_dim + cfg.channels));
        for (size_t i = 0; i < static_cast<size_t>(cfg.channels) * cfg.time_dim; ++i)
            time_proj.w[i] = static_cast<float>(rng.uniform(-a, a));
        style_embed.resize(static_cast<size_t>(cfg.style_count) * cfg.channels);
        for (auto& v : style_embed.w) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    }

    convnet::WeightView weight_view() const {
        convnet::WeightView wv;
        int in_ch = cfg.image_channels + cfg.condition_channels;
        for (int l = 0; l < cfg.layers; ++l) {
            int out_ch = (l + 1 == cfg.layers) ? cfg.image_channels : cfg.channels;
            const auto& block = convs[static_cast<size_t>(l)];
            size_t nw = static_cast<size_t>(out_ch) * in_ch * 9;
            wv.conv_w.emplace_back(block.w.begin(), block.w.begin() + nw);
            wv.conv_b.emplace_back(block.w.begin() + nw, block.w.end());
            in_ch = out_ch;
        }
        size_t ntw = static_cast<size_t>(cfg.channels) * cfg.time_dim;
        wv.time_w.assign(time_proj.w.begin(), time_proj.w.begin() + ntw);
        wv.time_b.assign(time_proj.w.begin() + ntw, time_proj.w.end());
        wv.style_embed = style_embed.w.data();
        return wv;
    }

    int condition_channels() const override { return cfg.condition_channels; }

    Image predict_noise(const Image& x_t, int t, const Image& condition,
                        int style) const override {
        convnet::WeightView wv = weight_view();
        return convnet::forward(cfg, wv, x_t, condition, t, style, nullptr);
    }

    Image forward_cached(const Image& x_t, int t, const Image& condition, int style,
                         convnet::Cache& cache) const {
        convnet::WeightView wv = weight_view();
        return convnet::forward(cfg, wv, x_t, condition, t, style, &cache);
    }

    /// Accumulates gradients of all trainable blocks from a cached forward.
    void backward_cached(const convnet::Cache& cache, const Image& dout) {
        convnet::WeightView wv = weight_view();
        convnet::Grads g = convnet::backward(cfg, wv, cache, dout);
        int in_ch = cfg.image_channels + cfg.condition_channels;
        for (int l = 0; l < cfg.layers; ++l) {
            int out_ch = (l + 1 == cfg.layers) ? cfg.image_channels : cfg.channels;
            auto& block = convs[static_cast<size_t>(l)];
            size_t nw = static_cast<size_t>(out_ch) * in_ch * 9;
            for (size_t i = 0; i < nw; ++i) block.g[i] += g.conv_w[static_cast<size_t>(l)][i];
            for (size_t i = 0; i < static_cast<size_t>(out_ch); ++i)
                block.g[nw + i] += g.conv_b[static_cast<size_t>(l)][i];
            in_ch = out_ch;
        }
        size_t ntw = static_cast<size_t>(cfg.channels) * cfg.time_dim;
        for (size_t i = 0; i < ntw; ++i) time_proj.g[i] += g.time_w[i];
        for (size_t i = 0; i < static_cast<size_t>(cfg.channels); ++i)
            time_proj.g[ntw + i] += g.time_b[i];
        for (size_t i = 0; i < static_cast<size_t>(cfg.channels); ++i)
            style_embed.g[static_cast<size_t>(cache.style) * cfg.channels + i] += g.style[i];
    }

    Image zero_condition(int height, int width) const {
        return Image(cfg.condition_channels, height, width);
    }

    template <typename Fn>
    void for_each_param_block(Fn&& fn) {
        for (auto& b : convs) fn(b);
        fn(time_proj);
        fn(style_embed);
    }
};

/// Frozen base denoiser plus rank-r deltas on every weight matrix/kernel and a
/// camera-conditioned per-channel bias. With all deltas and the camera map at
/// zero the output is the base's, bit for bit.
struct AdaptedDenoiser {
    const ToyDenoiser* base = nullptr;
    int rank = 4;
    std::vector<ParamBlock> lora_a, lora_b;  // per conv; A: r x cols, B: rows x r
    ParamBlock time_a, time_b_factor;
    ParamBlock camera_proj;  // channels x 12 weights + channels bias

    AdaptedDenoiser() = default;
    AdaptedDenoiser(const ToyDenoiser& base_model, int r, uint64_t seed = 99) {
        init(base_model, r, seed);
    }

    void init(const ToyDenoiser& base_model, int r, uint64_t seed) {
        base = &base_model;
        rank = r;
        lora_a.clear();
        lora_b.clear();
        if (rank <= 0) return;  // rank 0: adaptation disabled entirely
        Rng rng(mix_seed(seed, 0x10bau));
        const auto& cfg = base->cfg;
        int in_ch = cfg.image_channels + cfg.condition_channels;
        for (int l = 0; l < cfg.layers; ++l) {
            int out_ch = (l + 1 == cfg.layers) ? cfg.image_channels : cfg.channels;
            ParamBlock a, b;
            a.resize(static_cast<size_t>(rank) * in_ch * 9);
            b.resize(static_cast<size_t>(out_ch) * rank);
            for (auto& v : a.w) v = static_cast<float>(rng.uniform(-0.05, 0.05));
            lora_a.push_back(std::move(a));
            lora_b.push_back(std::move(b));  // B starts at zero: adapter == base
            in_ch = out_ch;
        }
        time_a.resize(static_cast<size_t>(rank) * cfg.time_dim);
        time_b_factor.resize(static_cast<size_t>(cfg.channels) * rank);
        for (auto& v : time_a.w) v = static_cast<float>(rng.uniform(-0.05, 0.05));
        camera_proj.resize(static_cast<size_t>(cfg.channels) * 12 + cfg.channels);
    }

    bool is_identity() const {
        if (rank <= 0) return true;
        auto all_zero = [](const ParamBlock& b) {
            for (float v : b.w)
                if (v != 0.0f) return false;
            return true;
        };
        for (const auto& b : lora_b)
            if (!all_zero(b)) return false;
        return all_zero(time_b_factor) && all_zero(camera_proj);
    }

    static std::array<double, 12> camera_input(const Camera& cam) {
        std::array<double, 12> in = cam.flat_extrinsics();
        for (int i = 9; i < 12; ++i) in[static_cast<size_t>(i)] *= 0.01;  // meters to ~unit scale
        return in;
    }

    convnet::WeightView weight_view(const Camera* cam) const {
        convnet::WeightView wv = base->weight_view();
        if (rank <= 0) return wv;
        const auto& cfg = base->cfg;
        int in_ch = cfg.image_channels + cfg.condition_channels;
        for (int l = 0; l < cfg.layers; ++l) {
            int out_ch = (l + 1 == cfg.layers) ? cfg.image_channels : cfg.channels;
            size_t cols = static_cast<size_t>(in_ch) * 9;
            auto& w = wv.conv_w[static_cast<size_t>(l)];
            const auto& A = lora_a[static_cast<size_t>(l)].w;
            const auto& B = lora_b[static_cast<size_t>(l)].w;
            for (int o = 0; o < out_ch; ++o)
                for (int r = 0; r < rank; ++r) {
                    double bor = static_cast<double>(B[static_cast<size_t>(o) * rank + r]);
                    if (bor == 0.0) continue;
                    const float* arow = A.data() + static_cast<size_t>(r) * cols;
                    double* wrow = w.data() + static_cast<size_t>(o) * cols;
                    for (size_t cidx = 0; cidx < cols; ++cidx)
                        wrow[cidx] += bor * static_cast<double>(arow[cidx]);
                }
            in_ch = out_ch;
        }
        for (int o = 0; o < cfg.channels; ++o)
            for (int r = 0; r < rank; ++r) {
                double bor = static_cast<double>(time_b_factor.w[static_cast<size_t>(o) * rank + r]);
                if (bor == 0.0) continue;
                for (int i = 0; i < cfg.time_dim; ++i)
                    wv.time_w[static_cast<size_t>(o) * cfg.time_dim + i] +=
                        bor * static_cast<double>(time_a.w[static_cast<size_t>(r) * cfg.time_dim + i]);
            }
        if (cam) {
            auto input = camera_input(*cam);
            wv.camera_bias.assign(static_cast<size_t>(cfg.channels), 0.0);
            for (int ch = 0; ch < cfg.channels; ++ch) {
                double s = static_cast<double>(camera_proj.w[static_cast<size_t>(cfg.channels) * 12 + ch]);
                for (int i = 0; i < 12; ++i)
                    s += static_cast<double>(camera_proj.w[static_cast<size_t>(ch) * 12 + i]) *
                         input[static_cast<size_t>(i)];
                wv.camera_bias[static_cast<size_t>(ch)] = s;
            }
        }
        return wv;
    }

    Image predict(const Image& x_t, int t, const Camera& cam, const Image& condition, int style,
                  convnet::Cache* cache = nullptr) const {
        if (is_identity() && !cache)
            return base->predict_noise(x_t, t, condition, style);
        convnet::WeightView wv = weight_view(&cam);
        return convnet::forward(base->cfg, wv, x_t, condition, t, style, cache);
    }

    /// Backward into adapter parameters only; the base stays frozen.
    void backward_cached(const convnet::Cache& cache, const Camera& cam, const Image& dout) {
        if (rank <= 0) return;
        const auto& cfg = base->cfg;
        convnet::WeightView wv = weight_view(&cam);
        convnet::Grads g = convnet::backward(cfg, wv, cache, dout);
        int in_ch = cfg.image_channels + cfg.condition_channels;
        for (int l = 0; l < cfg.layers; ++l) {
            int out_ch = (l + 1 == cfg.layers) ? cfg.image_channels : cfg.channels;
            size_t cols = static_cast<size_t>(in_ch) * 9;
            const auto& dw = g.conv_w[static_cast<size_t>(l)];
            const auto& A = lora_a[static_cast<size_t>(l)].w;
            const auto& B = lora_b[static_cast<size_t>(l)].w;
            auto& gA = lora_a[static_cast<size_t>(l)].g;
            auto& gB = lora_b[static_cast<size_t>(l)].g;
            for (int o = 0; o < out_ch; ++o) {
                const double* dwrow = dw.data() + static_cast<size_t>(o) * cols;
                for (int r = 0; r < rank; ++r) {
                    const float* arow = A.data() + static_cast<size_t>(r) * cols;
                    double accb = 0.0;
                    double bor = static_cast<double>(B[static_cast<size_t>(o) * rank + r]);
                    double* garow = gA.data() + static_cast<size_t>(r) * cols;
                    for (size_t cidx = 0; cidx < cols; ++cidx) {
                        accb += dwrow[cidx] * static_cast<double>(arow[cidx]);
                        garow[cidx] += dwrow[cidx] * bor;
                    }
                    gB[static_cast<size_t>(o) * rank + r] += accb;
                }
            }
            in_ch = out_ch;
        }
        for (int o = 0; o < cfg.channels; ++o)
            for (int r = 0; r < rank; ++r) {
                double bor = static_cast<double>(time_b_factor.w[static_cast<size_t>(o) * rank + r]);
                double accb = 0.0;
                for (int i = 0; i < cfg.time_dim; ++i) {
                    double dwv = g.time_w[static_cast<size_t>(o) * cfg.time_dim + i];
                    accb += dwv * static_cast<double>(time_a.w[static_cast<size_t>(r) * cfg.time_dim + i]);
                    time_a.g[static_cast<size_t>(r) * cfg.time_dim + i] += dwv * bor;
                }
                time_b_factor.g[static_cast<size_t>(o) * rank + r] += accb;
            }
        auto input = camera_input(cam);
        for (int ch = 0; ch < cfg.channels; ++ch) {
            double dcb = g.camera_bias[static_cast<size_t>(ch)];
            for (int i = 0; i < 12; ++i)
                camera_proj.g[static_cast<size_t>(ch) * 12 + i] += dcb * input[static_cast<size_t>(i)];
            camera_proj.g[static_cast<size_t>(cfg.channels) * 12 + ch] += dcb;
        }
    }

    template <typename Fn>
    void for_each_param_block(Fn&& fn) {
        for (auto& b : lora_a) fn(b);
        for (auto& b : lora_b) fn(b);
        fn(time_a);
        fn(time_b_factor);
        fn(camera_proj);
    }
};

// ---------------------------------------------------------------------------
// Distillation gradients
// ---------------------------------------------------------------------------

struct DistillResult {
    Image gradient;  // pixel-space dL/dx0, to be chained through the renderer
    Image denoised;  // the base model's one-step x0 estimate under the shared draw
    int t = 0;
};

inline Image one_step_x0(const NoiseSchedule& schedule, const Image& x_t, int t,
                         const Image& eps_hat) {
    double ab = schedule.alpha_bar[static_cast<size_t>(t)];
    Image x0 = x_t;
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (size_t i = 0; i < x0.data.size(); ++i) x0.data[i] = (x_t.data[i] - b * eps_hat.data[i]) / a;
    return x0;
}

/// omega(t) * (eps_p(x_t, t, y) - eps): the noise-residual pixel gradient.
inline DistillResult sds_distill(const Image& x0, const Denoiser& denoiser,
                                 const NoiseSchedule& schedule, const Image& condition, int style,
                                 Rng& rng) {
    int t = schedule.sample_t(rng);
    Image eps = gaussian_like(x0.channels, x0.height, x0.width, rng);
    Image x_t = perturb(schedule, x0, t, eps);
    Image eps_hat = denoiser.predict_noise(x_t, t, condition, style);
    double w = schedule.omega(t);
    DistillResult out;
    out.t = t;
    out.denoised = one_step_x0(schedule, x_t, t, eps_hat);
    out.gradient = eps_hat;
    for (size_t i = 0; i < out.gradient.data.size(); ++i)
        out.gradient.data[i] = w * (eps_hat.data[i] - eps.data[i]);
    return out;
}

inline Image sds_gradient(const Image& x0, const Denoiser& denoiser,
                          const NoiseSchedule& schedule, const Image& condition, int style,
                          Rng& rng) {
    return sds_distill(x0, denoiser, schedule, condition, style, rng).gradient;
}

/// omega(t) * (eps_p - eps_phi) with one shared (t, eps, x_t) draw and the same
/// condition tensor fed to both denoisers.
inline DistillResult lg_vsd_distill(const Image& x0, const ToyDenoiser& base,
                                    const AdaptedDenoiser& adapted, const NoiseSchedule& schedule,
                                    const Image& condition, const Camera& cam, int style,
                                    Rng& rng) {
    if (condition.height != x0.height || condition.width != x0.width)
        throw std::invalid_argument("lg_vsd: condition resolution mismatch with x0");
    int t = schedule.sample_t(rng);
    Image eps = gaussian_like(x0.channels, x0.height, x0.width, rng);
    Image x_t = perturb(schedule, x0, t, eps);
    Image eps_p = base.predict_noise(x_t, t, condition, style);
    Image eps_phi = adapted.predict(x_t, t, cam, condition, style);
    double w = schedule.omega(t);
    DistillResult out;
    out.t = t;
    out.denoised = one_step_x0(schedule, x_t, t, eps_p);
    out.gradient = eps_p;
    for (size_t i = 0; i < out.gradient.data.size(); ++i)
        out.gradient.data[i] = w * (eps_p.data[i] - eps_phi.data[i]);
    return out;
}

inline Image lg_vsd_gradient(const Image& x0, const ToyDenoiser& base,
                             const AdaptedDenoiser& adapted, const NoiseSchedule& schedule,
                             const Image& condition, const Camera& cam, int style, Rng& rng) {
    return lg_vsd_distill(x0, base, adapted, schedule, condition, cam, style, rng).gradient;
}

/// VSD without layout conditioning: both denoisers see a folded-in constant
/// condition (zeros by default).
inline Image vsd_gradient(const Image& x0, const ToyDenoiser& base, const AdaptedDenoiser& adapted,
                          const NoiseSchedule& schedule, const Camera& cam, int style, Rng& rng,
                          const Image* folded_condition = nullptr) {
    Image cond = folded_condition ? *folded_condition
                                  : base.zero_condition(x0.height, x0.width);
    return lg_vsd_distill(x0, base, adapted, schedule, cond, cam, style, rng).gradient;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamOptimizer {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t step_count = 0;

    void begin_step() { ++step_count; }

    void update(ParamBlock& block) const {
        block.ensure_adam();
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (size_t i = 0; i < block.w.size(); ++i) {
            double g = block.g[i];
            block.adam_m[i] = beta1 * block.adam_m[i] + (1.0 - beta1) * g;
            block.adam_v[i] = beta2 * block.adam_v[i] + (1.0 - beta2) * g * g;
            double mhat = block.adam_m[i] / bc1;
            double vhat = block.adam_v[i] / bc2;
            block.w[i] = static_cast<float>(static_cast<double>(block.w[i]) -
                                            lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
};

/// Scales gradients so the global L2 norm of all listed blocks is at most
/// max_norm. Returns the pre-clip norm.
inline double clip_global_grad_norm(const std::vector<ParamBlock*>& blocks, double max_norm) {
    double sq = 0.0;
    for (const ParamBlock* b : blocks)
        for (double g : b->g) sq += g * g;
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double scale = max_norm / norm;
        for (ParamBlock* b : blocks)
            for (double& g : b->g) g *= scale;
    }
    return norm;
}

/// One gradient step minimizing ||eps_phi(x_t, t, T, y, cond) - eps||^2 on a
/// freshly drawn (t, eps) per batch item. Base parameters are untouched.
inline double adapter_step(AdaptedDenoiser& adapted, const std::vector<Image>& x0_batch,
                           const std::vector<Camera>& cameras, const std::vector<Image>& conditions,
                           int style, const NoiseSchedule& schedule, AdamOptimizer& opt, Rng& rng) {
    if (adapted.rank <= 0) return 0.0;  // no trainable parameters
    if (x0_batch.size() != cameras.size() || x0_batch.size() != conditions.size())
        throw std::invalid_argument("adapter_step: batch size mismatch");
    adapted.for_each_param_block([](ParamBlock& b) { b.zero_grad(); });
    double loss = 0.0;
    for (size_t k = 0; k < x0_batch.size(); ++k) {
        int t = schedule.sample_t(rng);
        Image eps = gaussian_like(x0_batch[k].channels, x0_batch[k].height, x0_batch[k].width, rng);
        Image x_t = perturb(schedule, x0_batch[k], t, eps);
        convnet::Cache cache;
        Image pred = adapted.predict(x_t, t, cameras[k], conditions[k], style, &cache);
        Image dout = pred;
        double n = static_cast<double>(pred.data.size()) * static_cast<double>(x0_batch.size());
        for (size_t i = 0; i < pred.data.size(); ++i) {
            double r = pred.data[i] - eps.data[i];
            loss += r * r / n;
            dout.data[i] = 2.0 * r / n;
        }
        adapted.backward_cached(cache, cameras[k], dout);
    }
    opt.begin_step();
    adapted.for_each_param_block([&](ParamBlock& b) { opt.update(b); });
    return loss;
}

// ---------------------------------------------------------------------------
// Resampling refinement
// ---------------------------------------------------------------------------

enum class RefineMode { Stochastic, Deterministic };

/// Perturbs the image to timestep t0 and denoises back to 0 with the
/// conditional denoiser. `max_denoise_steps` > 0 walks a strided timestep
/// subsequence (the usual accelerated sampler); 0 steps through every t.
/// The deterministic mode is the zero-injected-noise update. t0 == 0 returns
/// the input unchanged.
inline Image resample_refine(const Image& image, const Image& condition, int style,
                             const Denoiser& denoiser, const NoiseSchedule& schedule, int t0,
                             RefineMode mode, Rng& rng, int max_denoise_steps = 0) {
    if (t0 < 0 || t0 >= schedule.steps)
        throw std::invalid_argument("resample_refine: t0 out of range");
    if (t0 == 0) return image;

    Image eps = gaussian_like(image.channels, image.height, image.width, rng);
    Image x = perturb(schedule, image, t0, eps);

    std::vector<int> ts;
    int steps = (max_denoise_steps > 0) ? std::min(max_denoise_steps, t0) : t0;
    for (int k = 0; k < steps; ++k) {
        int t = t0 - (k * t0) / steps;
        if (ts.empty() || ts.back() != t) ts.push_back(t);
    }
    ts.push_back(0);

    for (size_t k = 0; k + 1 < ts.size(); ++k) {
        int t = ts[k], s = ts[k + 1];
        Image eps_hat = denoiser.predict_noise(x, t, condition, style);
        double ab_t = schedule.alpha_bar[static_cast<size_t>(t)];
        double ab_s = schedule.alpha_bar[static_cast<size_t>(s)];
        double sigma = 0.0;
        if (mode == RefineMode::Stochastic && s > 0) {
            // eta = 1 variance; equals the DDPM posterior at unit stride
            sigma = std::sqrt((1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s));
        }
        double dir_coef = std::sqrt(std::max(0.0, 1.0 - ab_s - sigma * sigma));
        double a_t = std::sqrt(ab_t), a_s = std::sqrt(ab_s);
        for (size_t i = 0; i < x.data.size(); ++i) {
            double x0_hat = (x.data[i] - std::sqrt(1.0 - ab_t) * eps_hat.data[i]) / a_t;
            double v = a_s * x0_hat + dir_coef * eps_hat.data[i];
            if (sigma > 0.0) v += sigma * rng.normal();
            x.data[i] = v;
        }
    }
    return x;
}

}  // namespace layoutforge
