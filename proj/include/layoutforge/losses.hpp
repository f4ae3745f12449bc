#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "layoutforge/image.hpp"
#include "layoutforge/raster.hpp"
#include "layoutforge/rng.hpp"

namespace layoutforge {

// ---------------------------------------------------------------------------
// Fixed random-projection feature encoder
// ---------------------------------------------------------------------------

/// Non-learned convolutional feature map: two seeded stride-2 convolutions
/// with tanh, then average pooling to a pool x pool grid. Kernels are scaled
/// by fan-in so the map is Lipschitz; construction is deterministic per seed.
struct FeatureEncoder {
    int c0 = 3, c1 = 8, c2 = 16, pool = 4;
    std::vector<double> w1, b1, w2, b2;

    explicit FeatureEncoder(uint64_t seed = 1234) {
        Rng rng(mix_seed(seed, 0xfeau));
        auto fill = [&](std::vector<double>& w, int out_ch, int in_ch) {
            w.resize(static_cast<size_t>(out_ch) * in_ch * 9);
            double scale = 1.0 / (in_ch * 9);
            for (auto& v : w) v = rng.uniform(-1.0, 1.0) * scale;
        };
        fill(w1, c1, c0);
        fill(w2, c2, c1);
        b1.assign(static_cast<size_t>(c1), 0.0);
        b2.assign(static_cast<size_t>(c2), 0.0);
    }

    int feature_dim() const { return c2 * pool * pool; }

    struct Trace {
        Image in;        // encoder input
        Image pre1, a1;  // conv1 pre/post activation
        Image pre2, a2;
        std::vector<double> feat;
    };

    static void conv3x3_s2(const Image& in, const std::vector<double>& w,
                           const std::vector<double>& b, int out_ch, Image& out) {
        int oh = (in.height + 1) / 2, ow = (in.width + 1) / 2;
        out = Image(out_ch, oh, ow);
        for (int oc = 0; oc < out_ch; ++oc) {
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = b[static_cast<size_t>(oc)];
                    for (int ic = 0; ic < in.channels; ++ic) {
                        const double* wk =
                            w.data() + (static_cast<size_t>(oc) * in.channels + ic) * 9;
                        for (int ky = 0; ky < 3; ++ky) {
                            int y = 2 * oy + ky - 1;
                            if (y < 0 || y >= in.height) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                int x = 2 * ox + kx - 1;
                                if (x < 0 || x >= in.width) continue;
                                acc += wk[ky * 3 + kx] * in.at(ic, y, x);
                            }
                        }
                    }
                    out.at(oc, oy, ox) = acc;
                }
            }
        }
    }

    void encode_trace(const Image& img, Trace& tr) const {
        if (img.channels != c0) throw std::invalid_argument("feature encoder: need 3 channels");
        tr.in = img;
        conv3x3_s2(img, w1, b1, c1, tr.pre1);
        tr.a1 = tr.pre1;
        for (auto& v : tr.a1.data) v = std::tanh(v);
        conv3x3_s2(tr.a1, w2, b2, c2, tr.pre2);
        tr.a2 = tr.pre2;
        for (auto& v : tr.a2.data) v = std::tanh(v);

        tr.feat.assign(static_cast<size_t>(feature_dim()), 0.0);
        int h = tr.a2.height, w = tr.a2.width;
        for (int c = 0; c < c2; ++c) {
            for (int py = 0; py < pool; ++py) {
                int y0 = py * h / pool, y1 = std::max(y0 + 1, (py + 1) * h / pool);
                for (int px = 0; px < pool; ++px) {
                    int x0 = px * w / pool, x1 = std::max(x0 + 1, (px + 1) * w / pool);
                    double acc = 0.0;
                    for (int y = y0; y < y1; ++y)
                        for (int x = x0; x < x1; ++x) acc += tr.a2.at(c, y, x);
                    tr.feat[(static_cast<size_t>(c) * pool + py) * pool + px] =
                        acc / ((y1 - y0) * (x1 - x0));
                }
            }
        }
    }

    std::vector<double> encode(const Image& img) const {
        Trace tr;
        encode_trace(img, tr);
        return tr.feat;
    }

    /// Adjoint of the feature vector propagated back to the input image.
    Image backward(const Trace& tr, const std::vector<double>& dfeat) const {
        Image da2(c2, tr.a2.height, tr.a2.width);
        int h = tr.a2.height, w = tr.a2.width;
        for (int c = 0; c < c2; ++c) {
            for (int py = 0; py < pool; ++py) {
                int y0 = py * h / pool, y1 = std::max(y0 + 1, (py + 1) * h / pool);
                for (int px = 0; px < pool; ++px) {
                    int x0 = px * w / pool, x1 = std::max(x0 + 1, (px + 1) * w / pool);
                    double g = dfeat[(static_cast<size_t>(c) * pool + py) * pool + px] /
                               ((y1 - y0) * (x1 - x0));
                    for (int y = y0; y < y1; ++y)
                        for (int x = x0; x < x1; ++x) da2.at(c, y, x) += g;
                }
            }
        }
        for (size_t i = 0; i < da2.data.size(); ++i)
            da2.data[i] *= 1.0 - tr.a2.data[i] * tr.a2.data[i];

        Image da1 = conv3x3_s2_input_adjoint(tr.a1, w2, c2, da2);
        for (size_t i = 0; i < da1.data.size(); ++i)
            da1.data[i] *= 1.0 - tr.a1.data[i] * tr.a1.data[i];
        return conv3x3_s2_input_adjoint(tr.in, w1, c1, da1);
    }

    static Image conv3x3_s2_input_adjoint(const Image& in, const std::vector<double>& w,
                                          int out_ch, const Image& dout) {
        Image din(in.channels, in.height, in.width);
        for (int oc = 0; oc < out_ch; ++oc) {
            for (int oy = 0; oy < dout.height; ++oy) {
                for (int ox = 0; ox < dout.width; ++ox) {
                    double g = dout.at(oc, oy, ox);
                    if (g == 0.0) continue;
                    for (int ic = 0; ic < in.channels; ++ic) {
                        const double* wk =
                            w.data() + (static_cast<size_t>(oc) * in.channels + ic) * 9;
                        for (int ky = 0; ky < 3; ++ky) {
                            int y = 2 * oy + ky - 1;
                            if (y < 0 || y >= in.height) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                int x = 2 * ox + kx - 1;
                                if (x < 0 || x >= in.width) continue;
                                din.at(ic, y, x) += g * wk[ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
        return din;
    }
};

/// ||enc(I_r) - enc(I_g)||^2.
inline double feature_consistency_loss(const Image& rendered, const Image& generated,
                                       const FeatureEncoder& enc) {
    if (!rendered.same_shape(generated))
        throw std::invalid_argument("feature_consistency_loss: shape mismatch");
    auto fr = enc.encode(rendered);
    auto fg = enc.encode(generated);
    double s = 0.0;
    for (size_t i = 0; i < fr.size(); ++i) s += sqr(fr[i] - fg[i]);
    return s;
}

/// Loss plus its gradient with respect to the rendered image only.
inline double feature_consistency_backward(const Image& rendered, const Image& generated,
                                           const FeatureEncoder& enc, Image& drendered) {
    if (!rendered.same_shape(generated))
        throw std::invalid_argument("feature_consistency_loss: shape mismatch");
    FeatureEncoder::Trace tr;
    enc.encode_trace(rendered, tr);
    auto fg = enc.encode(generated);
    double loss = 0.0;
    std::vector<double> dfeat(tr.feat.size());
    for (size_t i = 0; i < tr.feat.size(); ++i) {
        double d = tr.feat[i] - fg[i];
        loss += d * d;
        dfeat[i] = 2.0 * d;
    }
    drendered = enc.backward(tr, dfeat);
    return loss;
}

// ---------------------------------------------------------------------------
// Depth alignment and loss
// ---------------------------------------------------------------------------

struct DepthAlignment {
    double scale = 1.0;
    double shift = 0.0;
};

/// Least-squares (a, b) minimizing sum_valid (a*rendered + b - mono)^2.
inline DepthAlignment depth_align(const std::vector<double>& mono,
                                  const std::vector<double>& rendered,
                                  const std::vector<uint8_t>& valid) {
    if (mono.size() != rendered.size() || mono.size() != valid.size())
        throw std::invalid_argument("depth_align: size mismatch");
    double n = 0.0, sr = 0.0, sm = 0.0, srr = 0.0, srm = 0.0;
    for (size_t i = 0; i < mono.size(); ++i) {
        if (!valid[i]) continue;
        n += 1.0;
        sr += rendered[i];
        sm += mono[i];
        srr += rendered[i] * rendered[i];
        srm += rendered[i] * mono[i];
    }
    if (n < 2.0) throw std::domain_error("depth_align: need at least 2 valid pixels");
    double denom = n * srr - sr * sr;
    double spread = srr / n - sqr(sr / n);
    if (spread <= 1e-12 * std::max(1.0, srr / n))
        throw std::domain_error("depth_align: constant rendered depth, scale indeterminate");
    DepthAlignment out;
    out.scale = (n * srm - sr * sm) / denom;
    out.shift = (sm - out.scale * sr) / n;
    return out;
}

/// mean_valid |a*rendered + b - mono| with (a, b) from depth_align held
/// constant during differentiation; gradients flow to `rendered` only.
inline double depth_loss(const std::vector<double>& mono, const std::vector<double>& rendered,
                         const std::vector<uint8_t>& valid, std::vector<double>* drendered = nullptr) {
    DepthAlignment al = depth_align(mono, rendered, valid);
    double n = 0.0;
    for (uint8_t v : valid) n += v ? 1.0 : 0.0;
    double loss = 0.0;
    if (drendered) drendered->assign(rendered.size(), 0.0);
    for (size_t i = 0; i < rendered.size(); ++i) {
        if (!valid[i]) continue;
        double r = al.scale * rendered[i] + al.shift - mono[i];
        loss += std::abs(r) / n;
        if (drendered)
            (*drendered)[i] = al.scale * (r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0)) / n;
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Sky and refinement losses
// ---------------------------------------------------------------------------

/// Mean rendered opacity over sky pixels; zero when the mask is empty.
inline double sky_loss(const Image& opacity, const std::vector<uint8_t>& sky_mask,
                       Image* dopacity = nullptr) {
    if (opacity.channels != 1 ||
        opacity.data.size() != sky_mask.size())
        throw std::invalid_argument("sky_loss: shape mismatch");
    double n = 0.0;
    for (uint8_t v : sky_mask) n += v ? 1.0 : 0.0;
    if (dopacity) *dopacity = Image(1, opacity.height, opacity.width);
    if (n == 0.0) return 0.0;
    double loss = 0.0;
    for (size_t i = 0; i < opacity.data.size(); ++i) {
        if (!sky_mask[i]) continue;
        loss += opacity.data[i] / n;
        if (dopacity) dopacity->data[i] = 1.0 / n;
    }
    return loss;
}

/// Mean squared error; the gradient goes to the rendered image only.
inline double refine_mse(const Image& rendered, const Image& refined, Image* drendered = nullptr) {
    if (!rendered.same_shape(refined)) throw std::invalid_argument("refine_mse: shape mismatch");
    double n = static_cast<double>(rendered.data.size());
    double loss = 0.0;
    if (drendered) *drendered = Image(rendered.channels, rendered.height, rendered.width);
    for (size_t i = 0; i < rendered.data.size(); ++i) {
        double d = rendered.data[i] - refined.data[i];
        loss += d * d / n;
        if (drendered) drendered->data[i] = 2.0 * d / n;
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Desk-scale monocular depth stand-in
// ---------------------------------------------------------------------------

/// Plays the role of a monocular depth predictor: returns the rasterized
/// layout depth under a hidden affine transform plus noise, so alignment is
/// exercised exactly as with a real network.
struct MonoDepthProvider {
    double hidden_scale = 0.5;
    double hidden_shift = 3.0;
    double noise_scale = 0.05;
    uint64_t seed = 42;

    struct Result {
        std::vector<double> depth;
        std::vector<uint8_t> valid;
    };

    Result predict(const ConditionMaps& maps, uint64_t view_tag = 0) const {
        Rng rng(mix_seed(seed, view_tag, 0x0de97au));
        Result out;
        out.depth.assign(maps.depth.size(), 0.0);
        out.valid.assign(maps.depth.size(), 0);
        for (size_t i = 0; i < maps.depth.size(); ++i) {
            if (maps.sky[i]) continue;
            out.valid[i] = 1;
            out.depth[i] = hidden_scale * maps.depth[i] + hidden_shift +
                           noise_scale * rng.normal();
        }
        return out;
    }
};

}  // namespace layoutforge
