#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pacr/error.hpp"
#include "pacr/rng.hpp"

namespace pacr {

/// How the [0,1] direction-agreement matrix reweights cross-attention.
/// `logits` multiplies the pre-softmax logits elementwise (the literal
/// equation); `probabilities` multiplies post-softmax rows and renormalizes.
enum class ReweightMode { logits, probabilities };

struct FeedForward {
    Eigen::MatrixXd w1;  // d x h
    Eigen::VectorXd b1;  // h
    Eigen::MatrixXd w2;  // h x d
    Eigen::VectorXd b2;  // d
};

/// Parameters of one attention direction (scene->CAD or CAD->scene).
struct DirectionParams {
    Eigen::MatrixXd w_q, w_k, w_v;  // d x d projections
    Eigen::MatrixXd w_emb;          // 3 x d direction embedding
    Eigen::VectorXd b_emb;          // d
    FeedForward ffn;
};

/// Fine-level parameters: the points stage has no cross-attention, only a
/// positional embedding and a feed-forward update, with its own weights.
struct FineParams {
    Eigen::MatrixXd w_emb;  // 3 x d
    Eigen::VectorXd b_emb;  // d
    FeedForward ffn;
};

struct AttentionLayer {
    DirectionParams scene_to_cad;
    DirectionParams cad_to_scene;
    FineParams fine_scene;
    FineParams fine_cad;
};

struct AttentionWeights {
    int feature_dim = 0;
    int hidden_dim = 0;
    std::vector<AttentionLayer> layers;

    int layer_count() const { return static_cast<int>(layers.size()); }

    /// Seeded uniform init in [-1/sqrt(d), 1/sqrt(d)] over every tensor, in a
    /// fixed traversal order.
    static AttentionWeights init(int n_layers, int feature_dim, int hidden_dim,
                                 std::uint64_t seed) {
        require(n_layers >= 0 && feature_dim > 0 && hidden_dim > 0, "invalid attention dims");
        AttentionWeights w;
        w.feature_dim = feature_dim;
        w.hidden_dim = hidden_dim;
        Rng rng = Rng::stream(seed, "weights");
        const double bound = 1.0 / std::sqrt(static_cast<double>(feature_dim));
        auto fill = [&](Eigen::MatrixXd& m, Eigen::Index rows, Eigen::Index cols) {
            m.resize(rows, cols);
            for (Eigen::Index r = 0; r < rows; ++r)
                for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-bound, bound);
        };
        auto fill_vec = [&](Eigen::VectorXd& v, Eigen::Index n) {
            v.resize(n);
            for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.uniform(-bound, bound);
        };
        w.layers.resize(n_layers);
        for (auto& layer : w.layers) {
            for (DirectionParams* p : {&layer.scene_to_cad, &layer.cad_to_scene}) {
                fill(p->w_q, feature_dim, feature_dim);
                fill(p->w_k, feature_dim, feature_dim);
                fill(p->w_v, feature_dim, feature_dim);
                fill(p->w_emb, 3, feature_dim);
                fill_vec(p->b_emb, feature_dim);
                fill(p->ffn.w1, feature_dim, hidden_dim);
                fill_vec(p->ffn.b1, hidden_dim);
                fill(p->ffn.w2, hidden_dim, feature_dim);
                fill_vec(p->ffn.b2, feature_dim);
            }
            for (FineParams* p : {&layer.fine_scene, &layer.fine_cad}) {
                fill(p->w_emb, 3, feature_dim);
                fill_vec(p->b_emb, feature_dim);
                fill(p->ffn.w1, feature_dim, hidden_dim);
                fill_vec(p->ffn.b1, hidden_dim);
                fill(p->ffn.w2, hidden_dim, feature_dim);
                fill_vec(p->ffn.b2, feature_dim);
            }
        }
        return w;
    }

    bool all_finite() const {
        auto ok = [](const Eigen::MatrixXd& m) { return m.allFinite(); };
        auto ffn_ok = [&](const FeedForward& f) {
            return ok(f.w1) && f.b1.allFinite() && ok(f.w2) && f.b2.allFinite();
        };
        for (const auto& layer : layers) {
            for (const DirectionParams* p : {&layer.scene_to_cad, &layer.cad_to_scene})
                if (!(ok(p->w_q) && ok(p->w_k) && ok(p->w_v) && ok(p->w_emb) &&
                      p->b_emb.allFinite() && ffn_ok(p->ffn)))
                    return false;
            for (const FineParams* p : {&layer.fine_scene, &layer.fine_cad})
                if (!(ok(p->w_emb) && p->b_emb.allFinite() && ffn_ok(p->ffn))) return false;
        }
        return true;
    }
};

/// Features paired with their positional embeddings for one cloud side.
struct EmbeddedFeatures {
    Eigen::MatrixXd features;    // n x d
    Eigen::MatrixXd embeddings;  // n x d

    static EmbeddedFeatures plain(const Eigen::MatrixXd& f) {
        return {f, Eigen::MatrixXd::Zero(f.rows(), f.cols())};
    }
};

/// Maps positional encodings (or raw coordinate offsets) into the feature
/// embedding space: row-wise enc * w_emb + b_emb.
inline Eigen::MatrixXd embed_directions(const Eigen::MatrixX3d& directions,
                                        const DirectionParams& p) {
    return (directions * p.w_emb).rowwise() + p.b_emb.transpose();
}

inline Eigen::MatrixXd embed_directions(const Eigen::MatrixX3d& directions,
                                        const FineParams& p) {
    return (directions * p.w_emb).rowwise() + p.b_emb.transpose();
}

namespace detail {

inline Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& logits) {
    Eigen::MatrixXd out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        Eigen::ArrayXd e = (logits.row(i).array() - mx).exp();
        out.row(i) = (e / e.sum()).matrix();
    }
    return out;
}

}  // namespace detail

/// Forward intermediates retained for the backward pass.
struct PacaCache {
    bool valid = false;
    ReweightMode mode = ReweightMode::logits;
    Eigen::MatrixXd x_src, x_dst;   // embeddings + features
    Eigen::MatrixXd feat_dst;       // raw dst features (value path)
    Eigen::MatrixXd q, k, v;
    Eigen::MatrixXd logits, align;  // pre-reweight logits, [0,1] reweight matrix
    Eigen::MatrixXd softmax_plain;  // probabilities mode only
    Eigen::VectorXd renorm;         // probabilities mode only
    Eigen::MatrixXd attn;           // final attention map
    Eigen::MatrixXd h, z1, r1;      // residual sum and feed-forward intermediates
};

/// Position-aware cross-attention, one direction. The alignment matrix
/// reweights attention between `src` queries and `dst` keys; output is the
/// feed-forward of the residual sum, phi(Q + A V).
inline Eigen::MatrixXd paca_forward(const EmbeddedFeatures& src, const EmbeddedFeatures& dst,
                                    const Eigen::MatrixXd& align, const DirectionParams& p,
                                    ReweightMode mode = ReweightMode::logits,
                                    PacaCache* cache = nullptr) {
    require(src.features.rows() == src.embeddings.rows() &&
                dst.features.rows() == dst.embeddings.rows(),
            "shape mismatch: features vs embeddings");
    require(align.rows() == src.features.rows() && align.cols() == dst.features.rows(),
            "shape mismatch: alignment matrix");
    require(src.features.cols() == p.w_q.rows() && dst.features.cols() == p.w_k.rows(),
            "shape mismatch: feature dim vs projections");

    const double scale = 1.0 / std::sqrt(static_cast<double>(p.w_q.cols()));
    const Eigen::MatrixXd x_src = src.features + src.embeddings;
    const Eigen::MatrixXd x_dst = dst.features + dst.embeddings;
    const Eigen::MatrixXd q = x_src * p.w_q;
    const Eigen::MatrixXd k = x_dst * p.w_k;
    const Eigen::MatrixXd v = dst.features * p.w_v;
    const Eigen::MatrixXd logits = (q * k.transpose()) * scale;

    Eigen::MatrixXd attn;
    Eigen::MatrixXd softmax_plain;
    Eigen::VectorXd renorm;
    if (mode == ReweightMode::logits) {
        attn = detail::row_softmax(logits.cwiseProduct(align));
    } else {
        softmax_plain = detail::row_softmax(logits);
        const Eigen::MatrixXd t = softmax_plain.cwiseProduct(align);
        renorm = t.rowwise().sum();
        attn.resize(t.rows(), t.cols());
        for (Eigen::Index i = 0; i < t.rows(); ++i) {
            // A fully suppressed row falls back to the plain softmax.
            attn.row(i) = renorm(i) > 1e-300 ? (t.row(i) / renorm(i)).eval()
                                             : softmax_plain.row(i).eval();
        }
    }

    const Eigen::MatrixXd h = q + attn * v;
    const Eigen::MatrixXd z1 = (h * p.ffn.w1).rowwise() + p.ffn.b1.transpose();
    const Eigen::MatrixXd r1 = z1.cwiseMax(0.0);
    Eigen::MatrixXd out = (r1 * p.ffn.w2).rowwise() + p.ffn.b2.transpose();

    if (cache) {
        cache->valid = true;
        cache->mode = mode;
        cache->x_src = x_src;
        cache->x_dst = x_dst;
        cache->feat_dst = dst.features;
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->logits = logits;
        cache->align = align;
        cache->softmax_plain = softmax_plain;
        cache->renorm = renorm;
        cache->attn = attn;
        cache->h = h;
        cache->z1 = z1;
        cache->r1 = r1;
    }
    return out;
}

/// Gradient accumulators mirroring DirectionParams.
struct DirectionGrads {
    Eigen::MatrixXd w_q, w_k, w_v, w_emb;
    Eigen::VectorXd b_emb;
    Eigen::MatrixXd ffn_w1, ffn_w2;
    Eigen::VectorXd ffn_b1, ffn_b2;

    static DirectionGrads zeros(int d, int h) {
        DirectionGrads g;
        g.w_q = Eigen::MatrixXd::Zero(d, d);
        g.w_k = Eigen::MatrixXd::Zero(d, d);
        g.w_v = Eigen::MatrixXd::Zero(d, d);
        g.w_emb = Eigen::MatrixXd::Zero(3, d);
        g.b_emb = Eigen::VectorXd::Zero(d);
        g.ffn_w1 = Eigen::MatrixXd::Zero(d, h);
        g.ffn_b1 = Eigen::VectorXd::Zero(h);
        g.ffn_w2 = Eigen::MatrixXd::Zero(h, d);
        g.ffn_b2 = Eigen::VectorXd::Zero(d);
        return g;
    }
};

/// Gradients flowing back into the layer inputs.
struct PacaInputGrads {
    Eigen::MatrixXd d_feat_src, d_emb_src;
    Eigen::MatrixXd d_feat_dst, d_emb_dst;
};

/// Exact reverse-mode gradients of paca_forward for every parameter and both
/// inputs. Requires the cache written by the forward call.
inline PacaInputGrads paca_backward(const PacaCache& cache, const DirectionParams& p,
                                    const Eigen::MatrixXd& d_out, DirectionGrads& g) {
    require(cache.valid, "missing forward cache");
    require(d_out.rows() == cache.h.rows() && d_out.cols() == p.ffn.b2.size(),
            "shape mismatch: upstream gradient");

    const double scale = 1.0 / std::sqrt(static_cast<double>(p.w_q.cols()));

    // Feed-forward.
    const Eigen::MatrixXd d_r1 = d_out * p.ffn.w2.transpose();
    g.ffn_w2 += cache.r1.transpose() * d_out;
    g.ffn_b2 += d_out.colwise().sum().transpose();
    const Eigen::MatrixXd d_z1 =
        d_r1.cwiseProduct((cache.z1.array() > 0.0).cast<double>().matrix());
    g.ffn_w1 += cache.h.transpose() * d_z1;
    g.ffn_b1 += d_z1.colwise().sum().transpose();
    const Eigen::MatrixXd d_h = d_z1 * p.ffn.w1.transpose();

    // Residual sum H = Q + A V.
    Eigen::MatrixXd d_q = d_h;
    const Eigen::MatrixXd d_attn = d_h * cache.v.transpose();
    const Eigen::MatrixXd d_v = cache.attn.transpose() * d_h;

    // Attention map back to pre-reweight logits.
    Eigen::MatrixXd d_logits(cache.logits.rows(), cache.logits.cols());
    if (cache.mode == ReweightMode::logits) {
        for (Eigen::Index i = 0; i < d_attn.rows(); ++i) {
            const double dot = d_attn.row(i).dot(cache.attn.row(i));
            d_logits.row(i) =
                cache.attn.row(i).cwiseProduct((d_attn.row(i).array() - dot).matrix());
        }
        d_logits = d_logits.cwiseProduct(cache.align);
    } else {
        Eigen::MatrixXd d_s(d_attn.rows(), d_attn.cols());
        for (Eigen::Index i = 0; i < d_attn.rows(); ++i) {
            if (cache.renorm(i) > 1e-300) {
                const double dot = d_attn.row(i).dot(cache.attn.row(i));
                const Eigen::RowVectorXd d_t =
                    ((d_attn.row(i).array() - dot) / cache.renorm(i)).matrix();
                d_s.row(i) = d_t.cwiseProduct(cache.align.row(i));
            } else {
                d_s.row(i) = d_attn.row(i);
            }
        }
        for (Eigen::Index i = 0; i < d_s.rows(); ++i) {
            const double dot = d_s.row(i).dot(cache.softmax_plain.row(i));
            d_logits.row(i) = cache.softmax_plain.row(i).cwiseProduct(
                (d_s.row(i).array() - dot).matrix());
        }
    }

    d_q += (d_logits * cache.k) * scale;
    const Eigen::MatrixXd d_k = (d_logits.transpose() * cache.q) * scale;

    // Projections.
    g.w_q += cache.x_src.transpose() * d_q;
    g.w_k += cache.x_dst.transpose() * d_k;
    g.w_v += cache.feat_dst.transpose() * d_v;

    PacaInputGrads in;
    in.d_emb_src = d_q * p.w_q.transpose();
    in.d_feat_src = in.d_emb_src;
    in.d_emb_dst = d_k * p.w_k.transpose();
    in.d_feat_dst = in.d_emb_dst + d_v * p.w_v.transpose();
    return in;
}

/// Gradients of the fine-stage parameters.
struct FineGrads {
    Eigen::MatrixXd w_emb;
    Eigen::VectorXd b_emb;
    Eigen::MatrixXd ffn_w1, ffn_w2;
    Eigen::VectorXd ffn_b1, ffn_b2;

    static FineGrads zeros(int d, int h) {
        FineGrads g;
        g.w_emb = Eigen::MatrixXd::Zero(3, d);
        g.b_emb = Eigen::VectorXd::Zero(d);
        g.ffn_w1 = Eigen::MatrixXd::Zero(d, h);
        g.ffn_b1 = Eigen::VectorXd::Zero(h);
        g.ffn_w2 = Eigen::MatrixXd::Zero(h, d);
        g.ffn_b2 = Eigen::VectorXd::Zero(d);
        return g;
    }
};

/// Gradient of embed_directions into the embedding parameters.
inline void embed_backward(const Eigen::MatrixX3d& directions, const Eigen::MatrixXd& d_emb,
                           DirectionGrads& g) {
    g.w_emb += directions.transpose() * d_emb;
    g.b_emb += d_emb.colwise().sum().transpose();
}

inline void embed_backward(const Eigen::MatrixX3d& directions, const Eigen::MatrixXd& d_emb,
                           FineGrads& g) {
    g.w_emb += directions.transpose() * d_emb;
    g.b_emb += d_emb.colwise().sum().transpose();
}

/// Both attention directions computed from the pre-update features: the CAD
/// side sees the transposed alignment matrix.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> paca_bidirectional(
    const EmbeddedFeatures& scene, const EmbeddedFeatures& cad, const Eigen::MatrixXd& align,
    const AttentionLayer& layer, ReweightMode mode = ReweightMode::logits,
    PacaCache* scene_cache = nullptr, PacaCache* cad_cache = nullptr) {
    Eigen::MatrixXd scene_out =
        paca_forward(scene, cad, align, layer.scene_to_cad, mode, scene_cache);
    Eigen::MatrixXd cad_out = paca_forward(cad, scene, align.transpose().eval(),
                                           layer.cad_to_scene, mode, cad_cache);
    return {std::move(scene_out), std::move(cad_out)};
}

/// Fine-level feature update: no cross-attention, a residual feed-forward of
/// the embedded features, F + phi(F + E). The residual keeps per-point
/// identity through untrained layers, so mutual-nearest-neighbor matching
/// stays meaningful while training shapes the positional term.
struct FineCache {
    bool valid = false;
    Eigen::MatrixXd h, z1, r1;
};

inline Eigen::MatrixXd fine_forward(const Eigen::MatrixXd& features,
                                    const Eigen::MatrixXd& embeddings, const FineParams& p,
                                    FineCache* cache = nullptr) {
    require(features.rows() == embeddings.rows() && features.cols() == embeddings.cols(),
            "shape mismatch: fine update");
    const Eigen::MatrixXd h = features + embeddings;
    const Eigen::MatrixXd z1 = (h * p.ffn.w1).rowwise() + p.ffn.b1.transpose();
    const Eigen::MatrixXd r1 = z1.cwiseMax(0.0);
    Eigen::MatrixXd out = features + ((r1 * p.ffn.w2).rowwise() + p.ffn.b2.transpose());
    if (cache) {
        cache->valid = true;
        cache->h = h;
        cache->z1 = z1;
        cache->r1 = r1;
    }
    return out;
}

struct FineInputGrads {
    Eigen::MatrixXd d_features;
    Eigen::MatrixXd d_embeddings;
};

inline FineInputGrads fine_backward(const FineCache& cache, const FineParams& p,
                                    const Eigen::MatrixXd& d_out, FineGrads& g) {
    require(cache.valid, "missing forward cache");
    const Eigen::MatrixXd d_r1 = d_out * p.ffn.w2.transpose();
    g.ffn_w2 += cache.r1.transpose() * d_out;
    g.ffn_b2 += d_out.colwise().sum().transpose();
    const Eigen::MatrixXd d_z1 =
        d_r1.cwiseProduct((cache.z1.array() > 0.0).cast<double>().matrix());
    g.ffn_w1 += cache.h.transpose() * d_z1;
    g.ffn_b1 += d_z1.colwise().sum().transpose();
    FineInputGrads in;
    in.d_embeddings = d_z1 * p.ffn.w1.transpose();
    in.d_features = d_out + in.d_embeddings;
    return in;
}

}  // namespace pacr
