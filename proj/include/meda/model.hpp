#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "meda/entropy.hpp"
#include "meda/kvcache.hpp"
#include "meda/matrix.hpp"
#include "meda/types.hpp"

namespace meda {

struct ModelConfig {
    std::size_t num_layers = 2;
    std::size_t num_heads = 2;
    std::size_t model_dim = 8;
    std::uint64_t seed = 0;
    // Attention logits divide by sqrt(head_dim) by default; this switches to
    // sqrt(model_dim) for the single-head reading of the scaling rule.
    bool scale_by_model_dim = false;

    std::size_t head_dim() const { return model_dim / num_heads; }

    double attention_scale() const {
        return std::sqrt(static_cast<double>(scale_by_model_dim ? model_dim : head_dim()));
    }

    void validate() const {
        if (num_layers == 0 || num_heads == 0 || model_dim == 0) {
            throw ContractError("ModelConfig: layers, heads and dim must be positive");
        }
        if (model_dim % num_heads != 0) {
            throw ContractError("ModelConfig: model_dim must be divisible by num_heads");
        }
    }
};

/// Ordered token embeddings with modality tags; row i is original position i.
struct PromptSequence {
    Matrix embeddings;  // prompt_len x model_dim
    std::vector<Modality> modality;
    std::vector<std::size_t> needle_positions;  // workload metadata, possibly empty

    std::size_t length() const { return embeddings.rows; }

    void validate() const {
        if (embeddings.rows == 0) {
            throw ContractError("PromptSequence: at least one token required");
        }
        if (modality.size() != embeddings.rows) {
            throw ShapeError("PromptSequence: modality tag count differs from token count");
        }
    }
};

struct LayerWeights {
    Matrix w_q, w_k, w_v;  // model_dim x model_dim
};

/// Deterministic weights for (seed, layer): uniform(-0.1, 0.1), magnitude
/// small enough that desk-scale softmax stays unsaturated.
inline LayerWeights layer_weights(const ModelConfig& cfg, std::size_t layer) {
    cfg.validate();
    constexpr double kWeightRange = 0.1;
    LayerWeights w;
    Matrix* mats[3] = {&w.w_q, &w.w_k, &w.w_v};
    for (std::size_t which = 0; which < 3; ++which) {
        *mats[which] = random_uniform_matrix(cfg.model_dim, cfg.model_dim, -kWeightRange,
                                             kWeightRange,
                                             mix_seed(cfg.seed, layer * 3 + which + 1));
    }
    return w;
}

struct QkvProjection {
    Matrix q, k, v;  // tokens x model_dim
};

inline QkvProjection project_qkv(const Matrix& x, const LayerWeights& w) {
    if (x.cols != w.w_q.rows) {
        throw ShapeError("project_qkv: embedding width " + std::to_string(x.cols) +
                         " does not match weight dim " + std::to_string(w.w_q.rows));
    }
    return {matmul(x, w.w_q), matmul(x, w.w_k), matmul(x, w.w_v)};
}

/// Everything the prompt-encoding pass produces: the per-layer caches, the
/// causal per-head attention, the raw Q/K projections (for the entropy
/// pass and trace dumps), and the per-token readout.
struct EncodeResult {
    std::vector<LayerKVCache> caches;
    std::vector<std::vector<Matrix>> attention;  // [layer][head], prompt_len x prompt_len
    std::vector<Matrix> layer_q;                 // per layer, prompt_len x model_dim
    std::vector<Matrix> layer_k;
    Matrix readout;  // prompt_len x model_dim, last layer's attention output

    /// Average of the per-head causal attention for one layer; rows stay
    /// normalized (they are convex combinations of distributions).
    Matrix head_averaged_attention(std::size_t layer) const {
        const std::vector<Matrix>& heads = attention[layer];
        Matrix avg(heads[0].rows, heads[0].cols);
        for (const Matrix& a : heads) {
            for (std::size_t i = 0; i < avg.data.size(); ++i) {
                avg.data[i] += a.data[i];
            }
        }
        const double inv = 1.0 / static_cast<double>(heads.size());
        for (double& v : avg.data) {
            v *= inv;
        }
        return avg;
    }

    /// Output embedding of the last prompt token; decoding starts from it.
    Matrix start_embedding() const {
        Matrix out(1, readout.cols);
        auto src = readout.row(readout.rows - 1);
        std::copy(src.begin(), src.end(), out.row(0).begin());
        return out;
    }
};

/// Prompt encoding: per layer, project Q/K/V, store per-head K/V in the
/// cache, compute causal attention and chain layer inputs through
/// attention-output + residual. The per-token readout is the last layer's
/// attention output, before its residual.
inline EncodeResult prompt_encode(const PromptSequence& prompt, const ModelConfig& cfg) {
    cfg.validate();
    prompt.validate();
    const std::size_t hd = cfg.head_dim();
    const double scale = cfg.attention_scale();

    EncodeResult out;
    Matrix x = prompt.embeddings;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights w = layer_weights(cfg, l);
        QkvProjection p = project_qkv(x, w);

        LayerKVCache cache;
        cache.layer_index = l;
        cache.keys.reserve(cfg.num_heads);
        cache.values.reserve(cfg.num_heads);
        std::vector<Matrix> head_attn;
        head_attn.reserve(cfg.num_heads);

        Matrix attn_out(x.rows, cfg.model_dim);
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            Matrix qh = detail::head_slice(p.q, h, hd);
            Matrix kh = detail::head_slice(p.k, h, hd);
            Matrix vh = detail::head_slice(p.v, h, hd);
            Matrix attn = causal_softmax_rows(matmul(qh, detail::transpose(kh)), scale);
            Matrix oh = matmul(attn, vh);
            for (std::size_t i = 0; i < x.rows; ++i) {
                auto src = oh.row(i);
                auto dst = attn_out.row(i);
                for (std::size_t j = 0; j < hd; ++j) {
                    dst[h * hd + j] = src[j];
                }
            }
            cache.keys.push_back(std::move(kh));
            cache.values.push_back(std::move(vh));
            head_attn.push_back(std::move(attn));
        }
        for (std::size_t i = 0; i < prompt.length(); ++i) {
            cache.meta.push_back({i, prompt.modality[i], 1});
        }

        out.caches.push_back(std::move(cache));
        out.attention.push_back(std::move(head_attn));
        out.layer_q.push_back(std::move(p.q));
        out.layer_k.push_back(std::move(p.k));

        if (l + 1 == cfg.num_layers) {
            out.readout = std::move(attn_out);
        } else {
            // residual connection; the block is attention-only
            for (std::size_t i = 0; i < x.data.size(); ++i) {
                x.data[i] += attn_out.data[i];
            }
        }
    }
    return out;
}

/// One decode step: appends the new token's K/V to every layer cache and
/// returns the last layer's attention output (1 x model_dim) over the
/// updated cache.
inline Matrix decode_step(const Matrix& token, std::vector<LayerKVCache>& caches,
                          const ModelConfig& cfg, Modality modality = Modality::Text) {
    cfg.validate();
    if (token.rows != 1 || token.cols != cfg.model_dim) {
        throw ShapeError("decode_step: token must be 1 x model_dim");
    }
    if (caches.size() != cfg.num_layers) {
        throw ContractError("decode_step: cache count does not match num_layers");
    }
    for (const LayerKVCache& c : caches) {
        if (c.token_count() == 0) {
            throw ContractError("decode_step: empty cache");
        }
    }
    const std::size_t hd = cfg.head_dim();
    const double scale = cfg.attention_scale();

    Matrix x = token;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights w = layer_weights(cfg, l);
        QkvProjection p = project_qkv(x, w);
        LayerKVCache& cache = caches[l];

        const std::size_t position =
            cache.meta.back().original_position + 1;  // positions keep growing past the prompt
        cache.append_token(p.k, p.v, {position, modality, 1});

        Matrix attn_out(1, cfg.model_dim);
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            Matrix qh = detail::head_slice(p.q, h, hd);
            Matrix scores = matmul(qh, detail::transpose(cache.keys[h]));
            Matrix attn = softmax_rows(scores, scale);
            Matrix oh = matmul(attn, cache.values[h]);
            for (std::size_t j = 0; j < hd; ++j) {
                attn_out.at(0, h * hd + j) = oh.at(0, j);
            }
        }
        if (l + 1 == cfg.num_layers) {
            return attn_out;
        }
        for (std::size_t j = 0; j < cfg.model_dim; ++j) {
            x.at(0, j) += attn_out.at(0, j);
        }
    }
    return x;
}

/// Greedy rollout: each step feeds the previous output embedding back in.
/// Returns steps x model_dim outputs.
inline Matrix decode_n(const Matrix& start, std::size_t steps, std::vector<LayerKVCache>& caches,
                       const ModelConfig& cfg) {
    if (steps == 0) {
        throw ContractError("decode_n: steps must be >= 1");
    }
    Matrix outputs(steps, cfg.model_dim);
    Matrix x = start;
    for (std::size_t t = 0; t < steps; ++t) {
        x = decode_step(x, caches, cfg);
        auto src = x.row(0);
        std::copy(src.begin(), src.end(), outputs.row(t).begin());
    }
    return outputs;
}

}  // namespace meda
