#pragma once

#include <cstdint>
#include <vector>

#include "meda/matrix.hpp"
#include "meda/types.hpp"

namespace meda {

/// Head-averaged cross-modal attention for one layer. Rows of
/// `text_to_vision` are text queries over vision keys; `vision_to_text` is
/// the reverse direction. Every row is a probability distribution.
struct CrossModalAttention {
    Matrix text_to_vision;  // n_text x n_vision
    Matrix vision_to_text;  // n_vision x n_text
    std::size_t layer_index = 0;
};

/// Signed per-layer entropy terms. `text_to_vision` and `vision_to_text`
/// carry the mean sum of p*ln(p) over the respective matrix (non-positive);
/// `cross_modal` is the negated total, so it is >= 0 and grows with more
/// diffuse attention.
struct LayerEntropy {
    double text_to_vision = 0.0;
    double vision_to_text = 0.0;
    double cross_modal = 0.0;
};

struct EntropyProfile {
    std::vector<double> text_to_vision;
    std::vector<double> vision_to_text;
    std::vector<double> cross_modal;
    std::vector<std::uint8_t> degenerate;  // 1 when a modality was empty at that layer
    std::size_t n_text = 0;
    std::size_t n_vision = 0;

    std::size_t num_layers() const { return cross_modal.size(); }
};

namespace detail {

/// Copies the head's column block out of a tokens x model_dim projection.
inline Matrix head_slice(const Matrix& m, std::size_t head, std::size_t head_dim) {
    Matrix out(m.rows, head_dim);
    const std::size_t offset = head * head_dim;
    for (std::size_t i = 0; i < m.rows; ++i) {
        auto src = m.row(i);
        auto dst = out.row(i);
        for (std::size_t j = 0; j < head_dim; ++j) {
            dst[j] = src[offset + j];
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j) {
            out.at(j, i) = m.at(i, j);
        }
    }
    return out;
}

inline void renormalize_rows(Matrix& m) {
    for (std::size_t i = 0; i < m.rows; ++i) {
        auto r = m.row(i);
        double sum = 0.0;
        for (double v : r) {
            sum += v;
        }
        if (sum > 0.0) {
            for (double& v : r) {
                v /= sum;
            }
        }
    }
}

/// Per-head softmax of q_h k_h^T / scale, averaged over heads, rows
/// renormalized. When `causal_positions` is non-null, key j is masked for
/// query i unless key_pos[j] <= query_pos[i]; fully masked rows fall back
/// to uniform.
inline Matrix head_averaged_attention(const Matrix& q, const Matrix& k, std::size_t num_heads,
                                      double scale,
                                      const std::vector<std::size_t>* query_pos = nullptr,
                                      const std::vector<std::size_t>* key_pos = nullptr) {
    if (q.cols != k.cols) {
        throw ShapeError("head_averaged_attention: projection width mismatch");
    }
    if (num_heads == 0 || q.cols % num_heads != 0) {
        throw ShapeError("head_averaged_attention: width not divisible by head count");
    }
    const std::size_t head_dim = q.cols / num_heads;
    Matrix avg(q.rows, k.rows);
    for (std::size_t h = 0; h < num_heads; ++h) {
        Matrix qh = head_slice(q, h, head_dim);
        Matrix kh = head_slice(k, h, head_dim);
        Matrix scores = matmul(qh, transpose(kh));
        if (query_pos != nullptr) {
            for (std::size_t i = 0; i < scores.rows; ++i) {
                bool any = false;
                for (std::size_t j = 0; j < scores.cols; ++j) {
                    if ((*key_pos)[j] <= (*query_pos)[i]) {
                        any = true;
                    } else {
                        scores.at(i, j) = -1e300;
                    }
                }
                if (!any) {
                    for (std::size_t j = 0; j < scores.cols; ++j) {
                        scores.at(i, j) = 0.0;
                    }
                }
            }
        }
        Matrix attn = softmax_rows(scores, scale);
        for (std::size_t idx = 0; idx < avg.data.size(); ++idx) {
            avg.data[idx] += attn.data[idx];
        }
    }
    const double inv = 1.0 / static_cast<double>(num_heads);
    for (double& v : avg.data) {
        v *= inv;
    }
    renormalize_rows(avg);
    return avg;
}

}  // namespace detail

/// Cross-modal attention between the text and vision partitions of a
/// layer's Q/K projections (tokens x model_dim). Scores are computed per
/// head, softmaxed, then averaged over heads and renormalized.
inline CrossModalAttention cross_modal_attention(const Matrix& q_text, const Matrix& k_text,
                                                 const Matrix& q_vision, const Matrix& k_vision,
                                                 std::size_t num_heads, double scale,
                                                 std::size_t layer_index = 0,
                                                 const std::vector<std::size_t>* text_pos = nullptr,
                                                 const std::vector<std::size_t>* vision_pos = nullptr) {
    if (q_text.rows == 0 || q_vision.rows == 0) {
        throw ContractError("cross_modal_attention: a modality has zero tokens");
    }
    CrossModalAttention out;
    out.layer_index = layer_index;
    out.text_to_vision =
        detail::head_averaged_attention(q_text, k_vision, num_heads, scale, text_pos, vision_pos);
    out.vision_to_text =
        detail::head_averaged_attention(q_vision, k_text, num_heads, scale, vision_pos, text_pos);
    return out;
}

/// E_tv and E_vt are the mean over rows of sum_j p*ln(p) for each direction
/// (each <= 0); the layer entropy is -(E_tv + E_vt), the sum of the two mean
/// row entropies. Bounds: 0 at one-hot rows, ln(n_vision) + ln(n_text) at
/// uniform rows.
inline LayerEntropy layer_entropy(const CrossModalAttention& a) {
    LayerEntropy e;
    e.text_to_vision = -mean_row_entropy(a.text_to_vision);
    e.vision_to_text = -mean_row_entropy(a.vision_to_text);
    e.cross_modal = -(e.text_to_vision + e.vision_to_text);
    return e;
}

/// Per-layer Q/K projections plus shared modality tags, as produced by
/// prompt encoding or loaded from a trace.
struct LayerProjections {
    std::vector<Matrix> q;  // per layer, tokens x model_dim
    std::vector<Matrix> k;  // per layer, tokens x model_dim
    std::vector<Modality> modality;
    std::vector<std::size_t> positions;  // original token positions; empty = identity
    std::size_t num_heads = 1;
    double scale = 1.0;
    bool causal_cross_attention = false;
};

/// Cross-modal entropy per layer. Layers where one modality is empty are
/// flagged degenerate and fall back to the mean row entropy of the
/// head-averaged causal self-attention, so allocation still has a signal
/// on unimodal prompts.
inline EntropyProfile profile_layers(const LayerProjections& in) {
    if (in.q.empty() || in.q.size() != in.k.size()) {
        throw ContractError("profile_layers: no layers or Q/K layer count mismatch");
    }
    std::vector<std::size_t> text_idx, vision_idx;
    for (std::size_t i = 0; i < in.modality.size(); ++i) {
        (in.modality[i] == Modality::Text ? text_idx : vision_idx).push_back(i);
    }
    std::vector<std::size_t> positions = in.positions;
    if (positions.empty()) {
        positions.resize(in.modality.size());
        for (std::size_t i = 0; i < positions.size(); ++i) {
            positions[i] = i;
        }
    }

    EntropyProfile prof;
    prof.n_text = text_idx.size();
    prof.n_vision = vision_idx.size();

    auto gather_rows = [](const Matrix& m, const std::vector<std::size_t>& idx) {
        Matrix out(idx.size(), m.cols);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto src = m.row(idx[i]);
            std::copy(src.begin(), src.end(), out.row(i).begin());
        }
        return out;
    };

    std::vector<std::size_t> text_pos, vision_pos;
    for (std::size_t i : text_idx) {
        text_pos.push_back(positions[i]);
    }
    for (std::size_t i : vision_idx) {
        vision_pos.push_back(positions[i]);
    }

    const bool degenerate = text_idx.empty() || vision_idx.empty();
    for (std::size_t l = 0; l < in.q.size(); ++l) {
        if (in.modality.size() != in.q[l].rows || in.q[l].rows != in.k[l].rows) {
            throw ShapeError("profile_layers: tag/row count mismatch at layer " + std::to_string(l));
        }
        if (degenerate) {
            Matrix self = detail::head_averaged_attention(in.q[l], in.k[l], in.num_heads, in.scale,
                                                          &positions, &positions);
            const double h = mean_row_entropy(self);
            prof.text_to_vision.push_back(0.0);
            prof.vision_to_text.push_back(0.0);
            prof.cross_modal.push_back(h);
            prof.degenerate.push_back(1);
            continue;
        }
        CrossModalAttention cma = cross_modal_attention(
            gather_rows(in.q[l], text_idx), gather_rows(in.k[l], text_idx),
            gather_rows(in.q[l], vision_idx), gather_rows(in.k[l], vision_idx), in.num_heads,
            in.scale, l, in.causal_cross_attention ? &text_pos : nullptr,
            in.causal_cross_attention ? &vision_pos : nullptr);
        LayerEntropy e = layer_entropy(cma);
        prof.text_to_vision.push_back(e.text_to_vision);
        prof.vision_to_text.push_back(e.vision_to_text);
        prof.cross_modal.push_back(e.cross_modal);
        prof.degenerate.push_back(0);
    }
    return prof;
}

}  // namespace meda
