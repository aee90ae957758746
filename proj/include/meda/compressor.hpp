#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "meda/allocator.hpp"
#include "meda/kvcache.hpp"
#include "meda/matrix.hpp"
#include "meda/types.hpp"

namespace meda {

/// Outcome of KV pair selection for one layer. `conserved` and
/// `less_important` partition 0..prompt_len-1; conserved is in original
/// positional order and contains the recent window.
struct SelectionResult {
    std::vector<std::size_t> conserved;
    std::vector<std::size_t> less_important;
    std::vector<double> scores;  // boosted scores used for the ranking
};

/// Many-to-one mapping from less-important tokens to conserved ones.
/// target[i] indexes into SelectionResult::conserved.
struct MergeAssignment {
    std::vector<std::size_t> target;
    std::vector<std::size_t> group_sizes;  // per conserved token
};

/// Column sums of the causal prompt attention: how much total attention
/// each token received from all queries. Raw sums, no lifetime
/// normalization; the recent window compensates for the early-token bias.
inline std::vector<double> cumulative_scores(const Matrix& attn) {
    if (attn.rows != attn.cols || attn.rows == 0) {
        throw ShapeError("cumulative_scores: square non-empty attention required");
    }
    std::vector<double> scores(attn.cols, 0.0);
    for (std::size_t i = 0; i < attn.rows; ++i) {
        auto row = attn.row(i);
        for (std::size_t j = 0; j < attn.cols; ++j) {
            scores[j] += row[j];
        }
    }
    return scores;
}

/// Adds the pre-boost global maximum to every text token's score, so every
/// text token outranks every vision token in the selection pool.
inline std::vector<double> boost_text(std::vector<double> scores,
                                      const std::vector<std::size_t>& text_indices) {
    if (scores.empty() || text_indices.empty()) {
        return scores;
    }
    const double peak = *std::max_element(scores.begin(), scores.end());
    for (std::size_t i : text_indices) {
        if (i >= scores.size()) {
            throw ShapeError("boost_text: text index out of range");
        }
        scores[i] += peak;
    }
    return scores;
}

/// Keeps the last `recent` tokens unconditionally plus the `important`
/// highest-scored tokens among the rest (ties to the lower index). If the
/// budget meets or exceeds the prompt, everything is conserved.
inline SelectionResult select_conserved(const std::vector<double>& scores, std::size_t recent,
                                        std::size_t important) {
    const std::size_t n = scores.size();
    if (n == 0) {
        throw ContractError("select_conserved: empty score vector");
    }
    SelectionResult sel;
    sel.scores = scores;
    if (recent + important >= n) {
        sel.conserved.resize(n);
        std::iota(sel.conserved.begin(), sel.conserved.end(), std::size_t{0});
        return sel;
    }
    const std::size_t pool = n - recent;  // indices [0, pool) are eligible for top-N
    std::vector<std::size_t> order(pool);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];  // stable keeps lower index first on ties
    });
    order.resize(important);
    std::vector<bool> keep(n, false);
    for (std::size_t i : order) {
        keep[i] = true;
    }
    for (std::size_t i = pool; i < n; ++i) {
        keep[i] = true;
    }
    for (std::size_t i = 0; i < n; ++i) {
        (keep[i] ? sel.conserved : sel.less_important).push_back(i);
    }
    return sel;
}

/// Entry-wise cosine similarity between every less-important key row and
/// every conserved key row.
inline Matrix similarity_matrix(const Matrix& k_less, const Matrix& k_conserved) {
    if (k_less.cols != k_conserved.cols) {
        throw ShapeError("similarity_matrix: key width mismatch");
    }
    Matrix sim(k_less.rows, k_conserved.rows);
    for (std::size_t i = 0; i < k_less.rows; ++i) {
        for (std::size_t j = 0; j < k_conserved.rows; ++j) {
            sim.at(i, j) = cosine_similarity(k_less.row(i), k_conserved.row(j));
        }
    }
    return sim;
}

/// Nearest conserved token per row: argmax over columns, ties to the
/// lowest column index.
inline MergeAssignment assign_nearest(const Matrix& sim) {
    if (sim.rows == 0 || sim.cols == 0) {
        throw ContractError("assign_nearest: empty similarity matrix");
    }
    MergeAssignment asg;
    asg.target.resize(sim.rows);
    asg.group_sizes.assign(sim.cols, 0);
    for (std::size_t i = 0; i < sim.rows; ++i) {
        auto row = sim.row(i);
        std::size_t best = 0;
        for (std::size_t j = 1; j < sim.cols; ++j) {
            if (row[j] > row[best]) {
                best = j;
            }
        }
        asg.target[i] = best;
        ++asg.group_sizes[best];
    }
    return asg;
}

namespace detail {

inline LayerKVCache gather_cache(const LayerKVCache& cache,
                                 const std::vector<std::size_t>& indices) {
    LayerKVCache out;
    out.layer_index = cache.layer_index;
    const std::size_t hd = cache.head_dim();
    for (std::size_t h = 0; h < cache.num_heads(); ++h) {
        Matrix k(indices.size(), hd);
        Matrix v(indices.size(), hd);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            auto ks = cache.keys[h].row(indices[i]);
            auto vs = cache.values[h].row(indices[i]);
            std::copy(ks.begin(), ks.end(), k.row(i).begin());
            std::copy(vs.begin(), vs.end(), v.row(i).begin());
        }
        out.keys.push_back(std::move(k));
        out.values.push_back(std::move(v));
    }
    for (std::size_t i : indices) {
        out.meta.push_back(cache.meta[i]);
    }
    return out;
}

}  // namespace detail

/// Average merging: each conserved key/value row becomes the unweighted
/// mean of itself and its assigned group, per head. Conserved tokens with
/// empty groups are copied through untouched, so an empty less-important
/// set leaves the cache rows bit-identical.
inline LayerKVCache merge_average(const LayerKVCache& cache, const SelectionResult& sel,
                                  const MergeAssignment& asg) {
    if (asg.target.size() != sel.less_important.size()) {
        throw ContractError("merge_average: assignment does not cover the less-important set");
    }
    LayerKVCache out = detail::gather_cache(cache, sel.conserved);
    if (sel.less_important.empty()) {
        return out;
    }
    const std::size_t hd = cache.head_dim();
    for (std::size_t h = 0; h < cache.num_heads(); ++h) {
        for (std::size_t c = 0; c < sel.conserved.size(); ++c) {
            if (asg.group_sizes[c] == 0) {
                continue;
            }
            auto k_acc = out.keys[h].row(c);
            auto v_acc = out.values[h].row(c);
            for (std::size_t i = 0; i < sel.less_important.size(); ++i) {
                if (asg.target[i] != c) {
                    continue;
                }
                auto ks = cache.keys[h].row(sel.less_important[i]);
                auto vs = cache.values[h].row(sel.less_important[i]);
                for (std::size_t j = 0; j < hd; ++j) {
                    k_acc[j] += ks[j];
                    v_acc[j] += vs[j];
                }
            }
            const double inv = 1.0 / static_cast<double>(asg.group_sizes[c] + 1);
            for (std::size_t j = 0; j < hd; ++j) {
                k_acc[j] *= inv;
                v_acc[j] *= inv;
            }
        }
    }
    for (std::size_t i = 0; i < sel.less_important.size(); ++i) {
        out.meta[asg.target[i]].merged_count += cache.meta[sel.less_important[i]].merged_count;
    }
    return out;
}

struct LayerCompressionReport {
    std::size_t layer_index = 0;
    std::size_t original_tokens = 0;
    std::size_t retained = 0;
    std::size_t merged = 0;   // less-important tokens folded into conserved rows
    std::size_t evicted = 0;  // less-important tokens dropped outright
    std::size_t text_retained = 0;
    std::size_t vision_retained = 0;
};

struct CompressedLayer {
    LayerKVCache cache;
    SelectionResult selection;
    LayerCompressionReport report;
};

/// Full per-layer pipeline: cumulative scores over the head-averaged
/// prompt attention, optional text boost, recent-window + top-N selection,
/// then either average merging or plain eviction of the remainder.
inline CompressedLayer compress_layer(const LayerKVCache& cache, const Matrix& attn,
                                      const LayerBudget& budget, const CompressionConfig& cfg) {
    cfg.validate();
    if (attn.rows != cache.token_count()) {
        throw ShapeError("compress_layer: attention size does not match cache tokens");
    }
    std::vector<double> scores = cumulative_scores(attn);
    if (cfg.text_boost_enabled) {
        auto [text_idx, vision_idx] = partition_by_modality(cache);
        (void)vision_idx;
        scores = boost_text(std::move(scores), text_idx);
    }
    CompressedLayer out;
    out.selection = select_conserved(scores, budget.recent, budget.important);

    if (cfg.merge_enabled && !out.selection.less_important.empty()) {
        Matrix avg_keys = cache.head_averaged_keys();
        Matrix k_less(out.selection.less_important.size(), avg_keys.cols);
        Matrix k_cons(out.selection.conserved.size(), avg_keys.cols);
        for (std::size_t i = 0; i < out.selection.less_important.size(); ++i) {
            auto src = avg_keys.row(out.selection.less_important[i]);
            std::copy(src.begin(), src.end(), k_less.row(i).begin());
        }
        for (std::size_t i = 0; i < out.selection.conserved.size(); ++i) {
            auto src = avg_keys.row(out.selection.conserved[i]);
            std::copy(src.begin(), src.end(), k_cons.row(i).begin());
        }
        MergeAssignment asg = assign_nearest(similarity_matrix(k_less, k_cons));
        out.cache = merge_average(cache, out.selection, asg);
        out.report.merged = out.selection.less_important.size();
    } else {
        out.cache = detail::gather_cache(cache, out.selection.conserved);
        out.report.evicted = out.selection.less_important.size();
    }

    out.report.layer_index = cache.layer_index;
    out.report.original_tokens = cache.token_count();
    out.report.retained = out.selection.conserved.size();
    for (std::size_t i : out.selection.conserved) {
        if (cache.meta[i].modality == Modality::Text) {
            ++out.report.text_retained;
        } else {
            ++out.report.vision_retained;
        }
    }
    return out;
}

}  // namespace meda
