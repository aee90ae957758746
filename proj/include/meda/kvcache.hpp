#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "meda/allocator.hpp"
#include "meda/matrix.hpp"
#include "meda/types.hpp"

namespace meda {

struct CachedToken {
    std::size_t original_position = 0;
    Modality modality = Modality::Text;
    std::size_t merged_count = 1;  // number of prompt tokens averaged into this entry
};

/// One layer's cache: per-head key/value matrices (tokens x head_dim, all
/// heads share the token axis) plus per-token metadata.
struct LayerKVCache {
    std::size_t layer_index = 0;
    std::vector<Matrix> keys;    // per head
    std::vector<Matrix> values;  // per head
    std::vector<CachedToken> meta;

    std::size_t num_heads() const { return keys.size(); }
    std::size_t token_count() const { return meta.size(); }
    std::size_t head_dim() const { return keys.empty() ? 0 : keys[0].cols; }

    void validate() const {
        if (keys.size() != values.size()) {
            throw ShapeError("LayerKVCache: key/value head count mismatch");
        }
        for (std::size_t h = 0; h < keys.size(); ++h) {
            if (keys[h].rows != meta.size() || values[h].rows != meta.size()) {
                throw ShapeError("LayerKVCache: head token count differs from metadata");
            }
            if (keys[h].cols != head_dim() || values[h].cols != head_dim()) {
                throw ShapeError("LayerKVCache: inconsistent head_dim");
            }
        }
    }

    /// Appends one token: per-head key/value rows taken from 1 x model_dim
    /// projections split by head.
    void append_token(const Matrix& k_row, const Matrix& v_row, CachedToken token) {
        const std::size_t hd = head_dim();
        for (std::size_t h = 0; h < keys.size(); ++h) {
            for (std::size_t j = 0; j < hd; ++j) {
                keys[h].data.push_back(k_row.at(0, h * hd + j));
                values[h].data.push_back(v_row.at(0, h * hd + j));
            }
            ++keys[h].rows;
            ++values[h].rows;
        }
        meta.push_back(token);
    }

    /// Token key rows averaged over heads; the shared merge assignment is
    /// derived from this view so all heads stay aligned.
    Matrix head_averaged_keys() const {
        Matrix out(token_count(), head_dim());
        for (const Matrix& k : keys) {
            for (std::size_t i = 0; i < out.data.size(); ++i) {
                out.data[i] += k.data[i];
            }
        }
        const double inv = 1.0 / static_cast<double>(num_heads());
        for (double& v : out.data) {
            v *= inv;
        }
        return out;
    }
};

inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> partition_by_modality(
    const LayerKVCache& cache) {
    std::vector<std::size_t> text, vision;
    for (std::size_t i = 0; i < cache.meta.size(); ++i) {
        (cache.meta[i].modality == Modality::Text ? text : vision).push_back(i);
    }
    return {std::move(text), std::move(vision)};
}

/// Storage-cost model for reporting: 16-bit cache entries, keys and values
/// both stored. This is independent of the 64-bit arithmetic the engine
/// itself runs on.
struct MemoryModel {
    std::size_t bytes_per_element = 2;
    std::size_t num_layers = 32;
    std::size_t num_heads = 32;
    std::size_t head_dim = 128;
    std::size_t kv_factor = 2;

    void validate() const {
        if (bytes_per_element == 0 || num_layers == 0 || num_heads == 0 || head_dim == 0 ||
            kv_factor == 0) {
            throw ContractError("MemoryModel: all counts must be positive");
        }
    }
};

/// Cache footprint in GiB when every layer holds `total_tokens` tokens:
/// tokens * bytes * layers * heads * head_dim * kv.
inline double estimate_memory_gib(std::size_t total_tokens, const MemoryModel& m) {
    m.validate();
    const double bytes = static_cast<double>(total_tokens) *
                         static_cast<double>(m.bytes_per_element) *
                         static_cast<double>(m.num_layers) * static_cast<double>(m.num_heads) *
                         static_cast<double>(m.head_dim) * static_cast<double>(m.kv_factor);
    return bytes / (1024.0 * 1024.0 * 1024.0);
}

/// Footprint of a non-uniform plan, each layer holding its budget plus
/// `decoded` appended tokens.
inline double estimate_memory_per_layer_gib(const AllocationPlan& plan, std::size_t decoded,
                                            const MemoryModel& m) {
    m.validate();
    if (plan.num_layers() != m.num_layers) {
        throw ShapeError("estimate_memory_per_layer_gib: plan covers " +
                         std::to_string(plan.num_layers()) + " layers, model has " +
                         std::to_string(m.num_layers));
    }
    double bytes = 0.0;
    for (std::size_t l = 0; l < plan.num_layers(); ++l) {
        bytes += static_cast<double>(plan.budget[l] + decoded) *
                 static_cast<double>(m.bytes_per_element) * static_cast<double>(m.num_heads) *
                 static_cast<double>(m.head_dim) * static_cast<double>(m.kv_factor);
    }
    return bytes / (1024.0 * 1024.0 * 1024.0);
}

}  // namespace meda
