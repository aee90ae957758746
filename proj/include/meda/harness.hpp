#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "meda/allocator.hpp"
#include "meda/compressor.hpp"
#include "meda/entropy.hpp"
#include "meda/kvcache.hpp"
#include "meda/matrix.hpp"
#include "meda/model.hpp"
#include "meda/trace.hpp"
#include "meda/types.hpp"

namespace meda {

/// Synthetic prompt layout: a long vision body (consecutive blocks drawn
/// from a few cluster centers, like near-duplicate video frames) framed by
/// optional text blocks, the question-style text at the tail.
///
/// Needle planting uses two directions in embedding space:
///  - an anchor direction, picked against the seeded weights so query/key
///    projections stay aligned in every layer; needles carry it strongly
///    and every other token carries a weak query-side component, giving the
///    needles a baseline of accumulated attention at all layers;
///  - a contrast direction, whose per-layer alignment varies freely; a few
///    decoy vision tokens inside the recent window carry it, the text
///    carries a probe component of it, and the needles are modulated by it.
/// Layers where the contrast direction couples become focused (low
/// cross-modal entropy, needles strongly attended); layers where it does
/// not stay diffuse (high entropy, needles only mildly elevated).
struct WorkloadSpec {
    std::uint64_t seed = 0;
    std::size_t prompt_len = 256;
    std::size_t lead_text = 0;
    std::size_t tail_text = 4;
    std::size_t needle_count = 0;
    double base_scale = 20.0;     // typical embedding norm; sets the attention temperature
    std::size_t clusters = 16;    // vision cluster centers; 0 = independent tokens
    double cluster_noise = 0.25;  // within-cluster jitter relative to base_scale

    double needle_gain = 2.2;     // anchor strength of the needles
    double haystack_gain = 0.4;   // anchor query component of ordinary tokens
    std::size_t decoy_count = 3;  // in-window tokens carrying the contrast direction
    double decoy_gain = 0.45;     // contrast strength of the decoys
    double probe_gain = 0.45;     // contrast component of the text tokens
    double contrast_gain = 0.3;   // contrast query component of vision tokens
    double needle_contrast = 1.5; // contrast modulation of the needle keys
    std::size_t direction_candidates = 256;

    void validate() const {
        if (prompt_len == 0) {
            throw ContractError("WorkloadSpec: prompt_len must be positive");
        }
        if (lead_text + tail_text > prompt_len) {
            throw ContractError("WorkloadSpec: text blocks exceed prompt length");
        }
        const std::size_t vision_span = prompt_len - lead_text - tail_text;
        if (needle_count > 0 && vision_span < needle_count + decoy_count) {
            throw ContractError("WorkloadSpec: not enough vision tokens for needles and decoys");
        }
    }
};

namespace detail {

/// Query/key alignment of a unit direction at every layer:
/// c_l = <u W_Q^l, u W_K^l>. Tokens planted along u attract attention in
/// proportion to c_l.
inline std::vector<double> direction_couplings(const std::vector<double>& u,
                                               const std::vector<Matrix>& wq,
                                               const std::vector<Matrix>& wk) {
    const std::size_t d = u.size();
    std::vector<double> couplings;
    std::vector<double> pq(d), pk(d);
    for (std::size_t l = 0; l < wq.size(); ++l) {
        std::fill(pq.begin(), pq.end(), 0.0);
        std::fill(pk.begin(), pk.end(), 0.0);
        for (std::size_t i = 0; i < d; ++i) {
            const double ui = u[i];
            auto qrow = wq[l].row(i);
            auto krow = wk[l].row(i);
            for (std::size_t j = 0; j < d; ++j) {
                pq[j] += ui * qrow[j];
                pk[j] += ui * krow[j];
            }
        }
        double coupling = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            coupling += pq[j] * pk[j];
        }
        couplings.push_back(coupling);
    }
    return couplings;
}

inline std::vector<double> random_unit(std::mt19937_64& gen, std::size_t d) {
    std::vector<double> u(d);
    double norm = 0.0;
    for (double& x : u) {
        x = next_uniform(gen, -1.0, 1.0);
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : u) {
        x /= norm;
    }
    return u;
}

/// Anchor direction: the candidate with the largest worst-layer coupling,
/// so planted tokens attract attention at every layer.
inline std::vector<double> anchor_direction(const std::vector<Matrix>& wq,
                                            const std::vector<Matrix>& wk,
                                            std::mt19937_64& gen, std::size_t d,
                                            std::size_t candidates) {
    std::vector<double> best(d, 0.0);
    double best_score = -1e300;
    for (std::size_t c = 0; c < candidates; ++c) {
        std::vector<double> u = random_unit(gen, d);
        const std::vector<double> couplings = direction_couplings(u, wq, wk);
        const double score = *std::min_element(couplings.begin(), couplings.end());
        if (score > best_score) {
            best_score = score;
            best = std::move(u);
        }
    }
    return best;
}

inline std::vector<double> project(const std::vector<double>& u, const Matrix& w) {
    std::vector<double> out(w.cols, 0.0);
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double ui = u[i];
        auto row = w.row(i);
        for (std::size_t j = 0; j < w.cols; ++j) {
            out[j] += ui * row[j];
        }
    }
    return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

/// Contrast direction selection. For each candidate v (orthogonal to the
/// anchor u) the realized planted logits are evaluated layer by layer:
///   text -> needle   tau_l  (drives the cross-modal entropy dip)
///   vision -> needle eta_l  (drives the needle's accumulated-score rank)
/// The pick maximizes the layer spread of tau while keeping tau capped (no
/// layer saturates, so no budget collapses) and eta above a floor (needles
/// stay findable everywhere).
struct ContrastBounds {
    double tau_cap = 2.2;
    double eta_floor = 0.8;
    double eta_cap = 4.0;
};

inline std::vector<double> contrast_direction(const std::vector<Matrix>& wq,
                                              const std::vector<Matrix>& wk,
                                              const std::vector<double>& anchor,
                                              std::mt19937_64& gen, std::size_t d,
                                              std::size_t candidates, double logit_unit,
                                              double probe_gain, double needle_contrast,
                                              double needle_anchor, double haystack_gain,
                                              double contrast_gain,
                                              const ContrastBounds& bounds) {
    const std::size_t layers = wq.size();
    std::vector<std::vector<double>> uq(layers), uk(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        uq[l] = project(anchor, wq[l]);
        uk[l] = project(anchor, wk[l]);
    }
    std::vector<double> best(d, 0.0);
    double best_score = -1e300;
    for (std::size_t c = 0; c < candidates; ++c) {
        std::vector<double> v = random_unit(gen, d);
        double along = dot(v, anchor);
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            v[j] -= along * anchor[j];
            norm += v[j] * v[j];
        }
        norm = std::sqrt(norm);
        if (norm == 0.0) {
            continue;
        }
        for (double& x : v) {
            x /= norm;
        }
        double tau_min = 1e300, tau_max = -1e300, eta_min = 1e300, eta_max = -1e300;
        for (std::size_t l = 0; l < layers; ++l) {
            const std::vector<double> vq = project(v, wq[l]);
            const std::vector<double> vk = project(v, wk[l]);
            // needle keys carry needle_anchor * u + needle_contrast * v
            const double needle_from_v = needle_contrast * dot(vq, vk) +
                                         needle_anchor * dot(vq, uk[l]);
            const double needle_from_u = needle_contrast * dot(uq[l], vk) +
                                         needle_anchor * dot(uq[l], uk[l]);
            const double tau = logit_unit * probe_gain * needle_from_v;
            const double eta = logit_unit * (haystack_gain * needle_from_u +
                                             contrast_gain * needle_from_v);
            tau_min = std::min(tau_min, tau);
            tau_max = std::max(tau_max, tau);
            eta_min = std::min(eta_min, eta);
            eta_max = std::max(eta_max, eta);
        }
        double score = tau_max - tau_min;
        if (tau_max > bounds.tau_cap) {
            score -= 10.0 * (tau_max - bounds.tau_cap);
        }
        if (tau_min < -bounds.tau_cap) {
            score -= 10.0 * (-bounds.tau_cap - tau_min);
        }
        if (eta_min < bounds.eta_floor) {
            score -= 10.0 * (bounds.eta_floor - eta_min);
        }
        if (eta_max > bounds.eta_cap) {
            score -= 2.0 * (eta_max - bounds.eta_cap);
        }
        if (score > best_score) {
            best_score = score;
            best = std::move(v);
        }
    }
    return best;
}

}  // namespace detail

inline PromptSequence generate_workload(const WorkloadSpec& spec, const ModelConfig& cfg) {
    spec.validate();
    cfg.validate();
    const std::size_t n = spec.prompt_len;
    const std::size_t d = cfg.model_dim;
    std::mt19937_64 gen(mix_seed(spec.seed, 0x776f726bULL));  // workload stream

    PromptSequence prompt;
    prompt.embeddings = Matrix(n, d);
    prompt.modality.resize(n, Modality::Vision);
    for (std::size_t i = 0; i < spec.lead_text; ++i) {
        prompt.modality[i] = Modality::Text;
    }
    for (std::size_t i = 0; i < spec.tail_text; ++i) {
        prompt.modality[n - 1 - i] = Modality::Text;
    }

    // component scale sqrt(3/d) makes a token's expected norm ~ base_scale
    const double comp = spec.base_scale * std::sqrt(3.0 / static_cast<double>(d));
    for (std::size_t i = 0; i < n; ++i) {
        auto row = prompt.embeddings.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            row[j] = next_uniform(gen, -comp, comp);
        }
    }

    // vision tokens come in consecutive blocks of near-duplicates
    if (spec.clusters > 0) {
        const std::size_t span = n - spec.lead_text - spec.tail_text;
        if (span > 0) {
            std::vector<std::vector<double>> centers(spec.clusters, std::vector<double>(d));
            for (auto& center : centers) {
                for (double& v : center) {
                    v = next_uniform(gen, -comp, comp);
                }
            }
            const std::size_t block = (span + spec.clusters - 1) / spec.clusters;
            for (std::size_t i = 0; i < span; ++i) {
                const std::size_t pos = spec.lead_text + i;
                const auto& center = centers[std::min(i / block, spec.clusters - 1)];
                auto row = prompt.embeddings.row(pos);
                for (std::size_t j = 0; j < d; ++j) {
                    row[j] = center[j] + spec.cluster_noise * row[j];
                }
            }
        }
    }

    if (spec.needle_count > 0) {
        std::vector<Matrix> wq, wk;
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            LayerWeights w = layer_weights(cfg, l);
            wq.push_back(std::move(w.w_q));
            wk.push_back(std::move(w.w_k));
        }
        const std::vector<double> anchor =
            detail::anchor_direction(wq, wk, gen, d, spec.direction_candidates);
        // the strongest contrast effect is the text -> needle logit; cap it
        // so no layer's cross-modal attention fully saturates, and cap the
        // sag so diffuse layers only demote the needles, never bury them
        const double logit_unit = spec.base_scale * spec.base_scale *
                                  spec.probe_gain * spec.needle_contrast /
                                  std::sqrt(static_cast<double>(cfg.head_dim()));
        const std::vector<double> contrast = detail::contrast_direction(
            wq, wk, anchor, gen, d, spec.direction_candidates, logit_unit, -1.3, 2.2);

        const std::size_t span = n - spec.lead_text - spec.tail_text;
        for (std::size_t i = 0; i < spec.needle_count; ++i) {
            const double depth =
                spec.needle_count == 1
                    ? 0.5
                    : 0.2 + 0.5 * static_cast<double>(i) / static_cast<double>(spec.needle_count - 1);
            const std::size_t pos =
                spec.lead_text +
                static_cast<std::size_t>(depth * static_cast<double>(span - 1) + 0.5);
            prompt.needle_positions.push_back(pos);
        }
        const std::size_t decoy_begin = n - spec.tail_text - spec.decoy_count;
        for (std::size_t i = 0; i < n; ++i) {
            auto row = prompt.embeddings.row(i);
            const bool is_needle =
                std::find(prompt.needle_positions.begin(), prompt.needle_positions.end(), i) !=
                prompt.needle_positions.end();
            double along_anchor = 0.0;
            double along_contrast = 0.0;
            if (prompt.modality[i] == Modality::Text) {
                along_contrast = spec.probe_gain;
            } else if (is_needle) {
                // deeper needles are visible to fewer (causal) queries;
                // scale their pull up to even the accumulated mass out
                const double visible = static_cast<double>(n - i) / static_cast<double>(n);
                along_anchor = spec.needle_gain / std::sqrt(visible);
                along_contrast = spec.needle_contrast;
                for (std::size_t j = 0; j < d; ++j) {
                    row[j] *= 0.05;  // needles are mostly the planted directions
                }
            } else if (i >= decoy_begin && i < n - spec.tail_text) {
                along_anchor = spec.haystack_gain;
                along_contrast = spec.decoy_gain;
            } else {
                along_anchor = spec.haystack_gain;
                along_contrast = spec.contrast_gain;
            }
            for (std::size_t j = 0; j < d; ++j) {
                row[j] += spec.base_scale *
                          (along_anchor * anchor[j] + along_contrast * contrast[j]);
            }
        }
    }
    return prompt;
}

// --- pipeline -----------------------------------------------------------

/// Per-seed state shared by every compression config evaluated on the same
/// workload: the encoding pass, the entropy profile and the full-cache
/// reference decode.
struct PipelineInputs {
    PromptSequence prompt;
    ModelConfig model;
    EncodeResult encode;
    EntropyProfile profile;
    std::vector<Matrix> head_avg_attention;  // per layer
    Matrix reference_outputs;                // steps x model_dim, full-cache decode
    std::size_t decode_steps = 0;
};

inline EntropyProfile profile_from_encode(const EncodeResult& enc, const PromptSequence& prompt,
                                          const ModelConfig& cfg, bool causal_cross_attention) {
    LayerProjections proj;
    proj.q = enc.layer_q;
    proj.k = enc.layer_k;
    proj.modality = prompt.modality;
    proj.num_heads = cfg.num_heads;
    proj.scale = cfg.attention_scale();
    proj.causal_cross_attention = causal_cross_attention;
    return profile_layers(proj);
}

inline PipelineInputs prepare_pipeline(PromptSequence prompt, const ModelConfig& cfg,
                                       std::size_t decode_steps,
                                       bool causal_cross_attention = false) {
    PipelineInputs in;
    in.prompt = std::move(prompt);
    in.model = cfg;
    in.encode = prompt_encode(in.prompt, cfg);
    in.profile = profile_from_encode(in.encode, in.prompt, cfg, causal_cross_attention);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        in.head_avg_attention.push_back(in.encode.head_averaged_attention(l));
    }
    in.decode_steps = decode_steps;
    std::vector<LayerKVCache> full = in.encode.caches;
    in.reference_outputs = decode_n(in.encode.start_embedding(), decode_steps, full, cfg);
    return in;
}

struct LayerRunRow {
    std::size_t layer = 0;
    double e_cm = 0.0;
    double alpha = 0.0;
    std::size_t budget = 0;
    std::size_t recent = 0;
    std::size_t important = 0;
    std::size_t retained = 0;
    std::size_t merged = 0;
    std::size_t evicted = 0;
    double memory_gib = 0.0;
};

struct RunReport {
    std::string strategy;
    bool merge = true;
    bool text_boost = true;
    double rho = 1.0;
    std::uint64_t seed = 0;
    std::vector<LayerRunRow> layers;

    double full_memory_gib = 0.0;        // Appendix-style 16-bit accounting
    double compressed_memory_gib = 0.0;  // same accounting over the plan
    double memory_ratio = 1.0;
    double engine_memory_gib = 0.0;  // actual 64-bit engine storage of the compressed cache
    double fidelity = 0.0;           // mean cosine vs the full-cache decode
    std::vector<double> step_cosines;
    double needle_retention = -1.0;  // -1 when the workload has no needles
    std::size_t needles_total = 0;
    std::size_t needles_retained = 0;
    double decode_ms_per_token = 0.0;

    /// Timing is excluded by default so reports are reproducible
    /// byte-for-byte; pass true to append the measured latency.
    std::string to_csv(bool include_timing = false) const {
        std::ostringstream os;
        char buf[64];
        auto num = [&](double v) {
            std::snprintf(buf, sizeof(buf), "%.10g", v);
            return std::string(buf);
        };
        os << "layer,e_cm,alpha,budget,recent,important,retained,merged,evicted,memory_gib\n";
        for (const LayerRunRow& r : layers) {
            os << r.layer << ',' << num(r.e_cm) << ',' << num(r.alpha) << ',' << r.budget << ','
               << r.recent << ',' << r.important << ',' << r.retained << ',' << r.merged << ','
               << r.evicted << ',' << num(r.memory_gib) << '\n';
        }
        os << "summary,key,value\n";
        os << "summary,strategy," << strategy << (merge ? "" : "-evict") << '\n';
        os << "summary,rho," << num(rho) << '\n';
        os << "summary,seed," << seed << '\n';
        os << "summary,full_memory_gib," << num(full_memory_gib) << '\n';
        os << "summary,compressed_memory_gib," << num(compressed_memory_gib) << '\n';
        os << "summary,memory_ratio," << num(memory_ratio) << '\n';
        os << "summary,engine_memory_gib," << num(engine_memory_gib) << '\n';
        os << "summary,fidelity_mean_cosine," << num(fidelity) << '\n';
        for (std::size_t t = 0; t < step_cosines.size(); ++t) {
            os << "summary,step_cosine_" << t << ',' << num(step_cosines[t]) << '\n';
        }
        if (needle_retention >= 0.0) {
            os << "summary,needle_retention," << num(needle_retention) << '\n';
            os << "summary,needles_retained," << needles_retained << '\n';
            os << "summary,needles_total," << needles_total << '\n';
        }
        if (include_timing) {
            os << "summary,decode_ms_per_token," << num(decode_ms_per_token) << '\n';
        }
        return os.str();
    }
};

/// Allocate, compress every layer, decode against the compressed caches and
/// fill in fidelity/memory/retention. The expensive per-seed state in
/// `inputs` is shared across configs.
inline RunReport evaluate_pipeline(const PipelineInputs& in, const CompressionConfig& cfg) {
    cfg.validate();
    const std::size_t num_layers = in.model.num_layers;
    const std::vector<std::size_t> full_len(num_layers, in.prompt.length());
    const AllocationPlan plan = allocate(in.profile, cfg, full_len);

    std::vector<LayerKVCache> compressed;
    std::vector<CompressedLayer> layers;
    layers.reserve(num_layers);
    for (std::size_t l = 0; l < num_layers; ++l) {
        layers.push_back(
            compress_layer(in.encode.caches[l], in.head_avg_attention[l], plan.layer(l), cfg));
    }
    for (CompressedLayer& cl : layers) {
        compressed.push_back(std::move(cl.cache));
    }

    const auto t0 = std::chrono::steady_clock::now();
    Matrix outputs = decode_n(in.encode.start_embedding(), in.decode_steps, compressed, in.model);
    const auto t1 = std::chrono::steady_clock::now();

    RunReport rep;
    rep.strategy = strategy_name(cfg.strategy);
    rep.merge = cfg.merge_enabled;
    rep.text_boost = cfg.text_boost_enabled;
    rep.rho = cfg.rho;
    rep.seed = in.model.seed;
    rep.decode_ms_per_token =
        std::chrono::duration<double, std::milli>(t1 - t0).count() /
        static_cast<double>(in.decode_steps);

    for (std::size_t t = 0; t < in.decode_steps; ++t) {
        rep.step_cosines.push_back(
            cosine_similarity(in.reference_outputs.row(t), outputs.row(t)));
    }
    rep.fidelity = std::accumulate(rep.step_cosines.begin(), rep.step_cosines.end(), 0.0) /
                   static_cast<double>(in.decode_steps);

    const MemoryModel mm{2, num_layers, in.model.num_heads, in.model.head_dim(), 2};
    rep.full_memory_gib = estimate_memory_gib(in.prompt.length() + in.decode_steps, mm);
    rep.compressed_memory_gib = estimate_memory_per_layer_gib(plan, in.decode_steps, mm);
    rep.memory_ratio = rep.compressed_memory_gib / rep.full_memory_gib;
    double engine_bytes = 0.0;
    for (const LayerKVCache& c : compressed) {
        engine_bytes += static_cast<double>(c.token_count()) *
                        static_cast<double>(c.num_heads()) * static_cast<double>(c.head_dim()) *
                        sizeof(double) * 2.0;
    }
    rep.engine_memory_gib = engine_bytes / (1024.0 * 1024.0 * 1024.0);

    for (std::size_t l = 0; l < num_layers; ++l) {
        LayerRunRow row;
        row.layer = l;
        row.e_cm = in.profile.cross_modal[l];
        row.alpha = plan.alpha[l];
        row.budget = plan.budget[l];
        row.recent = plan.recent[l];
        row.important = plan.important[l];
        row.retained = layers[l].report.retained;
        row.merged = layers[l].report.merged;
        row.evicted = layers[l].report.evicted;
        const MemoryModel one{2, 1, in.model.num_heads, in.model.head_dim(), 2};
        row.memory_gib = estimate_memory_gib(plan.budget[l] + in.decode_steps, one);
        rep.layers.push_back(row);
    }

    if (!in.prompt.needle_positions.empty()) {
        rep.needles_total = in.prompt.needle_positions.size() * num_layers;
        for (std::size_t l = 0; l < num_layers; ++l) {
            const std::vector<std::size_t>& kept = layers[l].selection.conserved;
            for (std::size_t needle : in.prompt.needle_positions) {
                if (std::binary_search(kept.begin(), kept.end(), needle)) {
                    ++rep.needles_retained;
                }
            }
        }
        rep.needle_retention =
            static_cast<double>(rep.needles_retained) / static_cast<double>(rep.needles_total);
    }
    return rep;
}

inline RunReport run_pipeline(const PromptSequence& prompt, const CompressionConfig& ccfg,
                              const ModelConfig& mcfg, std::size_t decode_steps = 8) {
    PipelineInputs in =
        prepare_pipeline(prompt, mcfg, decode_steps, ccfg.causal_cross_attention);
    return evaluate_pipeline(in, ccfg);
}

// --- strategy comparison --------------------------------------------------

struct CompareRow {
    std::string strategy;
    bool merge = true;
    double rho = 0.0;
    double fidelity = 0.0;
    double needle_retention = -1.0;
    double memory_gib = 0.0;
    double latency_ms_per_token = 0.0;
};

/// Mean fidelity / retention / memory per (strategy, merge, rho) over the
/// workload set. Deterministic given the seeds, apart from the latency
/// column.
inline std::vector<CompareRow> compare_strategies(const std::vector<WorkloadSpec>& workloads,
                                                  const ModelConfig& base_model,
                                                  const std::vector<double>& rhos,
                                                  const CompressionConfig& base_cfg,
                                                  std::size_t decode_steps = 8) {
    if (workloads.empty() || rhos.empty()) {
        throw ContractError("compare_strategies: need at least one workload and one rho");
    }
    struct Cell {
        double fidelity = 0.0, retention = 0.0, memory = 0.0, latency = 0.0;
        std::size_t n = 0, retention_n = 0;
    };
    const Strategy strategies[3] = {Strategy::Meda, Strategy::Uniform, Strategy::Pyramid};
    const bool merges[2] = {true, false};
    std::vector<Cell> cells(rhos.size() * 6);

    for (const WorkloadSpec& spec : workloads) {
        ModelConfig mcfg = base_model;
        mcfg.seed = spec.seed;
        PipelineInputs in = prepare_pipeline(generate_workload(spec, mcfg), mcfg, decode_steps,
                                             base_cfg.causal_cross_attention);
        for (std::size_t r = 0; r < rhos.size(); ++r) {
            for (std::size_t s = 0; s < 3; ++s) {
                for (std::size_t m = 0; m < 2; ++m) {
                    CompressionConfig cfg = base_cfg;
                    cfg.rho = rhos[r];
                    cfg.strategy = strategies[s];
                    cfg.merge_enabled = merges[m];
                    RunReport rep = evaluate_pipeline(in, cfg);
                    Cell& cell = cells[(r * 3 + s) * 2 + m];
                    cell.fidelity += rep.fidelity;
                    cell.memory += rep.compressed_memory_gib;
                    cell.latency += rep.decode_ms_per_token;
                    if (rep.needle_retention >= 0.0) {
                        cell.retention += rep.needle_retention;
                        ++cell.retention_n;
                    }
                    ++cell.n;
                }
            }
        }
    }

    std::vector<CompareRow> rows;
    for (std::size_t r = 0; r < rhos.size(); ++r) {
        for (std::size_t s = 0; s < 3; ++s) {
            for (std::size_t m = 0; m < 2; ++m) {
                const Cell& cell = cells[(r * 3 + s) * 2 + m];
                CompareRow row;
                row.strategy = strategy_name(strategies[s]);
                row.merge = merges[m];
                row.rho = rhos[r];
                row.fidelity = cell.fidelity / static_cast<double>(cell.n);
                row.memory_gib = cell.memory / static_cast<double>(cell.n);
                row.latency_ms_per_token = cell.latency / static_cast<double>(cell.n);
                row.needle_retention =
                    cell.retention_n > 0 ? cell.retention / static_cast<double>(cell.retention_n)
                                         : -1.0;
                rows.push_back(row);
            }
        }
    }
    return rows;
}

// --- CSV emitters ---------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}  // namespace detail

inline std::string profile_to_csv(const EntropyProfile& p) {
    std::ostringstream os;
    os << "layer_index,n_text,n_vision,e_tv,e_vt,e_cm,degenerate\n";
    for (std::size_t l = 0; l < p.num_layers(); ++l) {
        os << l << ',' << p.n_text << ',' << p.n_vision << ','
           << detail::fmt_double(p.text_to_vision[l]) << ','
           << detail::fmt_double(p.vision_to_text[l]) << ','
           << detail::fmt_double(p.cross_modal[l]) << ',' << int(p.degenerate[l]) << '\n';
    }
    return os.str();
}

inline std::string plan_to_csv(const AllocationPlan& plan) {
    std::ostringstream os;
    os << "layer,alpha,budget,recent,important\n";
    for (std::size_t l = 0; l < plan.num_layers(); ++l) {
        os << l << ',' << detail::fmt_double(plan.alpha[l]) << ',' << plan.budget[l] << ','
           << plan.recent[l] << ',' << plan.important[l] << '\n';
    }
    return os.str();
}

inline std::string compare_to_csv(const std::vector<CompareRow>& rows,
                                  bool include_timing = false) {
    std::ostringstream os;
    os << "strategy,merge,rho,fidelity,needle_retention,memory_gib";
    if (include_timing) {
        os << ",latency_ms_per_token";
    }
    os << '\n';
    for (const CompareRow& r : rows) {
        os << r.strategy << ',' << (r.merge ? 1 : 0) << ',' << detail::fmt_double(r.rho) << ','
           << detail::fmt_double(r.fidelity) << ',' << detail::fmt_double(r.needle_retention)
           << ',' << detail::fmt_double(r.memory_gib);
        if (include_timing) {
            os << ',' << detail::fmt_double(r.latency_ms_per_token);
        }
        os << '\n';
    }
    return os.str();
}

// --- trace-driven compression ----------------------------------------------

/// Runs allocation + compression on tensors loaded from a trace. The trace
/// must carry Q (for the entropy pass) and every layer must hold the same
/// token set; attention is taken from the trace when present, otherwise
/// recomputed causally from Q/K.
inline TraceFile compress_trace(const TraceFile& t, const CompressionConfig& cfg,
                                bool scale_by_model_dim = false) {
    t.validate();
    cfg.validate();
    std::vector<LayerKVCache> caches = caches_from_trace(t);

    LayerProjections proj;
    proj.num_heads = t.num_heads;
    proj.scale = std::sqrt(static_cast<double>(scale_by_model_dim ? t.model_dim : t.head_dim));
    proj.causal_cross_attention = cfg.causal_cross_attention;

    std::vector<Matrix> attn(t.num_layers);
    std::vector<std::size_t> full_len(t.num_layers);
    std::vector<std::size_t> positions;
    for (std::size_t l = 0; l < t.num_layers; ++l) {
        const TraceLayer& layer = t.layers[l];
        if (!layer.has_q()) {
            throw ContractError("compress_trace: trace has no Q tensors; cannot profile");
        }
        if (layer.positions != t.layers[0].positions) {
            throw ContractError("compress_trace: layers hold different token sets");
        }
        const std::size_t tokens = layer.token_count();
        full_len[l] = tokens;
        Matrix q(tokens, t.model_dim), k(tokens, t.model_dim);
        for (std::uint32_t h = 0; h < t.num_heads; ++h) {
            for (std::size_t i = 0; i < tokens; ++i) {
                for (std::uint32_t j = 0; j < t.head_dim; ++j) {
                    q.at(i, h * t.head_dim + j) =
                        static_cast<double>(layer.q[h][i * t.head_dim + j]);
                    k.at(i, h * t.head_dim + j) =
                        static_cast<double>(layer.k[h][i * t.head_dim + j]);
                }
            }
        }
        if (l == 0) {
            positions.assign(layer.positions.begin(), layer.positions.end());
            proj.positions = positions;
            for (std::uint32_t p : layer.positions) {
                proj.modality.push_back(t.modality[p]);
            }
        }
        if (layer.has_attention()) {
            attn[l] = Matrix(tokens, tokens);
            for (std::size_t i = 0; i < layer.attention.size(); ++i) {
                attn[l].data[i] = static_cast<double>(layer.attention[i]);
            }
        } else {
            attn[l] = detail::head_averaged_attention(q, k, t.num_heads, proj.scale, &positions,
                                                      &positions);
        }
        proj.q.push_back(std::move(q));
        proj.k.push_back(std::move(k));
    }

    EntropyProfile profile = profile_layers(proj);
    AllocationPlan plan = allocate(profile, cfg, full_len);

    std::vector<LayerKVCache> out;
    for (std::size_t l = 0; l < t.num_layers; ++l) {
        out.push_back(compress_layer(caches[l], attn[l], plan.layer(l), cfg).cache);
    }
    return trace_from_caches(out, t.modality, t.num_heads, t.head_dim);
}

}  // namespace meda
