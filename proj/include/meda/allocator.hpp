#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "meda/entropy.hpp"
#include "meda/types.hpp"

namespace meda {

enum class Strategy { Meda, Uniform, Pyramid };

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Meda: return "meda";
        case Strategy::Uniform: return "uniform";
        case Strategy::Pyramid: return "pyramid";
    }
    return "?";
}

inline Strategy parse_strategy(const std::string& s) {
    if (s == "meda") return Strategy::Meda;
    if (s == "uniform") return Strategy::Uniform;
    if (s == "pyramid") return Strategy::Pyramid;
    throw ContractError("unknown strategy: " + s);
}

struct CompressionConfig {
    double rho = 1.0;            // fraction of prompt cache retained, (0, 1]
    double recent_ratio = 0.75;  // recent-window share of each layer budget (3:1 split)
    Strategy strategy = Strategy::Meda;
    bool merge_enabled = true;
    bool text_boost_enabled = true;
    bool causal_cross_attention = false;  // ablation flag for the entropy pass

    void validate() const {
        if (!(rho > 0.0 && rho <= 1.0)) {
            throw ContractError("CompressionConfig: rho must be in (0, 1]");
        }
        if (!(recent_ratio > 0.0 && recent_ratio < 1.0)) {
            throw ContractError("CompressionConfig: recent_ratio must be in (0, 1)");
        }
    }
};

struct LayerBudget {
    double alpha = 1.0;
    std::size_t budget = 0;     // S_l, total tokens kept
    std::size_t recent = 0;     // M_l, unconditional recent window
    std::size_t important = 0;  // N_l, top-scored tokens outside the window
    std::size_t full_len = 0;
};

/// Per-layer cache budgets. alpha averages rho across layers; budgets are
/// integers with recent + important = budget and budget >= 1.
struct AllocationPlan {
    std::vector<double> alpha;
    std::vector<std::size_t> budget;
    std::vector<std::size_t> recent;
    std::vector<std::size_t> important;
    std::vector<std::size_t> full_len;

    std::size_t num_layers() const { return alpha.size(); }

    LayerBudget layer(std::size_t l) const {
        return {alpha[l], budget[l], recent[l], important[l], full_len[l]};
    }

    std::size_t total_budget() const {
        return std::accumulate(budget.begin(), budget.end(), std::size_t{0});
    }
};

namespace detail {

/// Scales positive weights to fractions summing to num_layers * rho, with
/// alpha capped at 1. Excess above the cap is redistributed proportionally
/// to the remaining weights until a fixpoint; each pass clamps at least one
/// more layer, so it ends within num_layers passes.
inline std::vector<double> clamped_fractions(const std::vector<double>& weights, double rho) {
    const std::size_t n = weights.size();
    const double target = static_cast<double>(n) * rho;
    std::vector<double> alpha(n, 0.0);
    std::vector<bool> clamped(n, false);
    while (true) {
        double unclamped_weight = 0.0;
        std::size_t num_clamped = 0;
        for (std::size_t l = 0; l < n; ++l) {
            if (clamped[l]) {
                ++num_clamped;
            } else {
                unclamped_weight += weights[l];
            }
        }
        const double remaining = target - static_cast<double>(num_clamped);
        bool changed = false;
        for (std::size_t l = 0; l < n; ++l) {
            if (clamped[l]) {
                alpha[l] = 1.0;
                continue;
            }
            alpha[l] = unclamped_weight > 0.0 ? weights[l] * remaining / unclamped_weight
                                              : remaining / static_cast<double>(n - num_clamped);
            if (alpha[l] > 1.0) {
                clamped[l] = true;
                changed = true;
            }
        }
        if (!changed) {
            break;
        }
    }
    return alpha;
}

/// Round-half-up per layer, then a largest-remainder pass so the global
/// total hits round(rho * sum(full_len)) exactly, then a floor of one token
/// per layer with the deficit taken from the largest budgets.
inline void integral_budgets(AllocationPlan& plan, double rho, double recent_ratio) {
    const std::size_t n = plan.alpha.size();
    const double full_total =
        std::accumulate(plan.full_len.begin(), plan.full_len.end(), 0.0);
    const long long target = std::llround(rho * full_total);

    std::vector<double> exact(n);
    plan.budget.resize(n);
    for (std::size_t l = 0; l < n; ++l) {
        exact[l] = plan.alpha[l] * static_cast<double>(plan.full_len[l]);
        plan.budget[l] = static_cast<std::size_t>(std::floor(exact[l] + 0.5));
        plan.budget[l] = std::min(plan.budget[l], plan.full_len[l]);
    }

    long long diff = target - static_cast<long long>(std::accumulate(
                                  plan.budget.begin(), plan.budget.end(), std::size_t{0}));
    while (diff != 0) {
        std::size_t pick = n;
        if (diff > 0) {
            double best = -1e300;
            for (std::size_t l = 0; l < n; ++l) {
                if (plan.budget[l] >= plan.full_len[l]) {
                    continue;
                }
                const double rem = exact[l] - static_cast<double>(plan.budget[l]);
                if (rem > best) {
                    best = rem;
                    pick = l;
                }
            }
            if (pick == n) {
                break;  // every layer at capacity
            }
            ++plan.budget[pick];
            --diff;
        } else {
            double best = 1e300;
            for (std::size_t l = 0; l < n; ++l) {
                if (plan.budget[l] <= 1) {
                    continue;
                }
                const double rem = exact[l] - static_cast<double>(plan.budget[l]);
                if (rem < best) {
                    best = rem;
                    pick = l;
                }
            }
            if (pick == n) {
                break;  // cannot shrink below one token per layer
            }
            --plan.budget[pick];
            ++diff;
        }
    }

    // Keep decode well-defined: no empty layers.
    for (std::size_t l = 0; l < n; ++l) {
        if (plan.budget[l] == 0) {
            plan.budget[l] = 1;
            std::size_t donor = n;
            std::size_t largest = 1;
            for (std::size_t m = 0; m < n; ++m) {
                if (plan.budget[m] > largest) {
                    largest = plan.budget[m];
                    donor = m;
                }
            }
            if (donor != n) {
                --plan.budget[donor];
            }
        }
    }

    plan.recent.resize(n);
    plan.important.resize(n);
    for (std::size_t l = 0; l < n; ++l) {
        std::size_t m = static_cast<std::size_t>(
            std::floor(recent_ratio * static_cast<double>(plan.budget[l]) + 0.5));
        m = std::min(m, plan.budget[l]);
        if (m == 0 && plan.budget[l] >= 2) {
            m = 1;
        }
        if (m == 0 && plan.budget[l] == 1) {
            m = 1;
        }
        plan.recent[l] = m;
        plan.important[l] = plan.budget[l] - m;
    }
}

inline AllocationPlan plan_from_weights(const std::vector<double>& weights,
                                        const CompressionConfig& cfg,
                                        const std::vector<std::size_t>& full_len) {
    cfg.validate();
    if (weights.empty()) {
        throw ContractError("allocation: zero layers");
    }
    if (weights.size() != full_len.size()) {
        throw ShapeError("allocation: weights/full_len layer count mismatch");
    }
    for (std::size_t f : full_len) {
        if (f == 0) {
            throw ContractError("allocation: full_len must be positive");
        }
    }
    AllocationPlan plan;
    plan.full_len = full_len;
    plan.alpha = clamped_fractions(weights, cfg.rho);
    integral_budgets(plan, cfg.rho, cfg.recent_ratio);
    return plan;
}

}  // namespace detail

/// Entropy-softmax allocation: alpha_l = softmax(E_cm)_l * L * rho, capped
/// at 1 with proportional redistribution. Layers with higher cross-modal
/// entropy get larger budgets.
inline AllocationPlan allocate_meda(const EntropyProfile& profile, const CompressionConfig& cfg,
                                    const std::vector<std::size_t>& full_len) {
    if (profile.num_layers() == 0) {
        throw ContractError("allocate_meda: empty profile");
    }
    if (profile.num_layers() != full_len.size()) {
        throw ShapeError("allocate_meda: profile covers " + std::to_string(profile.num_layers()) +
                         " layers, full_len has " + std::to_string(full_len.size()));
    }
    double max_e = *std::max_element(profile.cross_modal.begin(), profile.cross_modal.end());
    std::vector<double> weights(profile.num_layers());
    for (std::size_t l = 0; l < weights.size(); ++l) {
        weights[l] = std::exp(profile.cross_modal[l] - max_e);
    }
    return detail::plan_from_weights(weights, cfg, full_len);
}

inline AllocationPlan allocate_uniform(const CompressionConfig& cfg,
                                       const std::vector<std::size_t>& full_len) {
    std::vector<double> weights(full_len.size(), 1.0);
    return detail::plan_from_weights(weights, cfg, full_len);
}

/// Linear front-loaded schedule: from min(1, 1.5*rho) at layer 0 down to
/// max(eps, 0.5*rho) at the last layer, rescaled to preserve the total.
inline AllocationPlan allocate_pyramid(const CompressionConfig& cfg,
                                       const std::vector<std::size_t>& full_len) {
    const std::size_t n = full_len.size();
    if (n == 0) {
        throw ContractError("allocate_pyramid: zero layers");
    }
    std::vector<double> weights(n);
    if (n == 1) {
        weights[0] = 1.0;
    } else {
        const double top = std::min(1.0, 1.5 * cfg.rho);
        const double bottom = std::max(1e-9, 0.5 * cfg.rho);
        for (std::size_t l = 0; l < n; ++l) {
            const double t = static_cast<double>(l) / static_cast<double>(n - 1);
            weights[l] = top + (bottom - top) * t;
        }
    }
    return detail::plan_from_weights(weights, cfg, full_len);
}

inline AllocationPlan allocate(const EntropyProfile& profile, const CompressionConfig& cfg,
                               const std::vector<std::size_t>& full_len) {
    switch (cfg.strategy) {
        case Strategy::Meda: return allocate_meda(profile, cfg, full_len);
        case Strategy::Uniform: return allocate_uniform(cfg, full_len);
        case Strategy::Pyramid: return allocate_pyramid(cfg, full_len);
    }
    throw ContractError("allocate: unknown strategy");
}

}  // namespace meda
