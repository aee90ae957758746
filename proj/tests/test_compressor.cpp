#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "fixture_config.hpp"
#include "meda/compressor.hpp"
#include "meda/harness.hpp"
#include "meda/model.hpp"

using namespace meda;

namespace {

// Exhaustive reference for select_conserved: among all N-subsets of the
// pool, the maximal total score, lexicographically smallest on ties.
std::vector<std::size_t> brute_force_topn(const std::vector<double>& scores, std::size_t recent,
                                          std::size_t important) {
    const std::size_t n = scores.size();
    if (recent + important >= n) {
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        return all;
    }
    const std::size_t pool = n - recent;
    std::vector<std::size_t> pick(important);
    std::vector<std::size_t> best;
    double best_sum = -1e300;
    // lexicographic combination enumeration keeps the first maximum smallest
    std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t start, std::size_t depth) {
        if (depth == important) {
            double sum = 0.0;
            for (std::size_t i : pick) sum += scores[i];
            if (sum > best_sum + 1e-15) {
                best_sum = sum;
                best = pick;
            }
            return;
        }
        for (std::size_t i = start; i + (important - depth) <= pool; ++i) {
            pick[depth] = i;
            rec(i + 1, depth + 1);
        }
    };
    if (important > 0) {
        rec(0, 0);
    }
    for (std::size_t i = pool; i < n; ++i) {
        best.push_back(i);
    }
    std::sort(best.begin(), best.end());
    return best;
}

LayerKVCache random_cache(std::mt19937_64& gen, std::size_t tokens, std::size_t heads,
                          std::size_t hd, double text_fraction = 0.3) {
    LayerKVCache c;
    for (std::size_t h = 0; h < heads; ++h) {
        c.keys.push_back(random_uniform_matrix(tokens, hd, -1.0, 1.0, gen()));
        c.values.push_back(random_uniform_matrix(tokens, hd, -1.0, 1.0, gen()));
    }
    for (std::size_t i = 0; i < tokens; ++i) {
        const Modality m = next_unit(gen) < text_fraction ? Modality::Text : Modality::Vision;
        c.meta.push_back({i, m, 1});
    }
    return c;
}

Matrix random_causal_attention(std::mt19937_64& gen, std::size_t n) {
    Matrix logits(n, n);
    for (double& v : logits.data) v = next_uniform(gen, -2.0, 2.0);
    return causal_softmax_rows(logits, 1.0);
}

}  // namespace

TEST_CASE("cumulative scores hand cases") {
    Matrix one(1, 1, {1.0});
    CHECK(cumulative_scores(one) == std::vector<double>{1.0});

    // uniform causal attention over 3 tokens
    Matrix uniform(3, 3, {1.0, 0, 0, 0.5, 0.5, 0, 1.0 / 3, 1.0 / 3, 1.0 / 3});
    std::vector<double> s = cumulative_scores(uniform);
    CHECK(s[0] == doctest::Approx(1.0 + 0.5 + 1.0 / 3).epsilon(1e-12));
    CHECK(s[1] == doctest::Approx(0.5 + 1.0 / 3).epsilon(1e-12));
    CHECK(s[2] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    // every query attends token 0 only
    Matrix spike(4, 4);
    for (std::size_t i = 0; i < 4; ++i) spike.at(i, 0) = 1.0;
    std::vector<double> sp = cumulative_scores(spike);
    CHECK(sp[0] == 4.0);
    CHECK(sp[1] == 0.0);

    Matrix rect(2, 3);
    CHECK_THROWS_AS(cumulative_scores(rect), ShapeError);
}

TEST_CASE("text boost adds the pre-boost maximum to text scores") {
    std::vector<double> none = boost_text({3, 1, 2}, {});
    CHECK(none == std::vector<double>{3, 1, 2});

    std::vector<double> one = boost_text({3, 1, 2}, {1});
    CHECK(one == std::vector<double>{3, 4, 2});

    // all-text: a uniform shift preserves the ranking
    std::vector<double> all = boost_text({3, 1, 2}, {0, 1, 2});
    CHECK(all == std::vector<double>{6, 4, 5});
}

TEST_CASE("boosted text dominates vision in the pool") {
    std::mt19937_64 gen(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + gen() % 20;
        std::vector<double> scores(n);
        for (double& v : scores) v = 5.0 * next_unit(gen);
        std::vector<std::size_t> text;
        for (std::size_t i = 0; i < n; ++i) {
            if (gen() & 1) text.push_back(i);
        }
        if (text.empty() || text.size() == n) continue;
        const double pre_max = *std::max_element(scores.begin(), scores.end());
        std::vector<double> boosted = boost_text(scores, text);
        double min_text = 1e300;
        for (std::size_t i : text) min_text = std::min(min_text, boosted[i]);
        CHECK(min_text >= pre_max);  // hence >= every unchanged vision score
    }
}

TEST_CASE("selection hand case and edge cases") {
    // first four scores 5,1,4,2 with a 2-token recent window
    std::vector<double> scores = {5, 1, 4, 2, 0.1, 0.2};
    SelectionResult sel = select_conserved(scores, 2, 2);
    CHECK(sel.conserved == std::vector<std::size_t>{0, 2, 4, 5});
    CHECK(sel.less_important == std::vector<std::size_t>{1, 3});

    SelectionResult window_only = select_conserved(scores, 2, 0);
    CHECK(window_only.conserved == std::vector<std::size_t>{4, 5});

    // all scores equal: lowest indices win
    SelectionResult ties = select_conserved({1, 1, 1, 1, 1}, 1, 2);
    CHECK(ties.conserved == std::vector<std::size_t>{0, 1, 4});

    // budget >= prompt: no-op
    SelectionResult all = select_conserved({1, 2, 3}, 2, 2);
    CHECK(all.conserved == std::vector<std::size_t>{0, 1, 2});
    CHECK(all.less_important.empty());
}

TEST_CASE("selection equals exhaustive search on random instances") {
    std::mt19937_64 gen(424242);
    for (int trial = 0; trial < 150; ++trial) {
        const std::size_t n = 1 + gen() % 12;
        std::vector<double> scores(n);
        for (double& v : scores) {
            v = next_unit(gen) < 0.2 ? 1.0 : 10.0 * next_unit(gen);  // some exact ties
        }
        const std::size_t recent = gen() % (n + 1);
        const std::size_t important = gen() % (n + 1);
        SelectionResult sel = select_conserved(scores, recent, important);
        CHECK(sel.conserved == brute_force_topn(scores, recent, important));
        if (recent + important < n) {
            CHECK(sel.conserved.size() == recent + important);
        }
        CHECK(std::is_sorted(sel.conserved.begin(), sel.conserved.end()));
    }
}

TEST_CASE("similarity matrix matches a scalar double loop") {
    std::mt19937_64 gen(7);
    Matrix less = random_uniform_matrix(3, 2, -1.0, 1.0, 70);
    Matrix cons = random_uniform_matrix(4, 2, -1.0, 1.0, 71);
    Matrix sim = similarity_matrix(less, cons);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            double dot = 0, nu = 0, nv = 0;
            for (std::size_t d = 0; d < 2; ++d) {
                dot += less.at(i, d) * cons.at(j, d);
                nu += less.at(i, d) * less.at(i, d);
                nv += cons.at(j, d) * cons.at(j, d);
            }
            CHECK(sim.at(i, j) ==
                  doctest::Approx(dot / std::sqrt(nu * nv)).epsilon(1e-12));
        }
    }

    // identical and orthogonal rows
    Matrix a(1, 2, {1.0, 0.0});
    Matrix b(2, 2, {1.0, 0.0, 0.0, 1.0});
    Matrix s = similarity_matrix(a, b);
    CHECK(s.at(0, 0) == doctest::Approx(1.0));
    CHECK(s.at(0, 1) == doctest::Approx(0.0));
    (void)gen;
}

TEST_CASE("nearest assignment") {
    Matrix single(3, 1, {0.5, 0.1, -0.3});
    MergeAssignment to_single = assign_nearest(single);
    CHECK(to_single.target == std::vector<std::size_t>{0, 0, 0});
    CHECK(to_single.group_sizes == std::vector<std::size_t>{3});

    Matrix row(1, 3, {0.1, 0.9, 0.3});
    CHECK(assign_nearest(row).target == std::vector<std::size_t>{1});

    CHECK_THROWS_AS(assign_nearest(Matrix(0, 3)), ContractError);

    std::mt19937_64 gen(31);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t rows = 1 + gen() % 6;
        const std::size_t cols = 1 + gen() % 5;
        Matrix sim = random_uniform_matrix(rows, cols, -1.0, 1.0, gen());
        MergeAssignment asg = assign_nearest(sim);
        for (std::size_t i = 0; i < rows; ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < cols; ++j) {
                if (sim.at(i, j) > sim.at(i, best)) best = j;
            }
            CHECK(asg.target[i] == best);
        }
        std::size_t total = 0;
        for (std::size_t g : asg.group_sizes) total += g;
        CHECK(total == rows);
    }
}

TEST_CASE("merge hand cases") {
    LayerKVCache c;
    c.keys.emplace_back(2, 2, std::vector<double>{1.0, 0.0, 0.0, 1.0});
    c.values.emplace_back(2, 2, std::vector<double>{2.0, 0.0, 0.0, 2.0});
    c.meta.push_back({0, Modality::Text, 1});
    c.meta.push_back({1, Modality::Vision, 1});

    SelectionResult sel;
    sel.conserved = {0};
    sel.less_important = {1};
    MergeAssignment asg;
    asg.target = {0};
    asg.group_sizes = {1};

    LayerKVCache merged = merge_average(c, sel, asg);
    CHECK(merged.token_count() == 1);
    CHECK(merged.keys[0].at(0, 0) == doctest::Approx(0.5));
    CHECK(merged.keys[0].at(0, 1) == doctest::Approx(0.5));
    CHECK(merged.values[0].at(0, 0) == doctest::Approx(1.0));
    CHECK(merged.meta[0].merged_count == 2);
}

TEST_CASE("three-way mean merge") {
    LayerKVCache c;
    c.keys.emplace_back(3, 2, std::vector<double>{3.0, 3.0, 0.0, 0.0, 3.0, 3.0});
    c.values.emplace_back(3, 2, std::vector<double>{1.0, 1.0, 1.0, 1.0, 1.0, 1.0});
    for (std::size_t i = 0; i < 3; ++i) c.meta.push_back({i, Modality::Vision, 1});

    SelectionResult sel;
    sel.conserved = {0};
    sel.less_important = {1, 2};
    MergeAssignment asg;
    asg.target = {0, 0};
    asg.group_sizes = {2};

    LayerKVCache merged = merge_average(c, sel, asg);
    CHECK(merged.keys[0].at(0, 0) == doctest::Approx(2.0));
    CHECK(merged.keys[0].at(0, 1) == doctest::Approx(2.0));
    CHECK(merged.meta[0].merged_count == 3);
}

TEST_CASE("empty less-important set leaves rows bit-identical") {
    std::mt19937_64 gen(3);
    LayerKVCache c = random_cache(gen, 5, 2, 4);
    SelectionResult sel;
    for (std::size_t i = 0; i < 5; ++i) sel.conserved.push_back(i);
    MergeAssignment asg;  // nothing to merge
    LayerKVCache merged = merge_average(c, sel, asg);
    for (std::size_t h = 0; h < 2; ++h) {
        CHECK(merged.keys[h].data == c.keys[h].data);
        CHECK(merged.values[h].data == c.values[h].data);
    }
}

TEST_CASE("merged rows are exact means of their groups") {
    std::mt19937_64 gen(808);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t tokens = 4 + gen() % 10;
        const std::size_t heads = 1 + gen() % 3;
        LayerKVCache cache = random_cache(gen, tokens, heads, 4);
        Matrix attn = random_causal_attention(gen, tokens);

        LayerBudget budget;
        budget.budget = 1 + gen() % (tokens - 1);
        budget.recent = 1 + gen() % budget.budget;
        budget.important = budget.budget - budget.recent;
        budget.full_len = tokens;

        CompressionConfig cfg;
        cfg.rho = 0.5;
        CompressedLayer out = compress_layer(cache, attn, budget, cfg);

        // recompute each conserved row from the original rows
        const std::vector<std::size_t>& cons = out.selection.conserved;
        Matrix avg_keys = cache.head_averaged_keys();
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t ci = 0; ci < cons.size(); ++ci) {
                std::vector<std::size_t> group = {cons[ci]};
                for (std::size_t li = 0; li < out.selection.less_important.size(); ++li) {
                    // recompute the nearest conserved target by scalar scan
                    const std::size_t tok = out.selection.less_important[li];
                    std::size_t best = 0;
                    double best_sim = -2.0;
                    for (std::size_t cj = 0; cj < cons.size(); ++cj) {
                        const double s =
                            cosine_similarity(avg_keys.row(tok), avg_keys.row(cons[cj]));
                        if (s > best_sim) {
                            best_sim = s;
                            best = cj;
                        }
                    }
                    if (best == ci) group.push_back(tok);
                }
                for (std::size_t d = 0; d < 4; ++d) {
                    double mean_k = 0.0, mean_v = 0.0;
                    for (std::size_t g : group) {
                        mean_k += cache.keys[h].at(g, d);
                        mean_v += cache.values[h].at(g, d);
                    }
                    mean_k /= static_cast<double>(group.size());
                    mean_v /= static_cast<double>(group.size());
                    CHECK(std::abs(out.cache.keys[h].at(ci, d) - mean_k) < 1e-12);
                    CHECK(std::abs(out.cache.values[h].at(ci, d) - mean_v) < 1e-12);
                }
                CHECK(out.cache.meta[ci].merged_count == group.size());
            }
        }

        // merged counts conserve the original token count
        std::size_t mass = 0;
        for (const CachedToken& tok : out.cache.meta) mass += tok.merged_count;
        CHECK(mass == tokens);
    }
}

TEST_CASE("compress_layer at full budget is the identity") {
    std::mt19937_64 gen(11);
    LayerKVCache cache = random_cache(gen, 8, 2, 4);
    Matrix attn = random_causal_attention(gen, 8);
    LayerBudget budget{1.0, 8, 6, 2, 8};
    CompressionConfig cfg;
    CompressedLayer out = compress_layer(cache, attn, budget, cfg);
    CHECK(out.cache.token_count() == 8);
    for (std::size_t h = 0; h < 2; ++h) {
        CHECK(out.cache.keys[h].data == cache.keys[h].data);
        CHECK(out.cache.values[h].data == cache.values[h].data);
    }
    CHECK(out.report.merged == 0);
    CHECK(out.report.evicted == 0);
}

TEST_CASE("eviction and merging keep identical conserved sets") {
    std::mt19937_64 gen(21);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t tokens = 6 + gen() % 10;
        LayerKVCache cache = random_cache(gen, tokens, 2, 4);
        Matrix attn = random_causal_attention(gen, tokens);
        LayerBudget budget;
        budget.budget = 2 + gen() % (tokens - 2);
        budget.recent = 1 + gen() % budget.budget;
        budget.important = budget.budget - budget.recent;
        budget.full_len = tokens;

        CompressionConfig with_merge;
        CompressionConfig without = with_merge;
        without.merge_enabled = false;
        CompressedLayer merged = compress_layer(cache, attn, budget, with_merge);
        CompressedLayer evicted = compress_layer(cache, attn, budget, without);

        CHECK(merged.selection.conserved == evicted.selection.conserved);
        CHECK(merged.report.retained == evicted.report.retained);
        CHECK(merged.report.merged == evicted.report.evicted);

        // evicted rows are exactly the conserved originals
        for (std::size_t h = 0; h < 2; ++h) {
            for (std::size_t i = 0; i < evicted.selection.conserved.size(); ++i) {
                const std::size_t src = evicted.selection.conserved[i];
                for (std::size_t d = 0; d < 4; ++d) {
                    CHECK(evicted.cache.keys[h].at(i, d) == cache.keys[h].at(src, d));
                }
            }
        }

        // conserved tokens keep original positional order
        CHECK(std::is_sorted(merged.cache.meta.begin(), merged.cache.meta.end(),
                             [](const CachedToken& a, const CachedToken& b) {
                                 return a.original_position < b.original_position;
                             }));
    }
}

TEST_CASE("text boost changes selection only when enabled") {
    std::mt19937_64 gen(77);
    LayerKVCache cache = random_cache(gen, 12, 1, 4, 0.4);
    Matrix attn = random_causal_attention(gen, 12);
    LayerBudget budget{0.5, 5, 2, 3, 12};

    CompressionConfig boosted;
    CompressionConfig plain;
    plain.text_boost_enabled = false;
    CompressedLayer with = compress_layer(cache, attn, budget, boosted);
    CompressedLayer without = compress_layer(cache, attn, budget, plain);

    auto [text_idx, vision_idx] = partition_by_modality(cache);
    // with boosting, text tokens fill the top-N before any vision token
    std::size_t text_outside_window = 0;
    for (std::size_t i : text_idx) {
        if (i < 12 - budget.recent) ++text_outside_window;
    }
    std::size_t text_selected = 0;
    for (std::size_t i : with.selection.conserved) {
        if (i < 12 - budget.recent && cache.meta[i].modality == Modality::Text) ++text_selected;
    }
    CHECK(text_selected == std::min(text_outside_window, budget.important));
    // the unboosted run is free to pick vision tokens instead
    CHECK(without.selection.conserved.size() == with.selection.conserved.size());
}
