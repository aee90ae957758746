#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "meda/kvcache.hpp"

using namespace meda;

namespace {

MemoryModel paper_model() {
    return {2, 32, 32, 128, 2};
}

LayerKVCache cache_with_tags(const std::vector<Modality>& tags) {
    LayerKVCache c;
    c.keys.emplace_back(tags.size(), 4);
    c.values.emplace_back(tags.size(), 4);
    for (std::size_t i = 0; i < tags.size(); ++i) {
        c.meta.push_back({i, tags[i], 1});
    }
    return c;
}

}  // namespace

TEST_CASE("memory estimate hand values") {
    CHECK(estimate_memory_gib(0, paper_model()) == 0.0);
    CHECK(estimate_memory_gib(1024, paper_model()) == 0.5);  // exact in binary arithmetic

    // the full-cache 2.42 GiB row corresponds to about 4957 tokens
    const double gib = estimate_memory_gib(4957, paper_model());
    CHECK(std::abs(gib - 2.42) < 0.01);
}

TEST_CASE("memory estimate is linear and monotone") {
    std::mt19937_64 gen(17);
    const MemoryModel m = paper_model();
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t a = gen() % 10000;
        const std::size_t b = gen() % 10000;
        CHECK(estimate_memory_gib(a + b, m) ==
              doctest::Approx(estimate_memory_gib(a, m) + estimate_memory_gib(b, m))
                  .epsilon(1e-12));
        if (a < b) {
            CHECK(estimate_memory_gib(a, m) < estimate_memory_gib(b, m));
        }
    }
}

TEST_CASE("per-layer estimate reduces to the uniform formula") {
    const MemoryModel m = paper_model();
    AllocationPlan plan;
    const std::size_t full = 1000;
    for (std::size_t l = 0; l < m.num_layers; ++l) {
        plan.alpha.push_back(1.0);
        plan.budget.push_back(full);
        plan.recent.push_back(750);
        plan.important.push_back(250);
        plan.full_len.push_back(full);
    }
    CHECK(estimate_memory_per_layer_gib(plan, 0, m) == estimate_memory_gib(full, m));
    CHECK(estimate_memory_per_layer_gib(plan, 16, m) == estimate_memory_gib(full + 16, m));

    for (std::size_t l = 0; l < m.num_layers; ++l) {
        plan.alpha[l] = 0.2;
        plan.budget[l] = full / 5;
    }
    CHECK(estimate_memory_per_layer_gib(plan, 0, m) == 0.2 * estimate_memory_gib(full, m));
}

TEST_CASE("per-layer estimate rejects a plan of the wrong size") {
    AllocationPlan plan;
    plan.alpha = {0.5};
    plan.budget = {10};
    plan.recent = {7};
    plan.important = {3};
    plan.full_len = {20};
    CHECK_THROWS_AS(estimate_memory_per_layer_gib(plan, 0, paper_model()), ShapeError);
}

TEST_CASE("modality partition") {
    auto [text_all, vision_none] =
        partition_by_modality(cache_with_tags({Modality::Text, Modality::Text}));
    CHECK(text_all.size() == 2);
    CHECK(vision_none.empty());

    auto [t, v] = partition_by_modality(cache_with_tags(
        {Modality::Text, Modality::Vision, Modality::Vision, Modality::Text}));
    CHECK(t == std::vector<std::size_t>{0, 3});
    CHECK(v == std::vector<std::size_t>{1, 2});
}

TEST_CASE("modality partition law on random tags") {
    std::mt19937_64 gen(23);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + gen() % 40;
        std::vector<Modality> tags(n);
        for (auto& m : tags) {
            m = (gen() & 1) ? Modality::Text : Modality::Vision;
        }
        auto [t, v] = partition_by_modality(cache_with_tags(tags));
        std::vector<bool> seen(n, false);
        for (std::size_t i : t) {
            CHECK(!seen[i]);
            seen[i] = true;
        }
        for (std::size_t i : v) {
            CHECK(!seen[i]);
            seen[i] = true;
        }
        for (bool s : seen) {
            CHECK(s);
        }
    }
}

TEST_CASE("cache validation catches inconsistencies") {
    LayerKVCache c = cache_with_tags({Modality::Text, Modality::Vision});
    c.validate();
    c.meta.pop_back();
    CHECK_THROWS_AS(c.validate(), ShapeError);
}

TEST_CASE("memory model validation") {
    MemoryModel bad = paper_model();
    bad.num_heads = 0;
    CHECK_THROWS_AS(estimate_memory_gib(10, bad), ContractError);
}

TEST_CASE("head-averaged keys average across heads") {
    LayerKVCache c;
    c.keys.emplace_back(1, 2, std::vector<double>{1.0, 3.0});
    c.keys.emplace_back(1, 2, std::vector<double>{3.0, 5.0});
    c.values.emplace_back(1, 2);
    c.values.emplace_back(1, 2);
    c.meta.push_back({0, Modality::Text, 1});
    Matrix avg = c.head_averaged_keys();
    CHECK(avg.at(0, 0) == 2.0);
    CHECK(avg.at(0, 1) == 4.0);
}
