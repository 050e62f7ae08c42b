#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <map>
#include <set>

#include "csimae/error.hpp"
#include "csimae/rng.hpp"
#include "csimae/scheduler.hpp"
#include "csimae/tensor_core.hpp"

using namespace csimae;

namespace {

SamplePool pool_from_lengths(const std::vector<std::uint32_t>& lengths, std::uint32_t dataset = 0) {
    std::vector<PoolEntry> e;
    for (std::uint32_t i = 0; i < lengths.size(); ++i) e.push_back({i, dataset, lengths[i]});
    return SamplePool(std::move(e));
}

// n_per samples for each (dataset, length) pair; dataset d has length lengths[d].
SamplePool dataset_pool(const std::vector<std::uint32_t>& lengths, std::uint32_t n_per) {
    std::vector<PoolEntry> e;
    for (std::uint32_t d = 0; d < lengths.size(); ++d)
        for (std::uint32_t i = 0; i < n_per; ++i) e.push_back({(d << 20) | i, d, lengths[d]});
    return SamplePool(std::move(e));
}

SamplePool random_pool(Philox& rng, std::size_t n, std::uint32_t datasets, std::uint32_t max_len) {
    std::vector<PoolEntry> e;
    for (std::uint32_t i = 0; i < n; ++i)
        e.push_back({i * 7 + 3, static_cast<std::uint32_t>(rng.uniform_index(datasets)),
                     1 + static_cast<std::uint32_t>(rng.uniform_index(max_len))});
    return SamplePool(std::move(e));
}

// Sorted-contiguous sum of batch maxima, computed directly.
std::uint64_t sorted_sum_h(std::vector<std::uint32_t> lengths, std::size_t batch) {
    std::sort(lengths.begin(), lengths.end());
    std::uint64_t s = 0;
    for (std::size_t i = batch - 1; i < lengths.size(); i += batch) s += lengths[i];
    return s;
}

double ratio(const BatchPlan& plan, const SamplePool& pool) {
    std::uint64_t cost = 0;
    for (const auto& b : plan.batches) cost += b.sample_ids.size() * b.padded_len;
    return static_cast<double>(compute_jpad(plan, pool)) / static_cast<double>(cost);
}

}  // namespace

TEST_SUITE("scheduler") {

TEST_CASE("strategy names") {
    for (Strategy s : {Strategy::proposed, Strategy::sequential, Strategy::alternating, Strategy::global})
        CHECK(parse_strategy(to_string(s)) == s);
    CHECK_THROWS_AS(parse_strategy("random"), ConfigError);
}

TEST_CASE("pool invariants") {
    CHECK_THROWS_AS(SamplePool({{1, 0, 4}, {1, 0, 5}}), std::invalid_argument);
    CHECK_THROWS_AS(SamplePool({{1, 0, 0}}), std::invalid_argument);
    SamplePool p({{1, 0, 4}, {2, 3, 5}});
    CHECK(p.num_datasets() == 2);
    CHECK(p.total_tokens() == 9);
    CHECK_THROWS_AS(p.find(9), std::out_of_range);
}

TEST_CASE("compute_jpad examples") {
    SamplePool pool = pool_from_lengths({8, 8, 8, 12});
    BatchPlan a;
    a.batches = {{{0, 1}, 8, 0}};
    CHECK(compute_jpad(a, pool) == 0);
    BatchPlan b;
    b.batches = {{{2, 3}, 12, 0}};
    CHECK(compute_jpad(b, pool) == 4);
    BatchPlan bad;
    bad.batches = {{{2, 42}, 12, 0}};
    CHECK_THROWS_AS(compute_jpad(bad, pool), std::out_of_range);
}

TEST_CASE("source_entropy examples") {
    std::vector<std::uint32_t> same{3, 3, 3};
    CHECK(source_entropy(same) == 0.0);
    std::vector<std::uint32_t> four{0, 1, 2, 3};
    CHECK(source_entropy(four) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
    std::vector<std::uint32_t> empty;
    CHECK_THROWS_AS(source_entropy(empty), std::invalid_argument);
}

TEST_CASE("partition_buckets examples") {
    SamplePool pool = pool_from_lengths({5, 3, 8, 1, 7, 2, 6, 4});
    auto one = partition_buckets(pool, 1);
    REQUIRE(one.size() == 1);
    CHECK(one[0].members.size() == 8);
    CHECK(std::is_sorted(one[0].members.begin(), one[0].members.end(),
                         [](auto& a, auto& b) { return a.length < b.length; }));
    auto four = partition_buckets(pool, 4);
    REQUIRE(four.size() == 4);
    for (std::size_t k = 0; k < 4; ++k) {
        CHECK(four[k].index == k);
        CHECK(four[k].members[0].length == 2 * k + 1);
        CHECK(four[k].members[1].length == 2 * k + 2);
    }
    CHECK_THROWS_AS(partition_buckets(pool, 0), std::invalid_argument);
    CHECK_THROWS_AS(partition_buckets(pool, 9), std::invalid_argument);
}

TEST_CASE("bucket tie-break is (L, dataset_id, sample_id)") {
    SamplePool pool({{9, 1, 4}, {2, 1, 4}, {5, 0, 4}, {1, 2, 3}});
    auto b = partition_buckets(pool, 1);
    std::vector<std::uint32_t> ids;
    for (auto& e : b[0].members) ids.push_back(e.sample_id);
    CHECK(ids == std::vector<std::uint32_t>{1, 5, 2, 9});
}

TEST_CASE("trailing bucket is smaller, empty slices dropped") {
    SamplePool pool = pool_from_lengths({1, 2, 3, 4, 5, 6, 7});
    auto b = partition_buckets(pool, 3);  // capacity 3
    REQUIRE(b.size() == 3);
    CHECK(b[2].members.size() == 1);
    auto c = partition_buckets(pool_from_lengths({1, 2, 3, 4, 5}), 4);  // capacity 2 -> 3 slices
    CHECK(c.size() == 3);
}

TEST_CASE("oracle examples and guards") {
    std::vector<std::uint32_t> equal{5, 5, 5, 5};
    CHECK(oracle_min_padding(equal, 2).min_sum_h == 10);
    std::vector<std::uint32_t> hand{1, 2, 9, 10};
    auto r = oracle_min_padding(hand, 2);
    CHECK(r.min_sum_h == 12);
    REQUIRE(r.witness.size() == 2);
    std::uint64_t s = 0;
    for (auto& w : r.witness) s += *std::max_element(w.begin(), w.end());
    CHECK(s == 12);
    std::vector<std::uint32_t> odd{1, 2, 3};
    CHECK_THROWS_AS(oracle_min_padding(odd, 2), std::invalid_argument);
    std::vector<std::uint32_t> big(14, 1);
    CHECK_THROWS_AS(oracle_min_padding(big, 2), std::invalid_argument);
}

TEST_CASE("sorted-contiguous partitions are optimal on small instances") {
    Philox rng(77, 0);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t batch = trial % 2 == 0 ? 2 : 4;
        std::vector<std::uint32_t> lengths(8);
        for (auto& l : lengths) l = 1 + static_cast<std::uint32_t>(rng.uniform_index(20));
        const auto oracle = oracle_min_padding(lengths, batch).min_sum_h;
        CHECK(sorted_sum_h(lengths, batch) == oracle);

        // the bucket partition with capacity == batch induces the same sum
        SamplePool pool = pool_from_lengths(lengths);
        std::uint64_t s = 0;
        for (const auto& b : partition_buckets(pool, lengths.size() / batch)) s += b.members.back().length;
        CHECK(s == oracle);
    }
}

TEST_CASE("one bucket with batch size equal to its size gives one batch") {
    SamplePool pool = pool_from_lengths({3, 1, 2, 5});
    auto plan = schedule_epoch(partition_buckets(pool, 1), 4, 1);
    REQUIRE(plan.batches.size() == 1);
    CHECK(plan.batches[0].sample_ids.size() == 4);
    CHECK(plan.batches[0].padded_len == 5);
}

TEST_CASE("every strategy yields a valid partition") {
    Philox rng(5, 0);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t n = 1 + rng.uniform_index(120);
        SamplePool pool = random_pool(rng, n, 1 + static_cast<std::uint32_t>(rng.uniform_index(5)), 40);
        const std::size_t bs = 1 + rng.uniform_index(9);
        const std::size_t B = 1 + rng.uniform_index(std::min<std::size_t>(n, 8));
        for (Strategy s : {Strategy::proposed, Strategy::sequential, Strategy::alternating, Strategy::global}) {
            BatchPlan plan = build_plan(pool, s, B, bs, trial);
            CHECK_NOTHROW(validate_plan(plan, pool, bs));
            CHECK(plan.num_samples() == n);
            const double r = ratio(plan, pool);
            CHECK(r >= 0.0);
            CHECK(r < 1.0);
        }
    }
}

TEST_CASE("validate_plan catches broken plans") {
    SamplePool pool = pool_from_lengths({1, 2, 3, 4});
    BatchPlan plan = build_plan(pool, Strategy::global, 1, 2, 0);
    auto dup = plan;
    dup.batches[0].sample_ids[0] = dup.batches[1].sample_ids[0];
    CHECK_THROWS_AS(validate_plan(dup, pool, 2), std::logic_error);
    auto low = plan;
    low.batches[0].padded_len = 0;
    CHECK_THROWS_AS(validate_plan(low, pool, 2), std::logic_error);
    auto missing = plan;
    missing.batches.pop_back();
    CHECK_THROWS_AS(validate_plan(missing, pool, 2), std::logic_error);
}

TEST_CASE("plans are deterministic per seed") {
    Philox rng(6, 0);
    SamplePool pool = random_pool(rng, 64, 4, 30);
    for (Strategy s : {Strategy::proposed, Strategy::sequential, Strategy::alternating, Strategy::global}) {
        CHECK(serialize_plan(build_plan(pool, s, 4, 8, 11)) == serialize_plan(build_plan(pool, s, 4, 8, 11)));
        CHECK(serialize_plan(build_plan(pool, s, 4, 8, 11)) != serialize_plan(build_plan(pool, s, 4, 8, 12)));
    }
}

TEST_CASE("batches never cross bucket boundaries") {
    Philox rng(7, 0);
    SamplePool pool = random_pool(rng, 100, 3, 50);
    auto buckets = partition_buckets(pool, 5);
    std::map<std::uint32_t, std::size_t> bucket_of;
    for (const auto& b : buckets)
        for (const auto& e : b.members) bucket_of[e.sample_id] = b.index;
    auto plan = schedule_epoch(buckets, 6, 3);
    for (const auto& b : plan.batches)
        for (auto id : b.sample_ids) CHECK(bucket_of[id] == b.group);
}

TEST_CASE("homogeneous datasets: baselines and aligned buckets have no padding") {
    SamplePool pool = dataset_pool({8, 16, 32, 64}, 48);
    CHECK(compute_jpad(build_plan(pool, Strategy::sequential, 1, 16, 1), pool) == 0);
    CHECK(compute_jpad(build_plan(pool, Strategy::alternating, 1, 16, 1), pool) == 0);
    CHECK(compute_jpad(build_plan(pool, Strategy::proposed, 4, 16, 1), pool) == 0);
    CHECK(compute_jpad(build_plan(pool, Strategy::global, 1, 16, 1), pool) > 0);
}

TEST_CASE("baseline batch orders") {
    SamplePool pool = dataset_pool({4, 4, 4}, 8);
    auto seq = build_plan(pool, Strategy::sequential, 1, 4, 2);
    std::vector<std::uint32_t> groups;
    for (auto& b : seq.batches) groups.push_back(b.group);
    CHECK(groups == std::vector<std::uint32_t>{0, 0, 1, 1, 2, 2});
    auto alt = build_plan(pool, Strategy::alternating, 1, 4, 2);
    groups.clear();
    for (auto& b : alt.batches) groups.push_back(b.group);
    CHECK(groups == std::vector<std::uint32_t>{0, 1, 2, 0, 1, 2});
    for (auto& b : alt.batches) {
        std::vector<std::uint32_t> ds;
        for (auto id : b.sample_ids) ds.push_back(pool.find(id).dataset_id);
        CHECK(source_entropy(ds) == 0.0);
    }
}

TEST_CASE("strategy ordering on a heterogeneous pool") {
    // four scales, four scenarios each
    std::vector<PoolEntry> e;
    const std::uint32_t lengths[4] = {8, 16, 32, 64};
    for (std::uint32_t d = 0; d < 16; ++d)
        for (std::uint32_t i = 0; i < 64; ++i) e.push_back({(d << 20) | i, d, lengths[d / 4]});
    SamplePool pool(std::move(e));
    const double g = ratio(build_plan(pool, Strategy::global, 1, 16, 1), pool);
    const double p2 = ratio(build_plan(pool, Strategy::proposed, 2, 16, 1), pool);
    const double p4 = ratio(build_plan(pool, Strategy::proposed, 4, 16, 1), pool);
    CHECK(g > p2);
    CHECK(p2 > p4);
    CHECK(p4 == 0.0);
}

TEST_CASE("padding decreases under bucket refinement in expectation") {
    Philox rng(8, 0);
    SamplePool pool = random_pool(rng, 96, 3, 60);
    for (auto [b1, b2] : {std::pair{1, 2}, {2, 4}, {4, 8}, {3, 6}, {6, 12}}) {
        double j1 = 0.0, j2 = 0.0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            j1 += static_cast<double>(compute_jpad(build_plan(pool, Strategy::proposed, b1, 4, seed), pool));
            j2 += static_cast<double>(compute_jpad(build_plan(pool, Strategy::proposed, b2, 4, seed), pool));
        }
        CHECK(j1 >= j2);
    }
}

TEST_CASE("pad_tokens padding matches compute_jpad") {
    SamplePool pool = dataset_pool({4, 8, 12}, 5);
    auto plan = build_plan(pool, Strategy::global, 1, 4, 3);
    std::uint64_t padded_rows = 0;
    for (const auto& b : plan.batches)
        for (auto id : b.sample_ids) {
            const auto L = pool.find(id).length;
            ComplexTensor x({2 * L, 2, 2});  // L tokens under the default patch
            auto seq = pad_tokens(patchify(x, PatchSpec{}), b.padded_len);
            padded_rows += seq.padded_len() - seq.valid_len;
        }
    CHECK(padded_rows == compute_jpad(plan, pool));
}

TEST_CASE("diversity report") {
    SamplePool single = dataset_pool({8}, 40);
    auto plan = build_plan(single, Strategy::proposed, 2, 8, 1);
    auto rep = diversity_report(plan, single, 0.1);
    CHECK(rep.violations == plan.batches.size());
    for (double h : rep.entropies) CHECK(h == 0.0);

    // Equal lengths sort by dataset id, so more than one bucket would split
    // the datasets apart.
    SamplePool four = dataset_pool({8, 8, 8, 8}, 64);
    CHECK(diversity_report(build_plan(four, Strategy::proposed, 4, 16, 0), four, 0.1).violations == 16);
    std::size_t violations = 0, batches = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto p = build_plan(four, Strategy::proposed, 1, 16, seed);
        auto r = diversity_report(p, four, 0.5 * std::log(4.0));
        violations += r.violations;
        batches += p.batches.size();
        for (double h : r.entropies) {
            CHECK(h >= 0.0);
            CHECK(h <= std::log(4.0) + 1e-12);
        }
    }
    CHECK(static_cast<double>(violations) / static_cast<double>(batches) < 0.05);
}

TEST_CASE("plan serialization round trip") {
    Philox rng(9, 0);
    SamplePool pool = random_pool(rng, 30, 3, 20);
    for (Strategy s : {Strategy::proposed, Strategy::global}) {
        auto plan = build_plan(pool, s, 3, 4, 5);
        auto text = serialize_plan(plan);
        auto back = parse_plan(text);
        CHECK(serialize_plan(back) == text);
        CHECK(back.strategy == s);
        CHECK(back.batches.size() == plan.batches.size());
    }
    CHECK_THROWS_AS(parse_plan("{not json"), DataError);
}

}
