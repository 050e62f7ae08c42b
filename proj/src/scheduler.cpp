#include "csimae/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "csimae/error.hpp"
#include "csimae/rng.hpp"

namespace csimae {

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::proposed: return "proposed";
        case Strategy::sequential: return "sequential";
        case Strategy::alternating: return "alternating";
        case Strategy::global: return "global";
    }
    return "unknown";
}

Strategy parse_strategy(const std::string& name) {
    for (Strategy s : {Strategy::proposed, Strategy::sequential, Strategy::alternating, Strategy::global})
        if (to_string(s) == name)
            return s;
    throw ConfigError("unknown strategy '" + name + "'");
}

SamplePool::SamplePool(std::vector<PoolEntry> entries) : entries_(std::move(entries)) {
    index_.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].length < 1)
            throw std::invalid_argument("pool entry with zero token length");
        if (!index_.emplace(entries_[i].sample_id, i).second)
            throw std::invalid_argument("duplicate sample id " + std::to_string(entries_[i].sample_id));
    }
}

const PoolEntry& SamplePool::find(std::uint32_t sample_id) const {
    auto it = index_.find(sample_id);
    if (it == index_.end())
        throw std::out_of_range("unknown sample id " + std::to_string(sample_id));
    return entries_[it->second];
}

std::size_t SamplePool::num_datasets() const {
    std::set<std::uint32_t> ids;
    for (const auto& e : entries_) ids.insert(e.dataset_id);
    return ids.size();
}

std::size_t SamplePool::total_tokens() const {
    std::size_t total = 0;
    for (const auto& e : entries_) total += e.length;
    return total;
}

std::size_t BatchPlan::num_samples() const {
    std::size_t n = 0;
    for (const auto& b : batches) n += b.sample_ids.size();
    return n;
}

std::uint64_t compute_jpad(const BatchPlan& plan, const SamplePool& pool) {
    std::uint64_t jpad = 0;
    for (const MiniBatch& b : plan.batches)
        for (std::uint32_t id : b.sample_ids) {
            const PoolEntry& e = pool.find(id);
            if (e.length > b.padded_len)
                throw std::logic_error("batch padded length below member length");
            jpad += b.padded_len - e.length;
        }
    return jpad;
}

double source_entropy(std::span<const std::uint32_t> dataset_ids) {
    if (dataset_ids.empty())
        throw std::invalid_argument("source_entropy of an empty batch");
    std::map<std::uint32_t, std::size_t> counts;
    for (std::uint32_t d : dataset_ids) ++counts[d];
    const double n = static_cast<double>(dataset_ids.size());
    double h = 0.0;
    for (const auto& [d, c] : counts) {
        const double p = static_cast<double>(c) / n;
        h -= p * std::log(p);
    }
    return h <= 0.0 ? 0.0 : h;
}

namespace {

bool sort_key_less(const PoolEntry& a, const PoolEntry& b) {
    if (a.length != b.length) return a.length < b.length;
    if (a.dataset_id != b.dataset_id) return a.dataset_id < b.dataset_id;
    return a.sample_id < b.sample_id;
}

std::uint32_t max_length(std::span<const std::uint32_t> ids, const SamplePool& pool) {
    std::uint32_t h = 0;
    for (std::uint32_t id : ids) h = std::max(h, pool.find(id).length);
    return h;
}

// Consecutive batches of batch_size; the last one may be short.
void split_into_batches(std::span<const PoolEntry> members, std::size_t batch_size, std::uint32_t group,
                        std::vector<MiniBatch>& out) {
    for (std::size_t start = 0; start < members.size(); start += batch_size) {
        MiniBatch b;
        b.group = group;
        std::size_t end = std::min(members.size(), start + batch_size);
        for (std::size_t i = start; i < end; ++i) {
            b.sample_ids.push_back(members[i].sample_id);
            b.padded_len = std::max(b.padded_len, members[i].length);
        }
        out.push_back(std::move(b));
    }
}

std::map<std::uint32_t, std::vector<PoolEntry>> group_by_dataset(const SamplePool& pool) {
    std::map<std::uint32_t, std::vector<PoolEntry>> groups;
    for (const auto& e : pool.entries()) groups[e.dataset_id].push_back(e);
    for (auto& [d, members] : groups)
        std::sort(members.begin(), members.end(),
                  [](const PoolEntry& a, const PoolEntry& b) { return a.sample_id < b.sample_id; });
    return groups;
}

void enumerate_partitions(std::span<const std::uint32_t> lengths, std::size_t batch_size,
                          std::vector<int>& assignment, int next_group, std::uint64_t running,
                          OracleResult& best, std::vector<int>& best_assignment) {
    auto first = std::find(assignment.begin(), assignment.end(), -1);
    if (first == assignment.end()) {
        if (running < best.min_sum_h) {
            best.min_sum_h = running;
            best_assignment = assignment;
        }
        return;
    }
    const std::size_t anchor = static_cast<std::size_t>(first - assignment.begin());
    assignment[anchor] = next_group;

    // Choose batch_size - 1 companions from the unassigned items after anchor.
    std::vector<std::size_t> free;
    for (std::size_t i = anchor + 1; i < lengths.size(); ++i)
        if (assignment[i] == -1) free.push_back(i);

    const std::size_t need = batch_size - 1;
    std::vector<std::size_t> pick(need);
    auto recurse = [&](auto&& self, std::size_t from, std::size_t depth, std::uint32_t h) -> void {
        if (depth == need) {
            enumerate_partitions(lengths, batch_size, assignment, next_group + 1, running + h, best,
                                 best_assignment);
            return;
        }
        for (std::size_t f = from; f + (need - depth) <= free.size(); ++f) {
            assignment[free[f]] = next_group;
            self(self, f + 1, depth + 1, std::max(h, lengths[free[f]]));
            assignment[free[f]] = -1;
        }
    };
    recurse(recurse, 0, 0, lengths[anchor]);
    assignment[anchor] = -1;
}

}  // namespace

std::vector<Bucket> partition_buckets(const SamplePool& pool, std::size_t num_buckets) {
    if (num_buckets < 1 || num_buckets > pool.size())
        throw std::invalid_argument("bucket count " + std::to_string(num_buckets) +
                                    " outside [1, " + std::to_string(pool.size()) + "]");
    std::vector<PoolEntry> sorted(pool.entries().begin(), pool.entries().end());
    std::sort(sorted.begin(), sorted.end(), sort_key_less);

    const std::size_t capacity = (sorted.size() + num_buckets - 1) / num_buckets;
    std::vector<Bucket> buckets;
    for (std::size_t k = 0; k < num_buckets; ++k) {
        std::size_t begin = k * capacity;
        if (begin >= sorted.size()) break;
        std::size_t end = std::min(sorted.size(), begin + capacity);
        Bucket b;
        b.index = k;
        b.members.assign(sorted.begin() + static_cast<std::ptrdiff_t>(begin),
                         sorted.begin() + static_cast<std::ptrdiff_t>(end));
        buckets.push_back(std::move(b));
    }
    return buckets;
}

OracleResult oracle_min_padding(std::span<const std::uint32_t> lengths, std::size_t batch_size) {
    if (batch_size < 1 || lengths.empty() || lengths.size() % batch_size != 0)
        throw std::invalid_argument("oracle: batch size must divide the instance size");
    if (lengths.size() > kOracleMaxItems)
        throw std::invalid_argument("oracle: instance larger than " + std::to_string(kOracleMaxItems));

    OracleResult best;
    best.min_sum_h = std::numeric_limits<std::uint64_t>::max();
    std::vector<int> assignment(lengths.size(), -1), best_assignment;
    enumerate_partitions(lengths, batch_size, assignment, 0, 0, best, best_assignment);

    best.witness.assign(lengths.size() / batch_size, {});
    for (std::size_t i = 0; i < lengths.size(); ++i)
        best.witness[static_cast<std::size_t>(best_assignment[i])].push_back(lengths[i]);
    return best;
}

BatchPlan schedule_epoch(std::span<const Bucket> buckets, std::size_t batch_size, std::uint64_t seed) {
    if (buckets.empty())
        throw std::invalid_argument("schedule_epoch needs at least one bucket");
    if (batch_size < 1)
        throw std::invalid_argument("batch size must be >= 1");

    BatchPlan plan;
    plan.strategy = Strategy::proposed;
    plan.seed = seed;
    for (const Bucket& bucket : buckets) {
        if (bucket.members.empty())
            throw std::invalid_argument("schedule_epoch: empty bucket");
        std::vector<PoolEntry> members = bucket.members;
        Philox rng(seed, bucket.index + 1);
        rng.shuffle(std::span<PoolEntry>(members));
        split_into_batches(members, batch_size, static_cast<std::uint32_t>(bucket.index), plan.batches);

        BucketInfo info;
        info.index = static_cast<std::uint32_t>(bucket.index);
        info.size = static_cast<std::uint32_t>(bucket.members.size());
        info.min_len = bucket.members.front().length;
        info.max_len = bucket.members.back().length;
        plan.buckets.push_back(info);
    }
    Philox rng(seed, 0);
    rng.shuffle(std::span<MiniBatch>(plan.batches));
    return plan;
}

BatchPlan build_baseline_plan(const SamplePool& pool, Strategy strategy, std::size_t batch_size,
                              std::uint64_t seed) {
    if (batch_size < 1)
        throw std::invalid_argument("batch size must be >= 1");
    BatchPlan plan;
    plan.strategy = strategy;
    plan.seed = seed;

    switch (strategy) {
        case Strategy::sequential:
        case Strategy::alternating: {
            std::vector<std::vector<MiniBatch>> per_dataset;
            for (auto& [dataset, members] : group_by_dataset(pool)) {
                Philox rng(seed, std::uint64_t{dataset} + 1);
                rng.shuffle(std::span<PoolEntry>(members));
                per_dataset.emplace_back();
                split_into_batches(members, batch_size, dataset, per_dataset.back());
            }
            if (strategy == Strategy::sequential) {
                for (auto& batches : per_dataset)
                    for (auto& b : batches) plan.batches.push_back(std::move(b));
            } else {
                for (std::size_t round = 0;; ++round) {
                    bool any = false;
                    for (auto& batches : per_dataset)
                        if (round < batches.size()) {
                            plan.batches.push_back(std::move(batches[round]));
                            any = true;
                        }
                    if (!any) break;
                }
            }
            break;
        }
        case Strategy::global: {
            std::vector<PoolEntry> members(pool.entries().begin(), pool.entries().end());
            std::sort(members.begin(), members.end(),
                      [](const PoolEntry& a, const PoolEntry& b) { return a.sample_id < b.sample_id; });
            Philox rng(seed, 0);
            rng.shuffle(std::span<PoolEntry>(members));
            split_into_batches(members, batch_size, 0, plan.batches);
            break;
        }
        case Strategy::proposed:
            throw std::invalid_argument("build_baseline_plan: 'proposed' is not a baseline");
    }
    return plan;
}

BatchPlan build_plan(const SamplePool& pool, Strategy strategy, std::size_t num_buckets,
                     std::size_t batch_size, std::uint64_t seed) {
    if (strategy != Strategy::proposed)
        return build_baseline_plan(pool, strategy, batch_size, seed);
    auto buckets = partition_buckets(pool, num_buckets);
    return schedule_epoch(buckets, batch_size, seed);
}

void validate_plan(const BatchPlan& plan, const SamplePool& pool, std::size_t batch_size) {
    std::set<std::uint32_t> seen;
    std::map<std::uint32_t, int> short_batches;
    for (const MiniBatch& b : plan.batches) {
        if (b.sample_ids.empty())
            throw std::logic_error("empty mini-batch");
        if (b.sample_ids.size() > batch_size)
            throw std::logic_error("mini-batch larger than batch size");
        if (b.sample_ids.size() < batch_size && ++short_batches[b.group] > 1)
            throw std::logic_error("more than one short batch in group " + std::to_string(b.group));
        for (std::uint32_t id : b.sample_ids) {
            if (!pool.contains(id))
                throw std::logic_error("plan references unknown sample " + std::to_string(id));
            if (!seen.insert(id).second)
                throw std::logic_error("sample " + std::to_string(id) + " scheduled twice");
        }
        if (b.padded_len != max_length(b.sample_ids, pool))
            throw std::logic_error("padded length is not the batch maximum");
    }
    if (seen.size() != pool.size())
        throw std::logic_error("plan does not cover the pool");
}

DiversityReport diversity_report(const BatchPlan& plan, const SamplePool& pool, double epsilon) {
    DiversityReport report;
    report.epsilon = epsilon;
    std::vector<std::uint32_t> ids;
    for (const MiniBatch& b : plan.batches) {
        ids.clear();
        for (std::uint32_t id : b.sample_ids) ids.push_back(pool.find(id).dataset_id);
        double h = source_entropy(ids);
        report.entropies.push_back(h);
        if (h < epsilon) ++report.violations;
    }
    return report;
}

std::string serialize_plan(const BatchPlan& plan) {
    nlohmann::ordered_json j;
    j["format_version"] = 1;
    j["strategy"] = to_string(plan.strategy);
    j["seed"] = plan.seed;
    auto& buckets = j["buckets"] = nlohmann::ordered_json::array();
    for (const auto& b : plan.buckets)
        buckets.push_back({{"index", b.index}, {"size", b.size}, {"min_len", b.min_len}, {"max_len", b.max_len}});
    auto& batches = j["batches"] = nlohmann::ordered_json::array();
    for (const auto& b : plan.batches)
        batches.push_back({{"group", b.group}, {"h", b.padded_len}, {"members", b.sample_ids}});
    return j.dump(1) + "\n";
}

BatchPlan parse_plan(const std::string& text) {
    try {
        auto j = nlohmann::json::parse(text);
        if (j.at("format_version").get<int>() != 1)
            throw DataError("unsupported plan format_version");
        BatchPlan plan;
        plan.strategy = parse_strategy(j.at("strategy").get<std::string>());
        plan.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& b : j.at("buckets"))
            plan.buckets.push_back({b.at("index").get<std::uint32_t>(), b.at("size").get<std::uint32_t>(),
                                    b.at("min_len").get<std::uint32_t>(), b.at("max_len").get<std::uint32_t>()});
        for (const auto& b : j.at("batches")) {
            MiniBatch mb;
            mb.group = b.at("group").get<std::uint32_t>();
            mb.padded_len = b.at("h").get<std::uint32_t>();
            mb.sample_ids = b.at("members").get<std::vector<std::uint32_t>>();
            plan.batches.push_back(std::move(mb));
        }
        return plan;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed plan: ") + e.what());
    }
}

}  // namespace csimae
