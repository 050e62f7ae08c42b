#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace csimae {

enum class Strategy { proposed, sequential, alternating, global };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);

struct PoolEntry {
    std::uint32_t sample_id = 0;
    std::uint32_t dataset_id = 0;
    std::uint32_t length = 1;  // token length L
};

/// Global sample collection. Sample ids are unique and every length is >= 1.
class SamplePool {
public:
    SamplePool() = default;
    explicit SamplePool(std::vector<PoolEntry> entries);

    std::span<const PoolEntry> entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    /// Throws std::out_of_range for unknown ids.
    const PoolEntry& find(std::uint32_t sample_id) const;
    bool contains(std::uint32_t sample_id) const { return index_.contains(sample_id); }

    /// Number of distinct dataset ids.
    std::size_t num_datasets() const;
    std::size_t total_tokens() const;

private:
    std::vector<PoolEntry> entries_;
    std::unordered_map<std::uint32_t, std::size_t> index_;
};

struct Bucket {
    std::size_t index = 0;
    std::vector<PoolEntry> members;  // ascending (L, dataset_id, sample_id)
};

struct MiniBatch {
    std::vector<std::uint32_t> sample_ids;
    std::uint32_t padded_len = 0;  // h_j
    std::uint32_t group = 0;       // bucket index (proposed) or dataset id (baselines)
};

struct BucketInfo {
    std::uint32_t index = 0;
    std::uint32_t size = 0;
    std::uint32_t min_len = 0;
    std::uint32_t max_len = 0;
};

struct BatchPlan {
    Strategy strategy = Strategy::proposed;
    std::uint64_t seed = 0;
    std::vector<BucketInfo> buckets;  // empty for baselines
    std::vector<MiniBatch> batches;

    std::size_t num_samples() const;
};

/// Total padding overhead: sum over batches of sum_i (h_j - L_i).
std::uint64_t compute_jpad(const BatchPlan& plan, const SamplePool& pool);

/// Shannon entropy (nats) of the empirical dataset-id distribution.
double source_entropy(std::span<const std::uint32_t> dataset_ids);

/// Sort by (L, dataset_id, sample_id) and slice into contiguous buckets of
/// capacity ceil(|pool| / B). Empty trailing slices are not returned.
std::vector<Bucket> partition_buckets(const SamplePool& pool, std::size_t num_buckets);

struct OracleResult {
    std::uint64_t min_sum_h = 0;
    std::vector<std::vector<std::uint32_t>> witness;  // lengths grouped into batches
};

inline constexpr std::size_t kOracleMaxItems = 12;

/// Exhaustive minimum of sum_j max(batch_j) over all partitions into equal
/// batches of batch_size. Intended as a test oracle for small instances.
OracleResult oracle_min_padding(std::span<const std::uint32_t> lengths, std::size_t batch_size);

/// Shuffle inside each bucket, split into mini-batches that never cross a
/// bucket boundary, then shuffle the batch order globally.
BatchPlan schedule_epoch(std::span<const Bucket> buckets, std::size_t batch_size, std::uint64_t seed);

BatchPlan build_baseline_plan(const SamplePool& pool, Strategy strategy, std::size_t batch_size,
                              std::uint64_t seed);

/// Dispatches to partition_buckets + schedule_epoch or to a baseline.
BatchPlan build_plan(const SamplePool& pool, Strategy strategy, std::size_t num_buckets,
                     std::size_t batch_size, std::uint64_t seed);

/// Throws std::logic_error if the plan is not a partition of the pool, if a
/// padded length is not the batch maximum, or if more than one short batch
/// exists per group.
void validate_plan(const BatchPlan& plan, const SamplePool& pool, std::size_t batch_size);

struct DiversityReport {
    std::vector<double> entropies;
    double epsilon = 0.0;
    std::size_t violations = 0;
};

DiversityReport diversity_report(const BatchPlan& plan, const SamplePool& pool, double epsilon);

std::string serialize_plan(const BatchPlan& plan);
BatchPlan parse_plan(const std::string& text);

}  // namespace csimae
