#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "csimae/model.hpp"
#include "csimae/scheduler.hpp"
#include "csimae/tensor_core.hpp"

namespace csimae {

struct NmseResult {
    double linear = 0.0;
    double db = 0.0;  // -inf when linear == 0
};

/// ||H - Hhat||^2 / ||H||^2 over all entries. Throws std::invalid_argument on
/// a shape mismatch or an all-zero truth.
NmseResult nmse(const ComplexTensor& truth, const ComplexTensor& pred);

/// dB value for result files; -inf is written as the string "-inf".
std::string format_db(double db);

/// <g1, g2> / (||g1|| ||g2||), clamped to [-1, 1].
/// Throws std::invalid_argument on unequal lengths or a zero-norm input.
double grad_cosine(const Eigen::VectorXd& g1, const Eigen::VectorXd& g2);

inline constexpr std::size_t kConflictBins = 41;

struct ConflictStats {
    std::vector<double> cosines;
    double fraction_negative = 0.0;
    std::vector<std::uint64_t> histogram;  // kConflictBins uniform bins over [-1, 1]

    static ConflictStats from_cosines(std::vector<double> cosines);
};

/// Single-sample inputs for gradient probes, keyed by sample id.
using SequenceTable = std::unordered_map<std::uint32_t, TokenSequence>;

struct ConflictOptions {
    std::size_t n_pairs = 200;
    double mask_ratio = 0.5;
    std::uint64_t seed = 0;
};

/// Flat full-parameter gradient of the masked loss of one sample. The mask is
/// a random mask keyed by (seed, sample_id) so a sample always sees the same
/// mask.
Eigen::VectorXd sample_gradient(const ToyMaeModel& model, const TokenSequence& seq, double mask_ratio,
                                std::uint64_t seed, std::uint32_t sample_id);

/// Cosines between gradients of co-batched sample pairs. For each plan,
/// n_pairs times: pick a batch with at least two samples, then two distinct
/// members, all from Philox(seed, 0). Gradients are taken at the given fixed
/// parameter point.
std::pair<ConflictStats, ConflictStats> conflict_experiment(const ToyMaeModel& model, const BatchPlan& mixed,
                                                            const BatchPlan& homogeneous,
                                                            const SequenceTable& sequences,
                                                            const ConflictOptions& options);

struct CostReport {
    std::uint64_t cost = 0;          // sum_j |batch_j| * h_j
    std::uint64_t valid_tokens = 0;  // sum_i L_i
    std::uint64_t jpad = 0;
    double padding_ratio = 0.0;      // jpad / cost
};

CostReport compute_cost(const BatchPlan& plan, const SamplePool& pool);

}  // namespace csimae
