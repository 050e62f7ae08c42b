#include "csimae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

#include "csimae/masking.hpp"
#include "csimae/rng.hpp"

namespace csimae {

NmseResult nmse(const ComplexTensor& truth, const ComplexTensor& pred) {
    if (!(truth.scale == pred.scale) || truth.re.size() != pred.re.size() || truth.im.size() != pred.im.size())
        throw std::invalid_argument("nmse: shape mismatch");
    double err = 0.0;
    double ref = 0.0;
    for (std::size_t i = 0; i < truth.re.size(); ++i) {
        const double dr = truth.re[i] - pred.re[i];
        const double di = truth.im[i] - pred.im[i];
        err += dr * dr + di * di;
        ref += truth.re[i] * truth.re[i] + truth.im[i] * truth.im[i];
    }
    if (ref == 0.0)
        throw std::invalid_argument("nmse: truth has zero norm");
    NmseResult r;
    r.linear = err / ref;
    r.db = r.linear == 0.0 ? -std::numeric_limits<double>::infinity() : 10.0 * std::log10(r.linear);
    return r;
}

std::string format_db(double db) {
    if (std::isinf(db)) return db < 0 ? "-inf" : "inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", db);
    return buf;
}

double grad_cosine(const Eigen::VectorXd& g1, const Eigen::VectorXd& g2) {
    if (g1.size() != g2.size())
        throw std::invalid_argument("grad_cosine: length mismatch");
    const double n1 = g1.squaredNorm();
    const double n2 = g2.squaredNorm();
    if (n1 == 0.0 || n2 == 0.0)
        throw std::invalid_argument("grad_cosine: zero-norm gradient");
    return std::clamp(g1.dot(g2) / std::sqrt(n1 * n2), -1.0, 1.0);
}

ConflictStats ConflictStats::from_cosines(std::vector<double> cosines) {
    ConflictStats s;
    s.histogram.assign(kConflictBins, 0);
    std::size_t negative = 0;
    for (double c : cosines) {
        if (c < 0.0) ++negative;
        auto bin = static_cast<std::size_t>((c + 1.0) / 2.0 * kConflictBins);
        ++s.histogram[std::min(bin, kConflictBins - 1)];
    }
    s.fraction_negative = cosines.empty() ? 0.0 : static_cast<double>(negative) / static_cast<double>(cosines.size());
    s.cosines = std::move(cosines);
    return s;
}

Eigen::VectorXd sample_gradient(const ToyMaeModel& model, const TokenSequence& seq, double mask_ratio,
                                std::uint64_t seed, std::uint32_t sample_id) {
    ToyMaeModel probe = model;
    probe.zero_grad();
    MaeMask mask = mae_mask(seq, MaskKind::random, mask_ratio, derive_seed(seed, sample_id, 0));
    forward_backward(probe, make_batch({seq}, {mask}));
    return probe.flat_gradient();
}

namespace {

ConflictStats plan_conflicts(const ToyMaeModel& model, const BatchPlan& plan, const SequenceTable& sequences,
                             const ConflictOptions& opt) {
    std::vector<const MiniBatch*> eligible;
    for (const auto& b : plan.batches)
        if (b.sample_ids.size() >= 2) eligible.push_back(&b);
    if (eligible.empty())
        throw std::invalid_argument("conflict_experiment: plan has no batch with two samples");

    std::map<std::uint32_t, Eigen::VectorXd> cache;
    auto gradient = [&](std::uint32_t id) -> const Eigen::VectorXd& {
        auto it = cache.find(id);
        if (it == cache.end()) {
            auto seq = sequences.find(id);
            if (seq == sequences.end())
                throw std::invalid_argument("conflict_experiment: unknown sample id " + std::to_string(id));
            it = cache.emplace(id, sample_gradient(model, seq->second, opt.mask_ratio, opt.seed, id)).first;
        }
        return it->second;
    };

    Philox rng(opt.seed, 0);
    std::vector<double> cosines;
    cosines.reserve(opt.n_pairs);
    for (std::size_t p = 0; p < opt.n_pairs; ++p) {
        const MiniBatch& b = *eligible[rng.uniform_index(eligible.size())];
        const std::size_t n = b.sample_ids.size();
        const std::size_t i = rng.uniform_index(n);
        std::size_t j = rng.uniform_index(n - 1);
        if (j >= i) ++j;
        cosines.push_back(grad_cosine(gradient(b.sample_ids[i]), gradient(b.sample_ids[j])));
    }
    return ConflictStats::from_cosines(std::move(cosines));
}

}  // namespace

std::pair<ConflictStats, ConflictStats> conflict_experiment(const ToyMaeModel& model, const BatchPlan& mixed,
                                                            const BatchPlan& homogeneous,
                                                            const SequenceTable& sequences,
                                                            const ConflictOptions& options) {
    return {plan_conflicts(model, mixed, sequences, options),
            plan_conflicts(model, homogeneous, sequences, options)};
}

CostReport compute_cost(const BatchPlan& plan, const SamplePool& pool) {
    CostReport r;
    for (const auto& b : plan.batches) {
        r.cost += static_cast<std::uint64_t>(b.sample_ids.size()) * b.padded_len;
        for (auto id : b.sample_ids) r.valid_tokens += pool.find(id).length;
    }
    r.jpad = r.cost - r.valid_tokens;
    r.padding_ratio = r.cost == 0 ? 0.0 : static_cast<double>(r.jpad) / static_cast<double>(r.cost);
    return r;
}

}  // namespace csimae
