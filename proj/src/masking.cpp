#include "csimae/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "csimae/error.hpp"

namespace csimae {

std::string to_string(MaskKind k) {
    switch (k) {
        case MaskKind::random: return "random";
        case MaskKind::time: return "time";
        case MaskKind::frequency: return "frequency";
    }
    return "unknown";
}

MaskKind parse_mask_kind(const std::string& name) {
    for (MaskKind k : {MaskKind::random, MaskKind::time, MaskKind::frequency})
        if (to_string(k) == name)
            return k;
    throw ConfigError("unknown mask kind '" + name + "'");
}

std::size_t MaeMask::hidden_count() const {
    return static_cast<std::size_t>(std::count(hidden.begin(), hidden.end(), std::uint8_t{1}));
}

MaeMask empty_mask(std::size_t valid_len) {
    MaeMask m;
    m.hidden.assign(valid_len, 0);
    return m;
}

MaeMask mae_mask(const TokenSequence& seq, MaskKind kind, double param, std::uint64_t seed) {
    MaeMask m;
    m.kind = kind;
    m.param = param;
    m.hidden.assign(seq.valid_len, 0);

    switch (kind) {
        case MaskKind::random: {
            if (!(param > 0.0 && param < 1.0))
                throw std::invalid_argument("random mask ratio must lie in (0, 1)");
            const auto count = static_cast<std::size_t>(std::llround(param * static_cast<double>(seq.valid_len)));
            std::vector<std::size_t> order(seq.valid_len);
            std::iota(order.begin(), order.end(), std::size_t{0});
            // Partial Fisher-Yates: the first `count` slots are the sample.
            Philox rng(seed, 0);
            for (std::size_t i = 0; i < count; ++i) {
                std::size_t j = i + rng.uniform_index(order.size() - i);
                std::swap(order[i], order[j]);
                m.hidden[order[i]] = 1;
            }
            break;
        }
        case MaskKind::time:
        case MaskKind::frequency: {
            const bool time = kind == MaskKind::time;
            const std::uint32_t axis = time ? seq.scale.T : seq.scale.K;
            const std::uint32_t edge = time ? seq.patch.t : seq.patch.k;
            if (!(param >= 1.0 && param <= axis) || param != std::floor(param))
                throw std::invalid_argument(std::string(time ? "T_h" : "K_u") + " must be an integer in [1, " +
                                            std::to_string(axis) + "]");
            const auto cut = static_cast<std::uint32_t>((static_cast<std::uint32_t>(param) + edge - 1) / edge);
            const GridShape& g = seq.grid;
            for (std::uint32_t gt = 0; gt < g.T; ++gt)
                for (std::uint32_t gk = 0; gk < g.K; ++gk)
                    for (std::uint32_t ga = 0; ga < g.A; ++ga)
                        if ((time ? gt : gk) >= cut)
                            m.hidden[g.index(gt, gk, ga)] = 1;
            break;
        }
    }
    return m;
}

AttnBias build_attn_bias(std::span<const std::size_t> valid_lens, std::size_t length) {
    std::vector<std::vector<std::uint8_t>> visible;
    visible.reserve(valid_lens.size());
    for (std::size_t lb : valid_lens) {
        if (lb < 1 || lb > length)
            throw std::invalid_argument("valid length " + std::to_string(lb) + " outside [1, " +
                                        std::to_string(length) + "]");
        std::vector<std::uint8_t> v(length, 0);
        std::fill(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lb), std::uint8_t{1});
        visible.push_back(std::move(v));
    }
    AttnBias bias = build_key_bias(visible);
    bias.length = length;
    bias.valid_lens.assign(valid_lens.begin(), valid_lens.end());
    return bias;
}

AttnBias build_key_bias(const std::vector<std::vector<std::uint8_t>>& key_visible) {
    AttnBias bias;
    bias.length = key_visible.empty() ? 0 : key_visible.front().size();
    for (const auto& vis : key_visible) {
        if (vis.size() != bias.length)
            throw std::invalid_argument("key visibility rows differ in length");
        const auto n = static_cast<Eigen::Index>(bias.length);
        Matrix M(n, n);
        std::size_t valid = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
            M.col(j).setConstant(vis[static_cast<std::size_t>(j)] ? 0.0 : kMaskedLogit);
            if (vis[static_cast<std::size_t>(j)]) valid = static_cast<std::size_t>(j) + 1;
        }
        bias.valid_lens.push_back(valid);
        bias.M.push_back(std::move(M));
    }
    return bias;
}

void MaskPolicy::validate() const {
    if (!(random_ratio > 0.0 && random_ratio < 1.0))
        throw ConfigError("mask.random_ratio must lie in (0, 1)");
    if (!(time_keep > 0.0 && time_keep <= 1.0) || !(freq_keep > 0.0 && freq_keep <= 1.0))
        throw ConfigError("mask keep fractions must lie in (0, 1]");
    double total = 0.0;
    for (double w : kind_weights) {
        if (!(w >= 0.0)) throw ConfigError("mask kind weights must be >= 0");
        total += w;
    }
    if (!(total > 0.0)) throw ConfigError("mask kind weights must not all be zero");
}

MaskKind draw_mask_kind(const MaskPolicy& policy, Philox& rng) {
    const auto& w = policy.kind_weights;
    const double u = rng.uniform() * (w[0] + w[1] + w[2]);
    double cum = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] <= 0.0) continue;
        cum += w[i];
        last = i;
        if (u < cum) return static_cast<MaskKind>(i);
    }
    return static_cast<MaskKind>(last);
}

std::uint32_t structured_cut(const TokenSequence& seq, MaskKind kind, double keep) {
    const bool time = kind == MaskKind::time;
    const std::uint32_t grid = time ? seq.grid.T : seq.grid.K;
    const std::uint32_t edge = time ? seq.patch.t : seq.patch.k;
    const std::uint32_t axis = time ? seq.scale.T : seq.scale.K;
    auto patches = static_cast<std::uint32_t>(std::floor(grid * keep));
    patches = std::max<std::uint32_t>(1, patches);
    if (grid >= 2) patches = std::min(patches, grid - 1);
    return std::min(axis, patches * edge);
}

double mask_param(const MaskPolicy& policy, MaskKind kind, const TokenSequence& seq) {
    switch (kind) {
        case MaskKind::random: return policy.random_ratio;
        case MaskKind::time: return structured_cut(seq, kind, policy.time_keep);
        case MaskKind::frequency: return structured_cut(seq, kind, policy.freq_keep);
    }
    return 0.0;
}

}  // namespace csimae
