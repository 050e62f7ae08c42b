#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "csimae/rng.hpp"
#include "csimae/tensor_core.hpp"

namespace csimae {

enum class MaskKind { random, time, frequency };

std::string to_string(MaskKind k);
MaskKind parse_mask_kind(const std::string& name);

/// MAE mask over the valid tokens of one sequence. Padding rows are not part
/// of `hidden`; they are a separate, always-invalid state.
struct MaeMask {
    MaskKind kind = MaskKind::random;
    double param = 0.0;  // ratio (random) or raw cut-point T_h / K_u
    std::vector<std::uint8_t> hidden;

    std::size_t valid_len() const { return hidden.size(); }
    std::size_t hidden_count() const;
};

/// random:    round(ratio * L) positions, uniformly without replacement.
/// time:      hide tokens whose time-grid index >= ceil(T_h / t).
/// frequency: hide tokens whose frequency-grid index >= ceil(K_u / k).
/// Cut-points are raw axis counts in [1, T] / [1, K]; a cut equal to the full
/// axis hides nothing.
MaeMask mae_mask(const TokenSequence& seq, MaskKind kind, double param, std::uint64_t seed);

/// All-visible mask (used for plain encoding and degenerate cases).
MaeMask empty_mask(std::size_t valid_len);

/// Value realizing -inf in the additive bias.
inline constexpr double kMaskedLogit = std::numeric_limits<double>::lowest();

/// Additive attention bias, one L x L matrix per batch element.
/// M[b](i, j) = 0 if key j is visible for sample b, kMaskedLogit otherwise.
/// Queries (rows) are never masked.
struct AttnBias {
    std::size_t length = 0;
    std::vector<std::size_t> valid_lens;
    std::vector<Matrix> M;
};

/// Keys j >= L_b are padding. Requires 1 <= L_b <= L.
AttnBias build_attn_bias(std::span<const std::size_t> valid_lens, std::size_t length);

/// General key-visibility form used by the encoder, which additionally hides
/// MAE-masked keys. key_visible[b] has length L.
AttnBias build_key_bias(const std::vector<std::vector<std::uint8_t>>& key_visible);

/// How each mini-batch picks its MAE mask.
struct MaskPolicy {
    double random_ratio = 0.5;
    double time_keep = 0.5;  // fraction of time patches left visible
    double freq_keep = 0.5;  // fraction of frequency patches left visible
    std::array<double, 3> kind_weights{1.0, 1.0, 1.0};  // random, time, frequency

    void validate() const;
};

MaskKind draw_mask_kind(const MaskPolicy& policy, Philox& rng);

/// Raw cut-point (T_h or K_u) for a structured mask: keep
/// max(1, floor(grid * keep)) patches, capped at grid - 1 when grid >= 2.
std::uint32_t structured_cut(const TokenSequence& seq, MaskKind kind, double keep);

/// Mask parameter for `kind` under the policy for this sequence.
double mask_param(const MaskPolicy& policy, MaskKind kind, const TokenSequence& seq);

}  // namespace csimae
