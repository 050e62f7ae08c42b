#include <doctest.h>

#include <cmath>
#include <set>

#include "csimae/error.hpp"
#include "csimae/masking.hpp"
#include "csimae/model.hpp"

using namespace csimae;

namespace {

TokenSequence seq_with_grid(std::uint32_t gT, std::uint32_t gK, std::uint32_t gA, PatchSpec p = {}) {
    return patchify(ComplexTensor({gT * p.t, gK * p.k, gA * p.a}), p);
}

}  // namespace

TEST_SUITE("masking") {

TEST_CASE("random mask hides round(rho * L) valid positions") {
    auto seq = seq_with_grid(2, 2, 2);
    auto m = mae_mask(seq, MaskKind::random, 0.5, 1);
    CHECK(m.valid_len() == 8);
    CHECK(m.hidden_count() == 4);
    for (std::uint32_t L = 1; L <= 40; ++L) {
        auto s = seq_with_grid(L, 1, 1);
        for (double rho : {0.1, 0.25, 0.5, 0.75, 0.9})
            CHECK(mae_mask(s, MaskKind::random, rho, L).hidden_count() ==
                  static_cast<std::size_t>(std::llround(rho * L)));
    }
}

TEST_CASE("random mask is seeded and roughly uniform") {
    auto seq = seq_with_grid(4, 4, 1);
    CHECK(mae_mask(seq, MaskKind::random, 0.5, 3).hidden == mae_mask(seq, MaskKind::random, 0.5, 3).hidden);
    CHECK(mae_mask(seq, MaskKind::random, 0.5, 3).hidden != mae_mask(seq, MaskKind::random, 0.5, 4).hidden);
    std::vector<int> counts(16, 0);
    for (std::uint64_t s = 0; s < 4000; ++s) {
        auto m = mae_mask(seq, MaskKind::random, 0.25, s);
        for (std::size_t i = 0; i < 16; ++i) counts[i] += m.hidden[i];
    }
    for (int c : counts) CHECK(std::abs(c - 1000) < 120);
}

TEST_CASE("time mask hides the later time patches") {
    auto seq = seq_with_grid(4, 2, 1);
    auto m = mae_mask(seq, MaskKind::time, 4.0, 0);  // T_h = 4 raw steps = 2 patches
    CHECK(m.hidden_count() == 4);
    for (std::uint32_t gt = 0; gt < 4; ++gt)
        for (std::uint32_t gk = 0; gk < 2; ++gk) CHECK(m.hidden[seq.grid.index(gt, gk, 0)] == (gt >= 2 ? 1 : 0));
}

TEST_CASE("frequency mask count over random grids") {
    Philox rng(4, 0);
    for (int trial = 0; trial < 200; ++trial) {
        const auto gT = 1 + static_cast<std::uint32_t>(rng.uniform_index(6));
        const auto gK = 2 + static_cast<std::uint32_t>(rng.uniform_index(6));
        const auto gA = 1 + static_cast<std::uint32_t>(rng.uniform_index(4));
        auto seq = seq_with_grid(gT, gK, gA);
        const auto ku = 1 + static_cast<std::uint32_t>(rng.uniform_index(seq.scale.K - 1));
        const std::uint32_t kept = (ku + 1) / 2;  // ceil(K_u / k) with k = 2
        auto m = mae_mask(seq, MaskKind::frequency, ku, 0);
        CHECK(m.hidden_count() == std::size_t{gT} * (gK - kept) * gA);
    }
}

TEST_CASE("cut-point equal to the axis hides nothing") {
    auto seq = seq_with_grid(3, 3, 2);
    CHECK(mae_mask(seq, MaskKind::time, seq.scale.T, 0).hidden_count() == 0);
    CHECK(mae_mask(seq, MaskKind::frequency, seq.scale.K, 0).hidden_count() == 0);
}

TEST_CASE("out-of-range parameters are rejected") {
    auto seq = seq_with_grid(2, 2, 2);
    CHECK_THROWS_AS(mae_mask(seq, MaskKind::random, 0.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(mae_mask(seq, MaskKind::random, 1.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(mae_mask(seq, MaskKind::time, 0.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(mae_mask(seq, MaskKind::time, 5.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(mae_mask(seq, MaskKind::frequency, 1.5, 0), std::invalid_argument);
}

TEST_CASE("masks never cover padding rows") {
    auto seq = pad_tokens(seq_with_grid(2, 2, 1), 10);
    auto m = mae_mask(seq, MaskKind::random, 0.9, 1);
    CHECK(m.hidden.size() == seq.valid_len);
}

TEST_CASE("attention bias") {
    std::vector<std::size_t> full{4, 4};
    auto none = build_attn_bias(full, 4);
    for (const auto& M : none.M) CHECK(M.isZero(0.0));

    std::vector<std::size_t> two{2};
    auto b = build_attn_bias(two, 4);
    REQUIRE(b.M.size() == 1);
    for (Eigen::Index i = 0; i < 4; ++i) {
        CHECK(b.M[0](i, 0) == 0.0);
        CHECK(b.M[0](i, 1) == 0.0);
        CHECK(b.M[0](i, 2) == kMaskedLogit);
        CHECK(b.M[0](i, 3) == kMaskedLogit);
    }
    std::vector<std::size_t> zero{0};
    CHECK_THROWS_AS(build_attn_bias(zero, 4), std::invalid_argument);
    std::vector<std::size_t> over{5};
    CHECK_THROWS_AS(build_attn_bias(over, 4), std::invalid_argument);
}

TEST_CASE("masked keys receive exactly zero weight") {
    Philox rng(6, 0);
    Matrix S(5, 5);
    for (Eigen::Index i = 0; i < S.size(); ++i) S.data()[i] = 30.0 * rng.normal();
    std::vector<std::size_t> lens{3};
    auto b = build_attn_bias(lens, 5);
    Matrix P = softmax_rows(S + b.M[0]);
    for (Eigen::Index i = 0; i < 5; ++i) {
        CHECK(P(i, 3) == 0.0);
        CHECK(P(i, 4) == 0.0);
        CHECK(P.row(i).sum() == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("mask policy") {
    MaskPolicy p;
    CHECK_NOTHROW(p.validate());
    p.random_ratio = 1.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p = {};
    p.kind_weights = {0, 0, 0};
    CHECK_THROWS_AS(p.validate(), ConfigError);

    p = {};
    p.kind_weights = {0, 1, 0};
    Philox rng(1, 0);
    for (int i = 0; i < 50; ++i) CHECK(draw_mask_kind(p, rng) == MaskKind::time);

    p = {};
    std::vector<int> counts(3, 0);
    for (int i = 0; i < 30000; ++i) ++counts[static_cast<int>(draw_mask_kind(p, rng))];
    for (int c : counts) CHECK(std::abs(c - 10000) < 400);
}

TEST_CASE("structured cut keeps a visible prefix") {
    auto seq = seq_with_grid(4, 8, 1);
    CHECK(structured_cut(seq, MaskKind::time, 0.5) == 4);
    CHECK(structured_cut(seq, MaskKind::frequency, 0.25) == 4);
    CHECK(structured_cut(seq, MaskKind::time, 1.0) == 6);  // capped at grid - 1 patches
    CHECK(structured_cut(seq, MaskKind::time, 0.01) == 2);
    auto flat = seq_with_grid(1, 4, 1);
    CHECK(mae_mask(flat, MaskKind::time, structured_cut(flat, MaskKind::time, 0.5), 0).hidden_count() == 0);
}

TEST_CASE("mask kind names") {
    for (MaskKind k : {MaskKind::random, MaskKind::time, MaskKind::frequency}) CHECK(parse_mask_kind(to_string(k)) == k);
    CHECK_THROWS_AS(parse_mask_kind("block"), ConfigError);
}

}
