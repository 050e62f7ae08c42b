#include <doctest.h>

#include <cmath>
#include <complex>
#include <limits>

#include "csimae/datagen.hpp"
#include "csimae/metrics.hpp"
#include "csimae/rng.hpp"

using namespace csimae;

namespace {

ComplexTensor random_tensor(const ScaleSpec& s, Philox& rng) {
    ComplexTensor x(s);
    for (std::size_t i = 0; i < x.re.size(); ++i) {
        x.re[i] = rng.normal();
        x.im[i] = rng.normal();
    }
    return x;
}

ComplexTensor scaled(const ComplexTensor& x, std::complex<double> c) {
    ComplexTensor y = x;
    for (std::size_t i = 0; i < x.re.size(); ++i) {
        const auto v = c * std::complex<double>(x.re[i], x.im[i]);
        y.re[i] = v.real();
        y.im[i] = v.imag();
    }
    return y;
}

Eigen::VectorXd random_vector(Eigen::Index n, Philox& rng) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal();
    return v;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("nmse identities") {
    Philox rng(1, 0);
    auto h = random_tensor({4, 8, 2}, rng);
    auto exact = nmse(h, h);
    CHECK(exact.linear == 0.0);
    CHECK(std::isinf(exact.db));
    CHECK(exact.db < 0);
    CHECK(format_db(exact.db) == "-inf");

    auto zero = nmse(h, ComplexTensor(h.scale));
    CHECK(zero.linear == 1.0);
    CHECK(zero.db == 0.0);
    CHECK(format_db(-12.5) == "-12.500000");
}

TEST_CASE("nmse errors") {
    Philox rng(2, 0);
    auto h = random_tensor({2, 2, 2}, rng);
    CHECK_THROWS_AS(nmse(h, ComplexTensor({2, 2, 1})), std::invalid_argument);
    CHECK_THROWS_AS(nmse(ComplexTensor({2, 2, 2}), h), std::invalid_argument);
}

TEST_CASE("nmse is invariant to a common complex scale") {
    Philox rng(3, 0);
    for (int trial = 0; trial < 20; ++trial) {
        auto h = random_tensor({3, 4, 5}, rng);
        auto p = random_tensor({3, 4, 5}, rng);
        const std::complex<double> c(std::ldexp(1.0, trial - 10), 0.0);  // powers of two scale exactly
        CHECK(nmse(scaled(h, c), scaled(p, c)).linear == nmse(h, p).linear);
        const std::complex<double> rot(rng.normal(), rng.normal());
        CHECK(nmse(scaled(h, rot), scaled(p, rot)).linear == doctest::Approx(nmse(h, p).linear).epsilon(1e-13));
    }
}

TEST_CASE("nmse of a 20 dB noisy copy") {
    DatasetSpec spec;
    spec.name = "n";
    spec.scenario = load_presets(CSIMAE_DEFAULT_PRESETS)[2];
    spec.scale = {16, 64, 64};
    spec.n_samples = 1;
    auto s = generate_sample(spec, 0);
    auto noisy = add_noise(s, 20.0, 3);
    CHECK(std::abs(nmse(s.data, noisy.data).db + 20.0) <= 0.3);
}

TEST_CASE("cosine identities") {
    Philox rng(4, 0);
    auto a = random_vector(50, rng);
    auto b = random_vector(50, rng);
    CHECK(grad_cosine(a, a) == 1.0);
    CHECK(grad_cosine(a, -a) == -1.0);
    CHECK(grad_cosine(a, b) == grad_cosine(b, a));
    CHECK(grad_cosine(a, 3.5 * a) == 1.0);
    CHECK(grad_cosine(a, -0.25 * a) == -1.0);
    Eigen::VectorXd e0 = Eigen::VectorXd::Zero(4), e1 = Eigen::VectorXd::Zero(4);
    e0(0) = 1.0;
    e1(1) = 1.0;
    CHECK(grad_cosine(e0, e1) == 0.0);
    CHECK_THROWS_AS(grad_cosine(a, Eigen::VectorXd::Zero(50)), std::invalid_argument);
    CHECK_THROWS_AS(grad_cosine(a, random_vector(49, rng)), std::invalid_argument);
}

TEST_CASE("conflict statistics") {
    auto s = ConflictStats::from_cosines({-1.0, -0.5, 0.0, 0.5, 1.0, -0.2});
    CHECK(s.fraction_negative == doctest::Approx(0.5));
    REQUIRE(s.histogram.size() == kConflictBins);
    CHECK(s.histogram.front() == 1);
    CHECK(s.histogram.back() == 1);
    CHECK(s.histogram[20] == 1);  // 0 falls in the centre bin
    std::uint64_t total = 0;
    for (auto c : s.histogram) total += c;
    CHECK(total == 6);
}

TEST_CASE("cost decomposes into valid tokens plus padding") {
    Philox rng(5, 0);
    std::vector<PoolEntry> e;
    for (std::uint32_t i = 0; i < 90; ++i)
        e.push_back({i, static_cast<std::uint32_t>(rng.uniform_index(3)),
                     1 + static_cast<std::uint32_t>(rng.uniform_index(30))});
    SamplePool pool(e);
    for (Strategy s : {Strategy::proposed, Strategy::sequential, Strategy::alternating, Strategy::global})
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            auto c = compute_cost(build_plan(pool, s, 3, 7, seed), pool);
            CHECK(c.cost == c.valid_tokens + c.jpad);
            CHECK(c.valid_tokens == pool.total_tokens());
            CHECK(c.jpad == compute_jpad(build_plan(pool, s, 3, 7, seed), pool));
            CHECK((c.cost == c.valid_tokens) == (c.jpad == 0));
        }
}

TEST_CASE("homogeneous plans have zero padding ratio") {
    std::vector<PoolEntry> e;
    for (std::uint32_t d = 0; d < 4; ++d)
        for (std::uint32_t i = 0; i < 32; ++i) e.push_back({(d << 20) | i, d, 8 * (d + 1)});
    SamplePool pool(e);
    CHECK(compute_cost(build_plan(pool, Strategy::sequential, 1, 8, 1), pool).padding_ratio == 0.0);
    CHECK(compute_cost(build_plan(pool, Strategy::alternating, 1, 8, 1), pool).padding_ratio == 0.0);
    const auto g = compute_cost(build_plan(pool, Strategy::global, 1, 8, 1), pool);
    const auto p4 = compute_cost(build_plan(pool, Strategy::proposed, 2, 8, 1), pool);
    const auto p8 = compute_cost(build_plan(pool, Strategy::proposed, 4, 8, 1), pool);
    CHECK(g.cost > p4.cost);
    CHECK(p4.cost > p8.cost);
    CHECK(p8.padding_ratio == 0.0);
}

TEST_CASE("conflict experiment") {
    ModelConfig cfg;
    cfg.embed_dim = 8;
    cfg.max_grid = {4, 4, 4};
    ToyMaeModel model(cfg, 1);
    Philox rng(6, 0);
    SequenceTable seqs;
    std::vector<PoolEntry> e;
    for (std::uint32_t i = 0; i < 12; ++i) {
        const ScaleSpec s = i % 2 ? ScaleSpec{4, 4, 4} : ScaleSpec{4, 4, 2};
        seqs.emplace(i, patchify(random_tensor(s, rng), PatchSpec{}));
        e.push_back({i, i % 2, static_cast<std::uint32_t>(seqs.at(i).valid_len)});
    }
    SamplePool pool(e);
    auto mixed = build_plan(pool, Strategy::global, 1, 4, 1);
    auto homo = build_plan(pool, Strategy::proposed, 2, 4, 1);
    ConflictOptions opt;
    opt.n_pairs = 20;
    opt.seed = 3;
    auto [a, b] = conflict_experiment(model, mixed, homo, seqs, opt);
    auto [a2, b2] = conflict_experiment(model, mixed, homo, seqs, opt);
    CHECK(a.cosines == a2.cosines);
    CHECK(b.cosines == b2.cosines);
    CHECK(a.cosines.size() == 20);
    for (double c : a.cosines) {
        CHECK(c >= -1.0);
        CHECK(c <= 1.0);
    }
    auto [same_a, same_b] = conflict_experiment(model, mixed, mixed, seqs, opt);
    CHECK(same_a.cosines == same_b.cosines);

    // a sample paired with itself
    auto g = sample_gradient(model, seqs.at(0), 0.5, 3, 0);
    CHECK(grad_cosine(g, sample_gradient(model, seqs.at(0), 0.5, 3, 0)) == 1.0);

    BatchPlan singles;
    singles.batches = {{{0}, 8, 0}};
    CHECK_THROWS_AS(conflict_experiment(model, singles, homo, seqs, opt), std::invalid_argument);
}

}
