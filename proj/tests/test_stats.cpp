#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "emo/rng.hpp"
#include "emo/stats.hpp"
#include "reference/reference.hpp"

using namespace emo;

TEST_CASE("spearman: perfect monotone, reversed, hand-ranked case") {
    std::vector<double> x{1, 2, 3, 4, 5};
    const auto up = spearman(x, x);
    CHECK(up.rho == 1.0);
    CHECK(up.p == 0.0);

    std::vector<double> rev{5, 4, 3, 2, 1};
    CHECK(spearman(x, rev).rho == -1.0);

    // d^2 = (0,0,0,1,1): rho = 1 - 6*2/(5*24) = 0.9
    std::vector<double> y{1, 2, 3, 5, 4};
    const auto r = spearman(x, y);
    CHECK(r.rho == doctest::Approx(0.9).epsilon(1e-15));
    // p from t = 0.9*sqrt(3/0.19), compared against quadrature of the t density
    const double t = 0.9 * std::sqrt(3.0 / (1.0 - 0.81));
    CHECK(r.p == doctest::Approx(2.0 * reference::student_t_sf_quadrature(t, 3)).epsilon(1e-6));
}

TEST_CASE("spearman is invariant under strictly increasing transforms") {
    Rng rng(4);
    std::vector<double> x, y;
    for (int i = 0; i < 30; ++i) {
        x.push_back(rng.normal());
        y.push_back(rng.normal());
    }
    const auto base = spearman(x, y);
    std::vector<double> ex, cy;
    for (double v : x) ex.push_back(std::exp(v));
    for (double v : y) cy.push_back(v * v * v + 2.0);
    const auto trans = spearman(ex, cy);
    CHECK(trans.rho == doctest::Approx(base.rho).epsilon(1e-12));
    CHECK(trans.p == doctest::Approx(base.p).epsilon(1e-12));
}

TEST_CASE("spearman handles ties with mid-ranks (matches O(n^2) reference)") {
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 10 + static_cast<int>(rng.below(191));
        std::vector<double> x, y;
        for (int i = 0; i < n; ++i) {
            // quantised values force ties
            x.push_back(std::floor(rng.normal() * 4.0));
            y.push_back(std::floor(rng.normal() * 4.0));
        }
        double rho;
        try {
            rho = spearman(x, y).rho;
        } catch (const InvalidInput&) {
            continue; // constant vector draw
        }
        CHECK(rho == doctest::Approx(reference::spearman_rho(x, y)).epsilon(1e-12));
    }
}

TEST_CASE("spearman preconditions") {
    std::vector<double> small{1, 2, 3};
    CHECK_THROWS_AS(spearman(small, small), InvalidInput);
    std::vector<double> x{1, 2, 3, 4}, c{7, 7, 7, 7};
    CHECK_THROWS_AS(spearman(x, c), InvalidInput);
    std::vector<double> bad{1, 2};
    CHECK_THROWS_AS(spearman(x, bad), InvalidInput);
}

TEST_CASE("spearman exact permutation p for small n") {
    std::vector<double> x{1, 2, 3, 4, 5}, y{1, 2, 3, 5, 4};
    const double p = spearman_exact_p(x, y);
    // integer-arithmetic oracle: rho = 1 - 6*sum(d^2)/(n(n^2-1)); count
    // permutations of 1..5 with |rho| >= 0.9  <=>  d^2 sum <= 2 or >= 38
    int perm[5] = {1, 2, 3, 4, 5};
    int at_least = 0, total = 0;
    do {
        int d2 = 0;
        for (int i = 0; i < 5; ++i) d2 += (perm[i] - (i + 1)) * (perm[i] - (i + 1));
        ++total;
        if (d2 <= 2 || d2 >= 38) ++at_least;
    } while (std::next_permutation(perm, perm + 5));
    CHECK(p == doctest::Approx(double(at_least) / total).epsilon(1e-12));
    std::vector<double> big(10, 0.0);
    CHECK_THROWS_AS(spearman_exact_p(big, big), InvalidInput);
}

TEST_CASE("bh_adjust: worked example and edge cases") {
    const std::vector<double> p{0.01, 0.02, 0.03, 0.04};
    const auto adj = bh_adjust(p);
    for (double v : adj) CHECK(v == doctest::Approx(0.04).epsilon(1e-15));

    CHECK(bh_adjust(std::vector<double>{0.3})[0] == 0.3);

    const std::vector<double> equal{0.2, 0.2, 0.2};
    for (double v : bh_adjust(equal)) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

    CHECK_THROWS_AS(bh_adjust(std::vector<double>{1.5}), InvalidInput);
}

TEST_CASE("bh_adjust matches the definitional reference bitwise") {
    Rng rng(14);
    for (int trial = 0; trial < 50; ++trial) {
        const int m = 1 + static_cast<int>(rng.below(60));
        std::vector<double> p;
        for (int i = 0; i < m; ++i)
            p.push_back(rng.below(10) == 0 ? 0.25 : rng.u01()); // inject ties
        const auto mine = bh_adjust(p);
        const auto ref = reference::bh_adjust(p);
        for (int i = 0; i < m; ++i) CHECK(mine[i] == ref[i]);
    }
}

TEST_CASE("bh monotone; bonferroni dominates bh") {
    Rng rng(2);
    std::vector<double> p;
    for (int i = 0; i < 100; ++i) p.push_back(rng.u01());
    const auto bh = bh_adjust(p);
    const auto bonf = bonferroni_adjust(p);
    for (std::size_t i = 0; i < p.size(); ++i) {
        CHECK(bonf[i] >= bh[i]);
        CHECK(bonf[i] == reference::bonferroni_adjust(p)[i]);
        for (std::size_t j = 0; j < p.size(); ++j)
            if (p[i] <= p[j]) CHECK(bh[i] <= bh[j]);
    }
}

TEST_CASE("bonferroni: scaling, cap, identity at m=1") {
    const auto a = bonferroni_adjust(std::vector<double>{0.01, 0.2, 0.004, 0.5, 0.03});
    CHECK(a[0] == doctest::Approx(0.05).epsilon(1e-15));
    const auto b = bonferroni_adjust(std::vector<double>{0.5, 0.1, 0.2});
    CHECK(b[0] == 1.0);
    const auto c = bonferroni_adjust(std::vector<double>{0.37});
    CHECK(c[0] == 0.37);
}

TEST_CASE("r2_pred: perfect, mean, worked negative example") {
    std::vector<double> y{1, 2, 3, 4};
    CHECK(r2_pred(y, y) == 1.0);
    std::vector<double> mean(4, 2.5);
    CHECK(r2_pred(y, mean) == doctest::Approx(0.0).epsilon(1e-15));

    std::vector<double> obs{0, 1}, pred{1, 0};
    CHECK(r2_pred(obs, pred) == doctest::Approx(-3.0).epsilon(1e-15));

    std::vector<double> constant{5, 5};
    CHECK_THROWS_AS(r2_pred(constant, obs), InvalidInput);
}

TEST_CASE("r2_pred invariants: shift invariance, 1 only at equality") {
    Rng rng(6);
    std::vector<double> y, yh;
    for (int i = 0; i < 50; ++i) {
        y.push_back(rng.normal());
        yh.push_back(y.back() + 0.3 * rng.normal());
    }
    const double base = r2_pred(y, yh);
    std::vector<double> ys, yhs;
    for (double v : y) ys.push_back(v + 11.0);
    for (double v : yh) yhs.push_back(v + 11.0);
    CHECK(r2_pred(ys, yhs) == doctest::Approx(base).epsilon(1e-12));
    CHECK(base < 1.0);
    CHECK(base == doctest::Approx(reference::r2_pred(y, yh)).epsilon(1e-15));
}

TEST_CASE("select_genes: strict thresholds, gene order") {
    std::vector<GeneStat> stats(4);
    stats[0] = {"g_keep", 100, 0.5, 1e-8, 1e-4, 1e-3, 0.25, false};
    stats[1] = {"g_r2_boundary", 100, 0.5, 1e-8, 1e-4, 1e-3, 0.2, false};
    stats[2] = {"g_p_boundary", 100, 0.5, 1e-8, 0.001, 1e-2, 0.4, false};
    stats[3] = {"a_keep", 100, 0.5, 1e-9, 1e-5, 1e-4, 0.31, false};
    const auto sel = select_genes(stats);
    REQUIRE(sel.size() == 2);
    CHECK(sel[0].gene_id == "a_keep");
    CHECK(sel[1].gene_id == "g_keep");
}

TEST_CASE("significance_count") {
    std::vector<GeneStat> stats(4);
    for (int i = 0; i < 4; ++i) stats[i].p_adj_bh = 0.01;
    auto c = significance_count(stats);
    CHECK(c.count == 4);
    CHECK(c.fraction == 1.0);
    for (auto& s : stats) s.p_adj_bh = 0.5;
    c = significance_count(stats);
    CHECK(c.count == 0);

    Rng rng(5);
    std::size_t expect = 0;
    for (auto& s : stats) {
        s.p_adj_bh = rng.u01();
        if (s.p_adj_bh < 0.05) ++expect;
    }
    CHECK(significance_count(stats).count == expect);
}

TEST_CASE("gene stats TSV round trip is exact") {
    const auto dir = std::filesystem::temp_directory_path() / "emo_test_stats";
    std::filesystem::create_directories(dir);
    Rng rng(31);
    std::vector<GeneStat> stats;
    for (int i = 0; i < 10; ++i) {
        GeneStat s;
        s.gene_id = "g" + std::to_string(i);
        s.n = 100 + i;
        s.rho = rng.normal();
        s.p = rng.u01();
        s.p_adj_bh = rng.u01();
        s.p_adj_bonf = rng.u01();
        s.r2_pred = rng.normal();
        s.selected = i % 3 == 0;
        stats.push_back(std::move(s));
    }
    write_gene_stats_tsv(dir / "g.tsv", stats);
    const auto back = read_gene_stats_tsv(dir / "g.tsv");
    REQUIRE(back.size() == stats.size());
    for (std::size_t i = 0; i < stats.size(); ++i) {
        CHECK(back[i].gene_id == stats[i].gene_id);
        CHECK(back[i].rho == stats[i].rho);
        CHECK(back[i].p == stats[i].p);
        CHECK(back[i].p_adj_bh == stats[i].p_adj_bh);
        CHECK(back[i].r2_pred == stats[i].r2_pred);
        CHECK(back[i].selected == stats[i].selected);
    }
    write_stats_summary_json(dir / "summary.json", stats);
    CHECK(std::filesystem::exists(dir / "summary.json"));
    std::filesystem::remove_all(dir);
}
