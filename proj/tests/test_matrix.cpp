#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "meda/matrix.hpp"

using namespace meda;

TEST_CASE("matmul identity and hand cases") {
    Matrix m(2, 2, {1, 2, 3, 4});
    Matrix id = Matrix::identity(2);

    Matrix left = matmul(id, m);
    Matrix right = matmul(m, id);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(left.data[i] == m.data[i]);
        CHECK(right.data[i] == m.data[i]);
    }

    Matrix a(1, 2, {1, 1});
    Matrix b(2, 1, {2, 3});
    Matrix c = matmul(a, b);
    CHECK(c.rows == 1);
    CHECK(c.cols == 1);
    CHECK(c.at(0, 0) == doctest::Approx(5.0).epsilon(1e-15));
}

TEST_CASE("matmul rejects mismatched shapes") {
    Matrix a(2, 3);
    Matrix b(2, 3);
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul associativity on random matrices") {
    std::mt19937_64 gen(12345);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 2 + gen() % 5;
        const std::size_t m = 2 + gen() % 5;
        const std::size_t p = 2 + gen() % 5;
        const std::size_t q = 2 + gen() % 5;
        Matrix a(n, m), b(m, p), c(p, q);
        for (double& v : a.data) v = next_uniform(gen, -2.0, 2.0);
        for (double& v : b.data) v = next_uniform(gen, -2.0, 2.0);
        for (double& v : c.data) v = next_uniform(gen, -2.0, 2.0);
        Matrix ab_c = matmul(matmul(a, b), c);
        Matrix a_bc = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < ab_c.data.size(); ++i) {
            const double scale = std::max(1.0, std::abs(ab_c.data[i]));
            CHECK(std::abs(ab_c.data[i] - a_bc.data[i]) / scale < 1e-8);
        }
    }
}

TEST_CASE("softmax_rows basics") {
    Matrix flat(1, 3, {0, 0, 0});
    Matrix s = softmax_rows(flat, 1.0);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(s.at(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    }

    Matrix two(1, 2, {std::log(2.0), 0.0});
    Matrix p = softmax_rows(two, 1.0);
    CHECK(p.at(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(p.at(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax_rows is stable at extreme magnitudes") {
    Matrix big(1, 2, {1000.0, 0.0});
    Matrix p = softmax_rows(big, 1.0);
    CHECK(p.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.at(0, 1) >= 0.0);
    CHECK(std::isfinite(p.at(0, 1)));

    std::mt19937_64 gen(7);
    for (int trial = 0; trial < 50; ++trial) {
        Matrix m(3, 5);
        for (double& v : m.data) v = next_uniform(gen, -1e4, 1e4);
        Matrix sm = softmax_rows(m, 1.0 + 10.0 * next_unit(gen));
        for (std::size_t i = 0; i < sm.rows; ++i) {
            double sum = 0.0;
            for (double v : sm.row(i)) {
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("softmax_rows rejects bad scale") {
    Matrix m(1, 2, {0, 0});
    CHECK_THROWS_AS(softmax_rows(m, 0.0), ContractError);
    CHECK_THROWS_AS(softmax_rows(m, -1.0), ContractError);
}

TEST_CASE("row_entropy hand values") {
    const double one_hot[] = {1.0, 0.0, 0.0, 0.0};
    CHECK(row_entropy(one_hot) == 0.0);

    const double uniform4[] = {0.25, 0.25, 0.25, 0.25};
    CHECK(row_entropy(uniform4) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    const double half[] = {0.5, 0.5};
    CHECK(row_entropy(half) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("row_entropy rejects non-normalized input") {
    const double bad[] = {0.5, 0.6};
    CHECK_THROWS_AS(row_entropy(bad), ContractError);
    const double negative[] = {1.5, -0.5};
    CHECK_THROWS_AS(row_entropy(negative), ContractError);
}

TEST_CASE("uniform row maximizes entropy") {
    std::mt19937_64 gen(99);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + gen() % 8;
        std::vector<double> p(n);
        double sum = 0.0;
        for (double& v : p) {
            v = next_unit(gen) + 1e-12;
            sum += v;
        }
        for (double& v : p) v /= sum;
        std::vector<double> uniform(n, 1.0 / static_cast<double>(n));
        CHECK(row_entropy(uniform) >= row_entropy(p) - 1e-12);
        CHECK(row_entropy(p) >= 0.0);
        CHECK(row_entropy(p) <= std::log(static_cast<double>(n)) + 1e-12);
    }
}

TEST_CASE("cosine_similarity basics") {
    const double ex[] = {1.0, 0.0};
    const double ey[] = {0.0, 1.0};
    const double d1[] = {1.0, 1.0};
    const double d2[] = {2.0, 2.0};
    CHECK(cosine_similarity(ex, ex) == doctest::Approx(1.0));
    CHECK(cosine_similarity(ex, ey) == doctest::Approx(0.0));
    CHECK(cosine_similarity(d1, d2) == doctest::Approx(1.0));
}

TEST_CASE("cosine_similarity scaling property") {
    std::mt19937_64 gen(31);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + gen() % 6;
        std::vector<double> u(n), pos(n), neg(n);
        double norm = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            u[i] = next_uniform(gen, -1.0, 1.0);
            norm += u[i] * u[i];
        }
        if (norm == 0.0) continue;
        const double c = 0.01 + 5.0 * next_unit(gen);
        for (std::size_t i = 0; i < n; ++i) {
            pos[i] = c * u[i];
            neg[i] = -c * u[i];
        }
        CHECK(cosine_similarity(u, pos) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(cosine_similarity(u, neg) == doctest::Approx(-1.0).epsilon(1e-12));
    }
}

TEST_CASE("cosine_similarity zero-norm convention") {
    const double zero[] = {0.0, 0.0, 0.0};
    const double v[] = {1.0, -2.0, 3.0};
    CHECK(cosine_similarity(zero, v) == 0.0);
    CHECK(cosine_similarity(v, zero) == 0.0);
    CHECK(cosine_similarity(zero, zero) == 0.0);
}

TEST_CASE("seeded matrix generation is reproducible") {
    Matrix a = random_uniform_matrix(4, 5, -0.1, 0.1, 42);
    Matrix b = random_uniform_matrix(4, 5, -0.1, 0.1, 42);
    Matrix c = random_uniform_matrix(4, 5, -0.1, 0.1, 43);
    CHECK(a.data == b.data);
    CHECK(a.data != c.data);
    for (double v : a.data) {
        CHECK(v >= -0.1);
        CHECK(v < 0.1);
    }
}

TEST_CASE("causal softmax zeroes the upper triangle") {
    std::mt19937_64 gen(5);
    Matrix m(6, 6);
    for (double& v : m.data) v = next_uniform(gen, -3.0, 3.0);
    Matrix a = causal_softmax_rows(m, 2.0);
    for (std::size_t i = 0; i < 6; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
            if (j > i) CHECK(a.at(i, j) == 0.0);
            sum += a.at(i, j);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}
