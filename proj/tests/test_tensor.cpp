#include <doctest.h>

#include <cmath>
#include <functional>

#include "portrait/rng.hpp"
#include "portrait/tensor.hpp"

using namespace portrait;

namespace {

// Generic op gradient check: builds a scalar loss from leaves, compares
// analytic gradients against central finite differences on every coordinate.
void check_op(std::vector<Tensor> inits,
              const std::function<V(Graph&, const std::vector<V>&)>& build,
              double rel_tol = 1e-5) {
    std::vector<ParamTensor> params;
    params.reserve(inits.size());
    for (size_t i = 0; i < inits.size(); ++i)
        params.emplace_back("p" + std::to_string(i), inits[i]);

    auto eval = [&]() {
        Graph g;
        std::vector<V> leaves;
        for (auto& p : params) leaves.push_back(g.param(p));
        return g.val(build(g, leaves)).data[0];
    };

    for (auto& p : params) p.zero_grad();
    {
        Graph g;
        std::vector<V> leaves;
        for (auto& p : params) leaves.push_back(g.param(p));
        g.backward(build(g, leaves));
    }
    Rng rng(7);
    for (auto& p : params) {
        auto res = check_gradients(p, eval, p.grad, 64, rng, 1e-5, rel_tol);
        CHECK_MESSAGE(res.passed == res.checked,
                      "param " << p.name << " worst rel err " << res.worst_rel_err);
    }
}

Tensor rnd(std::vector<int> shape, uint64_t seed, double stddev = 1.0) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng, stddev);
}

// Random fixed weights to collapse a tensor into a scalar loss.
V project_loss(Graph& g, V x, uint64_t seed) {
    Rng rng(seed);
    Tensor w = Tensor::randn(g.val(x).shape, rng);
    return g.dot(x, g.input(w));
}

}  // namespace

TEST_CASE("elementwise op gradients") {
    check_op({rnd({3, 4}, 1), rnd({3, 4}, 2)},
             [](Graph& g, const std::vector<V>& p) {
                 return project_loss(g, g.add(p[0], p[1]), 10);
             });
    check_op({rnd({3, 4}, 1), rnd({3, 4}, 2)},
             [](Graph& g, const std::vector<V>& p) {
                 return project_loss(g, g.sub(p[0], p[1]), 10);
             });
    check_op({rnd({3, 4}, 1), rnd({3, 4}, 2)},
             [](Graph& g, const std::vector<V>& p) {
                 return project_loss(g, g.mul(p[0], p[1]), 10);
             });
    check_op({rnd({3, 4}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.scale(p[0], -2.5), 10);
    });
    check_op({rnd({3, 4}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.add_scalar(p[0], 0.7), 10);
    });
    check_op({rnd({3, 4}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.gelu(p[0]), 10);
    });
    check_op({rnd({3, 4}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.silu(p[0]), 10);
    });
    check_op({rnd({3, 4}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.exp_elem(p[0]), 10);
    });
    // sqrt and div need inputs away from zero
    Tensor pos = rnd({3, 4}, 3);
    for (auto& x : pos.data) x = std::fabs(x) + 0.5;
    check_op({pos}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.sqrt_elem(p[0]), 10);
    });
    Tensor denom = rnd({3, 4}, 4);
    for (auto& x : denom.data) x = (x >= 0 ? 1.0 : -1.0) * (std::fabs(x) + 0.5);
    check_op({rnd({3, 4}, 1), denom}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.div_elem(p[0], p[1]), 10);
    });
    check_op({rnd({3, 4}, 1), rnd({1}, 5)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.mul_scalar_node(p[0], p[1]), 10);
    });
}

TEST_CASE("shape op gradients") {
    check_op({rnd({3, 4}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.reshape(p[0], {2, 6}), 10);
    });
    check_op({rnd({3, 4}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.transpose(p[0]), 10);
    });
    check_op({rnd({2, 4}, 1), rnd({3, 4}, 2)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.concat_rows({p[0], p[1]}), 10);
    });
    check_op({rnd({5, 4}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.slice_rows(p[0], 1, 4), 10);
    });
    check_op({rnd({3, 2}, 1), rnd({3, 5}, 2)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.concat_cols({p[0], p[1]}), 10);
    });
    check_op({rnd({3, 6}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.slice_cols(p[0], 2, 5), 10);
    });
}

TEST_CASE("matmul value and gradient") {
    Graph g;
    V a = g.input(Tensor::from({2, 2}, {1, 2, 3, 4}));
    V b = g.input(Tensor::from({2, 2}, {5, 6, 7, 8}));
    V c = g.matmul(a, b);
    CHECK(g.val(c).at2(0, 0) == doctest::Approx(19));
    CHECK(g.val(c).at2(0, 1) == doctest::Approx(22));
    CHECK(g.val(c).at2(1, 0) == doctest::Approx(43));
    CHECK(g.val(c).at2(1, 1) == doctest::Approx(50));

    check_op({rnd({3, 4}, 1), rnd({4, 5}, 2)}, [](Graph& g2, const std::vector<V>& p) {
        return project_loss(g2, g2.matmul(p[0], p[1]), 10);
    });
    check_op({rnd({3, 4}, 1), rnd({4, 5}, 2), rnd({5}, 3)},
             [](Graph& g2, const std::vector<V>& p) {
                 return project_loss(g2, g2.linear(p[0], p[1], p[2]), 10);
             });
}

TEST_CASE("reduction gradients") {
    check_op({rnd({3, 4}, 1)},
             [](Graph& g, const std::vector<V>& p) { return g.sum_all(p[0]); });
    check_op({rnd({3, 4}, 1)},
             [](Graph& g, const std::vector<V>& p) { return g.mean_all(p[0]); });
    check_op({rnd({3, 4}, 1)},
             [](Graph& g, const std::vector<V>& p) { return g.sumsq(p[0]); });
    check_op({rnd({12}, 1), rnd({12}, 2)},
             [](Graph& g, const std::vector<V>& p) { return g.dot(p[0], p[1]); });
}

TEST_CASE("softmax rows: values sum to 1, gradient") {
    Graph g;
    V x = g.input(rnd({4, 7}, 11));
    V y = g.softmax_rows(x);
    for (int i = 0; i < 4; ++i) {
        double s = 0;
        for (int j = 0; j < 7; ++j) s += g.val(y).at2(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    check_op({rnd({4, 7}, 1)}, [](Graph& g2, const std::vector<V>& p) {
        return project_loss(g2, g2.softmax_rows(p[0]), 10);
    });
}

TEST_CASE("layer norm gradient") {
    check_op({rnd({4, 6}, 1), rnd({6}, 2), rnd({6}, 3)},
             [](Graph& g, const std::vector<V>& p) {
                 return project_loss(g, g.layer_norm(p[0], p[1], p[2]), 10);
             });
}

TEST_CASE("l2 normalize gradient and unit norm") {
    Graph g;
    V x = g.input(rnd({9}, 21));
    V y = g.l2_normalize(x);
    double ss = 0;
    for (double v : g.val(y).data) ss += v * v;
    CHECK(ss == doctest::Approx(1.0).epsilon(1e-9));
    check_op({rnd({9}, 1)}, [](Graph& g2, const std::vector<V>& p) {
        return project_loss(g2, g2.l2_normalize(p[0]), 10);
    });
}

TEST_CASE("conv2d value: identity kernel") {
    Graph g;
    Tensor x = rnd({1, 4, 4}, 31);
    Tensor w = Tensor::zeros({1, 1, 3, 3});
    w.data[4] = 1.0;  // center tap
    V y = g.conv2d(g.input(x), g.input(w), g.input(Tensor::zeros({1})), 1, 1);
    for (size_t i = 0; i < x.data.size(); ++i)
        CHECK(g.val(y).data[i] == doctest::Approx(x.data[i]));
}

TEST_CASE("conv2d gradients (stride 1 and 2)") {
    check_op({rnd({2, 5, 5}, 1), rnd({3, 2, 3, 3}, 2, 0.5), rnd({3}, 3)},
             [](Graph& g, const std::vector<V>& p) {
                 return project_loss(g, g.conv2d(p[0], p[1], p[2], 1, 1), 10);
             });
    check_op({rnd({2, 6, 6}, 1), rnd({3, 2, 3, 3}, 2, 0.5), rnd({3}, 3)},
             [](Graph& g, const std::vector<V>& p) {
                 return project_loss(g, g.conv2d(p[0], p[1], p[2], 2, 1), 10);
             });
    check_op({rnd({2, 4, 4}, 1), rnd({4, 2, 1, 1}, 2, 0.5), rnd({4}, 3)},
             [](Graph& g, const std::vector<V>& p) {
                 return project_loss(g, g.conv2d(p[0], p[1], p[2], 1, 0), 10);
             });
}

TEST_CASE("group norm gradient") {
    check_op({rnd({4, 3, 3}, 1), rnd({4}, 2), rnd({4}, 3)},
             [](Graph& g, const std::vector<V>& p) {
                 return project_loss(g, g.group_norm(p[0], p[1], p[2], 2), 10);
             });
}

TEST_CASE("spatial op gradients") {
    check_op({rnd({2, 3, 3}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.upsample2x(p[0]), 10);
    });
    check_op({rnd({3, 7, 5}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.grid_pool(p[0], 4), 10);
    });
    check_op({rnd({3, 9, 9}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.grid_pool(p[0], 8), 10);
    });
    check_op({rnd({3, 4, 5}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.chw_to_tokens(p[0]), 10);
    });
    check_op({rnd({20, 3}, 1)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.tokens_to_chw(p[0], 3, 4, 5), 10);
    });
    check_op({rnd({3, 4, 4}, 1), rnd({3}, 2)}, [](Graph& g, const std::vector<V>& p) {
        return project_loss(g, g.add_chw_bias(p[0], p[1]), 10);
    });
    check_op({rnd({2, 4, 4}, 1), rnd({3, 4, 4}, 2)},
             [](Graph& g, const std::vector<V>& p) {
                 return project_loss(g, g.concat_channels(p[0], p[1]), 10);
             });
}

TEST_CASE("chw_to_tokens round trip") {
    Graph g;
    Tensor x = rnd({3, 4, 5}, 41);
    V a = g.input(x);
    V t = g.chw_to_tokens(a);
    V back = g.tokens_to_chw(t, 3, 4, 5);
    for (size_t i = 0; i < x.data.size(); ++i)
        CHECK(g.val(back).data[i] == doctest::Approx(x.data[i]));
}

TEST_CASE("frozen leaves receive no gradient work") {
    ParamTensor frozen("f", rnd({3, 3}, 1), /*train=*/false);
    ParamTensor train("t", rnd({3, 3}, 2), /*train=*/true);
    Graph g;
    V a = g.param(frozen);
    V b = g.param(train);
    V loss = g.sumsq(g.mul(a, b));
    g.backward(loss);
    CHECK(train.grad.max_abs() > 0.0);
    CHECK(frozen.grad.max_abs() == 0.0);
}

TEST_CASE("gradient accumulation across reused leaves") {
    ParamTensor p("p", rnd({4}, 5));
    Graph g;
    V a = g.param(p);
    V loss = g.sum_all(g.add(a, a));  // d/dp = 2
    g.backward(loss);
    for (double v : p.grad.data) CHECK(v == doctest::Approx(2.0));
}
