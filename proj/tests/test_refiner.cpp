#include <doctest.h>

#include <cmath>

#include "portrait/errors.hpp"
#include "portrait/face_refiner.hpp"
#include "portrait/rng.hpp"

using namespace portrait;

namespace {
LocalFeatures random_local(int n, int t, int d1, uint64_t seed) {
    Rng rng(seed);
    LocalFeatures f;
    f.n = n;
    f.t_local = t;
    f.d1 = d1;
    f.tokens = Tensor::randn({n, t, d1}, rng);
    return f;
}
GlobalFeatures random_global(int n, int d2, uint64_t seed) {
    Rng rng(seed);
    GlobalFeatures f;
    f.n = n;
    f.d2 = d2;
    f.embedding = Tensor::randn({n, 1, d2}, rng);
    return f;
}
}  // namespace

TEST_CASE("project: shape contract and bias broadcast") {
    Rng rng(5);
    RefinerParams params(32, 16, 64, 4, 2, rng);
    LocalFeatures local = random_local(4, 257, 32, 1);
    GlobalFeatures global = random_global(4, 16, 2);

    Graph g;
    Tensor lt({257, 32});
    for (int a = 0; a < 257; ++a)
        for (int b = 0; b < 32; ++b) lt.at2(a, b) = local.tokens.at3(0, a, b);
    Tensor gt({1, 16});
    for (int b = 0; b < 16; ++b) gt.at2(0, b) = global.embedding.at3(0, 0, b);
    auto [lp, gp] = project_ref(g, g.input(lt), g.input(gt), params);
    CHECK(g.val(lp).shape == std::vector<int>{257, 64});
    CHECK(g.val(gp).shape == std::vector<int>{1, 64});

    // Zero inputs -> the maps' bias terms broadcast.
    for (auto& x : params.phi1_b.value.data) x = 0.25;
    for (auto& x : params.phi2_b.value.data) x = -0.5;
    Graph g2;
    auto [lz, gz] = project_ref(g2, g2.input(Tensor::zeros({257, 32})),
                                g2.input(Tensor::zeros({1, 16})), params);
    for (double v : g2.val(lz).data) CHECK(v == doctest::Approx(-0.5));
    for (double v : g2.val(gz).data) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("project: hand-computed 3->2 map") {
    Rng rng(5);
    RefinerParams params(3, 2, 2, 1, 1, rng);
    // phi2: 3 -> 2 with hand-set weights.
    params.phi2_w.value = Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1});
    params.phi2_b.value = Tensor::from({2}, {0.5, -1});
    Graph g;
    Tensor local = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto [lp, gp] = project_ref(g, g.input(local), g.input(Tensor::zeros({1, 2})), params);
    // Row 0: (1+3+0.5, 2+3-1) = (4.5, 4); row 1: (4+6+0.5, 5+6-1) = (10.5, 10).
    CHECK(g.val(lp).at2(0, 0) == doctest::Approx(4.5));
    CHECK(g.val(lp).at2(0, 1) == doctest::Approx(4.0));
    CHECK(g.val(lp).at2(1, 0) == doctest::Approx(10.5));
    CHECK(g.val(lp).at2(1, 1) == doctest::Approx(10.0));
}

TEST_CASE("project: dimension mismatch") {
    Rng rng(5);
    RefinerParams params(32, 16, 64, 4, 1, rng);
    Graph g;
    CHECK_THROWS_AS(project_ref(g, g.input(Tensor::zeros({10, 31})),
                                g.input(Tensor::zeros({1, 16})), params),
                    Error);
}

TEST_CASE("refine: output shape N x 33 x d") {
    Rng rng(6);
    RefinerParams params(32, 16, 64, 4, 2, rng);
    LocalFeatures local = random_local(4, 257, 32, 11);
    GlobalFeatures global = random_global(4, 16, 12);
    FaceTokens tokens = refine_features(local, global, params);
    CHECK(tokens.tokens.shape == std::vector<int>{4, 33, 64});
    CHECK(tokens.tokens.all_finite());
}

TEST_CASE("refine: per-reference independence") {
    Rng rng(7);
    RefinerParams params(8, 4, 16, 2, 2, rng);
    LocalFeatures local = random_local(2, 5, 8, 21);
    GlobalFeatures global = random_global(2, 4, 22);
    FaceTokens batch = refine_features(local, global, params);

    for (int r = 0; r < 2; ++r) {
        LocalFeatures one;
        one.n = 1;
        one.t_local = 5;
        one.d1 = 8;
        one.tokens = Tensor::zeros({1, 5, 8});
        for (int a = 0; a < 5; ++a)
            for (int b = 0; b < 8; ++b) one.tokens.at3(0, a, b) = local.tokens.at3(r, a, b);
        GlobalFeatures go;
        go.n = 1;
        go.d2 = 4;
        go.embedding = Tensor::zeros({1, 1, 4});
        for (int b = 0; b < 4; ++b) go.embedding.at3(0, 0, b) = global.embedding.at3(r, 0, b);
        FaceTokens single = refine_features(one, go, params);
        for (int a = 0; a < 33; ++a)
            for (int b = 0; b < 16; ++b)
                CHECK(single.tokens.at3(0, a, b) ==
                      doctest::Approx(batch.tokens.at3(r, a, b)).epsilon(1e-12));
    }
}

TEST_CASE("attention: scalar case matches hand-computed softmax mixture") {
    Rng rng(8);
    AttentionParams attn("t", 1, 1, 1, rng);
    attn.wq.value = Tensor::from({1, 1}, {2.0});
    attn.bq.value = Tensor::from({1}, {0.0});
    attn.wk.value = Tensor::from({1, 1}, {1.0});
    attn.wv.value = Tensor::from({1, 1}, {1.0});
    attn.bv.value = Tensor::from({1}, {0.0});
    attn.wo.value = Tensor::from({1, 1}, {1.0});
    attn.bo.value = Tensor::from({1}, {0.0});

    Graph g;
    V q = g.input(Tensor::from({1, 1}, {0.5}));          // query token
    V kv = g.input(Tensor::from({2, 1}, {1.0, -1.0}));   // two kv tokens
    AttnTrace trace;
    V out = multihead_attention(g, q, kv, kv, attn, 1, &trace);

    // q' = 1.0; keys (1,-1); scores (1,-1); softmax -> (e^1, e^-1)/Z; values (1,-1).
    double e1 = std::exp(1.0), em1 = std::exp(-1.0);
    double p0 = e1 / (e1 + em1), p1 = em1 / (e1 + em1);
    CHECK(g.val(out).at2(0, 0) == doctest::Approx(p0 * 1.0 + p1 * -1.0).epsilon(1e-12));
    REQUIRE(trace.rows.size() == 1);
    CHECK(trace.rows[0].at2(0, 0) == doctest::Approx(p0).epsilon(1e-12));
}

TEST_CASE("attention rows sum to one across refine") {
    Rng rng(9);
    RefinerParams params(8, 4, 16, 4, 2, rng);
    LocalFeatures local = random_local(2, 6, 8, 31);
    GlobalFeatures global = random_global(2, 4, 32);
    AttnTrace trace;
    refine_features(local, global, params, &trace);
    CHECK(trace.rows.size() > 0);
    for (const Tensor& probs : trace.rows)
        for (int i = 0; i < probs.dim(0); ++i) {
            double s = 0.0;
            for (int j = 0; j < probs.dim(1); ++j) s += probs.at2(i, j);
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
}

TEST_CASE("flatten: shapes and round trip") {
    Rng rng(10);
    FaceTokens t;
    t.n = 4;
    t.d = 16;
    t.tokens = Tensor::randn({4, 33, 16}, rng);
    Tensor flat = flatten_tokens(t);
    CHECK(flat.shape == std::vector<int>{132, 16});
    // Row-major order preserves reference blocks.
    CHECK(flat.at2(33, 0) == t.tokens.at3(1, 0, 0));

    FaceTokens t1;
    t1.n = 1;
    t1.d = 16;
    t1.tokens = Tensor::randn({1, 33, 16}, rng);
    Tensor flat1 = flatten_tokens(t1);
    CHECK(flat1.shape == std::vector<int>{33, 16});
    CHECK(flat1.data == t1.tokens.data);

    FaceTokens back = unflatten_tokens(flat, 4, 16);
    CHECK(back.tokens.data == t.tokens.data);
}

TEST_CASE("refiner gradients match finite differences") {
    Rng rng(13);
    RefinerParams params(3, 2, 8, 2, 2, rng);
    // The 0.02-std token init is fine for training but poorly conditioned for
    // finite differences (layer norm amplifies tiny rows); check at O(0.3).
    {
        Rng trng(99);
        params.learn_tokens.value = Tensor::randn({RefinerParams::kLearnableTokens, 8}, trng, 0.3);
    }
    LocalFeatures local = random_local(2, 5, 3, 41);
    GlobalFeatures global = random_global(2, 2, 42);

    std::vector<ParamTensor*> all;
    params.collect(all);
    auto loss_value = [&]() {
        Graph g;
        auto refs = refine_graph(g, local, global, params);
        V total = g.sumsq(refs[0]);
        for (size_t r = 1; r < refs.size(); ++r) total = g.add(total, g.sumsq(refs[r]));
        return g.val(total).data[0];
    };
    for (ParamTensor* p : all) p->zero_grad();
    {
        Graph g;
        auto refs = refine_graph(g, local, global, params);
        V total = g.sumsq(refs[0]);
        for (size_t r = 1; r < refs.size(); ++r) total = g.add(total, g.sumsq(refs[r]));
        g.backward(total);
    }
    Rng coord_rng(77);
    for (ParamTensor* p : all) {
        auto res = check_gradients(*p, loss_value, p->grad, 24, coord_rng, 1e-5, 1e-4);
        CHECK_MESSAGE(res.passed == res.checked,
                      p->name << ": worst rel err " << res.worst_rel_err);
    }
}

TEST_CASE("fusion modes produce the documented token layouts") {
    Rng rng(14);
    RefinerParams params(6, 4, 8, 2, 1, rng);
    LocalFeatures local = random_local(3, 5, 6, 51);
    GlobalFeatures global = random_global(3, 4, 52);
    Graph g;
    auto locals = fuse_reference_tokens(g, local, global, params, FusionMode::LocalFeatures);
    CHECK(g.val(locals[0]).shape == std::vector<int>{5, 8});
    auto globals = fuse_reference_tokens(g, local, global, params, FusionMode::GlobalFeatures);
    CHECK(g.val(globals[0]).shape == std::vector<int>{1, 8});
    auto concat = fuse_reference_tokens(g, local, global, params, FusionMode::Concat);
    CHECK(g.val(concat[0]).shape == std::vector<int>{6, 8});
    auto refined = fuse_reference_tokens(g, local, global, params, FusionMode::FaceRefiner);
    CHECK(g.val(refined[0]).shape == std::vector<int>{33, 8});
    CHECK(fusion_mode_from_string("face-refiner") == FusionMode::FaceRefiner);
    CHECK_THROWS_AS(fusion_mode_from_string("bogus"), Error);
}
