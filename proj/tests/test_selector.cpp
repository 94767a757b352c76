#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "portrait/errors.hpp"
#include "portrait/fixtures.hpp"
#include "portrait/reference_selector.hpp"

using namespace portrait;

TEST_CASE("angle_score: identity, pi difference, monotone sweep") {
    Pose a, b;
    CHECK(angle_score(a, b) == doctest::Approx(1.0).epsilon(1e-15));

    b.rotation = {M_PI, 0, 0};
    CHECK(angle_score(a, b) == doctest::Approx(std::exp(-M_PI)).epsilon(1e-12));

    double prev = 2.0;
    for (double d = 0.0; d <= 1.5; d += 0.1) {
        Pose t;
        t.rotation = {0, d, 0};
        double s = angle_score(a, t);
        CHECK(s < prev);
        prev = s;
    }
}

TEST_CASE("argmax_score: direct evaluation, ties, degenerate lambda") {
    // Spec example: S_q = [0.8, 0.6], S_a = [0.2, 0.9], lambda = 0.5.
    std::vector<double> q = {0.8, 0.6};
    std::vector<double> a = {0.2, 0.9};
    CHECK(q[0] + 0.5 * a[0] == doctest::Approx(0.9));
    CHECK(q[1] + 0.5 * a[1] == doctest::Approx(1.05));
    CHECK(argmax_score(q, a, 0.5) == 1);

    // lambda = 0 degenerates to the quality argmax.
    CHECK(argmax_score(q, a, 0.0) == 0);

    // Exact ties break to the lowest index.
    CHECK(argmax_score({0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}, 1.0) == 0);
    CHECK(argmax_score({0.25, 0.5, 0.5}, {0.0, 0.0, 0.0}, 1.0) == 1);
}

TEST_CASE("argmax_score: brute-force oracle with ties") {
    Rng rng(2025);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 1 + static_cast<int>(rng.uniform_int(7));
        std::vector<double> q(static_cast<size_t>(n)), a(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            // Quantized scores produce frequent exact ties.
            q[static_cast<size_t>(i)] = rng.uniform_int(5) / 4.0;
            a[static_cast<size_t>(i)] = rng.uniform_int(5) / 4.0;
        }
        double lambda = rng.uniform_int(3) / 2.0;
        int best = 0;
        double best_total = q[0] + lambda * a[0];
        for (int i = 1; i < n; ++i) {
            double total = q[static_cast<size_t>(i)] + lambda * a[static_cast<size_t>(i)];
            if (total > best_total) {
                best_total = total;
                best = i;
            }
        }
        CHECK(argmax_score(q, a, lambda) == best);
    }
}

TEST_CASE("argmax invariance: constant quality shift") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        int n = 2 + static_cast<int>(rng.uniform_int(6));
        std::vector<double> q(static_cast<size_t>(n)), a(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            q[static_cast<size_t>(i)] = rng.uniform();
            a[static_cast<size_t>(i)] = rng.uniform();
        }
        int base = argmax_score(q, a, 0.5);
        std::vector<double> shifted = q;
        for (auto& v : shifted) v += 7.25;
        CHECK(argmax_score(shifted, a, 0.5) == base);
    }
}

TEST_CASE("lambda monotonicity: max-angle candidate never loses rank") {
    // Equal qualities isolate the angle term.
    std::vector<double> q = {0.5, 0.5, 0.5, 0.5};
    std::vector<double> a = {0.2, 0.9, 0.4, 0.6};
    int star = 1;  // max angle
    int prev_rank = 4;
    for (double lambda = 0.0; lambda <= 2.0; lambda += 0.25) {
        std::vector<std::pair<double, int>> totals;
        for (int i = 0; i < 4; ++i)
            totals.push_back({q[static_cast<size_t>(i)] + lambda * a[static_cast<size_t>(i)], i});
        std::stable_sort(totals.begin(), totals.end(),
                         [](auto& x, auto& y) { return x.first > y.first; });
        int rank = 0;
        for (int i = 0; i < 4; ++i)
            if (totals[static_cast<size_t>(i)].second == star) rank = i;
        CHECK(rank <= prev_rank);
        prev_rank = rank;
    }
}

TEST_CASE("select_reference: end-to-end scoring on fixtures") {
    MorphableModel model = make_toy_morphable_model();
    ToyBackend backend;
    Rng rng(11);

    // Target with a distinctive yaw; reference 1 shares it, reference 0 does not.
    MorphParams tgt_params = sample_face_params(model, 300, rng, 64, 0.6);
    tgt_params.pose.rotation = {0.0, 0.35, 0.0};
    FixtureFace tgt = render_fixture_face(model, tgt_params, identity_style(300), 64, 64);

    MorphParams r0 = sample_face_params(model, 300, rng, 64, 0.6);
    r0.pose.rotation = {0.0, -0.3, 0.0};
    MorphParams r1 = sample_face_params(model, 300, rng, 64, 0.6);
    r1.pose.rotation = {0.0, 0.35, 0.0};
    FixtureFace f0 = render_fixture_face(model, r0, identity_style(300), 64, 64);
    FixtureFace f1 = render_fixture_face(model, r1, identity_style(300), 64, 64);

    FixtureKeypointExtractor extractor;
    extractor.register_image(tgt.image, tgt.keypoints);
    extractor.register_image(f0.image, f0.keypoints);
    extractor.register_image(f1.image, f1.keypoints);

    std::vector<ImageTensor> refs = {f0.image, f1.image};
    SelectionResult sel = select_reference(refs, tgt.image, backend, model, extractor, 0.5,
                                           SelectionStrategy::QualityAngle);
    REQUIRE(sel.scores.size() == 2);
    CHECK(sel.scores[1].angle > sel.scores[0].angle);
    for (const auto& s : sel.scores) {
        CHECK(s.quality >= 0.0);
        CHECK(s.quality <= 1.0);
        CHECK(s.total == doctest::Approx(s.quality + 0.5 * s.angle).epsilon(1e-15));
    }

    // Strategy behaviors.
    CHECK(select_reference(refs, tgt.image, backend, model, extractor, 0.5,
                           SelectionStrategy::Target)
              .index == -1);
    CHECK(select_reference(refs, tgt.image, backend, model, extractor, 0.5,
                           SelectionStrategy::Manual, 1)
              .index == 1);
    CHECK(select_reference(refs, tgt.image, backend, model, extractor, 0.5,
                           SelectionStrategy::Angle)
              .index == 1);
    SelectionResult rnd_a = select_reference(refs, tgt.image, backend, model, extractor, 0.5,
                                             SelectionStrategy::Random, 0, 99);
    SelectionResult rnd_b = select_reference(refs, tgt.image, backend, model, extractor, 0.5,
                                             SelectionStrategy::Random, 0, 99);
    CHECK(rnd_a.index == rnd_b.index);

    // N = 1 trivially selects index 0.
    std::vector<ImageTensor> one = {f0.image};
    CHECK(select_reference(one, tgt.image, backend, model, extractor, 0.5).index == 0);

    std::vector<ImageTensor> none;
    CHECK_THROWS_AS(select_reference(none, tgt.image, backend, model, extractor, 0.5), Error);
}
