#include <doctest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "protopart/errors.hpp"
#include "protopart/losses.hpp"

using namespace protopart;

namespace {

constexpr double kEps = 1e-4;

struct Instance {
    std::vector<FeatureMap> maps;
    std::vector<int> labels;
    PrototypeLayer protos;
    Matrix head;
    std::vector<LesionMask> masks;
    std::vector<const LesionMask*> mask_ptrs;
    int height = 0;
    int width = 0;

    BatchFeatures batch() const { return {maps, labels, {}, 0.0}; }
};

Instance random_instance(testkit::Rng& rng, int images, int depth, int per_class, int side = 7, int input = 10) {
    Instance in;
    for (int i = 0; i < images; ++i) {
        in.maps.push_back(testkit::random_map(rng, side, side, depth));
        in.labels.push_back(i % 2);
        in.masks.push_back(testkit::random_mask(rng, input, input));
    }
    for (const auto& m : in.masks) in.mask_ptrs.push_back(&m);
    in.protos = testkit::random_prototypes(rng, 2, per_class, depth);
    in.head = testkit::random_matrix(rng, 2, 2 * per_class);
    in.height = in.width = input;
    return in;
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("cross entropy reference cases") {
    CHECK(cross_entropy(std::vector<double>{0.0, 0.0}, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(cross_entropy(std::vector<double>{1e6, 0.0}, 0) == doctest::Approx(0.0));
    CHECK_THROWS_AS(cross_entropy(std::vector<double>{0.0, 0.0}, 2), ValidationError);
    CHECK_THROWS_AS(cross_entropy(std::vector<double>{0.0}, 0), ConfigError);

    testkit::Rng rng(1);
    for (int t = 0; t < 100; ++t) {
        const auto logits = testkit::random_vector(rng, 2 + t % 3, -20.0, 20.0);
        const int label = t % static_cast<int>(logits.size());
        CHECK(std::fabs(cross_entropy(logits, label) - oracle::cross_entropy(logits, label)) <= 1e-8);
    }
}

TEST_CASE("cross entropy loss over a batch matches the composed oracle") {
    testkit::Rng rng(2);
    for (int t = 0; t < 100; ++t) {
        auto in = random_instance(rng, 3, 1 + t % 8, 2);
        const int top_k = 1 + t % 10;
        const double v = cross_entropy_loss(in.batch(), in.protos, in.head, kEps, top_k);
        const double o = oracle::mean_cross_entropy(in.maps, in.labels, testkit::to_oracle(in.protos), in.head, kEps,
                                                    top_k);
        REQUIRE(std::fabs(v - o) <= 1e-6);
    }
}

TEST_CASE("cluster and separation match brute-force oracles") {
    testkit::Rng rng(3);
    for (int t = 0; t < 100; ++t) {
        auto in = random_instance(rng, 2 + t % 3, 1 + t % 8, 1 + t % 3);
        const int kappa = 1 + t % 49;
        const auto op = testkit::to_oracle(in.protos);
        REQUIRE(std::fabs(cluster_loss(in.batch(), in.protos, kappa) -
                          oracle::cluster(in.maps, in.labels, op, kappa)) <= 1e-6);
        REQUIRE(std::fabs(separation_loss(in.batch(), in.protos, kappa, -1e3) -
                          oracle::separation(in.maps, in.labels, op, kappa, -1e3)) <= 1e-6);
    }
}

TEST_CASE("cluster: prototype equal to a patch with kappa 1 contributes 0") {
    testkit::Rng rng(4);
    auto in = random_instance(rng, 1, 3, 2);
    const auto cell = in.maps[0].cell(2, 4);
    std::copy(cell.begin(), cell.end(), in.protos.vectors.row(1).begin());
    CHECK(cluster_loss(in.batch(), in.protos, 1) == 0.0);
}

TEST_CASE("cluster with kappa = all cells is the mean distance") {
    testkit::Rng rng(5);
    auto in = random_instance(rng, 1, 3, 1);
    const auto d = patch_distances(in.maps[0], in.protos.vectors.row(0));
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / d.size();
    CHECK(cluster_loss(in.batch(), in.protos, 49) == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("separation with a far wrong-class prototype") {
    FeatureMap z(7, 7, 2, 0.0);
    PrototypeLayer p;
    p.vectors = Matrix(2, 2);
    p.vectors.at(1, 0) = 6.0;
    p.vectors.at(1, 1) = 8.0;  // distance 10 from every (zero) patch
    p.classes = {0, 1};
    p.grads = Matrix(2, 2);
    const std::vector<FeatureMap> maps{z};
    const std::vector<int> labels{0};
    CHECK(separation_loss({maps, labels, {}, 0.0}, p, 1) == doctest::Approx(-10.0).epsilon(1e-12));
    CHECK(separation_loss({maps, labels, {}, 0.0}, p, 1, -4.0) == -4.0);
}

TEST_CASE("a class without prototypes is a configuration error") {
    testkit::Rng rng(6);
    auto in = random_instance(rng, 2, 3, 1);
    in.protos.classes = {0, 0};
    CHECK_THROWS_AS(cluster_loss(in.batch(), in.protos, 1), ConfigError);
}

TEST_CASE("mask loss matches the elementwise loop oracle") {
    testkit::Rng rng(7);
    for (int t = 0; t < 100; ++t) {
        const int input = 7 + t % 20;
        auto in = random_instance(rng, 2, 1 + t % 8, 2, 7, input);
        const double v = mask_loss(in.batch(), in.protos, in.mask_ptrs, kEps, input, input);
        const double o = oracle::mask(in.maps, in.labels, testkit::to_oracle(in.protos), in.masks, kEps, input, input);
        REQUIRE(std::fabs(v - o) <= 1e-6);
    }
}

TEST_CASE("mask loss from precomputed PAMs: reference cases") {
    const std::vector<int> classes{0};
    const std::vector<int> labels{0};
    std::vector<std::vector<Grid>> pams{{Grid(6, 5, 1.5)}};

    LesionMask lesion_everywhere(6, 5, 0);
    const LesionMask* m0[] = {&lesion_everywhere};
    CHECK(mask_loss_from_pams(pams, m0, classes, labels) == 0.0);

    LesionMask none(6, 5, 1);
    const LesionMask* m1[] = {&none};
    CHECK(mask_loss_from_pams(pams, m1, classes, labels) == doctest::Approx(1.5 * std::sqrt(30.0)).epsilon(1e-12));
}

TEST_CASE("mask loss validates masks") {
    testkit::Rng rng(8);
    auto in = random_instance(rng, 2, 3, 1);
    std::vector<std::string> ids{"a", "b"};
    BatchFeatures b{in.maps, in.labels, ids, 0.0};

    std::vector<const LesionMask*> missing{in.mask_ptrs[0], nullptr};
    CHECK_THROWS_WITH_AS(mask_loss(b, in.protos, missing, kEps, 10, 10), doctest::Contains("b"), ValidationError);

    in.masks[0].values[3] = 7;
    CHECK_THROWS_WITH_AS(mask_loss(b, in.protos, in.mask_ptrs, kEps, 10, 10), doctest::Contains("not binary"),
                         ValidationError);
}

TEST_CASE("mask loss is monotone in mask pixels") {
    testkit::Rng rng(9);
    for (int t = 0; t < 30; ++t) {
        auto in = random_instance(rng, 1, 3, 2);
        double prev = mask_loss(in.batch(), in.protos, in.mask_ptrs, kEps, 10, 10);
        for (int flip = 0; flip < 10; ++flip) {
            auto& v = in.masks[0].values;
            const std::size_t i = rng() % v.size();
            if (v[i] == 1) continue;
            v[i] = 1;
            const double now = mask_loss(in.batch(), in.protos, in.mask_ptrs, kEps, 10, 10);
            CHECK(now >= prev);
            prev = now;
        }
    }
}

TEST_CASE("remembering loss matches the double-loop oracle") {
    testkit::Rng rng(10);
    for (int t = 0; t < 100; ++t) {
        const int depth = 1 + t % 8;
        auto protos = testkit::random_prototypes(rng, 2, 2, depth);
        std::vector<std::vector<double>> valid;
        std::vector<int> classes;
        for (int i = 0; i < 3; ++i) {
            valid.push_back(testkit::random_vector(rng, depth));
            classes.push_back((i + t) % 2);
        }
        const double v = remembering_loss(valid, classes, protos, kEps);
        REQUIRE(std::fabs(v - oracle::remembering(valid, classes, testkit::to_oracle(protos), kEps)) <= 1e-6);
        CHECK(v <= 0.0);
        CHECK(v >= -2.0 * std::log(1.0 / kEps));
    }
}

TEST_CASE("remembering loss reference cases") {
    PrototypeLayer p;
    p.vectors = Matrix(2, 3);
    p.vectors.row(0)[0] = 0.3;
    p.classes = {0, 1};
    p.grads = Matrix(2, 3);
    const std::vector<std::vector<double>> at_proto{{0.3, 0.0, 0.0}};
    const std::vector<int> cls{0};
    CHECK(remembering_loss(at_proto, cls, p, kEps) == doctest::Approx(-std::log(1.0 / kEps)).epsilon(1e-12));

    const std::vector<std::vector<double>> far{{1e9, 0.0, 0.0}};
    const double v = remembering_loss(far, cls, p, kEps);
    CHECK(v < 0.0);
    CHECK(v > -1e-6);

    CHECK_THROWS_AS(remembering_loss({}, {}, p, kEps), ConfigError);
}

TEST_CASE("remembering loss decreases when a prototype moves toward a valid patch") {
    testkit::Rng rng(11);
    for (int t = 0; t < 50; ++t) {
        auto protos = testkit::random_prototypes(rng, 2, 2, 4);
        const std::vector<std::vector<double>> valid{testkit::random_vector(rng, 4)};
        const std::vector<int> cls{t % 2};
        const double before = remembering_loss(valid, cls, protos, kEps);
        auto row = protos.vectors.row(cls[0] * 2 + t % 2);
        for (int d = 0; d < 4; ++d) row[d] += 0.3 * (valid[0][d] - row[d]);
        CHECK(remembering_loss(valid, cls, protos, kEps) < before);
    }
}

TEST_CASE("off-class L1 reference cases and oracle") {
    std::vector<int> classes;
    for (int j = 0; j < 18; ++j) classes.push_back(j / 9);
    Matrix head(2, 18);
    CHECK(l1_offclass(head, classes) == 0.0);
    init_head(head, classes);
    CHECK(l1_offclass(head, classes) == 9.0);

    testkit::Rng rng(12);
    for (int t = 0; t < 100; ++t) {
        const Matrix h = testkit::random_matrix(rng, 2, 18);
        CHECK(l1_offclass(h, classes) == oracle::l1_offclass(h, classes));
    }
}

TEST_CASE("sign invariants on random batches") {
    testkit::Rng rng(13);
    for (int t = 0; t < 50; ++t) {
        auto in = random_instance(rng, 3, 4, 2);
        CHECK(cluster_loss(in.batch(), in.protos, 3) >= 0.0);
        CHECK(separation_loss(in.batch(), in.protos, 3) <= 0.0);
        CHECK(mask_loss(in.batch(), in.protos, in.mask_ptrs, kEps, 10, 10) >= 0.0);
        CHECK(l1_offclass(in.head, in.protos.classes) >= 0.0);
    }
}

TEST_CASE("permuting prototypes with the head columns leaves every term unchanged") {
    testkit::Rng rng(14);
    for (int t = 0; t < 20; ++t) {
        auto in = random_instance(rng, 2, 3, 3);
        const std::vector<std::vector<double>> valid{testkit::random_vector(rng, 3), testkit::random_vector(rng, 3)};
        const std::vector<int> vcls{0, 1};
        // swap within classes and reverse the whole order
        const std::vector<int> perm{5, 3, 4, 2, 0, 1};
        Instance q = in;
        for (int j = 0; j < 6; ++j) {
            const auto src = in.protos.vectors.row(perm[j]);
            std::copy(src.begin(), src.end(), q.protos.vectors.row(j).begin());
            q.protos.classes[j] = in.protos.classes[perm[j]];
            for (int k = 0; k < 2; ++k) q.head.at(k, j) = in.head.at(k, perm[j]);
        }
        q.mask_ptrs.clear();
        for (const auto& m : q.masks) q.mask_ptrs.push_back(&m);

        CHECK(cross_entropy_loss(q.batch(), q.protos, q.head, kEps, 5) ==
              doctest::Approx(cross_entropy_loss(in.batch(), in.protos, in.head, kEps, 5)).epsilon(1e-12));
        CHECK(cluster_loss(q.batch(), q.protos, 2) == doctest::Approx(cluster_loss(in.batch(), in.protos, 2)));
        CHECK(separation_loss(q.batch(), q.protos, 2) == doctest::Approx(separation_loss(in.batch(), in.protos, 2)));
        CHECK(mask_loss(q.batch(), q.protos, q.mask_ptrs, kEps, 10, 10) ==
              doctest::Approx(mask_loss(in.batch(), in.protos, in.mask_ptrs, kEps, 10, 10)).epsilon(1e-12));
        CHECK(remembering_loss(valid, vcls, q.protos, kEps) ==
              doctest::Approx(remembering_loss(valid, vcls, in.protos, kEps)).epsilon(1e-12));
        CHECK(l1_offclass(q.head, q.protos.classes) == doctest::Approx(l1_offclass(in.head, in.protos.classes)));
    }
}

TEST_CASE("total objective composition") {
    testkit::Rng rng(15);
    auto in = random_instance(rng, 3, 4, 2);
    const std::vector<std::vector<double>> valid{testkit::random_vector(rng, 4)};
    const std::vector<int> vcls{1};

    ObjectiveInputs oi;
    oi.batch = in.batch();
    oi.prototypes = &in.protos;
    oi.head = &in.head;
    oi.epsilon = kEps;
    oi.top_k = 4;
    oi.kappa = 4;
    oi.masks = in.mask_ptrs;
    oi.input_height = oi.input_width = 10;
    oi.valid = valid;
    oi.valid_classes = vcls;

    SUBCASE("all weights zero leaves cross entropy") {
        LossWeights w;
        w.lambda1 = w.lambda2 = w.lambda3 = w.lambda4 = w.lambda5 = 0.0;
        for (auto obj : {Objective::lp, Objective::lp_lm, Objective::lp_lr, Objective::last_layer}) {
            const auto r = total_objective(oi, w, obj);
            CHECK(r.total == r.terms.at("cross_entropy"));
        }
    }
    SUBCASE("each mode equals the manual composition of the terms") {
        const LossWeights w;
        const double ce = cross_entropy_loss(oi.batch, in.protos, in.head, kEps, 4);
        const double clst = cluster_loss(oi.batch, in.protos, 4);
        const double sep = separation_loss(oi.batch, in.protos, 4);
        const double msk = mask_loss(oi.batch, in.protos, in.mask_ptrs, kEps, 10, 10);
        const double rem = remembering_loss(valid, vcls, in.protos, kEps);
        const double l1 = l1_offclass(in.head, in.protos.classes);
        const double lp = ce + 0.8 * clst + 0.08 * sep;

        auto r = total_objective(oi, w, Objective::lp);
        CHECK(r.total == doctest::Approx(lp).epsilon(1e-9));
        CHECK(r.terms.size() == 3);
        r = total_objective(oi, w, Objective::lp_lm);
        CHECK(r.total == doctest::Approx(lp + 0.001 * msk).epsilon(1e-9));
        CHECK(r.terms.at("mask") == doctest::Approx(msk));
        r = total_objective(oi, w, Objective::lp_lr);
        CHECK(r.total == doctest::Approx(lp + 0.02 * rem).epsilon(1e-9));
        r = total_objective(oi, w, Objective::last_layer);
        CHECK(r.total == doctest::Approx(ce + 1e-4 * l1).epsilon(1e-9));
        CHECK(r.terms.count("cluster") == 0);
    }
}

TEST_CASE("per-image normalizer makes streaming equal to one batch") {
    testkit::Rng rng(16);
    auto in = random_instance(rng, 4, 3, 2);
    const double whole = cluster_loss(in.batch(), in.protos, 2) + mask_loss(in.batch(), in.protos, in.mask_ptrs, kEps, 10, 10);
    double streamed = 0.0;
    for (std::size_t i = 0; i < in.maps.size(); ++i) {
        BatchFeatures one{std::span<const FeatureMap>(&in.maps[i], 1), std::span<const int>(&in.labels[i], 1), {}, 4.0};
        streamed += cluster_loss(one, in.protos, 2);
        streamed += mask_loss(one, in.protos, std::span<const LesionMask* const>(&in.mask_ptrs[i], 1), kEps, 10, 10);
    }
    CHECK(streamed == doctest::Approx(whole).epsilon(1e-12));
}

TEST_CASE("inverse frequency weights") {
    const std::vector<int> labels{0, 0, 0, 1};
    const auto w = inverse_frequency_weights(labels, 2);
    CHECK(w[0] == doctest::Approx(4.0 / 6.0));
    CHECK(w[1] == doctest::Approx(2.0));
}

}
