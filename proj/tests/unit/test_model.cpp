#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "protopart/errors.hpp"
#include "protopart/model.hpp"

using namespace protopart;

namespace {

ModelState tiny_model(int depth = 4, int per_class = 2, int top_k = 3) {
    return ModelState::initialize(testkit::tiny_model_config(depth, per_class, top_k));
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("similarity at the reference distances") {
    CHECK(similarity_from_distance(0.0, 1e-4) == doctest::Approx(std::log(1e4)).epsilon(1e-12));
    CHECK(similarity_from_distance(0.0, 1e-4) == doctest::Approx(9.2103).epsilon(1e-5));
    CHECK(similarity_from_distance(1.0, 1e-4) == doctest::Approx(0.69305).epsilon(1e-5));
}

TEST_CASE("similarity is strictly decreasing and bounded") {
    testkit::Rng rng(1);
    std::uniform_real_distribution<double> u(0.0, 50.0);
    const double eps = 1e-4;
    for (int i = 0; i < 1000; ++i) {
        double a = u(rng), b = u(rng);
        if (a == b) continue;
        if (a > b) std::swap(a, b);
        CHECK(similarity_from_distance(a, eps) > similarity_from_distance(b, eps));
        CHECK(similarity_from_distance(a, eps) > 0.0);
        CHECK(similarity_from_distance(a, eps) <= std::log(1.0 / eps));
    }
    CHECK(similarity_from_distance(1e9, eps) <= 1e-6);
    CHECK(similarity_from_distance(1e9, eps) > 0.0);
}

TEST_CASE("similarity derivative matches central differences") {
    for (double d : {0.01, 0.3, 1.0, 4.0}) {
        const double h = 1e-6;
        const double fd = (similarity_from_distance(d + h, 1e-4) - similarity_from_distance(d - h, 1e-4)) / (2 * h);
        CHECK(similarity_derivative(d, 1e-4) == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("similarity_map matches the per-patch loop oracle") {
    testkit::Rng rng(2);
    for (int t = 0; t < 100; ++t) {
        const int depth = 1 + t % 8;
        const auto z = testkit::random_map(rng, 7, 7, depth);
        const auto p = testkit::random_vector(rng, depth);
        const auto a = similarity_map(z, {0, 0, p}, 1e-4);
        const auto o = oracle::similarity_map(z, p, 1e-4);
        for (std::size_t i = 0; i < o.size(); ++i) REQUIRE(std::fabs(a.values[i] - o[i]) <= 1e-6);
    }
}

TEST_CASE("patch equal to the prototype scores ln(1/eps)") {
    testkit::Rng rng(3);
    const auto z = testkit::random_map(rng, 7, 7, 4);
    const auto cell = z.cell(3, 5);
    const std::vector<double> p(cell.begin(), cell.end());
    const auto a = similarity_map(z, {0, 0, p}, 1e-4);
    CHECK(a.at(3, 5) == doctest::Approx(std::log(1e4)).epsilon(1e-12));
}

TEST_CASE("similarity_map rejects a prototype of the wrong length") {
    testkit::Rng rng(4);
    const auto z = testkit::random_map(rng, 7, 7, 4);
    const std::vector<double> p(5, 0.0);
    CHECK_THROWS_WITH_AS(similarity_map(z, {12, 1, p}, 1e-4), doctest::Contains("prototype 12"), ConfigError);
}

TEST_CASE("topk_pool hand cases") {
    Grid a(2, 2);
    a.values = {4, 3, 2, 1};
    CHECK(topk_pool(a, 2) == doctest::Approx(3.5));
    CHECK(topk_pool(a, 1) == 4.0);
    CHECK(topk_pool(a, 4) == doctest::Approx(2.5));
    CHECK_THROWS_AS(topk_pool(a, 0), ConfigError);
    CHECK_THROWS_AS(topk_pool(a, 5), ConfigError);
}

TEST_CASE("topk_pool matches the sort oracle and its degenerate cases") {
    testkit::Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        Grid a(7, 7);
        a.values = testkit::random_vector(rng, 49, -3.0, 3.0);
        const int k = 1 + t % 49;
        CHECK(std::fabs(topk_pool(a, k) - oracle::topk_mean(a.values, k)) <= 1e-12);
        CHECK(std::fabs(topk_pool(a, 25) - oracle::topk_mean(a.values, 25)) <= 1e-12);
        CHECK(topk_pool(a, 1) == *std::max_element(a.values.begin(), a.values.end()));
        double mean = 0.0;
        for (double v : a.values) mean += v;
        CHECK(topk_pool(a, 49) == doctest::Approx(mean / 49).epsilon(1e-12));
    }
}

TEST_CASE("topk ties: any choice of maximal values gives the same mean") {
    Grid a(1, 4);
    a.values = {1.0, 2.0, 2.0, 2.0};
    CHECK(topk_pool(a, 2) == 2.0);
    CHECK(top_k_indices(a.values, 2) == std::vector<int>{1, 2});
}

TEST_CASE("adaptive bins follow floor/ceil index arithmetic") {
    for (auto [out, in] : {std::pair{224, 7}, {10, 7}, {7, 7}, {5, 3}, {13, 4}}) {
        const auto b = adaptive_bins(out, in);
        for (int i = 0; i < out; ++i) {
            CHECK(b.start[i] == static_cast<int>(std::floor(static_cast<double>(i) * in / out)));
            CHECK(b.end[i] == static_cast<int>(std::ceil(static_cast<double>(i + 1) * in / out)));
        }
    }
}

TEST_CASE("scale_up of constant and single-cell maps") {
    Grid c(7, 7, 2.0);
    const Grid up = scale_up(c, 224, 224);
    CHECK(up.rows == 224);
    CHECK(std::all_of(up.values.begin(), up.values.end(), [](double v) { return v == 2.0; }));

    Grid one(1, 1, 0.73);
    const Grid up1 = scale_up(one, 30, 17);
    CHECK(std::all_of(up1.values.begin(), up1.values.end(), [](double v) { return v == 0.73; }));
}

TEST_CASE("scale_up of a ramp matches the bin-index oracle") {
    Grid ramp(7, 7);
    for (int r = 0; r < 7; ++r) {
        for (int c = 0; c < 7; ++c) ramp.at(r, c) = r * 7 + c;
    }
    for (auto [h, w] : {std::pair{224, 224}, {10, 10}, {23, 9}}) {
        const Grid up = scale_up(ramp, h, w);
        const Grid o = oracle::scale_up(ramp.values, 7, 7, h, w);
        for (std::size_t i = 0; i < o.values.size(); ++i) REQUIRE(std::fabs(up.values[i] - o.values[i]) <= 1e-12);
    }
    // 224 = 7 * 32, so blocks are exactly 32 pixels wide
    const Grid up = scale_up(ramp, 224, 224);
    CHECK(up.at(31, 31) == 0.0);
    CHECK(up.at(32, 32) == 8.0);
    CHECK(up.at(223, 223) == 48.0);
}

TEST_CASE("scale_up stays within the range of the map") {
    testkit::Rng rng(6);
    for (int t = 0; t < 50; ++t) {
        Grid a(7, 7);
        a.values = testkit::random_vector(rng, 49, -1.0, 5.0);
        const double lo = *std::min_element(a.values.begin(), a.values.end());
        const double hi = *std::max_element(a.values.begin(), a.values.end());
        const Grid up = scale_up(a, 10 + t, 31);
        for (double v : up.values) {
            CHECK(v >= lo - 1e-12);
            CHECK(v <= hi + 1e-12);
        }
    }
}

TEST_CASE("scale_up_adjoint is the transpose of scale_up") {
    testkit::Rng rng(7);
    for (int t = 0; t < 20; ++t) {
        Grid a(7, 7);
        a.values = testkit::random_vector(rng, 49, -1.0, 1.0);
        const int h = 7 + 3 * t, w = 9 + 2 * t;
        Grid g(h, w);
        g.values = testkit::random_vector(rng, h * w, -1.0, 1.0);
        const Grid up = scale_up(a, h, w);
        const Grid back = scale_up_adjoint(g, 7, 7);
        double lhs = 0.0, rhs = 0.0;
        for (std::size_t i = 0; i < up.values.size(); ++i) lhs += up.values[i] * g.values[i];
        for (std::size_t i = 0; i < back.values.size(); ++i) rhs += back.values[i] * a.values[i];
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
    }
}

TEST_CASE("desk CNN maps 224x224 to 7x7xD") {
    ModelConfig c;
    c.init_seed = 3;
    const auto m = ModelState::initialize(c);
    CHECK(m.config.latent_size() == 7);
    CHECK(m.config.cell_size() == 32);
    testkit::Rng rng(8);
    const auto z = embed(m, testkit::random_image(rng, 224));
    CHECK(z.height == 7);
    CHECK(z.width == 7);
    CHECK(z.channels == c.latent_depth);
}

TEST_CASE("embed is deterministic for a seeded model") {
    testkit::Rng rng(9);
    const auto image = testkit::random_image(rng, 28);
    const auto a = embed(tiny_model(), image);
    const auto b = embed(tiny_model(), image);
    CHECK(a.values == b.values);
}

TEST_CASE("zeroed add-on weights give a constant map at the squashing midpoint") {
    auto m = tiny_model();
    for (auto& layer : m.addon.layers) {
        std::fill(layer.conv.weight.begin(), layer.conv.weight.end(), 0.0);
        std::fill(layer.conv.bias.begin(), layer.conv.bias.end(), 0.0);
    }
    InputImage zero{"zero", Tensor3(28, 28, 3, 0.0), std::nullopt};
    const auto z = embed(m, zero);
    CHECK(std::all_of(z.values.begin(), z.values.end(), [](double v) { return v == 0.5; }));
}

TEST_CASE("embed validates shape and finiteness") {
    const auto m = tiny_model();
    InputImage wrong{"wrong", Tensor3(30, 28, 3, 0.0), std::nullopt};
    CHECK_THROWS_WITH_AS(embed(m, wrong), doctest::Contains("wrong"), ConfigError);

    InputImage bad{"bad", Tensor3(28, 28, 3, 0.5), std::nullopt};
    bad.pixels.values[7] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(embed(m, bad), doctest::Contains("trunk.block0"), NumericError);
}

TEST_CASE("forward composes embed, similarity, pooling and the head") {
    testkit::Rng rng(10);
    auto m = tiny_model();
    m.head = testkit::random_matrix(rng, 2, 4);
    for (int t = 0; t < 10; ++t) {
        const auto image = testkit::random_image(rng, 28);
        const auto r = forward(m, image);
        const auto z = embed(m, image);
        const auto o = oracle::logits(z, testkit::to_oracle(m.prototypes), m.head, m.config.epsilon, m.config.top_k);
        for (int k = 0; k < 2; ++k) CHECK(std::fabs(r.logits.scores[k] - o[k]) <= 1e-9);
        CHECK(r.activation_maps.size() == 4);
    }
}

TEST_CASE("head behaviour: zero, one-hot and scaling") {
    testkit::Rng rng(11);
    auto m = tiny_model();
    const auto image = testkit::random_image(rng, 28);

    m.head = Matrix(2, 4, 0.0);
    auto r = forward(m, image);
    CHECK(r.logits.scores == std::vector<double>{0.0, 0.0});

    m.head.at(1, 2) = 1.0;
    r = forward(m, image);
    CHECK(r.logits.scores[1] == r.logits.similarity_vector[2]);

    m.head = testkit::random_matrix(rng, 2, 4);
    const auto base = forward(m, image).logits.scores;
    for (double& v : m.head.values) v *= 3.5;
    const auto scaled = forward(m, image).logits.scores;
    for (int k = 0; k < 2; ++k) CHECK(scaled[k] == doctest::Approx(3.5 * base[k]).epsilon(1e-12));
    CHECK(predicted_class(scaled) == predicted_class(base));
}

TEST_CASE("initialization conventions") {
    const auto m = ModelState::initialize(ModelConfig{});
    CHECK(m.prototypes.count() == 18);
    for (int j = 0; j < 18; ++j) {
        CHECK(m.prototypes.classes[j] == j / 9);
        for (double v : m.prototypes.vectors.row(j)) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        for (int k = 0; k < 2; ++k) CHECK(m.head.at(k, j) == (j / 9 == k ? 1.0 : -0.5));
    }
    CHECK_FALSE(m.has_sources());
}

TEST_CASE("cell boxes tile the input") {
    ModelConfig c;
    CHECK(cell_box(c, 0, 0) == PixelBox{0, 0, 32, 32});
    CHECK(cell_box(c, 2, 5) == PixelBox{160, 64, 32, 32});
    CHECK(cell_box(c, 6, 6) == PixelBox{192, 192, 32, 32});
}

TEST_CASE("model config validation") {
    ModelConfig c;
    c.top_k = 50;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig{};
    c.epsilon = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig{};
    c.backbone_id = "resnet50";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_NOTHROW(ModelConfig{}.validate());
}

}
