#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "protopart/data.hpp"
#include "protopart/errors.hpp"
#include "protopart/evaluation.hpp"

using namespace protopart;

namespace {

// Tiny model whose prototypes come from random latents, so scores differ.
ModelState tiny_model(std::uint64_t seed, int top_k = 3) {
    testkit::Rng rng(seed);
    ModelState m = ModelState::initialize(testkit::tiny_model_config(4, 2, top_k));
    m.prototypes.vectors = testkit::random_matrix(rng, 4, 4, 0.0, 1.0);
    m.head = testkit::random_matrix(rng, 2, 4);
    return m;
}

// Writes `n` random images as PNG and returns them reloaded (quantized) with
// a manifest over them.
std::pair<Manifest, std::vector<InputImage>> write_images(const testkit::TempDir& dir, int n, std::uint64_t seed) {
    testkit::Rng rng(seed);
    std::vector<ManifestRow> rows;
    std::vector<InputImage> images;
    for (int i = 0; i < n; ++i) {
        const std::string id = "img" + std::to_string(i);
        const std::string path = dir / (id + ".png");
        write_png(path, image_to_raster(testkit::random_image(rng, 28, id).pixels));
        rows.push_back({id, path, i % 2, std::nullopt, ""});
        images.push_back(load_image(path));
    }
    write_manifest(dir / "m.csv", rows, false);
    return {load_manifest(dir / "m.csv"), images};
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("metrics on the hand-built confusion matrix") {
    const auto r = report_from_confusion({{160, 0}, {20, 20}});
    CHECK(r.ba == 75.0);
    CHECK(r.recall[0] == 100.0);
    CHECK(r.recall[1] == 50.0);
    CHECK(r.n_per_class == std::vector<long>{160, 40});

    nlohmann::json j = r;
    CHECK(j["ba"] == 75.0);
    CHECK(j["recall"]["NV"] == 100.0);
    CHECK(j["recall"]["MEL"] == 50.0);
    const std::string table = format_report(r);
    CHECK(table.find("75.00") != std::string::npos);
    CHECK(table.find("50.00") != std::string::npos);
}

TEST_CASE("perfect predictions") {
    const std::vector<int> labels{0, 1, 1, 0, 1};
    const auto r = compute_report(labels, labels, 2);
    CHECK(r.ba == 100.0);
    CHECK(r.recall == std::vector<double>{100.0, 100.0});
}

TEST_CASE("report confusion rows sum to class counts") {
    testkit::Rng rng(9);
    std::uniform_int_distribution<int> cls(0, 2);
    for (int t = 0; t < 50; ++t) {
        std::vector<int> labels{0, 1, 2}, predicted{cls(rng), cls(rng), cls(rng)};
        for (int i = 0; i < 40; ++i) {
            labels.push_back(cls(rng));
            predicted.push_back(cls(rng));
        }
        const auto r = compute_report(labels, predicted, 3);
        const auto expected = oracle::confusion(labels, predicted, 3);
        CHECK(r.confusion == expected);
        double mean_recall = 0.0;
        for (int k = 0; k < 3; ++k) {
            const long n = std::count(labels.begin(), labels.end(), k);
            CHECK(r.n_per_class[k] == n);
            mean_recall += 100.0 * expected[k][k] / n / 3.0;
        }
        CHECK(r.ba == doctest::Approx(mean_recall).epsilon(1e-12));
    }
}

TEST_CASE("an absent class makes balanced accuracy undefined") {
    const std::vector<int> labels{0, 0, 0};
    CHECK_THROWS_AS(compute_report(labels, labels, 2), ValidationError);
    try {
        report_from_confusion({{3, 0}, {0, 0}});
    } catch (const ValidationError& e) {
        REQUIRE(e.items().size() == 1);
        CHECK(e.items()[0].find("MEL") != std::string::npos);
    }
    CHECK_THROWS_AS(report_from_confusion({{1, 0, 0}, {0, 1}}), ValidationError);
}

TEST_CASE("balanced accuracy is stable under class-balanced subsampling") {
    // 400 NV at 90% recall, 100 MEL at 70% recall: BA 80.
    std::vector<int> labels, predicted;
    for (int i = 0; i < 400; ++i) {
        labels.push_back(0);
        predicted.push_back(i < 360 ? 0 : 1);
    }
    for (int i = 0; i < 100; ++i) {
        labels.push_back(1);
        predicted.push_back(i < 70 ? 1 : 0);
    }
    CHECK(compute_report(labels, predicted, 2).ba == doctest::Approx(80.0));

    std::vector<int> nv(400), mel(100);
    std::iota(nv.begin(), nv.end(), 0);
    std::iota(mel.begin(), mel.end(), 400);
    testkit::Rng rng(4);
    double sum = 0.0;
    for (int t = 0; t < 20; ++t) {
        std::shuffle(nv.begin(), nv.end(), rng);
        std::vector<int> l, p;
        for (int i = 0; i < 100; ++i) {
            l.push_back(labels[nv[i]]);
            p.push_back(predicted[nv[i]]);
            l.push_back(labels[mel[i]]);
            p.push_back(predicted[mel[i]]);
        }
        sum += compute_report(l, p, 2).ba;
    }
    CHECK(std::abs(sum / 20.0 - 80.0) <= 2.0);
}

TEST_CASE("evaluate agrees with the dumped per-image predictions") {
    testkit::TempDir dir("eval");
    const auto [manifest, images] = write_images(dir, 12, 21);
    const ModelState model = tiny_model(5);
    const auto ev = evaluate(model, manifest, "abc");
    REQUIRE(ev.predictions.size() == 12);
    std::vector<int> labels, predicted;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& p = ev.predictions[i];
        const auto fr = forward(model, images[i]);
        CHECK(p.image_id == images[i].id);
        CHECK(p.scores == fr.logits.scores);
        CHECK(p.predicted == (p.scores[1] > p.scores[0] ? 1 : 0));
        labels.push_back(p.label);
        predicted.push_back(p.predicted);
    }
    CHECK(ev.report.confusion == oracle::confusion(labels, predicted, 2));
    CHECK(ev.report.checkpoint_id == "abc");
    CHECK(evaluate(model, manifest, "abc").report.confusion == ev.report.confusion);
}

TEST_CASE("the embedding cache returns the same maps") {
    testkit::TempDir dir("eval_cache");
    const auto [manifest, images] = write_images(dir, 4, 22);
    const ModelState model = tiny_model(6);
    ::setenv("PROTOPART_CACHE", (dir / "cache").c_str(), 1);
    const auto cold = cached_embed(model, images[0], "id1", manifest.rows[0].image_path);
    const auto warm = cached_embed(model, images[0], "id1", manifest.rows[0].image_path);
    ::unsetenv("PROTOPART_CACHE");
    CHECK(cold == embed(model, images[0]));
    CHECK(warm == cold);
}

TEST_CASE("explanation ranking and points") {
    testkit::Rng rng(31);
    const ModelState model = tiny_model(7);
    for (int t = 0; t < 20; ++t) {
        const auto img = testkit::random_image(rng, 28);
        const auto e = explain(model, img, 4);
        REQUIRE(e.entries.size() == 4);
        double total = 0.0;
        for (std::size_t i = 0; i < e.entries.size(); ++i) {
            const auto& x = e.entries[i];
            if (i > 0) CHECK(e.entries[i - 1].score >= x.score);
            CHECK(x.weight == model.head.at(e.predicted, x.prototype));
            CHECK(x.points == x.score * x.weight);
            CHECK(x.overlay.w == 4);
            total += x.points;
        }
        CHECK(total == doctest::Approx(e.scores[e.predicted]).epsilon(1e-12));
        CHECK(e.scores[e.predicted] >= e.scores[1 - e.predicted]);
        CHECK(explain(model, img, 2).entries.size() == 2);
    }
}

TEST_CASE("a prototype taken from the image ranks first with the maximal score") {
    testkit::Rng rng(32);
    ModelState model = tiny_model(8, 1);
    const auto img = testkit::random_image(rng, 28, "src");
    const auto z = embed(model, img);
    const auto cell = z.cell(3, 5);
    std::copy(cell.begin(), cell.end(), model.prototypes.vectors.row(2).begin());
    model.prototypes.sources[2] = PrototypeSource{"src", "", 3, 5};
    const auto e = explain(model, img, 1);
    CHECK(e.entries[0].prototype == 2);
    CHECK(e.entries[0].score == doctest::Approx(std::log(1e4)));
    CHECK(e.entries[0].overlay == PixelBox{20, 12, 4, 4});
    CHECK(e.entries[0].source_box == PixelBox{20, 12, 4, 4});
}

TEST_CASE("explanations are deterministic and bounded") {
    testkit::Rng rng(33);
    const auto img = testkit::random_image(rng, 28);
    nlohmann::json a = explain(tiny_model(9), img, 3);
    nlohmann::json b = explain(tiny_model(9), img, 3);
    CHECK(a.dump() == b.dump());
    CHECK(a["prototypes"].size() == 3);
    CHECK_THROWS_AS(explain(tiny_model(9), img, 0), ConfigError);
    CHECK_THROWS_AS(explain(tiny_model(9), img, 5), ConfigError);

    const ModelState model = tiny_model(9);
    const auto e = explain(model, img, 3);
    const Raster panel = render_explanation(model, img, e);
    CHECK(panel.width == 4 * 112 + 5 * 8);
    CHECK(panel.height == 3 * 120 + 8);
}

TEST_CASE("boundary tolerance is a Euclidean band") {
    LesionMask mask(32, 32, 1);
    mask.at(10, 10) = 0;
    CHECK(inside_or_boundary(mask, 10, 10, 0));
    CHECK(inside_or_boundary(mask, 18, 10, 8));
    CHECK_FALSE(inside_or_boundary(mask, 19, 10, 8));
    CHECK_FALSE(inside_or_boundary(mask, 16, 16, 8));  // sqrt(72) > 8
    CHECK(inside_or_boundary(mask, 16, 16, 9));
    CHECK_FALSE(inside_or_boundary(mask, 11, 10, 0));
}

TEST_CASE("audit flags against source-image masks") {
    testkit::TempDir dir("audit");
    const auto [manifest, images] = write_images(dir, 3, 40);
    ModelState model = tiny_model(10, 1);
    // prototype j copies cell (1, 1) of image j (image 2 is reused by prototype 3)
    for (int j = 0; j < 4; ++j) {
        const int i = std::min(j, 2);
        const auto cell = embed(model, images[i]).cell(1, 1);
        std::copy(cell.begin(), cell.end(), model.prototypes.vectors.row(j).begin());
        model.prototypes.sources[j] = PrototypeSource{images[i].id, manifest.rows[i].image_path, 1, 1};
    }
    model.prototypes.sources[3].reset();

    LesionMask lesion(28, 28, 1);
    for (int r = 0; r < 10; ++r) {
        for (int c = 0; c < 10; ++c) lesion.at(r, c) = 0;  // covers cell (1,1) = pixels 4..7
    }
    const LesionMask clear(28, 28, 1);
    auto mask_for = [&](const std::string& id) -> const LesionMask* {
        if (id == "img0") return &lesion;
        if (id == "img1") return &clear;
        return nullptr;
    };
    const auto audit = audit_prototypes(model, mask_for, 0);
    REQUIRE(audit.entries.size() == 4);
    CHECK(audit.entries[0].status == "inside");
    CHECK(audit.entries[0].row == 1);
    CHECK(audit.entries[0].col == 1);
    CHECK(audit.entries[0].center_x == 6);
    CHECK(audit.entries[1].status == "outside");
    CHECK(audit.entries[2].status == "unauditable");
    CHECK(audit.entries[3].status == "unauditable");
    CHECK(audit.fraction_inside == 0.5);
    CHECK(audit.fraction_inside_per_class == std::vector<double>{0.5, -1.0});

    nlohmann::json j = audit;
    CHECK(j["prototypes"][0]["status"] == "inside");
    nlohmann::json again = audit_prototypes(model, mask_for, 0);
    CHECK(again == j);

    for (auto& s : model.prototypes.sources) s.reset();
    CHECK_THROWS_AS(audit_prototypes(model, mask_for, 8), ValidationError);
}

}
