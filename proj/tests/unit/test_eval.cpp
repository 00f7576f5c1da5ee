#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "maskgan/eval/eval.hpp"

using namespace maskgan;

namespace {

const data::DatasetManifest& toy() {
    static const data::DatasetManifest m = data::make_toy_dataset(300, 32, 5);
    return m;
}

Eigen::MatrixXd gaussian(int n, int d, double shift, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    Eigen::MatrixXd m(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) m(i, j) = nd(gen) + shift;
    return m;
}

std::vector<LabelMask> masks_of(const std::vector<int>& idx) {
    std::vector<LabelMask> out;
    for (int i : idx) out.push_back(toy().at(i).mask);
    return out;
}

Tensor images_of(const std::vector<int>& idx) {
    std::vector<Tensor> t;
    for (int i : idx) t.push_back(toy().at(i).image.values);
    return stack_batch(t);
}

dmn::DenseMappingNetwork tiny_dmn() {
    dmn::DmnConfig c;
    c.resolution = 32;
    c.width_scale = 0.0625;
    c.residual_blocks = 1;
    c.n_downsample = 2;
    Rng rng(3);
    return dmn::DenseMappingNetwork(c, rng);
}

}  // namespace

TEST_CASE("mask consistency of a mask set with itself is 1") {
    const auto m = masks_of(toy().test);
    const auto r = eval::mask_consistency(m, m, 19);
    CHECK(r.accuracy == 1.0);
    CHECK(r.samples == static_cast<int>(m.size()));
    CHECK_FALSE(r.iou.empty());
    for (const auto& c : r.iou) CHECK(c.iou == 1.0);
    CHECK(r.mean_iou() == 1.0);
}

TEST_CASE("mask consistency hand case") {
    LabelMask a(2, 2, std::vector<std::uint8_t>{0, 0, 1, 1});
    LabelMask b(2, 2, std::vector<std::uint8_t>{0, 1, 1, 1});
    const LabelMask pa[] = {a}, pb[] = {b};
    const auto r = eval::mask_consistency(pa, pb, 3);
    CHECK(r.accuracy == doctest::Approx(0.75));
    REQUIRE(r.iou.size() == 2);
    CHECK(r.iou[0].iou == doctest::Approx(0.5));        // {0,1} vs {0}
    CHECK(r.iou[1].iou == doctest::Approx(2.0 / 3.0));  // {2,3} vs {1,2,3}
    const LabelMask bad[] = {LabelMask(2, 2, std::uint8_t{5})};
    CHECK_THROWS(eval::mask_consistency(bad, pb, 3));
}

TEST_CASE("oracle parser on ground-truth pairs") {
    const eval::OracleParser oracle(toy());
    const auto& idx = toy().test;
    const auto r = eval::parse_consistency(oracle, images_of(idx), masks_of(idx), idx);
    CHECK(r.accuracy >= 0.99);
}

TEST_CASE("shuffled pairs land near the positional prior baseline") {
    std::vector<int> idx = toy().train;
    const auto masks = masks_of(idx);
    const double baseline = eval::prior_match_baseline(masks, 19);
    const auto perm = data::derangement(static_cast<int>(idx.size()), 11, 0);
    std::vector<int> shuffled;
    std::vector<LabelMask> expected;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        shuffled.push_back(idx[perm[k]]);
        expected.push_back(masks[k]);
    }
    const eval::OracleParser oracle(toy());
    const auto r = eval::parse_consistency(oracle, images_of(shuffled), expected, shuffled);
    CHECK(r.accuracy == doctest::Approx(baseline).epsilon(0.05));
    CHECK(r.accuracy < 0.95);
}

TEST_CASE("prior baseline hand case") {
    const LabelMask m[] = {LabelMask(2, 2, std::uint8_t{0}), LabelMask(2, 2, std::uint8_t{1})};
    CHECK(eval::prior_match_baseline(m, 2) == doctest::Approx(0.5));
    const LabelMask same[] = {LabelMask(2, 2, std::uint8_t{1}), LabelMask(2, 2, std::uint8_t{1})};
    CHECK(eval::prior_match_baseline(same, 2) == doctest::Approx(1.0));
}

TEST_CASE("parser palette mismatch") {
    struct ThreeWay : eval::Parser {
        std::vector<LabelMask> parse(const Tensor& images, std::span<const int>) const override {
            return std::vector<LabelMask>(images.shape().n, LabelMask(images.shape().h, images.shape().w));
        }
        int categories() const override { return 3; }
        std::string name() const override { return "three"; }
    } parser;
    const std::vector<int> idx = {toy().test[0]};
    CHECK_THROWS_AS(eval::parse_consistency(parser, images_of(idx), masks_of(idx), idx), PaletteMismatch);
}

TEST_CASE("fid oracles") {
    const Eigen::MatrixXd x = gaussian(500, 6, 0.0, 1);
    CHECK(std::abs(eval::fid(x, x)) <= 1e-6);

    const Eigen::MatrixXd y = gaussian(400, 6, 0.3, 2);
    CHECK(std::abs(eval::fid(x, y) - eval::fid(y, x)) <= 1e-8);
    CHECK(eval::fid(x, y) >= -1e-6);

    // N(0, I) vs N(mu, I): FID -> |mu|^2 = 8 * 0.5^2 = 2
    const Eigen::MatrixXd a = gaussian(20000, 8, 0.0, 3);
    const Eigen::MatrixXd b = gaussian(20000, 8, 0.5, 4);
    CHECK(eval::fid(a, b) == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("fid closed form in one dimension") {
    // two-point sets with exactly known moments: N(m, s^2) fit
    Eigen::MatrixXd a(2, 1), b(2, 1);
    a << -1, 1;       // mean 0, var 2
    b << 3 - 2, 3 + 2;  // mean 3, var 8
    // (0 - 3)^2 + 2 + 8 - 2 sqrt(16) = 9 + 10 - 8
    CHECK(eval::fid(a, b) == doctest::Approx(11.0).epsilon(1e-12));
    const auto r = eval::fid_report(a, b);
    CHECK(r.dim == 1);
    CHECK(r.cov_a(0, 0) == doctest::Approx(2.0));
    CHECK(r.mean_b(0) == doctest::Approx(3.0));
}

TEST_CASE("fid rejects non-finite and mismatched features") {
    Eigen::MatrixXd a = gaussian(10, 3, 0, 1), b = gaussian(10, 3, 0, 2);
    a(2, 1) = std::nan("");
    CHECK_THROWS_AS(eval::fid(a, b), eval::EvalError);
    CHECK_THROWS_AS(eval::fid(gaussian(10, 3, 0, 1), gaussian(10, 4, 0, 1)), ShapeError);
}

TEST_CASE("features come from the penultimate perceptual tap") {
    const auto ex = adv::PerceptualExtractor::random();
    const std::vector<int> idx(toy().test.begin(), toy().test.begin() + 5);
    const Eigen::MatrixXd f = eval::extract_features(ex, images_of(idx), 2);
    CHECK(f.rows() == 5);
    CHECK(f.cols() == 64);
    CHECK(f.allFinite());
    CHECK(f.minCoeff() >= 0);  // pooled relu activations
}

TEST_CASE("eval_run protocols") {
    const auto net = tiny_dmn();
    eval::EvalOptions opt;
    opt.max_samples = 12;
    opt.batch_size = 5;

    opt.protocol = eval::Protocol::Reconstruction;
    const auto rec = eval::eval_run(net, toy(), opt);
    CHECK(rec.report.targets == rec.report.sources);
    CHECK(rec.report.samples == 12);
    CHECK(rec.generated.shape() == Shape{12, 3, 32, 32});
    CHECK(rec.report.mae > 0);
    CHECK(rec.report.parser == "oracle");

    opt.protocol = eval::Protocol::StyleCopy;
    const auto sc = eval::eval_run(net, toy(), opt);
    std::set<int> srcs(sc.report.sources.begin(), sc.report.sources.end());
    CHECK(srcs == std::set<int>(sc.report.targets.begin(), sc.report.targets.end()));
    for (int k = 0; k < 12; ++k) CHECK(sc.report.sources[k] != sc.report.targets[k]);

    const auto again = eval::eval_run(net, toy(), opt);
    CHECK(eval::report_to_json(again.report) == eval::report_to_json(sc.report));

    data::DatasetManifest empty = toy();
    empty.test.clear();
    CHECK_THROWS_AS(eval::eval_run(net, empty, opt), eval::EvalError);
}

TEST_CASE("report JSON round-trips through the schema") {
    const auto net = tiny_dmn();
    eval::EvalOptions opt;
    opt.max_samples = 6;
    opt.protocol = eval::Protocol::StyleCopy;
    eval::EvalReport r = eval::eval_run(net, toy(), opt).report;
    r.learned_consistency = r.consistency;
    const std::string text = eval::report_to_json(r);
    const eval::EvalReport back = eval::report_from_json(text);
    CHECK(eval::report_to_json(back) == text);
    CHECK(back.learned_consistency.has_value());

    CHECK_THROWS_AS(eval::report_from_json("{}"), eval::EvalError);
    CHECK_THROWS_AS(eval::report_from_json("not json"), eval::EvalError);
    std::string bad = text;
    bad.replace(bad.find("style_copy"), 10, "sideways!!");
    CHECK_THROWS_AS(eval::report_from_json(bad), eval::EvalError);
}

TEST_CASE("segmentation parser trains and round-trips through a file") {
    eval::ParserTrainOptions opt;
    opt.iterations = 60;
    opt.batch_size = 8;
    std::vector<double> losses;
    const auto net = eval::train_parser(toy(), opt, [&](int, double l) { losses.push_back(l); });
    REQUIRE(losses.size() == 60);
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) {
        head += losses[i];
        tail += losses[50 + i];
    }
    CHECK(tail < head);

    const auto path = std::filesystem::temp_directory_path() / "maskgan_test_parser.ckpt";
    eval::save_parser(net, path);
    const eval::SegmentationParser a(net), b(eval::load_parser(path));
    const std::vector<int> idx(toy().test.begin(), toy().test.begin() + 4);
    CHECK(a.parse(images_of(idx), idx) == b.parse(images_of(idx), idx));
    std::filesystem::remove(path);
}
