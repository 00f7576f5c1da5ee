#include <doctest.h>

#include <cmath>

#include "maskgan/data/dataset.hpp"
#include "maskgan/vae/maskvae.hpp"

using namespace maskgan;
using namespace maskgan::vae;

namespace {

LatentCode code_of(Tensor mu, Tensor log_sigma) {
    return LatentCode{Var::leaf(std::move(mu)), Var::leaf(std::move(log_sigma)), Var()};
}

VaeConfig small_config() {
    VaeConfig c;
    c.resolution = 32;
    c.categories = 19;
    c.latent_dim = 16;
    c.base_channels = 8;
    return c;
}

}  // namespace

TEST_CASE("kl_loss exact cases") {
    const Shape s{1, 4, 1, 1};
    CHECK(kl_loss(code_of(Tensor(s), Tensor(s))).item() == 0.0f);
    CHECK(kl_loss(code_of(Tensor(s, 1.0f), Tensor(s))).item() == doctest::Approx(2.0).epsilon(1e-7));
    // batch average: two identical rows give the same value
    const Shape s2{2, 4, 1, 1};
    CHECK(kl_loss(code_of(Tensor(s2, 1.0f), Tensor(s2))).item() == doctest::Approx(2.0).epsilon(1e-7));
    CHECK(kl_loss(code_of(Tensor(s), Tensor(s)), KlConvention::Standard).item() == 0.0f);
}

TEST_CASE("kl_loss is non-negative on random codes") {
    Rng rng(17);
    for (int t = 0; t < 200; ++t) {
        Tensor mu(Shape{3, 5, 1, 1}), ls(Shape{3, 5, 1, 1});
        for (auto& v : mu.storage()) v = static_cast<Real>(rng.normal() * 3);
        for (auto& v : ls.storage()) v = static_cast<Real>(rng.normal() * 4);
        CHECK(kl_loss(code_of(mu, ls)).item() >= 0.0f);
        CHECK(kl_loss(code_of(mu, ls), KlConvention::Standard).item() >= 0.0f);
    }
}

TEST_CASE("kl convention names") {
    CHECK(parse_kl_convention("paper") == KlConvention::Paper);
    CHECK(parse_kl_convention("standard") == KlConvention::Standard);
    CHECK_THROWS_AS(parse_kl_convention("other"), ArgumentError);
}

TEST_CASE("reparameterize") {
    const Shape s{1, 6, 1, 1};
    Tensor mu(s);
    for (int i = 0; i < 6; ++i) mu[i] = static_cast<Real>(i) - 2.5f;
    {
        Rng rng(1);
        const Var z = reparameterize(code_of(mu, Tensor(s, -20.0f)), rng);
        for (int i = 0; i < 6; ++i) CHECK(std::abs(z.value()[i] - mu[i]) < 1e-8 + std::exp(-20.0) * 6);
    }
    Rng a(5), b(5);
    CHECK(reparameterize(code_of(mu, Tensor(s)), a).value() == reparameterize(code_of(mu, Tensor(s)), b).value());

    Rng rng(99);
    const int n = 100000;
    const Shape big{n, 1, 1, 1};
    const Var z = reparameterize(code_of(Tensor(big), Tensor(big)), rng);
    double m = 0, m2 = 0;
    for (int i = 0; i < n; ++i) {
        m += z.value()[i];
        m2 += static_cast<double>(z.value()[i]) * z.value()[i];
    }
    m /= n;
    const double sd = std::sqrt(m2 / n - m * m);
    CHECK(std::abs(sd - 1.0) < 0.02);
}

TEST_CASE("reconstruction_loss exact cases") {
    const int C = 19;
    LabelMask target(4, 4);
    for (int i = 0; i < 16; ++i) target.labels()[i] = static_cast<std::uint8_t>(i % C);
    const LabelMask targets[] = {target};
    Tensor uniform(Shape{1, C, 4, 4});
    CHECK(reconstruction_loss(Var::leaf(uniform), targets).item() == doctest::Approx(std::log(19.0)).epsilon(1e-7));
    CHECK(std::abs(reconstruction_loss(Var::leaf(uniform), targets).item() - std::log(19.0)) <= 1e-6);

    Tensor peaked(Shape{1, C, 4, 4});
    for (int i = 0; i < 16; ++i) peaked.plane_ptr(0, target.labels()[i])[i] = 50.0f;
    CHECK(reconstruction_loss(Var::leaf(peaked), targets).item() < 1e-10);

    LabelMask bad = target;
    bad(0, 0) = 30;
    const LabelMask bads[] = {bad};
    CHECK_THROWS(reconstruction_loss(Var::leaf(uniform), bads));
}

TEST_CASE("softmax sums to one") {
    Rng rng(2);
    Tensor logits(Shape{2, 19, 5, 5});
    for (auto& v : logits.storage()) v = static_cast<Real>(rng.normal() * 5);
    const Tensor p = softmax_channels(logits);
    for (int n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 25; ++i) {
            double s = 0;
            for (int c = 0; c < 19; ++c) s += p.plane_ptr(n, c)[i];
            CHECK(std::abs(s - 1.0) <= 1e-5);
        }
}

TEST_CASE("encoder and decoder shapes, determinism") {
    Rng rng(3);
    MaskVae vae(small_config(), rng);
    CHECK(vae.bottleneck() == 4);
    CHECK(vae.downsamples() == 3);
    const auto data = data::make_toy_dataset(4, 32, 1);
    const auto batch = data::make_batch(data, {0, 1});
    NoGradGuard ng;
    const LatentCode a = vae.encode(Var::leaf(batch.onehot), false);
    const LatentCode b = vae.encode(Var::leaf(batch.onehot), false);
    CHECK(a.mu.shape() == Shape{2, 16, 1, 1});
    CHECK(a.log_sigma.shape() == Shape{2, 16, 1, 1});
    CHECK(a.mu.value() == b.mu.value());
    CHECK(a.log_sigma.value() == b.log_sigma.value());
    bool distinct = false;
    for (int d = 0; d < 16; ++d) distinct = distinct || a.mu.value().at(0, d, 0, 0) != a.mu.value().at(1, d, 0, 0);
    CHECK(distinct);
    const Var logits = vae.decode(a.mu, false);
    CHECK(logits.shape() == Shape{2, 19, 32, 32});
    CHECK_THROWS_AS(vae.encode(Var::leaf(Tensor(Shape{1, 19, 16, 16})), false), ShapeError);
    CHECK_THROWS_AS(vae.decode(Var::leaf(Tensor(Shape{1, 15, 1, 1})), false), ShapeError);
}

TEST_CASE("vae_total_loss with lambda_kl = 0 is the reconstruction loss") {
    Rng init(4);
    MaskVae vae(small_config(), init);
    const auto data = data::make_toy_dataset(4, 32, 1);
    const auto batch = data::make_batch(data, {0, 1, 2});
    Rng r1(8);
    const VaeLoss l = vae_total_loss(vae, batch.onehot, batch.masks, 0.0, KlConvention::Paper, r1, false);
    CHECK(l.total.item() == l.reconstruction.item());
    CHECK(l.kl.item() >= 0);
}

TEST_CASE("traversal") {
    Rng init(5);
    MaskVae vae(small_config(), init);
    const auto data = data::make_toy_dataset(4, 32, 1);
    const LabelMask& m = data.samples[0].mask;
    const LabelMask& r = data.samples[1].mask;

    SUBCASE("reference equal to target collapses both ends onto decode(z_t)") {
        auto [inter, outer] = latent_traverse(vae, m, m, 2.5);
        CHECK(inter == outer);
        const LabelMask one[] = {m};
        CHECK(inter == decode_labels(vae, encode_mu(vae, onehot_batch(one, 19)))[0]);
    }
    SUBCASE("latent arithmetic") {
        Tensor zt(Shape{1, 3, 1, 1}, std::vector<Real>{0, 1, 2}), zr(Shape{1, 3, 1, 1}, std::vector<Real>{5, 1, -3});
        auto [i, o] = traverse_latent(zt, zr, 2.5);
        CHECK(i[0] == doctest::Approx(2.0));
        CHECK(o[0] == doctest::Approx(-2.0));
        CHECK(i[1] == doctest::Approx(1.0));
        CHECK(i[2] == doctest::Approx(0.0));
        CHECK(o[2] == doctest::Approx(4.0));
        // mirroring the reference through z_t swaps the two ends
        Tensor mirrored(zt.shape());
        for (int k = 0; k < 3; ++k) mirrored[k] = 2 * zt[k] - zr[k];
        auto [i2, o2] = traverse_latent(zt, mirrored, 2.5);
        for (int k = 0; k < 3; ++k) {
            CHECK(i2[k] == doctest::Approx(o[k]));
            CHECK(o2[k] == doctest::Approx(i[k]));
        }
        CHECK_THROWS_AS(traverse_latent(zt, zr, 0.0), ArgumentError);
    }
    SUBCASE("interpolation endpoints") {
        const auto strip = interpolate(vae, m, r, 8);
        CHECK(strip.size() == 9);
        const LabelMask both[] = {m, r};
        const auto rec = decode_labels(vae, encode_mu(vae, onehot_batch(both, 19)));
        CHECK(strip.front() == rec[0]);
        CHECK(strip.back() == rec[1]);
    }
}

TEST_CASE("clone is independent") {
    Rng init(6);
    MaskVae vae(small_config(), init);
    MaskVae copy = vae.clone();
    const auto a = vae.params().snapshot(), b = copy.params().snapshot();
    CHECK(a == b);
    Var first = copy.params().params().front().second;
    first.mutable_value()[0] += 1;
    CHECK(vae.params().snapshot() == a);
}
