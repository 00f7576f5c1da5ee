#include <doctest.h>

#include <random>

#include "gradcheck.hpp"
#include "maskgan/adv/adversarial.hpp"
#include "maskgan/dmn/dmn.hpp"
#include "maskgan/vae/maskvae.hpp"

using namespace maskgan;

static_assert(sizeof(Real) == sizeof(double), "gradient tests link the double build");

TEST_CASE("MaskVAE total loss matches central differences (4x4, C=3, D=2)") {
    vae::VaeConfig cfg;
    cfg.resolution = 4;
    cfg.categories = 3;
    cfg.latent_dim = 2;
    cfg.base_channels = 4;
    Rng init(1);
    vae::MaskVae net(cfg, init);
    std::mt19937 gen(2);
    std::vector<LabelMask> masks;
    for (int n = 0; n < 2; ++n) {
        LabelMask m(4, 4);
        for (auto& v : m.labels()) v = static_cast<std::uint8_t>(gen() % 3);
        masks.push_back(m);
    }
    const Tensor onehot = onehot_batch(masks, 3);
    auto set = net.params();
    std::vector<Var> params;
    for (auto& [name, p] : set.params()) params.push_back(p);
    for (auto kl : {vae::KlConvention::Paper, vae::KlConvention::Standard}) {
        // a fixed noise stream per evaluation keeps the objective deterministic;
        // eval-mode batch norm keeps it a smooth function of the weights
        auto f = [&] {
            Rng noise(3);
            return vae::vae_total_loss(net, onehot, masks, 0.5, kl, noise, false).total;
        };
        const auto r = gradcheck::compare(f, params, 6);
        CHECK(r.checked > 0);
        CHECK(r.worst_rel < 1e-3);
    }
    // training-mode batch norm (batch statistics) as well
    auto f_train = [&] {
        Rng noise(4);
        std::map<std::string, Tensor> keep = set.snapshot();
        Var loss = vae::vae_total_loss(net, onehot, masks, 1e-5, vae::KlConvention::Paper, noise, true).total;
        set.restore(keep);  // undo running-stat updates
        return loss;
    };
    const auto r = gradcheck::compare(f_train, params, 6);
    CHECK(r.worst_rel < 1e-3);
}

TEST_CASE("generate output sum matches central differences on a 16x16 instance") {
    dmn::DmnConfig cfg;
    cfg.resolution = 16;
    cfg.categories = 3;
    cfg.width_scale = 0.0625;
    cfg.residual_blocks = 2;
    cfg.n_downsample = 2;
    for (auto mode : {dmn::FusionMode::Sft, dmn::FusionMode::Concat}) {
        cfg.fusion = mode;
        Rng init(5);
        dmn::DenseMappingNetwork net(cfg, init);
        std::mt19937 gen(6);
        const Tensor image = gradcheck::random_tensor({2, 3, 16, 16}, gen, 0.5);
        std::vector<LabelMask> masks;
        for (int n = 0; n < 2; ++n) {
            LabelMask m(16, 16);
            for (int y = 0; y < 16; ++y)
                for (int x = 0; x < 16; ++x) m(y, x) = static_cast<std::uint8_t>((x / 5 + y / 7 + n) % 3);
            masks.push_back(m);
        }
        const Var onehot = Var::leaf(onehot_batch(masks, 3));
        std::vector<Var> params;
        const auto set = net.params();
        for (const auto& [name, p] : set.params()) params.push_back(p);
        // conv biases feeding instance norm have an exactly zero gradient; the
        // 1e-4 floor keeps central-difference roundoff on them from counting
        const auto r = gradcheck::compare([&] { return ops::sum(net.reconstruct(Var::leaf(image), onehot)); },
                                          params, 3, 1e-6, 1e-4);
        CHECK(r.checked > 0);
        CHECK(r.worst_rel < 1e-3);
    }
}

TEST_CASE("generator adversarial loss gradient w.r.t. the fake image (8x8)") {
    adv::DiscConfig cfg;
    cfg.in_channels = 6;
    cfg.base_channels = 4;
    Rng init(7);
    adv::DiscriminatorSet ds(cfg, init);
    std::mt19937 gen(8);
    Var fake = Var::leaf(gradcheck::random_tensor({2, 3, 8, 8}, gen, 0.5), true);
    const Var mask = Var::leaf(gradcheck::random_tensor({2, 3, 8, 8}, gen));
    for (auto loss : {adv::GanLoss::Lsgan, adv::GanLoss::Bce}) {
        const auto r = gradcheck::compare([&] { return adv::generator_adv_loss(ds(fake, mask), loss); }, {fake}, 24);
        CHECK(r.checked == 24);
        CHECK(r.worst_rel < 1e-3);
    }
    const Var target = Var::leaf(gradcheck::random_tensor({2, 3, 8, 8}, gen, 0.5));
    const auto ex = adv::PerceptualExtractor::random();
    const auto r = gradcheck::compare(
        [&] {
            return adv::total_generator_loss(ds, ex, target, fake, mask, adv::GanLoss::Lsgan, adv::LossWeights{}).total;
        },
        {fake}, 24);
    CHECK(r.worst_rel < 1e-3);
}

TEST_CASE("feature matching and perceptual terms w.r.t. the fake image (8x8)") {
    adv::DiscConfig cfg;
    cfg.in_channels = 6;
    cfg.base_channels = 4;
    Rng init(11);
    adv::DiscriminatorSet ds(cfg, init);
    std::mt19937 gen(12);
    Var fake = Var::leaf(gradcheck::random_tensor({2, 3, 8, 8}, gen, 0.5), true);
    const Var real = Var::leaf(gradcheck::random_tensor({2, 3, 8, 8}, gen, 0.5));
    const Var mask = Var::leaf(gradcheck::random_tensor({2, 3, 8, 8}, gen));
    const auto real_out = ds(real, mask);
    auto fm = gradcheck::compare([&] { return adv::feature_matching_loss(real_out, ds(fake, mask)); }, {fake}, 24);
    CHECK(fm.checked == 24);
    CHECK(fm.worst_rel < 1e-3);
    const auto ex = adv::PerceptualExtractor::random();
    auto pl = gradcheck::compare([&] { return adv::perceptual_loss(ex, real, fake); }, {fake}, 24);
    CHECK(pl.worst_rel < 1e-3);
}

TEST_CASE("alpha blend gradient w.r.t. blender weights and both inputs (16x16)") {
    Rng init(13);
    dmn::AlphaBlender blender(dmn::BlenderConfig{2, 2, 1}, init);
    std::mt19937 gen(14);
    Var a = Var::leaf(gradcheck::random_tensor({1, 3, 16, 16}, gen, 0.5), true);
    Var b = Var::leaf(gradcheck::random_tensor({1, 3, 16, 16}, gen, 0.5), true);
    const Tensor w = gradcheck::random_tensor({1, 3, 16, 16}, gen);
    std::vector<Var> params = {a, b};
    for (const auto& [name, p] : blender.params().params()) params.push_back(p);
    const auto r = gradcheck::compare([&] { return ops::sum(ops::mul(dmn::alpha_blend(blender, a, b).blend, Var::leaf(w))); },
                                      params, 4, 1e-6, 1e-4);
    CHECK(r.checked > 0);
    CHECK(r.worst_rel < 1e-3);
}
