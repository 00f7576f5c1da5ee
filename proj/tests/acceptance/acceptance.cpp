// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only when
// every selected criterion passes. Usage: acceptance [--only a,b,...]
// [--artifacts dir]. Criteria: formula, gradient, fid, vae, dmn, ebst,
// determinism, ablation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "maskgan/core/checkpoint.hpp"
#include "maskgan/core/log.hpp"
#include "maskgan/eval/eval.hpp"
#include "maskgan/serve/serve.hpp"
#include "maskgan/train/train.hpp"

#include <httplib.h>
#include <json.hpp>

using namespace maskgan;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::vector<std::string> g_failed;

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void report(const std::string& name, const Outcome& o, double seconds) {
    std::printf("[%s] %-12s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds);
    std::fflush(stdout);
    if (!o.pass) g_failed.push_back(name);
}

void run_criterion(const std::string& name, const std::function<Outcome()>& body) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    report(name, o, seconds_since(t0));
}

// ---- formula fidelity ----

Outcome formula_suite() {
    const auto t0 = Clock::now();
    std::vector<std::string> failures;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    };
    const Shape s{1, 4, 1, 1};
    auto kl = [](Tensor mu, Tensor ls) {
        return vae::kl_loss(vae::LatentCode{Var::leaf(std::move(mu)), Var::leaf(std::move(ls)), Var()}).item();
    };
    expect(kl(Tensor(s), Tensor(s)) == 0.0, "kl(0,0) = 0");
    expect(std::abs(kl(Tensor(s, 1), Tensor(s)) - 2.0) <= 1e-6, "kl(ones(4),0) = 2");

    LabelMask target(4, 4);
    for (int i = 0; i < 16; ++i) target.labels()[i] = static_cast<std::uint8_t>(i % 19);
    const LabelMask targets[] = {target};
    const double ce = vae::reconstruction_loss(Var::leaf(Tensor(Shape{1, 19, 4, 4})), targets).item();
    expect(std::abs(ce - std::log(19.0)) <= 1e-6, "uniform-logit cross-entropy = ln 19");

    std::mt19937 gen(1);
    std::normal_distribution<double> nd;
    auto random = [&](Shape sh, double mean, double sd) {
        Tensor t(sh);
        for (auto& v : t.storage()) v = static_cast<Real>(mean + sd * nd(gen));
        return t;
    };
    const Shape fs4{2, 4, 16, 16};
    const Tensor z = random(fs4, 0.7, 2.5);
    const Tensor x = random({2, 4, 1, 1}, 0, 1.5), y = random({2, 4, 1, 1}, 0, 1);
    const Tensor one = Tensor({2, 4, 1, 1}, Real(1)), zero({2, 4, 1, 1});
    const Tensor std_out = dmn::adain(Var::leaf(z), Var::leaf(one), Var::leaf(zero)).value();
    const Tensor mod_out = dmn::adain(Var::leaf(z), Var::leaf(x), Var::leaf(y)).value();
    double worst_id = 0, worst_mom = 0;
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 4; ++c) {
            auto moments = [&](const Tensor& t) {
                const Real* p = t.plane_ptr(n, c);
                const std::size_t m = t.shape().plane();
                double mean = 0, var = 0;
                for (std::size_t i = 0; i < m; ++i) mean += p[i];
                mean /= m;
                for (std::size_t i = 0; i < m; ++i) var += (p[i] - mean) * (p[i] - mean);
                return std::pair{mean, std::sqrt(var / m)};
            };
            auto [m0, s0] = moments(std_out);
            worst_id = std::max({worst_id, std::abs(m0), std::abs(s0 - 1)});
            auto [m1, s1] = moments(mod_out);
            worst_mom = std::max({worst_mom, std::abs(m1 - y.at(n, c, 0, 0)), std::abs(s1 - std::abs(x.at(n, c, 0, 0)))});
        }
    expect(worst_id <= 1e-3, "AdaIN(1,0) standardizes");
    expect(worst_mom <= 1e-3, "AdaIN moments follow (y, |x|)");

    const Tensor f = random({2, 3, 4, 5}, 0, 1);
    const Tensor sft = dmn::sft_modulate(Var::leaf(f), Var::leaf(Tensor(f.shape(), Real(1))),
                                         Var::leaf(Tensor(f.shape()))).value();
    expect(sft == f, "SFT identity");

    Rng init(10);
    dmn::AlphaBlender blender(dmn::BlenderConfig{}, init);
    const Tensor a = random({2, 3, 32, 32}, 0, 0.5), b = random({2, 3, 32, 32}, 0, 0.5);
    int violations = 0;
    {
        NoGradGuard ng;
        const auto r = dmn::alpha_blend(blender, Var::leaf(a), Var::leaf(b));
        for (Real v : r.alpha.value().storage()) violations += !(v > 0 && v < 1);
        const Tensor& out = r.blend.value();
        for (std::size_t i = 0; i < out.size(); ++i)
            violations += out[i] < std::min(a[i], b[i]) - 1e-6f || out[i] > std::max(a[i], b[i]) + 1e-6f;
    }
    expect(violations == 0, "alpha-blend convexity");

    const double secs = seconds_since(t0);
    expect(secs < 10, "runtime < 10 s");
    std::string detail = std::to_string(7 - static_cast<int>(failures.size())) + "/7 exact cases";
    for (const auto& f2 : failures) detail += "; failed: " + f2;
    return {failures.empty(), detail + fmt(", %.2fs", secs)};
}

// ---- gradient suite (double build, separate binary) ----

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    const std::string cmd = std::string("\"") + MASKGAN_GRADIENT_TEST + "\" > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    const double secs = seconds_since(t0);
    return {rc == 0 && secs < 120,
            std::string(rc == 0 ? "all central-difference checks <= 1e-3 rel" : "gradient checks failed") +
                fmt(", %.1fs (limit 120s)", secs)};
}

// ---- FID oracle ----

Eigen::MatrixXd gaussian(int n, int d, double shift, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    Eigen::MatrixXd m(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) m(i, j) = nd(gen) + shift;
    return m;
}

Outcome fid_oracle() {
    const auto t0 = Clock::now();
    const Eigen::MatrixXd x = gaussian(2000, 8, 0.0, 1);
    const double self = std::abs(eval::fid(x, x));
    const Eigen::MatrixXd a = gaussian(20000, 8, 0.0, 3), b = gaussian(20000, 8, 0.5, 4);
    const double expected = 8 * 0.25;
    const double got = eval::fid(a, b);
    const double rel = std::abs(got - expected) / expected;
    const double secs = seconds_since(t0);
    return {self <= 1e-6 && rel <= 0.05 && secs < 60,
            fmt("fid(X,X) = %.2e", self) + fmt(", MC fid = %.4f", got) + fmt(" vs |mu|^2 = 2 (%.2f%%)", 100 * rel)};
}

// ---- desk-scale pipeline ----

struct Pipeline {
    fs::path dir;
    train::TrainConfig config;
    data::DatasetManifest manifest;
    std::optional<train::TrainState> state;
    bool vae_done = false, gan_done = false;
};

std::vector<LabelMask> test_masks(const data::DatasetManifest& m) {
    std::vector<LabelMask> out;
    for (int i : m.test) out.push_back(m.at(i).mask);
    return out;
}

double spearman(const std::vector<double>& v) {
    const int n = static_cast<int>(v.size());
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) { return v[a] < v[b]; });
    std::vector<double> rank(n);
    for (int i = 0; i < n;) {
        int j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        for (int k = i; k <= j; ++k) rank[order[k]] = (i + j) / 2.0;
        i = j + 1;
    }
    double mr = (n - 1) / 2.0, cov = 0, va = 0, vb = 0;
    for (int i = 0; i < n; ++i) {
        cov += (i - mr) * (rank[i] - mr);
        va += (i - mr) * (i - mr);
        vb += (rank[i] - mr) * (rank[i] - mr);
    }
    return vb > 0 ? cov / std::sqrt(va * vb) : 0.0;
}

Outcome vae_criterion(Pipeline& p) {
    const auto t0 = Clock::now();
    p.state.emplace(train::init_state(p.config, p.manifest.palette));
    train::RunOptions opt;
    opt.out_dir = p.dir / "vae";
    train::pretrain_vae(*p.state, p.manifest, opt);
    const double train_secs = seconds_since(t0);
    p.vae_done = true;

    auto masks = test_masks(p.manifest);
    const double acc = vae::reconstruction_accuracy(*p.state->vae, masks);
    // traversal profile: Hamming distance of each of 8 interpolation steps from the start
    const int pairs = std::min<int>(50, static_cast<int>(masks.size()));
    const auto perm = data::derangement(pairs, 1, 0);
    double rho_sum = 0;
    for (int k = 0; k < pairs; ++k) {
        const auto strip = vae::interpolate(*p.state->vae, masks[k], masks[perm[k]], 8);
        std::vector<double> d;
        for (const auto& m : strip) {
            int diff = 0;
            for (std::size_t i = 0; i < m.labels().size(); ++i) diff += m.labels()[i] != strip[0].labels()[i];
            d.push_back(diff);
        }
        rho_sum += spearman(d);
    }
    const double rho = rho_sum / pairs;
    const double secs = seconds_since(t0);
    return {acc >= 0.95 && rho >= 0.9 && secs <= 900,
            fmt("accuracy %.4f (>= 0.95)", acc) + fmt(", traversal Hamming trend rho %.3f (>= 0.9)", rho) +
                fmt(", train %.0fs", train_secs) + fmt(", total %.0fs (<= 900s)", secs)};
}

eval::EvalReport evaluate(const dmn::DenseMappingNetwork& net, const Pipeline& p, eval::Protocol protocol) {
    eval::EvalOptions opt;
    opt.protocol = protocol;
    opt.seed = 1;
    return eval::eval_run(net, p.manifest, opt, nullptr, &p.state->percept).report;
}

Outcome dmn_criterion(Pipeline& p) {
    if (!p.vae_done) throw std::runtime_error("pipeline state missing");
    const auto t0 = Clock::now();
    train::RunOptions opt;
    opt.out_dir = p.dir / "gan";
    train::pretrain_ga(*p.state, p.manifest, opt);
    const double train_secs = seconds_since(t0);
    p.gan_done = true;
    const auto rec = evaluate(p.state->dmn, p, eval::Protocol::Reconstruction);
    const auto sc = evaluate(p.state->dmn, p, eval::Protocol::StyleCopy);
    const double secs = seconds_since(t0);
    return {rec.mae <= 0.08 && sc.consistency.accuracy >= 0.80 && secs <= 1800,
            fmt("recon MAE %.4f (<= 0.08)", rec.mae) +
                fmt(", style-copy consistency %.4f (>= 0.80)", sc.consistency.accuracy) +
                fmt(", recon consistency %.4f", rec.consistency.accuracy) + fmt(", FID %.3f", sc.fid) +
                fmt(", train %.0fs", train_secs) + fmt(", total %.0fs (<= 1800s)", secs)};
}

/// Mean edited-region localization over test samples: the mouth is dilated
/// by 2 pixels and rendered through a service session.
double localization(const fs::path& ckpt, const data::DatasetManifest& m) {
    serve::SessionStore store(serve::load_model(ckpt), 8);
    const int mouth = 6;
    double sum = 0;
    int count = 0;
    for (int i : m.test) {
        const LabelMask& mask = m.at(i).mask;
        const LabelMask edited = serve::dilate_category(mask, mouth, 2);
        if (edited == mask) continue;
        const auto s = store.create(encode_image_png(m.at(i).image), encode_mask_png(mask, m.palette));
        const ImageTensor after = decode_image_png(store.apply_edit(s.id, encode_mask_png(edited, m.palette)));
        sum += serve::localization_score(decode_image_png(s.render_png), after, mask, edited);
        ++count;
    }
    return count ? sum / count : 0.0;
}

Outcome ebst_criterion(Pipeline& p) {
    if (!p.gan_done) throw std::runtime_error("pipeline state missing");
    const auto t0 = Clock::now();
    const fs::path pre_ckpt = p.dir / "gan" / "gan.ckpt";
    const auto pre = evaluate(p.state->dmn, p, eval::Protocol::StyleCopy);
    const double pre_loc = localization(pre_ckpt, p.manifest);

    train::RunOptions opt;
    opt.out_dir = p.dir / "ebst";
    train::run_ebst(*p.state, p.manifest, opt);
    const auto post = evaluate(p.state->dmn, p, eval::Protocol::StyleCopy);
    const double post_loc = localization(p.dir / "ebst" / "ebst.ckpt", p.manifest);

    const bool paired = pre.targets == post.targets && pre.sources == post.sources;
    const double pc = pre.consistency.accuracy, qc = post.consistency.accuracy;
    const bool pass = paired && qc >= pc - 0.01 && post_loc >= pre_loc && post_loc >= 0.60;
    return {pass, fmt("consistency pre %.4f", pc) + fmt(" post %.4f (>= pre - 0.01)", qc) +
                      fmt(", localization pre %.4f", pre_loc) + fmt(" post %.4f (>= pre, >= 0.60)", post_loc) +
                      ", " + std::to_string(p.state->ebst_step) + " steps, stage-II skipped " +
                      std::to_string(p.state->stage2_skipped) + fmt(", %.0fs", seconds_since(t0))};
}

// ---- determinism and persistence ----

std::vector<double> losses(train::TrainState& s, const data::DatasetManifest& m, const std::string& stage,
                           std::int64_t stop_at) {
    std::vector<double> out;
    train::RunOptions opt;
    opt.stop_at = stop_at;
    opt.on_step = [&](const train::StepLog& l) { out.push_back(l.total); };
    if (stage == "vae")
        train::pretrain_vae(s, m, opt);
    else
        train::pretrain_ga(s, m, opt);
    return out;
}

std::string post_form(httplib::Client& cli, const std::string& image, const std::string& mask) {
    httplib::MultipartFormDataItems form = {{"image", image, "i.png", "image/png"}, {"mask", mask, "m.png", "image/png"}};
    auto r = cli.Post("/sessions", form);
    if (!r || r->status != 201) throw std::runtime_error("session create failed");
    return nlohmann::json::parse(r->body)["id"];
}

Outcome determinism_criterion(const Pipeline& p) {
    std::vector<std::string> notes;
    bool ok = true;

    for (const std::string stage : {"vae", "gan"}) {
        train::TrainState a = train::init_state(p.config, p.manifest.palette);
        train::TrainState b = train::init_state(p.config, p.manifest.palette);
        const auto la = losses(a, p.manifest, stage, 10), lb = losses(b, p.manifest, stage, 10);
        const bool same = la.size() == 10 && lb.size() == 10 &&
                          std::memcmp(la.data(), lb.data(), la.size() * sizeof(double)) == 0;
        ok &= same;
        notes.push_back(stage + " first-10 " + (same ? "bit-identical" : "DIFFER"));
    }

    {
        const fs::path dir = p.dir / "resume";
        fs::create_directories(dir);
        train::TrainState whole = train::init_state(p.config, p.manifest.palette);
        const auto ref = losses(whole, p.manifest, "gan", 8);
        train::TrainState first = train::init_state(p.config, p.manifest.palette);
        losses(first, p.manifest, "gan", 4);
        train::save_checkpoint(first, dir / "mid.ckpt");
        train::TrainState resumed = train::load_checkpoint(dir / "mid.ckpt");
        const auto tail = losses(resumed, p.manifest, "gan", 8);
        double worst = tail.size() == 4 ? 0 : 1e9;
        for (std::size_t k = 0; k < tail.size() && k + 4 < ref.size(); ++k)
            worst = std::max(worst, std::abs(tail[k] - ref[k + 4]));
        ok &= worst <= 1e-6;
        notes.push_back(fmt("resume max |dloss| %.2e (<= 1e-6)", worst));
    }

    {
        const fs::path ckpt = p.gan_done ? p.dir / "ebst" / "ebst.ckpt" : p.dir / "resume" / "mid.ckpt";
        const fs::path dir = p.dir / "parity";
        fs::create_directories(dir);
        auto store = std::make_shared<serve::SessionStore>(serve::load_model(ckpt));
        serve::Server server(store);
        const int port = server.bind_any_port("127.0.0.1");
        std::thread th([&] { server.listen_after_bind(); });
        httplib::Client cli("127.0.0.1", port);
        int checked = 0, equal = 0;
        for (int k = 0; k < 5; ++k) {
            const int t = p.manifest.test[k], s = p.manifest.test[k + 5];
            const std::string img = encode_image_png(p.manifest.at(t).image);
            const std::string tm = encode_mask_png(p.manifest.at(t).mask, p.manifest.palette);
            const std::string sm = encode_mask_png(p.manifest.at(s).mask, p.manifest.palette);
            write_file((dir / "target.png").string(), img);
            write_file((dir / "target_mask.png").string(), tm);
            write_file((dir / "source_mask.png").string(), sm);
            const std::string cmd = std::string("\"") + MASKGAN_CLI + "\" infer --ckpt \"" + ckpt.string() +
                                    "\" --target \"" + (dir / "target.png").string() + "\" --target-mask \"" +
                                    (dir / "target_mask.png").string() + "\" --source-mask \"" +
                                    (dir / "source_mask.png").string() + "\" --out \"" + (dir / "out.png").string() +
                                    "\"";
            if (std::system(cmd.c_str()) != 0) break;
            const std::string id = post_form(cli, img, tm);
            auto r = cli.Post("/sessions/" + id + "/edits", sm, "image/png");
            ++checked;
            equal += r && r->status == 200 && r->body == read_file((dir / "out.png").string());
        }
        server.stop();
        th.join();
        ok &= checked == 5 && equal == 5;
        notes.push_back("CLI/service byte-equal " + std::to_string(equal) + "/5");
    }

    std::string detail;
    for (const auto& n : notes) detail += (detail.empty() ? "" : ", ") + n;
    return {ok, detail};
}

// ---- fusion ablation ----

Outcome ablation_criterion(const Pipeline& p) {
    train::TrainConfig c = p.config;
    c.resolution = 32;
    c.toy_samples = 300;
    c.iters_vae = 100;
    c.iters_gan = 100;
    c.iters_ebst = 20;
    c.eval_every = 10;
    c.eval_samples = 8;
    const auto m = train::load_data(c);
    std::vector<std::string> notes;
    std::vector<Shape> shapes;
    std::vector<std::size_t> ckpt_tensors;
    bool ok = true;
    for (auto mode : {dmn::FusionMode::Sft, dmn::FusionMode::Concat}) {
        c.fusion_mode = mode;
        train::TrainState s = train::init_state(c, m.palette);
        bool finite = true;
        train::RunOptions opt;
        opt.out_dir = p.dir / ("ablation_" + dmn::fusion_mode_name(mode));
        opt.on_step = [&](const train::StepLog& l) { finite &= std::isfinite(l.total); };
        train::pretrain_vae(s, m, opt);
        train::pretrain_ga(s, m, opt);
        train::run_ebst(s, m, opt);
        eval::EvalOptions eo;
        eo.protocol = eval::Protocol::StyleCopy;
        const auto out = eval::eval_run(s.dmn, m, eo, nullptr, &s.percept);
        const auto reloaded = serve::load_model(opt.out_dir / "ebst.ckpt");
        const ImageTensor img = m.at(m.test[0]).image;
        const auto style = serve::compute_style(*reloaded, img, m.at(m.test[0]).mask);
        const ImageTensor rendered = serve::render(*reloaded, style, m.at(m.test[1]).mask);
        shapes.push_back(out.generated.shape());
        shapes.push_back(rendered.values.shape());
        for (const auto& v : style.scale) shapes.push_back(v.shape());
        ok &= finite && s.ebst_step == c.iters_ebst;
        notes.push_back(dmn::fusion_mode_name(mode) + fmt(" style-copy MAE %.4f", out.report.mae) +
                        fmt(" consistency %.4f", out.report.consistency.accuracy) + (finite ? "" : " NON-FINITE"));
    }
    const std::size_t half = shapes.size() / 2;
    const bool same_shapes = shapes.size() % 2 == 0 &&
                             std::equal(shapes.begin(), shapes.begin() + half, shapes.begin() + half);
    ok &= same_shapes;
    return {ok, notes[0] + "; " + notes[1] + (same_shapes ? "; artifact shapes identical" : "; SHAPES DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<std::string> only;
    fs::path artifacts = fs::temp_directory_path() / "maskgan_acceptance";
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            for (std::string t; std::getline(ss, t, ',');) only.insert(t);
        } else if (a == "--artifacts" && i + 1 < argc) {
            artifacts = argv[++i];
        } else {
            std::fprintf(stderr, "usage: acceptance [--only a,b] [--artifacts dir]\n");
            return 2;
        }
    }
    auto selected = [&](const std::string& n) { return only.empty() || only.count(n); };
    if (log::threshold() < log::Level::Warn) log::set_threshold(log::Level::Warn);
    fs::remove_all(artifacts);
    fs::create_directories(artifacts);

    const auto t0 = Clock::now();
    if (selected("formula")) run_criterion("formula", formula_suite);
    if (selected("gradient")) run_criterion("gradient", gradient_suite);
    if (selected("fid")) run_criterion("fid", fid_oracle);

    Pipeline p;
    p.dir = artifacts;
    p.manifest = train::load_data(p.config);
    if (selected("vae") || selected("dmn") || selected("ebst")) run_criterion("vae", [&] { return vae_criterion(p); });
    if (selected("dmn") || selected("ebst")) run_criterion("dmn", [&] { return dmn_criterion(p); });
    if (selected("ebst")) run_criterion("ebst", [&] { return ebst_criterion(p); });
    if (selected("determinism")) run_criterion("determinism", [&] { return determinism_criterion(p); });
    if (selected("ablation")) run_criterion("ablation", [&] { return ablation_criterion(p); });

    std::printf("%s: %zu failed (%.0fs)\n", g_failed.empty() ? "ALL PASS" : "FAILURES", g_failed.size(),
                seconds_since(t0));
    return g_failed.empty() ? 0 : 1;
}
