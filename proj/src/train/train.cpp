#include "maskgan/train/train.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "maskgan/core/checkpoint.hpp"
#include "maskgan/core/log.hpp"
#include "maskgan/eval/eval.hpp"

namespace maskgan::train {

namespace o = ops;

namespace {

// stream labels for Rng::derive
constexpr std::uint64_t kVaeInit = 1, kDmnInit = 2, kBlendInit = 3, kDiscInit = 4, kNoise = 5;
constexpr std::uint64_t kVaeData = 0x5641, kGanData = 0x4741, kEbstData = 0x4542;

std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double parse_double(const std::string& s) {
    double v = 0;
    std::from_chars(s.data(), s.data() + s.size(), v);
    return v;
}

std::string cursor_text(const data::BatchCursor& c) { return std::to_string(c.epoch) + "," + std::to_string(c.batch); }

data::BatchCursor parse_cursor(const std::string& s) {
    const auto comma = s.find(',');
    if (comma == std::string::npos) throw CheckpointError("bad batch cursor '" + s + "'");
    return {std::stoull(s.substr(0, comma)), std::stoull(s.substr(comma + 1))};
}

adv::LossWeights weights_of(const TrainConfig& c) { return {c.lambda_feat, c.lambda_percept}; }

void check_finite(double v, const std::string& what, std::int64_t step) {
    if (!std::isfinite(v)) throw TrainError("non-finite " + what + " at step " + std::to_string(step));
}

void check_data(const TrainState& state, const data::DatasetManifest& manifest) {
    if (manifest.train.empty()) throw TrainError("training split is empty");
    if (manifest.resolution != state.config.resolution)
        throw TrainError("dataset resolution " + std::to_string(manifest.resolution) + " differs from config " +
                         std::to_string(state.config.resolution));
    if (manifest.palette.count() != state.palette.count())
        throw PaletteMismatch("dataset palette has " + std::to_string(manifest.palette.count()) +
                              " categories, model " + std::to_string(state.palette.count()));
}

int fit_batch(int requested, const std::vector<int>& split) {
    return std::min<int>(requested, static_cast<int>(split.size()));
}

/// Metrics file, periodic checkpoints and the non-finite diagnostic path.
class Recorder {
public:
    Recorder(const RunOptions& options) : options_(options) {
        if (options.out_dir.empty()) return;
        std::filesystem::create_directories(options.out_dir);
        const auto path = options.out_dir / "metrics.csv";
        const bool fresh = !std::filesystem::exists(path);
        metrics_.open(path, std::ios::app);
        if (!metrics_) throw TrainError("cannot open " + path.string());
        if (fresh) metrics_ << metrics_header() << "\n";
    }

    void step(const StepLog& log) {
        if (metrics_.is_open()) metrics_ << metrics_line(log) << "\n" << std::flush;
        if (options_.on_step) options_.on_step(log);
    }

    void periodic(const TrainState& state, std::int64_t step) {
        if (!options_.out_dir.empty() && step % state.config.checkpoint_every == 0)
            save_checkpoint(state, options_.out_dir / "latest.ckpt");
    }

    bool should_stop(const TrainState& state, std::int64_t step) {
        if (options_.stop_at < 0 || step < options_.stop_at) return false;
        if (!options_.out_dir.empty()) save_checkpoint(state, options_.out_dir / "latest.ckpt");
        return true;
    }

    void finish(const TrainState& state, const std::string& name) {
        if (options_.out_dir.empty()) return;
        save_checkpoint(state, options_.out_dir / (name + ".ckpt"));
        save_checkpoint(state, options_.out_dir / "latest.ckpt");
    }

    [[noreturn]] void abort(const TrainState& state, const std::string& stage, std::int64_t step, const TrainError& e) {
        const auto dir = options_.out_dir.empty() ? std::filesystem::temp_directory_path() : options_.out_dir;
        const auto path = dir / ("diagnostic_" + stage + "_" + std::to_string(step) + ".ckpt");
        try {
            save_checkpoint(state, path);
        } catch (const std::exception& inner) {
            log::error(std::string("could not write diagnostic snapshot: ") + inner.what());
        }
        throw TrainError(std::string(e.what()) + " (" + stage + "); diagnostic snapshot " + path.string());
    }

private:
    const RunOptions& options_;
    std::ofstream metrics_;
};

}  // namespace

std::string metrics_header() { return "step,loss_total,loss_adv,loss_feat,loss_percept,stage"; }

std::string metrics_line(const StepLog& l) {
    std::ostringstream os;
    os.precision(9);
    os << l.step << "," << l.total << "," << l.adv << "," << l.feat << "," << l.percept << "," << l.stage;
    return os.str();
}

data::DatasetManifest load_data(const TrainConfig& config) {
    if (config.data.empty()) return data::make_toy_dataset(config.toy_samples, config.resolution, config.seed);
    return data::load_celebamaskhq(config.data, config.resolution);
}

TrainState init_state(const TrainConfig& config, const CategoryPalette& palette) {
    config.validate();
    TrainState s;
    s.config = config;
    s.palette = palette;
    const int categories = palette.count();
    Rng vae_rng = Rng::derive(config.seed, kVaeInit);
    s.vae = std::make_unique<vae::MaskVae>(config.vae_config(categories), vae_rng);
    Rng dmn_rng = Rng::derive(config.seed, kDmnInit);
    s.dmn = dmn::DenseMappingNetwork(config.dmn_config(categories), dmn_rng);
    Rng blend_rng = Rng::derive(config.seed, kBlendInit);
    s.blender = dmn::AlphaBlender(dmn::BlenderConfig{}, blend_rng);
    Rng disc_rng = Rng::derive(config.seed, kDiscInit);
    s.disc = adv::DiscriminatorSet(adv::DiscConfig{3 + categories, config.disc_base_channels}, disc_rng);
    s.percept = config.perceptual_weights_path.empty() ? adv::PerceptualExtractor::random()
                                                       : adv::PerceptualExtractor::load(config.perceptual_weights_path);
    const nn::AdamOptions base{config.lr_gan, config.beta1, config.beta2, 1e-8};
    s.opt_vae = nn::Adam(nn::AdamOptions{config.lr_vae, config.beta1, config.beta2, 1e-8});
    s.opt_g = nn::Adam(base);
    s.opt_blend = nn::Adam(base);
    s.opt_d = nn::Adam(base);
    s.rng = Rng::derive(config.seed, kNoise);
    return s;
}

void save_checkpoint(const TrainState& s, const std::filesystem::path& path) {
    Checkpoint c;
    c.iteration = static_cast<std::uint64_t>(s.vae_step + s.gan_step + s.ebst_step);
    c.meta["kind"] = "train";
    c.meta["config"] = s.config.to_string();
    c.meta["palette"] = s.palette.to_json();
    c.meta["vae_step"] = std::to_string(s.vae_step);
    c.meta["gan_step"] = std::to_string(s.gan_step);
    c.meta["ebst_step"] = std::to_string(s.ebst_step);
    c.meta["vae_cursor"] = cursor_text(s.vae_cursor);
    c.meta["gan_cursor"] = cursor_text(s.gan_cursor);
    c.meta["ebst_cursor"] = cursor_text(s.ebst_cursor);
    c.meta["rng"] = s.rng.save_state();
    c.meta["opt_vae.steps"] = std::to_string(s.opt_vae.steps());
    c.meta["opt_g.steps"] = std::to_string(s.opt_g.steps());
    c.meta["opt_blend.steps"] = std::to_string(s.opt_blend.steps());
    c.meta["opt_d.steps"] = std::to_string(s.opt_d.steps());
    c.meta["stage2_skipped"] = std::to_string(s.stage2_skipped);
    c.meta["best_average"] = format_double(s.best_average);
    c.meta["stale_snapshots"] = std::to_string(s.stale_snapshots);
    c.meta["stopped_early"] = s.stopped_early ? "1" : "0";
    std::string snaps;
    for (const EvalSnapshot& e : s.snapshots)
        snaps += std::to_string(e.step) + ":" + format_double(e.mae) + ":" + format_double(e.style_consistency) + ";";
    c.meta["snapshots"] = snaps;
    c.put_all(s.vae->params().snapshot(), "vae.");
    c.put_all(s.dmn.params().snapshot(), "dmn.");
    c.put_all(s.blender.params().snapshot(), "blend.");
    c.put_all(s.disc.params().snapshot(), "disc.");
    c.put_all(s.opt_vae.state_tensors(""), "opt_vae.");
    c.put_all(s.opt_g.state_tensors(""), "opt_g.");
    c.put_all(s.opt_blend.state_tensors(""), "opt_blend.");
    c.put_all(s.opt_d.state_tensors(""), "opt_d.");
    c.save(path);
}

TrainState load_checkpoint(const std::filesystem::path& path, const std::optional<TrainConfig>& config) {
    const Checkpoint c = Checkpoint::load(path);
    if (c.meta.count("kind") && c.meta_at("kind") != "train")
        throw CheckpointError(path.string() + " is not a training checkpoint (kind " + c.meta_at("kind") + ")");
    const TrainConfig stored = TrainConfig::parse(c.meta_at("config"));
    TrainConfig use = stored;
    if (config) {
        for (const char* key : {"resolution", "width_scale", "residual_blocks", "n_downsample", "fusion_mode",
                                "vae_latent_dim", "vae_base_channels", "disc_base_channels"})
            if (config->get(key) != stored.get(key))
                throw ArgumentError(std::string("config key '") + key + "' differs from the checkpoint (" +
                                    config->get(key) + " vs " + stored.get(key) + ")");
        use = *config;
    }
    TrainState s = init_state(use, CategoryPalette::from_json(c.meta_at("palette")));
    s.vae->params().restore(c.with_prefix("vae."));
    s.dmn.params().restore(c.with_prefix("dmn."));
    s.blender.params().restore(c.with_prefix("blend."));
    s.disc.params().restore(c.with_prefix("disc."));
    s.opt_vae.load_state_tensors(c.with_prefix("opt_vae."), "", std::stoll(c.meta_at("opt_vae.steps")));
    s.opt_g.load_state_tensors(c.with_prefix("opt_g."), "", std::stoll(c.meta_at("opt_g.steps")));
    s.opt_blend.load_state_tensors(c.with_prefix("opt_blend."), "", std::stoll(c.meta_at("opt_blend.steps")));
    s.opt_d.load_state_tensors(c.with_prefix("opt_d."), "", std::stoll(c.meta_at("opt_d.steps")));
    s.vae_step = std::stoll(c.meta_at("vae_step"));
    s.gan_step = std::stoll(c.meta_at("gan_step"));
    s.ebst_step = std::stoll(c.meta_at("ebst_step"));
    s.vae_cursor = parse_cursor(c.meta_at("vae_cursor"));
    s.gan_cursor = parse_cursor(c.meta_at("gan_cursor"));
    s.ebst_cursor = parse_cursor(c.meta_at("ebst_cursor"));
    s.rng.load_state(c.meta_at("rng"));
    s.stage2_skipped = std::stoll(c.meta_at("stage2_skipped"));
    s.best_average = parse_double(c.meta_at("best_average"));
    s.stale_snapshots = std::stoi(c.meta_at("stale_snapshots"));
    s.stopped_early = c.meta_at("stopped_early") == "1";
    std::istringstream snaps(c.meta_at("snapshots"));
    std::string item;
    while (std::getline(snaps, item, ';')) {
        if (item.empty()) continue;
        const auto a = item.find(':'), b = item.rfind(':');
        s.snapshots.push_back({std::stoll(item.substr(0, a)), parse_double(item.substr(a + 1, b - a - 1)),
                               parse_double(item.substr(b + 1))});
    }
    return s;
}

double scheduled_lr(double base, std::int64_t step, std::int64_t budget, double decay_start) {
    if (budget <= 0) return base;
    const double t = static_cast<double>(step) / static_cast<double>(budget);
    if (t <= decay_start || decay_start >= 1) return base;
    return base * std::max(0.0, (1.0 - t) / (1.0 - decay_start));
}

void pretrain_vae(TrainState& state, const data::DatasetManifest& manifest, const RunOptions& options) {
    check_data(state, manifest);
    const TrainConfig& cfg = state.config;
    Recorder rec(options);
    data::BatchStream stream(manifest, manifest.train, fit_batch(cfg.batch_vae, manifest.train), cfg.seed ^ kVaeData,
                             false);
    stream.seek(state.vae_cursor);
    while (state.vae_step < cfg.iters_vae) {
        if (rec.should_stop(state, state.vae_step)) return;
        state.opt_vae.options().lr = scheduled_lr(cfg.lr_vae, state.vae_step, cfg.iters_vae, cfg.lr_decay_start);
        const data::Batch batch = stream.next();
        vae::VaeLoss loss;
        try {
            loss = vae::vae_total_loss(*state.vae, batch.onehot, batch.masks, cfg.lambda_kl, cfg.kl_convention,
                                       state.rng, true);
            check_finite(loss.total.item(), "VAE loss", state.vae_step);
        } catch (const TrainError& e) {
            rec.abort(state, "vae", state.vae_step, e);
        }
        backward(loss.total);
        nn::ParamSet ps = state.vae->params();
        state.opt_vae.step(ps);
        ++state.vae_step;
        state.vae_cursor = stream.cursor();
        rec.step({state.vae_step, loss.total.item(), 0, 0, 0, 0, 0, "vae"});
        rec.periodic(state, state.vae_step);
    }
    rec.finish(state, "vae");
}

namespace {

struct GanUpdate {
    adv::GeneratorLoss g;
    double l1 = 0;
    double d = 0;
};

/// Generator loss against (target, cond), one update of the given generator
/// sets, then one discriminator update on (target, real_cond) vs
/// (output, cond).
GanUpdate gan_update(TrainState& state, const Var& target, const Var& output, const Var& real_cond, const Var& cond,
                     std::initializer_list<std::pair<nn::Adam*, nn::ParamSet>> generators, std::int64_t step) {
    const TrainConfig& cfg = state.config;
    GanUpdate u;
    adv::MultiScaleOutput real;
    {
        NoGradGuard ng;
        real = state.disc(target, real_cond);
    }
    const adv::MultiScaleOutput fake = state.disc(output, cond);
    u.g = adv::combine_generator_loss(adv::generator_adv_loss(fake, cfg.gan_loss), adv::feature_matching_loss(real, fake),
                                      adv::perceptual_loss(state.percept, target, output), weights_of(cfg));
    if (cfg.lambda_l1 > 0) {
        const Var l1 = o::mean_abs_diff(output, target);
        u.l1 = l1.item();
        u.g.total = o::add(u.g.total, o::scale(l1, static_cast<Real>(cfg.lambda_l1)));
    }
    check_finite(u.g.total.item(), "generator loss", step);
    backward(u.g.total);
    for (auto [opt, set] : generators) opt->step(set);
    nn::ParamSet dp = state.disc.params();
    dp.zero_grad();

    const adv::MultiScaleOutput d_real = state.disc(target, real_cond);
    const adv::MultiScaleOutput d_fake = state.disc(detach(output), cond);
    const Var d_loss = adv::discriminator_loss(d_real, d_fake, cfg.gan_loss);
    u.d = d_loss.item();
    check_finite(u.d, "discriminator loss", step);
    backward(d_loss);
    state.opt_d.step(dp);
    return u;
}

StepLog to_log(const GanUpdate& u, std::int64_t step, const char* stage) {
    return {step, u.g.total.item(), u.g.adv.item(), u.g.feat.item(), u.g.percept.item(), u.l1, u.d, stage};
}

Tensor gather(const Tensor& t, const std::vector<int>& rows) {
    std::vector<Tensor> parts;
    for (int r : rows) parts.push_back(t.slice_batch(r, 1));
    return stack_batch(parts);
}

}  // namespace

StepLog ga_step(TrainState& state, const data::Batch& batch, double lr) {
    state.opt_g.options().lr = lr;
    state.opt_d.options().lr = lr * state.config.disc_lr_scale;
    const Var image = Var::leaf(batch.images);
    const Var onehot = Var::leaf(batch.onehot);
    const Var out = state.dmn.reconstruct(image, onehot);
    const GanUpdate u = gan_update(state, image, out, onehot, onehot, {{&state.opt_g, state.dmn.params()}},
                                   state.gan_step);
    return to_log(u, 0, "ga");
}

void pretrain_ga(TrainState& state, const data::DatasetManifest& manifest, const RunOptions& options) {
    check_data(state, manifest);
    const TrainConfig& cfg = state.config;
    Recorder rec(options);
    data::BatchStream stream(manifest, manifest.train, fit_batch(cfg.batch_gan, manifest.train), cfg.seed ^ kGanData,
                             false);
    stream.seek(state.gan_cursor);
    while (state.gan_step < cfg.iters_gan) {
        if (rec.should_stop(state, state.gan_step)) return;
        const double lr = scheduled_lr(cfg.lr_gan, state.gan_step, cfg.iters_gan, cfg.lr_decay_start);
        const data::Batch batch = stream.next();
        StepLog log;
        try {
            log = ga_step(state, batch, lr);
        } catch (const TrainError& e) {
            rec.abort(state, "ga", state.gan_step, e);
        }
        ++state.gan_step;
        state.gan_cursor = stream.cursor();
        log.step = state.gan_step;
        rec.step(log);
        rec.periodic(state, state.gan_step);
    }
    rec.finish(state, "gan");
}

bool degenerate_mask(const LabelMask& mask, double max_share) {
    std::array<std::size_t, 256> counts{};
    for (std::uint8_t v : mask.labels()) ++counts[v];
    const std::size_t top = *std::max_element(counts.begin(), counts.end());
    return static_cast<double>(top) > max_share * static_cast<double>(mask.pixels());
}

Stage2Forward stage2_forward(TrainState& state, const data::Batch& batch) {
    if (batch.ref_masks.size() != batch.masks.size()) throw TrainError("EBST batches need reference masks");
    const int categories = state.palette.count();
    const vae::Traversal tr = vae::latent_traverse(*state.vae, batch.onehot, batch.ref_onehot, state.config.lambda_inter);
    Stage2Forward f;
    for (int i = 0; i < batch.size(); ++i) {
        if (degenerate_mask(tr.inter[i]) || degenerate_mask(tr.outer[i])) {
            ++f.skipped;
            continue;
        }
        f.kept.push_back(i);
        f.inter.push_back(tr.inter[i]);
        f.outer.push_back(tr.outer[i]);
    }
    if (f.kept.empty()) return f;
    f.style_image = Var::leaf(gather(batch.images, f.kept));
    f.target_onehot = Var::leaf(gather(batch.onehot, f.kept));
    const dmn::StyleParams style = state.dmn.style(f.style_image, f.target_onehot);
    f.inter_image = state.dmn.generate(style, Var::leaf(onehot_batch(f.inter, categories)));
    f.outer_image = state.dmn.generate(style, Var::leaf(onehot_batch(f.outer, categories)));
    const dmn::BlendResult b = dmn::alpha_blend(state.blender, f.inter_image, f.outer_image);
    f.blend = b.blend;
    f.alpha = b.alpha;
    return f;
}

EbstStepResult ebst_step(TrainState& state, const data::Batch& batch) {
    const TrainConfig& cfg = state.config;
    EbstStepResult r;
    for (int k = 0; k < cfg.stage_ratio; ++k) {
        StepLog l = ga_step(state, batch, cfg.lr_ebst);
        l.stage = "ebst1";
        l.step = state.ebst_step + 1;
        r.stage1.push_back(l);
    }
    state.opt_blend.options().lr = cfg.lr_ebst;
    const Stage2Forward f = stage2_forward(state, batch);
    r.skipped = f.skipped;
    state.stage2_skipped += f.skipped;
    if (f.skipped > 0)
        log::info("ebst step " + std::to_string(state.ebst_step + 1) + ": " + std::to_string(f.skipped) +
                  " sample(s) skipped in Stage-II (degenerate traversal mask)");
    if (!f.kept.empty()) {
        const Var cond = cfg.stage2_condition == Stage2Condition::Target
                             ? f.target_onehot
                             : Var::leaf(onehot_batch(f.inter, state.palette.count()));
        const GanUpdate u = gan_update(state, f.style_image, f.blend, f.target_onehot, cond,
                                       {{&state.opt_g, state.dmn.params()}, {&state.opt_blend, state.blender.params()}},
                                       state.ebst_step);
        r.stage2 = to_log(u, state.ebst_step + 1, "ebst2");
    }
    ++state.ebst_step;
    return r;
}

EvalSnapshot eval_snapshot(const TrainState& state, const data::DatasetManifest& manifest) {
    eval::EvalOptions opt;
    opt.max_samples = state.config.eval_samples;
    opt.seed = state.config.seed;
    opt.protocol = eval::Protocol::Reconstruction;
    EvalSnapshot snap;
    snap.step = state.ebst_step;
    snap.mae = eval::eval_run(state.dmn, manifest, opt, nullptr, &state.percept).report.mae;
    if (manifest.has_colors()) {
        opt.protocol = eval::Protocol::StyleCopy;
        snap.style_consistency = eval::eval_run(state.dmn, manifest, opt, nullptr, &state.percept).report.consistency.accuracy;
    }
    return snap;
}

void run_ebst(TrainState& state, const data::DatasetManifest& manifest, const RunOptions& options) {
    check_data(state, manifest);
    const TrainConfig& cfg = state.config;
    Recorder rec(options);
    nn::ParamSet vae_params = state.vae->params();
    vae_params.set_requires_grad(false);
    data::BatchStream stream(manifest, manifest.train, fit_batch(cfg.batch_ebst, manifest.train), cfg.seed ^ kEbstData,
                             true);
    stream.seek(state.ebst_cursor);
    while (state.ebst_step < cfg.iters_ebst && !state.stopped_early) {
        if (rec.should_stop(state, state.ebst_step)) return;
        const data::Batch batch = stream.next();
        EbstStepResult r;
        try {
            r = ebst_step(state, batch);
        } catch (const TrainError& e) {
            rec.abort(state, "ebst", state.ebst_step, e);
        }
        state.ebst_cursor = stream.cursor();
        for (const StepLog& l : r.stage1) rec.step(l);
        if (r.stage2) rec.step(*r.stage2);

        if (state.ebst_step % cfg.eval_every == 0 && !manifest.test.empty()) {
            const EvalSnapshot snap = eval_snapshot(state, manifest);
            state.snapshots.push_back(snap);
            if (options.on_eval) options.on_eval(snap);
            const int w = cfg.early_stop_window;
            if (static_cast<int>(state.snapshots.size()) >= w) {
                double avg = 0;
                for (auto it = state.snapshots.end() - w; it != state.snapshots.end(); ++it) avg += it->mae;
                avg /= w;
                if (static_cast<int>(state.snapshots.size()) == w || avg < state.best_average) {
                    state.best_average = avg;
                    state.stale_snapshots = 0;
                } else if (++state.stale_snapshots >= cfg.early_stop_patience) {
                    state.stopped_early = true;
                    log::info("ebst early stop at step " + std::to_string(state.ebst_step));
                }
            }
        }
        rec.periodic(state, state.ebst_step);
    }
    rec.finish(state, "ebst");
}

}  // namespace maskgan::train
