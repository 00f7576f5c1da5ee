#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "maskgan/core/checkpoint.hpp"
#include "maskgan/core/log.hpp"
#include "maskgan/eval/eval.hpp"
#include "maskgan/serve/serve.hpp"
#include "maskgan/train/train.hpp"

using namespace maskgan;
namespace fs = std::filesystem;

namespace {

// Exit codes
constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;
constexpr int kBadInput = 3;     // undecodable or invalid image / mask / dataset
constexpr int kCheckpoint = 4;   // unreadable or incompatible checkpoint
constexpr int kTraining = 5;     // non-finite loss, diagnostic snapshot written

struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string input_file(const std::string& path) {
    if (!fs::is_regular_file(path)) throw InputError("no such file: " + path);
    return read_file(path);
}

struct TrainArgs {
    std::string config;
    std::string resume;
    std::string out = "run";
    std::vector<std::string> set;
    int log_every = 50;
};

train::TrainConfig resolve_config(const TrainArgs& a, const std::optional<train::TrainConfig>& stored) {
    train::TrainConfig c = !a.config.empty() ? train::TrainConfig::load(a.config) : stored.value_or(train::TrainConfig{});
    for (const auto& kv : a.set) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ArgumentError("--set expects key=value, got " + kv);
        c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    c.validate();
    return c;
}

void add_train_command(CLI::App& app, const std::string& name, const std::string& help, TrainArgs& a) {
    auto* cmd = app.add_subcommand(name, help);
    cmd->add_option("--config", a.config, "config file (key = value lines)");
    cmd->add_option("--resume", a.resume, "checkpoint to continue from");
    cmd->add_option("--out", a.out, "output directory")->capture_default_str();
    cmd->add_option("--set", a.set, "override a config key, key=value");
    cmd->add_option("--log-every", a.log_every, "steps between log lines")->capture_default_str();
}

int run_train(const std::string& stage, const TrainArgs& a) {
    train::TrainState state = [&] {
        if (!a.resume.empty()) {
            const train::TrainState stored = train::load_checkpoint(a.resume);
            return train::load_checkpoint(a.resume, resolve_config(a, stored.config));
        }
        if (stage == "ebst") throw ArgumentError("train-ebst needs --resume with pretrained VAE and generator");
        const auto config = resolve_config(a, std::nullopt);
        return train::init_state(config, train::load_data(config).palette);
    }();
    const data::DatasetManifest manifest = train::load_data(state.config);
    if (!(manifest.palette == state.palette)) throw PaletteMismatch("dataset palette differs from the checkpoint's");
    fs::create_directories(a.out);

    train::RunOptions opt;
    opt.out_dir = a.out;
    opt.on_step = [&](const train::StepLog& s) {
        if (a.log_every > 0 && s.step % a.log_every == 0)
            log::info(stage + " step " + std::to_string(s.step) + " loss " + std::to_string(s.total));
    };
    opt.on_eval = [](const train::EvalSnapshot& e) {
        log::info("eval step " + std::to_string(e.step) + " mae " + std::to_string(e.mae) + " consistency " +
                  std::to_string(e.style_consistency));
    };
    if (stage == "vae") {
        train::pretrain_vae(state, manifest, opt);
        std::vector<LabelMask> masks;
        for (int i : manifest.test) masks.push_back(manifest.at(i).mask);
        log::info("vae test accuracy " + std::to_string(vae::reconstruction_accuracy(*state.vae, masks)));
    } else if (stage == "gan") {
        train::pretrain_ga(state, manifest, opt);
    } else {
        train::run_ebst(state, manifest, opt);
        log::info("stage-II skipped samples " + std::to_string(state.stage2_skipped));
    }
    std::cout << (fs::path(a.out) / (stage + ".ckpt")).string() << "\n";
    return kOk;
}

int run(int argc, char** argv) {
    CLI::App app{"MaskGAN desk-scale toolkit"};
    app.require_subcommand(1);

    int toy_n = 2000, toy_res = 64;
    std::uint64_t toy_seed = 1;
    std::string toy_out;
    auto* toy = app.add_subcommand("make-toy-data", "write a synthetic face dataset");
    toy->add_option("--n", toy_n)->capture_default_str();
    toy->add_option("--resolution", toy_res)->capture_default_str();
    toy->add_option("--seed", toy_seed)->capture_default_str();
    toy->add_option("--out", toy_out)->required();

    TrainArgs vae_args, gan_args, ebst_args;
    add_train_command(app, "train-vae", "pretrain the MaskVAE", vae_args);
    add_train_command(app, "train-gan", "pretrain the dense mapping network", gan_args);
    add_train_command(app, "train-ebst", "editing behavior simulated training", ebst_args);

    std::string tr_ckpt, tr_target, tr_ref, tr_out;
    int tr_steps = 8;
    auto* trav = app.add_subcommand("traverse", "mask morph strip between two masks");
    trav->add_option("--ckpt", tr_ckpt)->required();
    trav->add_option("--target", tr_target)->required();
    trav->add_option("--ref", tr_ref)->required();
    trav->add_option("--steps", tr_steps)->capture_default_str();
    trav->add_option("--out", tr_out)->required();

    std::string ev_ckpt, ev_data, ev_protocol = "style_copy", ev_out, ev_parser;
    int ev_max = 0;
    std::uint64_t ev_seed = 1;
    auto* ev = app.add_subcommand("eval", "evaluate a generator checkpoint");
    ev->add_option("--ckpt", ev_ckpt)->required();
    ev->add_option("--data", ev_data, "dataset directory (default: the checkpoint's data config)");
    ev->add_option("--protocol", ev_protocol)->check(CLI::IsMember({"reconstruction", "style_copy"}))->capture_default_str();
    ev->add_option("--out", ev_out)->required();
    ev->add_option("--parser", ev_parser, "learned parser checkpoint");
    ev->add_option("--max-samples", ev_max, "0 = whole test split")->capture_default_str();
    ev->add_option("--seed", ev_seed)->capture_default_str();

    std::string sv_ckpt, sv_host = "127.0.0.1", sv_dir, sv_parser;
    int sv_port = 8080;
    std::size_t sv_capacity = 64;
    auto* sv = app.add_subcommand("serve", "HTTP editing service");
    sv->add_option("--ckpt", sv_ckpt, "generator checkpoint (or MASKGAN_CKPT)");
    sv->add_option("--host", sv_host)->capture_default_str();
    sv->add_option("--port", sv_port)->capture_default_str();
    sv->add_option("--session-dir", sv_dir);
    sv->add_option("--capacity", sv_capacity, "resident sessions")->capture_default_str();
    sv->add_option("--parser", sv_parser, "parser checkpoint for image-only uploads");

    std::string in_ckpt, in_target, in_tmask, in_smask, in_out;
    auto* inf = app.add_subcommand("infer", "render a target's style under a source mask");
    inf->add_option("--ckpt", in_ckpt)->required();
    inf->add_option("--target", in_target)->required();
    inf->add_option("--target-mask", in_tmask)->required();
    inf->add_option("--source-mask", in_smask)->required();
    inf->add_option("--out", in_out)->required();

    std::string tp_data, tp_out;
    int tp_res = 64, tp_toy = 2000;
    eval::ParserTrainOptions tp;
    auto* tpc = app.add_subcommand("train-parser", "train the learned mask parser");
    tpc->add_option("--data", tp_data, "dataset directory (default: toy data)");
    tpc->add_option("--toy-samples", tp_toy)->capture_default_str();
    tpc->add_option("--resolution", tp_res)->capture_default_str();
    tpc->add_option("--iterations", tp.iterations)->capture_default_str();
    tpc->add_option("--seed", tp.seed)->capture_default_str();
    tpc->add_option("--out", tp_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    }

    if (*toy) {
        data::write_dataset(data::make_toy_dataset(toy_n, toy_res, toy_seed), toy_out);
        return kOk;
    }
    if (app.got_subcommand("train-vae")) return run_train("vae", vae_args);
    if (app.got_subcommand("train-gan")) return run_train("gan", gan_args);
    if (app.got_subcommand("train-ebst")) return run_train("ebst", ebst_args);

    if (*trav) {
        train::TrainState s = train::load_checkpoint(tr_ckpt);
        const LabelMask a = decode_mask_png(input_file(tr_target), s.palette);
        const LabelMask b = decode_mask_png(input_file(tr_ref), s.palette);
        const int r = s.config.resolution;
        const auto strip = vae::interpolate(*s.vae, resize_mask(a, r, r), resize_mask(b, r, r), tr_steps);
        write_file(tr_out, encode_mask_preview_png(strip, s.palette));
        return kOk;
    }
    if (*ev) {
        const train::TrainState s = train::load_checkpoint(ev_ckpt);
        const data::DatasetManifest manifest = ev_data.empty()
                                                   ? train::load_data(s.config)
                                                   : data::load_celebamaskhq(ev_data, s.config.resolution);
        eval::EvalOptions opt;
        opt.protocol = eval::parse_protocol(ev_protocol);
        opt.max_samples = ev_max;
        opt.seed = ev_seed;
        std::optional<eval::SegmentationParser> learned;
        if (!ev_parser.empty()) learned.emplace(eval::load_parser(ev_parser));
        const auto out = eval::eval_run(s.dmn, manifest, opt, learned ? &*learned : nullptr, &s.percept);
        write_file(ev_out, eval::report_to_json(out.report));
        std::printf("mae %.4f consistency %.4f fid %.4f\n", out.report.mae, out.report.consistency.accuracy,
                    out.report.fid);
        return kOk;
    }
    if (*sv) {
        if (sv_ckpt.empty())
            if (const char* env = std::getenv("MASKGAN_CKPT")) sv_ckpt = env;
        std::shared_ptr<const serve::Model> model;
        if (sv_ckpt.empty())
            log::warn("no checkpoint given; model-backed endpoints answer 503");
        else
            model = serve::load_model(sv_ckpt, sv_parser.empty() ? std::nullopt : std::optional<fs::path>(sv_parser));
        std::optional<fs::path> dir;
        if (!sv_dir.empty()) dir = sv_dir;
        serve::Server server(std::make_shared<serve::SessionStore>(model, sv_capacity, dir));
        log::info("listening on " + sv_host + ":" + std::to_string(sv_port));
        return server.listen(sv_host, sv_port) ? kOk : kFailure;
    }
    if (*inf) {
        const auto model = serve::load_model(in_ckpt);
        write_file(in_out, serve::infer_png(*model, input_file(in_target), input_file(in_tmask), input_file(in_smask)));
        return kOk;
    }
    if (*tpc) {
        const auto manifest = tp_data.empty() ? data::make_toy_dataset(tp_toy, tp_res, 1)
                                              : data::load_celebamaskhq(tp_data, tp_res);
        const auto net = eval::train_parser(manifest, tp, [](int step, double loss) {
            if (step % 100 == 0) log::info("parser step " + std::to_string(step) + " loss " + std::to_string(loss));
        });
        eval::save_parser(net, tp_out);
        return kOk;
    }
    return kUsage;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const serve::ServeError& e) {
        log::error(e.what());
        return e.status == 503 ? kCheckpoint : kBadInput;
    } catch (const ArgumentError& e) {
        log::error(e.what());
        return kUsage;
    } catch (const CheckpointError& e) {
        log::error(e.what());
        return kCheckpoint;
    } catch (const train::TrainError& e) {
        log::error(e.what());
        return kTraining;
    } catch (const InputError& e) {
        log::error(e.what());
        return kBadInput;
    } catch (const CodecError& e) {
        log::error(e.what());
        return kBadInput;
    } catch (const data::DatasetError& e) {
        log::error(e.what());
        return kBadInput;
    } catch (const std::exception& e) {
        log::error(e.what());
        return kFailure;
    }
}
