#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskgan/adv/adversarial.hpp"
#include "maskgan/core/optim.hpp"
#include "maskgan/core/rng.hpp"
#include "maskgan/data/dataset.hpp"
#include "maskgan/dmn/dmn.hpp"
#include "maskgan/vae/maskvae.hpp"

namespace maskgan::train {

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Which mask conditions the discriminators in Stage-II.
enum class Stage2Condition {
    Target,     // M^t
    Perturbed,  // M^inter
};

Stage2Condition parse_stage2_condition(const std::string& name);
std::string stage2_condition_name(Stage2Condition c);

struct TrainConfig {
    std::uint64_t seed = 1;
    // data: a dataset root, or toy data generated from (toy_samples, seed)
    std::string data;
    int toy_samples = 2000;
    int resolution = 64;

    // networks
    double width_scale = 0.125;
    int residual_blocks = 4;
    int n_downsample = 3;
    dmn::FusionMode fusion_mode = dmn::FusionMode::Sft;
    int vae_latent_dim = 64;
    int vae_base_channels = 16;
    int disc_base_channels = 8;

    // optimization
    double lr_vae = 2e-4;
    double lr_gan = 1e-3;
    double lr_ebst = 5e-5;
    double disc_lr_scale = 0.2;  // discriminator rate = scale * generator rate
    double beta1 = 0.5;
    double beta2 = 0.999;
    double lr_decay_start = 0.5;  // fraction of a pretraining budget after which the rate decays linearly to 0
    int batch_vae = 16;
    int batch_gan = 16;
    int batch_ebst = 8;
    int iters_vae = 1500;
    int iters_gan = 4000;
    int iters_ebst = 400;

    // losses
    double lambda_kl = 1e-5;
    vae::KlConvention kl_convention = vae::KlConvention::Paper;
    double lambda_inter = 2.5;
    double lambda_feat = 10.0;
    double lambda_percept = 10.0;
    double lambda_l1 = 100.0;  // optional pixel L1 term added to the generator loss
    adv::GanLoss gan_loss = adv::GanLoss::Lsgan;
    std::string perceptual_weights_path;

    // EBST schedule
    int stage_ratio = 1;  // Stage-I updates per Stage-II update
    Stage2Condition stage2_condition = Stage2Condition::Target;
    int eval_every = 50;
    int eval_samples = 32;
    int early_stop_window = 10;
    int early_stop_patience = 3;

    int checkpoint_every = 500;

    /// Flat "key = value" lines; '#' starts a comment. Unknown keys and
    /// malformed values throw ArgumentError naming the line.
    static TrainConfig parse(const std::string& text);
    static TrainConfig load(const std::filesystem::path& path);
    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    /// Every key, one per line, in a form parse() reads back.
    std::string to_string() const;
    static std::vector<std::string> keys();
    /// Throws ArgumentError on non-positive rates or budgets, lambda_inter <= 1, ...
    void validate() const;

    dmn::DmnConfig dmn_config(int categories) const;
    vae::VaeConfig vae_config(int categories) const;
};

/// Toy data or a dataset directory, per config.
data::DatasetManifest load_data(const TrainConfig& config);

struct StepLog {
    std::int64_t step = 0;
    double total = 0, adv = 0, feat = 0, percept = 0;
    double l1 = 0;  // unweighted pixel L1, logged when lambda_l1 > 0
    double disc = 0;
    std::string stage;  // vae | ga | ebst1 | ebst2
};

/// "step,loss_total,loss_adv,loss_feat,loss_percept,stage"
std::string metrics_header();
std::string metrics_line(const StepLog& log);

struct EvalSnapshot {
    std::int64_t step = 0;
    double mae = 0;               // reconstruction
    double style_consistency = 0;  // style copy, oracle parser
};

struct TrainState {
    TrainConfig config;
    CategoryPalette palette = CategoryPalette::default_palette();
    std::unique_ptr<vae::MaskVae> vae;
    dmn::DenseMappingNetwork dmn;
    dmn::AlphaBlender blender;
    adv::DiscriminatorSet disc;
    adv::PerceptualExtractor percept = adv::PerceptualExtractor::identity();
    nn::Adam opt_vae, opt_g, opt_blend, opt_d;

    std::int64_t vae_step = 0, gan_step = 0, ebst_step = 0;
    data::BatchCursor vae_cursor, gan_cursor, ebst_cursor;
    Rng rng;  // sampling noise (VAE reparameterization)

    std::int64_t stage2_skipped = 0;
    std::vector<EvalSnapshot> snapshots;
    double best_average = 0;
    int stale_snapshots = 0;
    bool stopped_early = false;
};

/// Fresh networks from config.seed.
TrainState init_state(const TrainConfig& config, const CategoryPalette& palette);

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// Restores networks, optimizer moments, counters, cursors and the RNG. When
/// config is given it replaces the stored one (budgets, rates); network
/// shape keys must agree.
TrainState load_checkpoint(const std::filesystem::path& path, const std::optional<TrainConfig>& config = std::nullopt);

struct RunOptions {
    std::filesystem::path out_dir;  // metrics.csv, periodic and final checkpoints; empty = no files
    std::int64_t stop_at = -1;      // return once the stage counter reaches this value
    std::function<void(const StepLog&)> on_step;
    std::function<void(const EvalSnapshot&)> on_eval;
};

/// Learning rate at a step of a budget under the linear-decay schedule.
double scheduled_lr(double base, std::int64_t step, std::int64_t budget, double decay_start);

/// Trains the MaskVAE until vae_step == iters_vae.
void pretrain_vae(TrainState& state, const data::DatasetManifest& manifest, const RunOptions& options = {});

/// One G_A update on (I^t, M^t) followed by one discriminator update.
StepLog ga_step(TrainState& state, const data::Batch& batch, double lr);

/// Trains G_A and the discriminators until gan_step == iters_gan.
void pretrain_ga(TrainState& state, const data::DatasetManifest& manifest, const RunOptions& options = {});

/// Stage-II forward pass on the non-degenerate samples of a batch.
struct Stage2Forward {
    std::vector<int> kept;  // batch positions
    std::vector<LabelMask> inter, outer;
    Var style_image;        // I^t of kept samples
    Var target_onehot;      // M^t of kept samples
    Var inter_image, outer_image, blend, alpha;
    int skipped = 0;
};

/// True when one category covers more than 99% of the pixels.
bool degenerate_mask(const LabelMask& mask, double max_share = 0.99);

Stage2Forward stage2_forward(TrainState& state, const data::Batch& batch);

struct EbstStepResult {
    std::vector<StepLog> stage1;
    std::optional<StepLog> stage2;
    int skipped = 0;
};

/// stage_ratio Stage-I updates, then one Stage-II update of G_A and the
/// blender. Batches must carry reference masks.
EbstStepResult ebst_step(TrainState& state, const data::Batch& batch);

/// Reconstruction MAE and style-copy oracle consistency on the first
/// eval_samples test samples.
EvalSnapshot eval_snapshot(const TrainState& state, const data::DatasetManifest& manifest);

/// Runs ebst_step until ebst_step == iters_ebst or early stop.
void run_ebst(TrainState& state, const data::DatasetManifest& manifest, const RunOptions& options = {});

}  // namespace maskgan::train
