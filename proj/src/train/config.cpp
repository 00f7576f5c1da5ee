#include <charconv>
#include <fstream>
#include <sstream>

#include "maskgan/train/train.hpp"

namespace maskgan::train {

namespace {

struct Field {
    const char* key;
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end || text.empty())
        throw ArgumentError("config key '" + key + "': cannot parse '" + text + "'");
    return v;
}

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

template <class T>
Field number(const char* key, T TrainConfig::*member) {
    return Field{key,
                 [member](const TrainConfig& c) {
                     if constexpr (std::is_floating_point_v<T>)
                         return format_double(c.*member);
                     else
                         return std::to_string(c.*member);
                 },
                 [key, member](TrainConfig& c, const std::string& v) { c.*member = parse_number<T>(key, v); }};
}

Field text(const char* key, std::string TrainConfig::*member) {
    return Field{key, [member](const TrainConfig& c) { return c.*member; },
                 [member](TrainConfig& c, const std::string& v) { c.*member = v; }};
}

template <class E>
Field choice(const char* key, E TrainConfig::*member, E (*parse)(const std::string&), std::string (*name)(E)) {
    return Field{key, [member, name](const TrainConfig& c) { return name(c.*member); },
                 [member, parse](TrainConfig& c, const std::string& v) { c.*member = parse(v); }};
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        number("seed", &TrainConfig::seed),
        text("data", &TrainConfig::data),
        number("toy_samples", &TrainConfig::toy_samples),
        number("resolution", &TrainConfig::resolution),
        number("width_scale", &TrainConfig::width_scale),
        number("residual_blocks", &TrainConfig::residual_blocks),
        number("n_downsample", &TrainConfig::n_downsample),
        choice("fusion_mode", &TrainConfig::fusion_mode, &dmn::parse_fusion_mode, &dmn::fusion_mode_name),
        number("vae_latent_dim", &TrainConfig::vae_latent_dim),
        number("vae_base_channels", &TrainConfig::vae_base_channels),
        number("disc_base_channels", &TrainConfig::disc_base_channels),
        number("lr_vae", &TrainConfig::lr_vae),
        number("lr_gan", &TrainConfig::lr_gan),
        number("lr_ebst", &TrainConfig::lr_ebst),
        number("disc_lr_scale", &TrainConfig::disc_lr_scale),
        number("beta1", &TrainConfig::beta1),
        number("beta2", &TrainConfig::beta2),
        number("lr_decay_start", &TrainConfig::lr_decay_start),
        number("batch_vae", &TrainConfig::batch_vae),
        number("batch_gan", &TrainConfig::batch_gan),
        number("batch_ebst", &TrainConfig::batch_ebst),
        number("iters_vae", &TrainConfig::iters_vae),
        number("iters_gan", &TrainConfig::iters_gan),
        number("iters_ebst", &TrainConfig::iters_ebst),
        number("lambda_kl", &TrainConfig::lambda_kl),
        choice("kl_convention", &TrainConfig::kl_convention, &vae::parse_kl_convention, &vae::kl_convention_name),
        number("lambda_inter", &TrainConfig::lambda_inter),
        number("lambda_feat", &TrainConfig::lambda_feat),
        number("lambda_percept", &TrainConfig::lambda_percept),
        number("lambda_l1", &TrainConfig::lambda_l1),
        choice("gan_loss", &TrainConfig::gan_loss, &adv::parse_gan_loss, &adv::gan_loss_name),
        text("perceptual_weights_path", &TrainConfig::perceptual_weights_path),
        number("stage_ratio", &TrainConfig::stage_ratio),
        choice("stage2_condition", &TrainConfig::stage2_condition, &parse_stage2_condition, &stage2_condition_name),
        number("eval_every", &TrainConfig::eval_every),
        number("eval_samples", &TrainConfig::eval_samples),
        number("early_stop_window", &TrainConfig::early_stop_window),
        number("early_stop_patience", &TrainConfig::early_stop_patience),
        number("checkpoint_every", &TrainConfig::checkpoint_every),
    };
    return table;
}

const Field& field(const std::string& key) {
    for (const Field& f : fields())
        if (key == f.key) return f;
    throw ArgumentError("unknown config key '" + key + "'");
}

}  // namespace

Stage2Condition parse_stage2_condition(const std::string& name) {
    if (name == "target") return Stage2Condition::Target;
    if (name == "perturbed") return Stage2Condition::Perturbed;
    throw ArgumentError("stage2_condition must be 'target' or 'perturbed', got '" + name + "'");
}

std::string stage2_condition_name(Stage2Condition c) { return c == Stage2Condition::Target ? "target" : "perturbed"; }

void TrainConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, value); }

std::string TrainConfig::get(const std::string& key) const { return field(key).get(*this); }

std::vector<std::string> TrainConfig::keys() {
    std::vector<std::string> out;
    for (const Field& f : fields()) out.emplace_back(f.key);
    return out;
}

std::string TrainConfig::to_string() const {
    std::string out;
    for (const Field& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
    return out;
}

TrainConfig TrainConfig::parse(const std::string& text) {
    TrainConfig c;
    std::istringstream in(text);
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ArgumentError("config line " + std::to_string(number) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        try {
            c.set(key, trim(line.substr(eq + 1)));
        } catch (const std::exception& e) {
            throw ArgumentError("config line " + std::to_string(number) + ": " + e.what());
        }
    }
    c.validate();
    return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

void TrainConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw ArgumentError("config: " + what);
    };
    need(lr_vae > 0 && lr_gan > 0 && lr_ebst > 0 && disc_lr_scale > 0, "learning rates must be > 0");
    need(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "Adam moments must lie in [0, 1)");
    need(lr_decay_start >= 0 && lr_decay_start <= 1, "lr_decay_start must lie in [0, 1]");
    need(batch_vae > 0 && batch_gan > 0 && batch_ebst > 1, "batch sizes must be > 0 (batch_ebst > 1)");
    need(iters_vae >= 0 && iters_gan >= 0 && iters_ebst >= 0, "iteration budgets must be >= 0");
    need(lambda_kl >= 0 && lambda_feat >= 0 && lambda_percept >= 0 && lambda_l1 >= 0, "loss weights must be >= 0");
    need(lambda_inter > 1, "lambda_inter must be > 1");
    need(resolution > 0 && toy_samples > 0, "resolution and toy_samples must be > 0");
    need(width_scale > 0 && residual_blocks > 0 && n_downsample > 0, "network sizes must be > 0");
    need(vae_latent_dim > 0 && vae_base_channels > 0 && disc_base_channels > 0, "network sizes must be > 0");
    need(stage_ratio >= 1, "stage_ratio must be >= 1");
    need(eval_every > 0 && eval_samples > 1, "eval_every must be > 0 and eval_samples > 1");
    need(early_stop_window > 0 && early_stop_patience > 0, "early-stop window and patience must be > 0");
    need(checkpoint_every > 0, "checkpoint_every must be > 0");
}

dmn::DmnConfig TrainConfig::dmn_config(int categories) const {
    dmn::DmnConfig c;
    c.resolution = resolution;
    c.categories = categories;
    c.width_scale = width_scale;
    c.residual_blocks = residual_blocks;
    c.n_downsample = n_downsample;
    c.fusion = fusion_mode;
    return c;
}

vae::VaeConfig TrainConfig::vae_config(int categories) const {
    vae::VaeConfig c;
    c.resolution = resolution;
    c.categories = categories;
    c.latent_dim = vae_latent_dim;
    c.base_channels = vae_base_channels;
    return c;
}

}  // namespace maskgan::train
