#include "maskgan/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "maskgan/core/checkpoint.hpp"
#include "maskgan/core/log.hpp"
#include "maskgan/core/optim.hpp"

namespace maskgan::eval {

namespace o = ops;
using json = nlohmann::json;

double ConsistencyReport::mean_iou() const {
    if (iou.empty()) return 0;
    double s = 0;
    for (const CategoryIou& c : iou) s += c.iou;
    return s / static_cast<double>(iou.size());
}

ConsistencyReport mask_consistency(std::span<const LabelMask> predicted, std::span<const LabelMask> expected,
                                   int categories) {
    if (predicted.size() != expected.size()) throw ShapeError("mask_consistency: mask counts differ");
    if (predicted.empty()) throw EvalError("mask_consistency: no masks");
    std::vector<std::uint64_t> inter(categories, 0), uni(categories, 0);
    std::uint64_t agree = 0, total = 0;
    for (std::size_t n = 0; n < predicted.size(); ++n) {
        const LabelMask& p = predicted[n];
        const LabelMask& e = expected[n];
        if (p.height() != e.height() || p.width() != e.width()) throw ShapeError("mask_consistency: mask sizes differ");
        p.validate(categories);
        e.validate(categories);
        for (std::size_t i = 0; i < p.pixels(); ++i) {
            const int a = p.labels()[i], b = e.labels()[i];
            if (a == b) {
                ++agree;
                ++inter[a];
                ++uni[a];
            } else {
                ++uni[a];
                ++uni[b];
            }
        }
        total += p.pixels();
    }
    ConsistencyReport r;
    r.samples = static_cast<int>(predicted.size());
    r.accuracy = static_cast<double>(agree) / static_cast<double>(total);
    for (int c = 0; c < categories; ++c)
        if (uni[c] > 0) r.iou.push_back({c, static_cast<double>(inter[c]) / static_cast<double>(uni[c])});
    return r;
}

OracleParser::OracleParser(const data::DatasetManifest& manifest) : manifest_(&manifest) {
    if (!manifest.has_colors()) throw EvalError("the oracle parser needs toy colour tables");
}

std::vector<LabelMask> OracleParser::parse(const Tensor& images, std::span<const int> style_samples) const {
    if (static_cast<int>(style_samples.size()) != images.shape().n)
        throw ShapeError("oracle parser: one style sample per image required");
    std::vector<LabelMask> out;
    for (int n = 0; n < images.shape().n; ++n)
        out.push_back(data::parse_by_color(ImageTensor{images.slice_batch(n, 1)}, manifest_->colors.at(style_samples[n])));
    return out;
}

SegmentationNet::SegmentationNet(const ParserConfig& config, Rng& rng) : config_(config) {
    const int b = config.base_channels;
    in0_ = nn::Conv2d(3, b, 3, 1, 1, rng);
    in1_ = nn::Conv2d(b, b, 3, 1, 1, rng);
    down0_ = nn::Conv2d(b, 2 * b, 3, 2, 1, rng);
    mid0_ = nn::Conv2d(2 * b, 2 * b, 3, 1, 1, rng);
    down1_ = nn::Conv2d(2 * b, 4 * b, 3, 2, 1, rng);
    mid1_ = nn::Conv2d(4 * b, 4 * b, 3, 1, 1, rng);
    up1_ = nn::ConvTranspose2d(4 * b, 2 * b, 3, 2, 1, 1, rng);
    dec1_ = nn::Conv2d(4 * b, 2 * b, 3, 1, 1, rng);
    up0_ = nn::ConvTranspose2d(2 * b, b, 3, 2, 1, 1, rng);
    dec0_ = nn::Conv2d(2 * b, b, 3, 1, 1, rng);
    out_ = nn::Conv2d(b, config.categories, 1, 1, 0, rng);
}

Var SegmentationNet::operator()(const Var& images) const {
    if (images.shape().c != 3) throw ShapeError("parser expects 3-channel images, got " + images.shape().str());
    if (images.shape().h % 4 || images.shape().w % 4) throw ShapeError("parser input must be divisible by 4");
    auto block = [](const nn::Conv2d& conv, const Var& x) { return o::relu(o::instance_norm(conv(x), nn::kNormEps)); };
    auto up = [](const nn::ConvTranspose2d& conv, const Var& x) {
        return o::relu(o::instance_norm(conv(x), nn::kNormEps));
    };
    const Var e0 = block(in1_, block(in0_, images));
    const Var e1 = block(mid0_, block(down0_, e0));
    const Var e2 = block(mid1_, block(down1_, e1));
    const Var u1[] = {up(up1_, e2), e1};
    const Var d1 = block(dec1_, o::concat_channels(u1));
    const Var u0[] = {up(up0_, d1), e0};
    const Var d0 = block(dec0_, o::concat_channels(u0));
    return out_(d0);
}

nn::ParamSet SegmentationNet::params() const {
    nn::ParamSet set;
    in0_.collect(set, "in0");
    in1_.collect(set, "in1");
    down0_.collect(set, "down0");
    mid0_.collect(set, "mid0");
    down1_.collect(set, "down1");
    mid1_.collect(set, "mid1");
    up1_.collect(set, "up1");
    dec1_.collect(set, "dec1");
    up0_.collect(set, "up0");
    dec0_.collect(set, "dec0");
    out_.collect(set, "out");
    return set;
}

std::vector<LabelMask> SegmentationParser::parse(const Tensor& images, std::span<const int>) const {
    NoGradGuard ng;
    const Tensor logits = net_(Var::leaf(images)).value();
    std::vector<LabelMask> out;
    for (int n = 0; n < images.shape().n; ++n) out.push_back(argmax_labels(logits, n));
    return out;
}

SegmentationNet train_parser(const data::DatasetManifest& manifest, const ParserTrainOptions& options,
                             const std::function<void(int, double)>& on_step) {
    if (manifest.train.empty()) throw EvalError("train_parser: empty train split");
    Rng rng = Rng::derive(options.seed, 0);
    SegmentationNet net(ParserConfig{manifest.palette.count(), 16}, rng);
    nn::AdamOptions ao;
    ao.lr = options.lr;
    nn::Adam opt(ao);
    data::BatchStream stream(manifest, manifest.train, std::min<int>(options.batch_size, static_cast<int>(manifest.train.size())),
                             options.seed, false);
    for (int it = 0; it < options.iterations; ++it) {
        // linear decay over the second half
        const double f = it < options.iterations / 2 ? 1.0 : 2.0 * (options.iterations - it) / options.iterations;
        opt.options().lr = options.lr * f;
        const data::Batch b = stream.next();
        std::vector<int> labels;
        for (const LabelMask& m : b.masks) {
            const auto l = m.as_ints();
            labels.insert(labels.end(), l.begin(), l.end());
        }
        const Var loss = o::softmax_cross_entropy(net(Var::leaf(b.images)), labels);
        if (!std::isfinite(loss.item())) throw EvalError("train_parser: non-finite loss at step " + std::to_string(it));
        backward(loss);
        nn::ParamSet ps = net.params();
        opt.step(ps);
        if (on_step) on_step(it, loss.item());
    }
    return net;
}

void save_parser(const SegmentationNet& net, const std::filesystem::path& path) {
    Checkpoint ckpt;
    ckpt.meta["kind"] = "parser";
    ckpt.meta["parser.categories"] = std::to_string(net.config().categories);
    ckpt.meta["parser.base_channels"] = std::to_string(net.config().base_channels);
    ckpt.put_all(net.params().snapshot(), "parser.");
    ckpt.save(path);
}

SegmentationNet load_parser(const std::filesystem::path& path) {
    const Checkpoint ckpt = Checkpoint::load(path);
    ParserConfig config;
    config.categories = std::stoi(ckpt.meta_at("parser.categories"));
    config.base_channels = std::stoi(ckpt.meta_at("parser.base_channels"));
    Rng rng(0);
    SegmentationNet net(config, rng);
    net.params().restore(ckpt.with_prefix("parser."));
    return net;
}

ConsistencyReport parse_consistency(const Parser& parser, const Tensor& generated,
                                    std::span<const LabelMask> input_masks, std::span<const int> style_samples,
                                    int batch_size) {
    const int n = generated.shape().n;
    if (static_cast<int>(input_masks.size()) != n) throw ShapeError("parse_consistency: one mask per image required");
    if (n == 0) throw EvalError("parse_consistency: no images");
    int max_label = 0;
    for (const LabelMask& m : input_masks)
        for (std::uint8_t v : m.labels()) max_label = std::max<int>(max_label, v);
    if (max_label >= parser.categories())
        throw PaletteMismatch("parser knows " + std::to_string(parser.categories()) + " categories but masks use label " +
                              std::to_string(max_label));
    std::vector<LabelMask> predicted;
    for (int begin = 0; begin < n; begin += batch_size) {
        const int count = std::min(batch_size, n - begin);
        const auto part = parser.parse(generated.slice_batch(begin, count), style_samples.subspan(begin, count));
        predicted.insert(predicted.end(), part.begin(), part.end());
    }
    return mask_consistency(predicted, input_masks, parser.categories());
}

double prior_match_baseline(std::span<const LabelMask> masks, int categories) {
    if (masks.empty()) throw EvalError("prior_match_baseline: no masks");
    const std::size_t pixels = masks.front().pixels();
    std::vector<double> counts(pixels * categories, 0.0);
    for (const LabelMask& m : masks) {
        if (m.pixels() != pixels) throw ShapeError("prior_match_baseline: mask sizes differ");
        for (std::size_t i = 0; i < pixels; ++i) counts[i * categories + m.labels()[i]] += 1;
    }
    const double n = static_cast<double>(masks.size());
    double s = 0;
    for (double c : counts) s += (c / n) * (c / n);
    return s / static_cast<double>(pixels);
}

FidReport fid_report(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.cols() != b.cols()) throw ShapeError("fid: feature dimensions differ");
    if (a.rows() < 2 || b.rows() < 2) throw EvalError("fid: each set needs at least two rows");
    if (!a.allFinite() || !b.allFinite()) throw EvalError("fid: non-finite features");
    FidReport r;
    r.dim = static_cast<int>(a.cols());
    r.count_a = static_cast<int>(a.rows());
    r.count_b = static_cast<int>(b.rows());
    r.mean_a = a.colwise().mean().transpose();
    r.mean_b = b.colwise().mean().transpose();
    const Eigen::MatrixXd ca = a.rowwise() - r.mean_a.transpose();
    const Eigen::MatrixXd cb = b.rowwise() - r.mean_b.transpose();
    r.cov_a = (ca.transpose() * ca) / static_cast<double>(a.rows() - 1);
    r.cov_b = (cb.transpose() * cb) / static_cast<double>(b.rows() - 1);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(r.cov_a);
    Eigen::VectorXd la = ea.eigenvalues();
    for (Eigen::Index i = 0; i < la.size(); ++i) la[i] = std::sqrt(std::max(0.0, la[i]));
    const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
    const Eigen::MatrixXd m = sqrt_a * r.cov_b * sqrt_a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    double trace_sqrt = 0;
    for (Eigen::Index i = 0; i < em.eigenvalues().size(); ++i) {
        const double v = em.eigenvalues()[i];
        if (v < -1e-8) log::warn("fid: eigenvalue " + std::to_string(v) + " of the covariance product clamped to zero");
        trace_sqrt += std::sqrt(std::max(0.0, v));
    }
    r.fid = (r.mean_a - r.mean_b).squaredNorm() + r.cov_a.trace() + r.cov_b.trace() - 2.0 * trace_sqrt;
    return r;
}

double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return fid_report(a, b).fid; }

Eigen::MatrixXd extract_features(const adv::PerceptualExtractor& extractor, const Tensor& images, int batch_size) {
    NoGradGuard ng;
    const int n = images.shape().n;
    Eigen::MatrixXd out;
    for (int begin = 0; begin < n; begin += batch_size) {
        const int count = std::min(batch_size, n - begin);
        const auto taps = extractor.taps(Var::leaf(images.slice_batch(begin, count)));
        const Var& tap = taps.size() >= 2 ? taps[taps.size() - 2] : taps.back();
        const Tensor pooled = o::global_avg_pool(tap).value();
        const int d = pooled.shape().c;
        if (out.size() == 0) out.resize(n, d);
        for (int i = 0; i < count; ++i)
            for (int c = 0; c < d; ++c) out(begin + i, c) = pooled.at(i, c, 0, 0);
    }
    return out;
}

Protocol parse_protocol(const std::string& name) {
    if (name == "reconstruction") return Protocol::Reconstruction;
    if (name == "style_copy") return Protocol::StyleCopy;
    throw ArgumentError("protocol must be 'reconstruction' or 'style_copy', got '" + name + "'");
}

std::string protocol_name(Protocol protocol) {
    return protocol == Protocol::Reconstruction ? "reconstruction" : "style_copy";
}

EvalOutputs eval_run(const dmn::DenseMappingNetwork& net, const data::DatasetManifest& manifest,
                     const EvalOptions& options, const Parser* learned, const adv::PerceptualExtractor* extractor) {
    std::vector<int> targets = manifest.test;
    if (targets.empty()) throw EvalError("eval_run: empty test split");
    if (options.max_samples > 0 && static_cast<int>(targets.size()) > options.max_samples)
        targets.resize(options.max_samples);
    const int n = static_cast<int>(targets.size());
    std::vector<int> sources = targets;
    if (options.protocol == Protocol::StyleCopy) {
        if (n < 2) throw EvalError("eval_run: style copy needs at least two test samples");
        const auto perm = data::derangement(n, options.seed, 0);
        for (int k = 0; k < n; ++k) sources[k] = targets[perm[k]];
    }

    EvalOutputs out;
    std::vector<Tensor> parts;
    std::vector<LabelMask> src_masks;
    double abs_sum = 0;
    {
        NoGradGuard ng;
        for (int begin = 0; begin < n; begin += options.batch_size) {
            const int count = std::min(options.batch_size, n - begin);
            const std::vector<int> t(targets.begin() + begin, targets.begin() + begin + count);
            const std::vector<int> s(sources.begin() + begin, sources.begin() + begin + count);
            const data::Batch tb = data::make_batch(manifest, t);
            const data::Batch sb = data::make_batch(manifest, s);
            const dmn::StyleParams style = net.style(Var::leaf(tb.images), Var::leaf(tb.onehot));
            const Var g = net.generate(style, Var::leaf(sb.onehot));
            abs_sum += o::mean_abs_diff(g, Var::leaf(tb.images)).item() * static_cast<double>(g.value().size());
            parts.push_back(g.value());
            src_masks.insert(src_masks.end(), sb.masks.begin(), sb.masks.end());
        }
    }
    Tensor generated = parts.size() == 1 ? parts.front() : Tensor();
    if (parts.size() > 1) {
        std::vector<Tensor> singles;
        for (const Tensor& p : parts)
            for (int i = 0; i < p.shape().n; ++i) singles.push_back(p.slice_batch(i, 1));
        generated = stack_batch(singles);
    }

    EvalReport& r = out.report;
    r.protocol = protocol_name(options.protocol);
    r.samples = n;
    r.seed = options.seed;
    r.targets = targets;
    r.sources = sources;
    r.mae = abs_sum / static_cast<double>(generated.size());
    if (manifest.has_colors()) {
        const OracleParser oracle(manifest);
        r.consistency = parse_consistency(oracle, generated, src_masks, targets);
        r.parser = oracle.name();
        if (learned) r.learned_consistency = parse_consistency(*learned, generated, src_masks, targets);
    } else if (learned) {
        r.consistency = parse_consistency(*learned, generated, src_masks, targets);
        r.parser = learned->name();
    } else {
        r.parser = "none";
    }

    const adv::PerceptualExtractor fallback = adv::PerceptualExtractor::random();
    const adv::PerceptualExtractor& ex = extractor ? *extractor : fallback;
    std::vector<Tensor> reals;
    for (int t : targets) reals.push_back(manifest.at(t).image.values);
    if (n >= 2) {
        const FidReport f = fid_report(extract_features(ex, generated), extract_features(ex, stack_batch(reals)));
        r.fid = f.fid;
        r.fid_dim = f.dim;
    }
    out.generated = std::move(generated);
    return out;
}

namespace {

json consistency_json(const ConsistencyReport& c) {
    json iou = json::array();
    for (const CategoryIou& e : c.iou) iou.push_back({{"category", e.category}, {"iou", e.iou}});
    return {{"accuracy", c.accuracy}, {"mean_iou", c.mean_iou()}, {"samples", c.samples}, {"iou", iou}};
}

ConsistencyReport consistency_from(const json& j) {
    ConsistencyReport c;
    c.accuracy = j.at("accuracy").get<double>();
    c.samples = j.at("samples").get<int>();
    for (const json& e : j.at("iou")) c.iou.push_back({e.at("category").get<int>(), e.at("iou").get<double>()});
    if (c.accuracy < 0 || c.accuracy > 1) throw EvalError("report: accuracy outside [0, 1]");
    for (const CategoryIou& e : c.iou)
        if (e.iou < 0 || e.iou > 1) throw EvalError("report: IoU outside [0, 1]");
    return c;
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
    json j = {{"protocol", r.protocol},
              {"samples", r.samples},
              {"seed", r.seed},
              {"mae", r.mae},
              {"parser", r.parser},
              {"consistency", consistency_json(r.consistency)},
              {"fid", {{"value", r.fid}, {"dim", r.fid_dim}}},
              {"targets", r.targets},
              {"sources", r.sources}};
    if (r.learned_consistency) j["learned_consistency"] = consistency_json(*r.learned_consistency);
    return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
    EvalReport r;
    try {
        const json j = json::parse(text);
        r.protocol = j.at("protocol").get<std::string>();
        parse_protocol(r.protocol);
        r.samples = j.at("samples").get<int>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.mae = j.at("mae").get<double>();
        r.parser = j.at("parser").get<std::string>();
        r.consistency = consistency_from(j.at("consistency"));
        r.fid = j.at("fid").at("value").get<double>();
        r.fid_dim = j.at("fid").at("dim").get<int>();
        r.targets = j.at("targets").get<std::vector<int>>();
        r.sources = j.at("sources").get<std::vector<int>>();
        if (j.contains("learned_consistency")) r.learned_consistency = consistency_from(j.at("learned_consistency"));
    } catch (const json::exception& e) {
        throw EvalError(std::string("report: ") + e.what());
    } catch (const ArgumentError& e) {
        throw EvalError(std::string("report: ") + e.what());
    }
    if (static_cast<int>(r.targets.size()) != r.samples || r.sources.size() != r.targets.size())
        throw EvalError("report: pairing lists do not match the sample count");
    return r;
}

}  // namespace maskgan::eval
