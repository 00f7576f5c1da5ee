#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "maskgan/adv/adversarial.hpp"
#include "maskgan/core/nn.hpp"
#include "maskgan/data/dataset.hpp"
#include "maskgan/dmn/dmn.hpp"

namespace maskgan::eval {

struct EvalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CategoryIou {
    int category = 0;
    double iou = 0;
};

struct ConsistencyReport {
    double accuracy = 0;
    std::vector<CategoryIou> iou;  // categories present in either mask set
    int samples = 0;
    double mean_iou() const;
};

/// Pixel agreement between predicted and expected masks.
ConsistencyReport mask_consistency(std::span<const LabelMask> predicted, std::span<const LabelMask> expected,
                                   int categories);

/// Maps generated images back to label masks. style_samples names, per image,
/// the dataset sample whose appearance the image carries (the oracle parser
/// needs its colour table; learned parsers ignore it).
class Parser {
public:
    virtual ~Parser() = default;
    virtual std::vector<LabelMask> parse(const Tensor& images, std::span<const int> style_samples) const = 0;
    virtual int categories() const = 0;
    virtual std::string name() const = 0;
};

/// Nearest-colour parser over the toy colour tables.
class OracleParser : public Parser {
public:
    explicit OracleParser(const data::DatasetManifest& manifest);
    std::vector<LabelMask> parse(const Tensor& images, std::span<const int> style_samples) const override;
    int categories() const override { return manifest_->palette.count(); }
    std::string name() const override { return "oracle"; }

private:
    const data::DatasetManifest* manifest_;
};

struct ParserConfig {
    int categories = 19;
    int base_channels = 16;
};

/// Small U-Net: three conv stages down to 1/4 resolution and transposed-conv
/// decoding with skip concatenation.
class SegmentationNet {
public:
    SegmentationNet() = default;
    SegmentationNet(const ParserConfig& config, Rng& rng);
    /// (N, categories, H, W) logits.
    Var operator()(const Var& images) const;
    nn::ParamSet params() const;
    const ParserConfig& config() const { return config_; }

private:
    ParserConfig config_;
    nn::Conv2d in0_, in1_, down0_, mid0_, down1_, mid1_;
    nn::ConvTranspose2d up1_, up0_;
    nn::Conv2d dec1_, dec0_, out_;
};

class SegmentationParser : public Parser {
public:
    explicit SegmentationParser(SegmentationNet net) : net_(std::move(net)) {}
    std::vector<LabelMask> parse(const Tensor& images, std::span<const int> style_samples) const override;
    int categories() const override { return net_.config().categories; }
    std::string name() const override { return "segmentation"; }
    const SegmentationNet& net() const { return net_; }

private:
    SegmentationNet net_;
};

struct ParserTrainOptions {
    int iterations = 1500;
    int batch_size = 16;
    double lr = 2e-3;
    std::uint64_t seed = 7;
};

/// Cross-entropy training on the manifest's train split.
SegmentationNet train_parser(const data::DatasetManifest& manifest, const ParserTrainOptions& options,
                             const std::function<void(int, double)>& on_step = {});

void save_parser(const SegmentationNet& net, const std::filesystem::path& path);
SegmentationNet load_parser(const std::filesystem::path& path);

/// parser(generated) against the masks the images were generated from.
ConsistencyReport parse_consistency(const Parser& parser, const Tensor& generated,
                                    std::span<const LabelMask> input_masks, std::span<const int> style_samples,
                                    int batch_size = 32);

/// Per-position category prior of a mask set: expected agreement of two
/// independently drawn masks, sum over pixels and categories of p_c(x)^2
/// divided by the pixel count.
double prior_match_baseline(std::span<const LabelMask> masks, int categories);

struct FidReport {
    int dim = 0;
    int count_a = 0, count_b = 0;
    Eigen::VectorXd mean_a, mean_b;
    Eigen::MatrixXd cov_a, cov_b;
    double fid = 0;
};

/// Frechet distance between Gaussians fitted to the rows of a and b. The
/// trace term is Tr sqrt(S_a^1/2 S_b S_a^1/2) from symmetric
/// eigendecompositions; negative eigenvalues are clamped to zero.
FidReport fid_report(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Globally pooled penultimate perceptual tap per image (rows = images).
Eigen::MatrixXd extract_features(const adv::PerceptualExtractor& extractor, const Tensor& images,
                                 int batch_size = 32);

enum class Protocol { Reconstruction, StyleCopy };
Protocol parse_protocol(const std::string& name);
std::string protocol_name(Protocol protocol);

struct EvalOptions {
    Protocol protocol = Protocol::Reconstruction;
    int max_samples = 0;  // 0 = whole test split
    std::uint64_t seed = 1;
    int batch_size = 16;
};

struct EvalReport {
    std::string protocol;
    int samples = 0;
    std::uint64_t seed = 0;
    double mae = 0;  // mean |output - target image|
    ConsistencyReport consistency;
    std::string parser;
    std::optional<ConsistencyReport> learned_consistency;
    double fid = 0;
    int fid_dim = 0;
    std::vector<int> targets, sources;  // sample indices
};

struct EvalOutputs {
    EvalReport report;
    Tensor generated;  // (N, 3, R, R)
};

/// Runs the protocol over the test split. Style copy pairs target k with the
/// source at a derangement of the test order (source = target for
/// reconstruction). The oracle parser is used when the manifest carries
/// colour tables; a learned parser, when given, is reported alongside (or
/// instead).
EvalOutputs eval_run(const dmn::DenseMappingNetwork& net, const data::DatasetManifest& manifest,
                     const EvalOptions& options, const Parser* learned = nullptr,
                     const adv::PerceptualExtractor* extractor = nullptr);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

}  // namespace maskgan::eval
