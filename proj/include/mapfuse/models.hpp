#pragma once

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "mapfuse/checkpoint.hpp"
#include "mapfuse/conv.hpp"
#include "mapfuse/ops.hpp"
#include "mapfuse/optim.hpp"
#include "mapfuse/rng.hpp"

namespace mapfuse {

enum class ModelKind { SegNetOnly, OsmNetOnly, Average, ResidualCorrection, FuseNet };

inline std::string model_kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::SegNetOnly: return "segnet_only";
        case ModelKind::OsmNetOnly: return "osmnet_only";
        case ModelKind::Average: return "average";
        case ModelKind::ResidualCorrection: return "residual_correction";
        case ModelKind::FuseNet: return "fusenet";
    }
    throw UsageError("unknown model kind");
}

inline ModelKind model_kind_from_name(const std::string& s) {
    if (s == "segnet" || s == "segnet_only") return ModelKind::SegNetOnly;
    if (s == "osmnet" || s == "osmnet_only") return ModelKind::OsmNetOnly;
    if (s == "average") return ModelKind::Average;
    if (s == "rescorr" || s == "residual_correction") return ModelKind::ResidualCorrection;
    if (s == "fusenet") return ModelKind::FuseNet;
    throw UsageError("unknown model: " + s);
}

struct ModelOptions {
    std::vector<int> widths = {16, 32, 64};
    int decoder_trunc = 0;
    bool use_batchnorm = true;
    int osmnet_hidden = 32;
    int osmnet_kernel = 5;
    std::vector<int> corrector_widths = {32, 32};
    uint64_t init_seed = 1;
};

// ---------------------------------------------------------------------------
// Model base: a named parameter/buffer registry plus checkpoint plumbing.
// ---------------------------------------------------------------------------
class Model {
  public:
    virtual ~Model() = default;

    // Either input may be undefined when the architecture ignores it.
    virtual Tensor forward(const Tensor& optical, const Tensor& osm, bool train) = 0;
    virtual std::string kind_name() const = 0;
    virtual nlohmann::json architecture() const = 0;

    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    std::vector<NamedBuffer>& buffers() { return buffers_; }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    std::vector<CheckpointEntry> state() const {
        std::vector<CheckpointEntry> entries;
        for (const auto& p : params_)
            entries.push_back({p.name, p.tensor.shape(),
                               {p.tensor.data(), p.tensor.data() + p.tensor.numel()}});
        for (const auto& b : buffers_)
            entries.push_back({b.name, b.tensor.shape(),
                               {b.tensor.data(), b.tensor.data() + b.tensor.numel()}});
        return entries;
    }

    void load_state(const std::vector<CheckpointEntry>& entries) {
        std::unordered_set<std::string> consumed;
        auto fill = [&](const std::string& name, Tensor& t) {
            for (const auto& e : entries) {
                if (e.name != name) continue;
                if (e.shape != t.shape())
                    throw FormatError("checkpoint shape mismatch for " + name);
                std::copy(e.data.begin(), e.data.end(), t.data());
                consumed.insert(name);
                return;
            }
            throw FormatError("checkpoint missing entry: " + name);
        };
        for (auto& p : params_) fill(p.name, p.tensor);
        for (auto& b : buffers_) fill(b.name, b.tensor);
        if (consumed.size() != entries.size())
            throw FormatError("checkpoint has entries not used by this architecture");
    }

  protected:
    Parameter& add_param(const std::string& name, Tensor t) {
        check_unique(name);
        params_.emplace_back(name, std::move(t));
        return params_.back();
    }
    NamedBuffer& add_buffer(const std::string& name, Tensor t) {
        check_unique(name);
        buffers_.push_back({name, std::move(t)});
        return buffers_.back();
    }
    // Re-registers a submodel's tensors under a prefix; entries alias the
    // submodel's storage.
    void absorb(const std::string& prefix, Model& sub) {
        for (auto& p : sub.parameters()) add_param(prefix + p.name, p.tensor);
        for (auto& b : sub.buffers()) add_buffer(prefix + b.name, b.tensor);
    }

  private:
    void check_unique(const std::string& name) {
        if (!names_.insert(name).second)
            throw UsageError("duplicate parameter name in model graph: " + name);
    }

    std::vector<Parameter> params_;
    std::vector<NamedBuffer> buffers_;
    std::unordered_set<std::string> names_;
};

// ---------------------------------------------------------------------------
// Layer helpers
// ---------------------------------------------------------------------------
namespace detail {

struct Conv2dLayer {
    Tensor weight, bias;
    int stride = 1, pad = 0;
    Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
};

inline Conv2dLayer make_conv(auto add_param_fn, const std::string& name, int in, int out, int k,
                             Rng& init_rng) {
    Conv2dLayer layer;
    layer.weight = Tensor::zeros({out, in, k, k});
    layer.bias = Tensor::zeros({out});
    layer.pad = k / 2;
    Parameter& w = add_param_fn(name + ".weight", layer.weight);
    msra_init(w, in * k * k, init_rng.next_u64());
    add_param_fn(name + ".bias", layer.bias);
    return layer;
}

struct BatchNormLayer {
    bool enabled = false;
    Tensor gamma, beta, running_mean, running_var;
    Tensor forward(const Tensor& x, bool train) {
        if (!enabled) return x;
        return batchnorm2d(x, gamma, beta, running_mean, running_var, train);
    }
};

struct ConvBnRelu {
    Conv2dLayer conv;
    BatchNormLayer bn;
    Tensor forward(const Tensor& x, bool train) { return relu(bn.forward(conv.forward(x), train)); }
};

struct EncoderBlock {
    ConvBnRelu c1, c2;
    Tensor forward(const Tensor& x, bool train) { return c2.forward(c1.forward(x, train), train); }
};

using DecoderBlock = EncoderBlock;

}  // namespace detail

// Shared builder for the conv-bn-relu stacks; the callbacks bind names into
// the owning model's registry.
class BlockBuilder {
  public:
    BlockBuilder(std::function<Parameter&(const std::string&, Tensor)> add_param,
                 std::function<NamedBuffer&(const std::string&, Tensor)> add_buffer, bool use_bn,
                 Rng init_rng)
        : add_param_(std::move(add_param)), add_buffer_(std::move(add_buffer)), use_bn_(use_bn),
          rng_(init_rng) {}

    detail::Conv2dLayer conv(const std::string& name, int in, int out, int k) {
        return detail::make_conv(add_param_, name, in, out, k, rng_);
    }

    detail::BatchNormLayer bn(const std::string& name, int channels) {
        detail::BatchNormLayer layer;
        layer.enabled = use_bn_;
        if (!use_bn_) return layer;
        layer.gamma = Tensor::full({channels}, 1.0f);
        layer.beta = Tensor::zeros({channels});
        layer.running_mean = Tensor::zeros({channels});
        layer.running_var = Tensor::full({channels}, 1.0f);
        add_param_(name + ".gamma", layer.gamma);
        add_param_(name + ".beta", layer.beta);
        add_buffer_(name + ".running_mean", layer.running_mean);
        add_buffer_(name + ".running_var", layer.running_var);
        return layer;
    }

    detail::ConvBnRelu conv_bn_relu(const std::string& name, int in, int out, int k = 3) {
        detail::ConvBnRelu unit;
        unit.conv = conv(name + ".conv", in, out, k);
        unit.bn = bn(name + ".bn", out);
        return unit;
    }

    detail::EncoderBlock block(const std::string& name, int in, int out) {
        detail::EncoderBlock b;
        b.c1 = conv_bn_relu(name + ".unit1", in, out);
        b.c2 = conv_bn_relu(name + ".unit2", out, out);
        return b;
    }

  private:
    std::function<Parameter&(const std::string&, Tensor)> add_param_;
    std::function<NamedBuffer&(const std::string&, Tensor)> add_buffer_;
    bool use_bn_;
    Rng rng_;
};

// ---------------------------------------------------------------------------
// MiniSegNet: encoder-decoder with index-passing pooling. decoder_trunc
// removes the last t decoder blocks, leaving output at 1/2^t resolution.
// ---------------------------------------------------------------------------
class MiniSegNet : public Model {
  public:
    MiniSegNet(int in_channels, int num_classes, const ModelOptions& opt)
        : in_channels_(in_channels), num_classes_(num_classes), opt_(opt) {
        build();
    }

    Tensor forward(const Tensor& optical, const Tensor& /*osm*/, bool train) override {
        return forward_optical(optical, train);
    }

    Tensor forward_optical(const Tensor& input, bool train) {
        if (!input.defined() || input.ndim() != 4)
            throw DimensionError("segnet forward expects an NCHW optical tensor");
        if (input.dim(1) != in_channels_)
            throw DimensionError("segnet: expected " + std::to_string(in_channels_) +
                                 " input channels, got " + std::to_string(input.dim(1)));
        const int b = static_cast<int>(opt_.widths.size());
        const int div = 1 << b;
        if (input.dim(2) % div != 0 || input.dim(3) % div != 0)
            throw DimensionError("segnet: spatial dims must be divisible by " + std::to_string(div));

        std::vector<PoolIndices> indices;
        std::vector<std::pair<int, int>> sizes;
        Tensor e = input;
        for (auto& blk : enc_) {
            Tensor a = blk.forward(e, train);
            sizes.emplace_back(a.dim(2), a.dim(3));
            auto pooled = maxpool2x2_with_indices(a);
            indices.push_back(std::move(pooled.indices));
            e = pooled.output;
        }
        Tensor d = decode(e, indices, sizes, train);
        last_features_ = d;
        return classifier_.forward(d);
    }

    Tensor decode(Tensor e, const std::vector<PoolIndices>& indices,
                  const std::vector<std::pair<int, int>>& sizes, bool train) {
        const int b = static_cast<int>(opt_.widths.size());
        for (int i = b - 1; i >= opt_.decoder_trunc; --i) {
            const auto [oh, ow] = sizes[static_cast<size_t>(i)];
            e = unpool_with_indices(e, indices[static_cast<size_t>(i)], oh, ow);
            e = dec_[static_cast<size_t>(b - 1 - i)].forward(e, train);
        }
        return e;
    }

    // Z_opt: activations entering the classifier from the last forward.
    const Tensor& last_features() const { return last_features_; }
    int last_feature_channels() const { return final_width_; }

    std::string kind_name() const override { return model_kind_name(ModelKind::SegNetOnly); }

    nlohmann::json architecture() const override {
        return {{"kind", kind_name()},
                {"optical_channels", in_channels_},
                {"map_channels", 0},
                {"num_classes", num_classes_},
                {"widths", opt_.widths},
                {"decoder_trunc", opt_.decoder_trunc},
                {"use_batchnorm", opt_.use_batchnorm},
                {"osmnet_hidden", opt_.osmnet_hidden},
                {"osmnet_kernel", opt_.osmnet_kernel},
                {"corrector_widths", opt_.corrector_widths}};
    }

  private:
    void build() {
        BlockBuilder bb(
            [this](const std::string& n, Tensor t) -> Parameter& { return add_param(n, std::move(t)); },
            [this](const std::string& n, Tensor t) -> NamedBuffer& { return add_buffer(n, std::move(t)); },
            opt_.use_batchnorm, Rng(opt_.init_seed));
        const auto& w = opt_.widths;
        const int b = static_cast<int>(w.size());
        if (b < 1) throw UsageError("segnet: need at least one encoder block");
        if (opt_.decoder_trunc < 0 || opt_.decoder_trunc >= b + 1)
            throw UsageError("segnet: decoder_trunc out of range");
        int in = in_channels_;
        for (int i = 0; i < b; ++i) {
            enc_.push_back(bb.block("encoder.block" + std::to_string(i), in, w[static_cast<size_t>(i)]));
            in = w[static_cast<size_t>(i)];
        }
        for (int i = b - 1; i >= opt_.decoder_trunc; --i) {
            const int wi = w[static_cast<size_t>(i)];
            const int out = i > 0 ? w[static_cast<size_t>(i - 1)] : w[0];
            detail::DecoderBlock blk;
            const std::string name = "decoder.block" + std::to_string(i);
            blk.c1 = bb.conv_bn_relu(name + ".unit1", wi, wi);
            blk.c2 = bb.conv_bn_relu(name + ".unit2", wi, out);
            dec_.push_back(blk);
        }
        final_width_ = opt_.decoder_trunc > 0 ? w[static_cast<size_t>(opt_.decoder_trunc - 1)] : w[0];
        if (opt_.decoder_trunc == b) final_width_ = w[static_cast<size_t>(b - 1)];
        classifier_ = bb.conv("classifier", final_width_, num_classes_, 3);
    }

    friend class FusionPipeline;

    int in_channels_, num_classes_;
    ModelOptions opt_;
    std::vector<detail::EncoderBlock> enc_;
    std::vector<detail::DecoderBlock> dec_;
    detail::Conv2dLayer classifier_;
    int final_width_ = 0;
    Tensor last_features_;
};

// ---------------------------------------------------------------------------
// OSMNet: two conv layers (conv-relu, conv) projecting rasterized map layers
// into class-score space at full resolution.
// ---------------------------------------------------------------------------
class OsmNet : public Model {
  public:
    OsmNet(int map_channels, int num_classes, const ModelOptions& opt)
        : map_channels_(map_channels), num_classes_(num_classes), opt_(opt) {
        Rng rng(opt.init_seed);
        auto add_p = [this](const std::string& n, Tensor t) -> Parameter& {
            return add_param(n, std::move(t));
        };
        conv1_ = detail::make_conv(add_p, "conv1", map_channels_, opt_.osmnet_hidden,
                                   opt_.osmnet_kernel, rng);
        conv2_ = detail::make_conv(add_p, "conv2", opt_.osmnet_hidden, num_classes_,
                                   opt_.osmnet_kernel, rng);
    }

    Tensor forward(const Tensor& /*optical*/, const Tensor& osm, bool train) override {
        return forward_osm(osm, train);
    }

    Tensor forward_osm(const Tensor& osm, bool /*train*/) {
        if (!osm.defined() || osm.ndim() != 4)
            throw DimensionError("osmnet forward expects an NCHW map tensor");
        if (osm.dim(1) != map_channels_)
            throw DimensionError("osmnet: expected " + std::to_string(map_channels_) +
                                 " map channels, got " + std::to_string(osm.dim(1)));
        Tensor z = relu(conv1_.forward(osm));
        last_features_ = z;
        return conv2_.forward(z);
    }

    const Tensor& last_features() const { return last_features_; }
    int last_feature_channels() const { return opt_.osmnet_hidden; }

    std::string kind_name() const override { return model_kind_name(ModelKind::OsmNetOnly); }

    nlohmann::json architecture() const override {
        return {{"kind", kind_name()},
                {"optical_channels", 0},
                {"map_channels", map_channels_},
                {"num_classes", num_classes_},
                {"widths", opt_.widths},
                {"decoder_trunc", 0},
                {"use_batchnorm", opt_.use_batchnorm},
                {"osmnet_hidden", opt_.osmnet_hidden},
                {"osmnet_kernel", opt_.osmnet_kernel},
                {"corrector_widths", opt_.corrector_widths}};
    }

  private:
    friend class FusionPipeline;

    int map_channels_, num_classes_;
    ModelOptions opt_;
    detail::Conv2dLayer conv1_, conv2_;
    Tensor last_features_;
};

// Elementwise mean of two pre-softmax score maps.
inline Tensor fuse_average(const Tensor& scores_opt, const Tensor& scores_osm) {
    if (scores_opt.shape() != scores_osm.shape())
        throw DimensionError("fuse_average: shape mismatch " + shape_str(scores_opt.shape()) +
                             " vs " + shape_str(scores_osm.shape()));
    return scale(add(scores_opt, scores_osm), 0.5f);
}

// ---------------------------------------------------------------------------
// Joint pipeline around Eq.-style averaging: SegNet and OSMNet trained
// together through the mean of their score maps, optionally refined by a
// three-conv residual corrector fed with both last feature maps.
// ---------------------------------------------------------------------------
class FusionPipeline : public Model {
  public:
    FusionPipeline(bool with_corrector, int optical_channels, int map_channels, int num_classes,
                   const ModelOptions& opt)
        : with_corrector_(with_corrector), optical_channels_(optical_channels),
          map_channels_(map_channels), num_classes_(num_classes), opt_(opt),
          segnet_(optical_channels, num_classes, derive_opt(opt, 1)),
          osmnet_(map_channels, num_classes, derive_opt(opt, 2)) {
        absorb("segnet.", segnet_);
        absorb("osmnet.", osmnet_);
        if (with_corrector_) {
            Rng rng(Rng(opt.init_seed).child(3).next_u64());
            auto add_p = [this](const std::string& n, Tensor t) -> Parameter& {
                return add_param(n, std::move(t));
            };
            int in = segnet_.last_feature_channels() + osmnet_.last_feature_channels();
            const auto& cw = opt_.corrector_widths;
            for (size_t i = 0; i < cw.size(); ++i) {
                corrector_.push_back(detail::make_conv(
                    add_p, "corrector.conv" + std::to_string(i + 1), in, cw[i], 3, rng));
                in = cw[i];
            }
            corrector_.push_back(detail::make_conv(
                add_p, "corrector.conv" + std::to_string(cw.size() + 1), in, num_classes_, 3, rng));
        }
    }

    Tensor forward(const Tensor& optical, const Tensor& osm, bool train) override {
        Tensor s_opt = segnet_.forward_optical(optical, train);
        Tensor s_osm = osmnet_.forward_osm(osm, train);
        if (s_osm.dim(2) != s_opt.dim(2) || s_osm.dim(3) != s_opt.dim(3))
            s_osm = bilinear_resize(s_osm, s_opt.dim(2), s_opt.dim(3));
        Tensor avg = fuse_average(s_opt, s_osm);
        branch_scores_opt_ = s_opt;
        branch_scores_osm_ = s_osm;
        if (!with_corrector_) return avg;

        Tensor z_opt = segnet_.last_features();
        Tensor z_osm = osmnet_.last_features();
        if (z_osm.dim(2) != z_opt.dim(2) || z_osm.dim(3) != z_opt.dim(3))
            z_osm = bilinear_resize(z_osm, z_opt.dim(2), z_opt.dim(3));
        return fuse_residual(avg, z_opt, z_osm);
    }

    // scores_avg + C(concat(Z_opt, Z_osm)); inputs must be spatially aligned.
    Tensor fuse_residual(const Tensor& scores_avg, const Tensor& z_opt, const Tensor& z_osm) {
        Tensor h = concat_channels(z_opt, z_osm);
        for (size_t i = 0; i + 1 < corrector_.size(); ++i) h = relu(corrector_[i].forward(h));
        Tensor correction = corrector_.back().forward(h);
        if (correction.shape() != scores_avg.shape())
            throw DimensionError("fuse_residual: corrector output " + shape_str(correction.shape()) +
                                 " does not match averaged scores " + shape_str(scores_avg.shape()));
        return add(scores_avg, correction);
    }

    const Tensor& branch_scores_opt() const { return branch_scores_opt_; }
    const Tensor& branch_scores_osm() const { return branch_scores_osm_; }
    MiniSegNet& segnet() { return segnet_; }
    OsmNet& osmnet() { return osmnet_; }

    std::string kind_name() const override {
        return model_kind_name(with_corrector_ ? ModelKind::ResidualCorrection : ModelKind::Average);
    }

    nlohmann::json architecture() const override {
        return {{"kind", kind_name()},
                {"optical_channels", optical_channels_},
                {"map_channels", map_channels_},
                {"num_classes", num_classes_},
                {"widths", opt_.widths},
                {"decoder_trunc", opt_.decoder_trunc},
                {"use_batchnorm", opt_.use_batchnorm},
                {"osmnet_hidden", opt_.osmnet_hidden},
                {"osmnet_kernel", opt_.osmnet_kernel},
                {"corrector_widths", opt_.corrector_widths}};
    }

  private:
    static ModelOptions derive_opt(ModelOptions opt, uint64_t stream) {
        opt.init_seed = Rng(opt.init_seed).child(stream).next_u64();
        return opt;
    }

    bool with_corrector_;
    int optical_channels_, map_channels_, num_classes_;
    ModelOptions opt_;
    MiniSegNet segnet_;
    OsmNet osmnet_;
    std::vector<detail::Conv2dLayer> corrector_;
    Tensor branch_scores_opt_, branch_scores_osm_;
};

// ---------------------------------------------------------------------------
// FuseNetMini: dual encoders; after each block's conv stack the ancillary
// activations are summed into the main ones before pooling. The decoder uses
// the main branch's pooling indices.
// ---------------------------------------------------------------------------
class FuseNetMini : public Model {
  public:
    FuseNetMini(int optical_channels, int map_channels, int num_classes, const ModelOptions& opt)
        : optical_channels_(optical_channels), map_channels_(map_channels),
          num_classes_(num_classes), opt_(opt) {
        BlockBuilder bb(
            [this](const std::string& n, Tensor t) -> Parameter& { return add_param(n, std::move(t)); },
            [this](const std::string& n, Tensor t) -> NamedBuffer& { return add_buffer(n, std::move(t)); },
            opt_.use_batchnorm, Rng(opt_.init_seed));
        const auto& w = opt_.widths;
        const int b = static_cast<int>(w.size());
        if (opt_.decoder_trunc < 0 || opt_.decoder_trunc >= b + 1)
            throw UsageError("fusenet: decoder_trunc out of range");
        int in_main = optical_channels_, in_anc = map_channels_;
        for (int i = 0; i < b; ++i) {
            main_enc_.push_back(bb.block("encoder.block" + std::to_string(i), in_main,
                                         w[static_cast<size_t>(i)]));
            anc_enc_.push_back(bb.block("ancillary_encoder.block" + std::to_string(i), in_anc,
                                        w[static_cast<size_t>(i)]));
            in_main = in_anc = w[static_cast<size_t>(i)];
        }
        for (int i = b - 1; i >= opt_.decoder_trunc; --i) {
            const int wi = w[static_cast<size_t>(i)];
            const int out = i > 0 ? w[static_cast<size_t>(i - 1)] : w[0];
            detail::DecoderBlock blk;
            const std::string name = "decoder.block" + std::to_string(i);
            blk.c1 = bb.conv_bn_relu(name + ".unit1", wi, wi);
            blk.c2 = bb.conv_bn_relu(name + ".unit2", wi, out);
            dec_.push_back(blk);
        }
        final_width_ = opt_.decoder_trunc > 0 ? w[static_cast<size_t>(opt_.decoder_trunc - 1)] : w[0];
        if (opt_.decoder_trunc == b) final_width_ = w[static_cast<size_t>(b - 1)];
        classifier_ = bb.conv("classifier", final_width_, num_classes_, 3);
    }

    Tensor forward(const Tensor& optical, const Tensor& osm, bool train) override {
        if (!optical.defined() || !osm.defined())
            throw DimensionError("fusenet forward needs both optical and map tensors");
        if (optical.dim(1) != optical_channels_ || osm.dim(1) != map_channels_)
            throw DimensionError("fusenet: input channel mismatch");
        if (optical.dim(2) != osm.dim(2) || optical.dim(3) != osm.dim(3))
            throw DimensionError("fusenet: optical and map spatial dims must match");
        const int b = static_cast<int>(opt_.widths.size());
        const int div = 1 << b;
        if (optical.dim(2) % div != 0 || optical.dim(3) % div != 0)
            throw DimensionError("fusenet: spatial dims must be divisible by " + std::to_string(div));

        std::vector<PoolIndices> indices;
        std::vector<std::pair<int, int>> sizes;
        Tensor e_opt = optical, e_osm = osm;
        for (int i = 0; i < b; ++i) {
            Tensor a = main_enc_[static_cast<size_t>(i)].forward(e_opt, train);
            Tensor c = anc_enc_[static_cast<size_t>(i)].forward(e_osm, train);
            Tensor summed = add(a, c);
            sizes.emplace_back(summed.dim(2), summed.dim(3));
            auto pooled = maxpool2x2_with_indices(summed);
            indices.push_back(std::move(pooled.indices));
            e_opt = pooled.output;
            e_osm = maxpool2x2_with_indices(c).output;
        }
        Tensor e = e_opt;
        for (int i = b - 1; i >= opt_.decoder_trunc; --i) {
            const auto [oh, ow] = sizes[static_cast<size_t>(i)];
            e = unpool_with_indices(e, indices[static_cast<size_t>(i)], oh, ow);
            e = dec_[static_cast<size_t>(b - 1 - i)].forward(e, train);
        }
        last_features_ = e;
        return classifier_.forward(e);
    }

    const Tensor& last_features() const { return last_features_; }

    std::string kind_name() const override { return model_kind_name(ModelKind::FuseNet); }

    nlohmann::json architecture() const override {
        return {{"kind", kind_name()},
                {"optical_channels", optical_channels_},
                {"map_channels", map_channels_},
                {"num_classes", num_classes_},
                {"widths", opt_.widths},
                {"decoder_trunc", opt_.decoder_trunc},
                {"use_batchnorm", opt_.use_batchnorm},
                {"osmnet_hidden", opt_.osmnet_hidden},
                {"osmnet_kernel", opt_.osmnet_kernel},
                {"corrector_widths", opt_.corrector_widths}};
    }

  private:
    int optical_channels_, map_channels_, num_classes_;
    ModelOptions opt_;
    std::vector<detail::EncoderBlock> main_enc_, anc_enc_;
    std::vector<detail::DecoderBlock> dec_;
    detail::Conv2dLayer classifier_;
    int final_width_ = 0;
    Tensor last_features_;
};

// ---------------------------------------------------------------------------
// Factory and on-disk model directories
// ---------------------------------------------------------------------------
inline std::unique_ptr<Model> make_model(ModelKind kind, int optical_channels, int map_channels,
                                         int num_classes, const ModelOptions& opt) {
    switch (kind) {
        case ModelKind::SegNetOnly:
            return std::make_unique<MiniSegNet>(optical_channels, num_classes, opt);
        case ModelKind::OsmNetOnly:
            return std::make_unique<OsmNet>(map_channels, num_classes, opt);
        case ModelKind::Average:
            return std::make_unique<FusionPipeline>(false, optical_channels, map_channels,
                                                    num_classes, opt);
        case ModelKind::ResidualCorrection:
            return std::make_unique<FusionPipeline>(true, optical_channels, map_channels,
                                                    num_classes, opt);
        case ModelKind::FuseNet:
            return std::make_unique<FuseNetMini>(optical_channels, map_channels, num_classes, opt);
    }
    throw UsageError("unknown model kind");
}

inline ModelOptions model_options_from_json(const nlohmann::json& j) {
    ModelOptions opt;
    opt.widths = j.value("widths", opt.widths);
    opt.decoder_trunc = j.value("decoder_trunc", 0);
    opt.use_batchnorm = j.value("use_batchnorm", true);
    opt.osmnet_hidden = j.value("osmnet_hidden", 32);
    opt.osmnet_kernel = j.value("osmnet_kernel", 5);
    opt.corrector_widths = j.value("corrector_widths", opt.corrector_widths);
    return opt;
}

// Writes model.json (architecture + caller metadata) and checkpoint.mfw.
inline void save_model_dir(const std::filesystem::path& dir, const Model& model,
                           const nlohmann::json& metadata = nlohmann::json::object()) {
    std::filesystem::create_directories(dir);
    nlohmann::json j = model.architecture();
    j["metadata"] = metadata;
    std::ofstream out(dir / "model.json", std::ios::trunc);
    if (!out) throw FormatError("cannot write " + (dir / "model.json").string());
    out << j.dump(2) << "\n";
    save_checkpoint(dir / "checkpoint.mfw", model.state());
}

struct LoadedModel {
    std::unique_ptr<Model> model;
    nlohmann::json descriptor;
};

inline LoadedModel load_model_dir(const std::filesystem::path& dir) {
    std::ifstream in(dir / "model.json");
    if (!in) throw FormatError("cannot open " + (dir / "model.json").string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("invalid model.json: " + std::string(e.what()));
    }
    const ModelKind kind = model_kind_from_name(j.at("kind").get<std::string>());
    ModelOptions opt = model_options_from_json(j);
    auto model = make_model(kind, j.value("optical_channels", 3), j.value("map_channels", 4),
                            j.at("num_classes").get<int>(), opt);
    model->load_state(load_checkpoint(dir / "checkpoint.mfw"));
    return {std::move(model), j};
}

}  // namespace mapfuse
