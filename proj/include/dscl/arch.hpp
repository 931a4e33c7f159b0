#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dscl/common.hpp"

namespace dscl {

/// Knobs shared by every architecture builder.
struct ArchConfig {
    int64_t input_size = 32;       // pixels per side (224 = paper scale)
    double width_mult = 1.0;       // scales all channel counts
    int64_t head_channels = 512;   // 1x1 head-conv output width (conv-style heads)
    bool strict_color = false;     // color FE: exact per-pixel mode (see color builder)
    std::array<double, 3> grayscale_coeffs = {0.299, 0.587, 0.114};

    void validate() const {
        if (input_size < 8)
            throw ConfigError("ArchConfig: input_size " + std::to_string(input_size) +
                              " is too small for the five stride-2 stages (need >= 8)");
        if (!(width_mult > 0))
            throw ConfigError("ArchConfig: width_mult must be positive");
        for (int64_t base : {64, 128, 256, 512})
            if (std::llround(base * width_mult) < 1)
                throw ConfigError("ArchConfig: width_mult " + std::to_string(width_mult) +
                                  " rounds a stage width to zero");
        if (head_channels < 1) throw ConfigError("ArchConfig: head_channels must be >= 1");
        double s = 0;
        for (double c : grayscale_coeffs) {
            if (c < 0) throw ConfigError("ArchConfig: grayscale coefficients must be >= 0");
            s += c;
        }
        if (std::abs(s - 1.0) > 1e-9)
            throw ConfigError("ArchConfig: grayscale coefficients must sum to 1");
    }
    int64_t width(int64_t base) const {
        return static_cast<int64_t>(std::llround(base * width_mult));
    }
};

struct ConvDesc {
    std::string name;  // parameter slot prefix, e.g. "layer2.0.conv1"
    int64_t in_c = 0, out_c = 0, kernel = 1, stride = 1, padding = 0;
    bool bias = false;
    int64_t param_count() const {
        return out_c * in_c * kernel * kernel + (bias ? out_c : 0);
    }
};

struct BnDesc {
    std::string name;
    int64_t channels = 0;
    int64_t param_count() const { return 2 * channels; }  // affine only
};

struct BlockDesc {
    ConvDesc conv1;
    BnDesc bn1;
    ConvDesc conv2;
    BnDesc bn2;
    bool has_downsample = false;
    ConvDesc ds_conv;
    BnDesc ds_bn;
};

/// One feature-extractor trunk: stem (optional grayscale + conv/bn/relu +
/// optional maxpool) followed by four residual stages. Produces the pre-pool
/// feature map; pooling placement is decided by the enclosing network.
struct FeSpec {
    std::string prefix;  // "" or a branch prefix like "color."
    bool gray_stem = false;
    std::array<double, 3> gray_coeffs = {0.299, 0.587, 0.114};
    ConvDesc conv1;
    BnDesc bn1;
    bool has_maxpool = true;
    int64_t mp_kernel = 3, mp_stride = 2, mp_padding = 1;
    std::vector<std::vector<BlockDesc>> stages;
    int64_t out_channels = 0;

    int64_t param_count() const {
        int64_t n = conv1.param_count() + bn1.param_count();
        for (const auto& stage : stages)
            for (const auto& b : stage) {
                n += b.conv1.param_count() + b.bn1.param_count() + b.conv2.param_count() +
                     b.bn2.param_count();
                if (b.has_downsample) n += b.ds_conv.param_count() + b.ds_bn.param_count();
            }
        return n;
    }
};

/// Per-task classifier. Conv-style heads (DS, H) run
/// 1x1 conv -> relu -> global_avgpool -> flatten -> fc on the pre-pool map;
/// linear-style heads run fc on the already pooled trunk features.
struct HeadSpec {
    int64_t task_id = 0;
    std::string prefix;  // "head.<task_id>."
    bool has_conv = false;
    ConvDesc conv;
    int64_t fc_in = 0, fc_out = 0;

    int64_t param_count() const {
        int64_t n = fc_in * fc_out + fc_out;  // fc always carries a bias
        if (has_conv) n += conv.param_count();
        return n;
    }
};

enum class Fusion { none, channel_concat };

struct MultiHeadSpec {
    std::string arch_name;
    ArchConfig cfg;
    std::vector<FeSpec> fes;  // one trunk, or color+shape for the fused network
    Fusion fusion = Fusion::none;
    bool trunk_pool = false;  // plain archs pool in the trunk before linear heads
    std::vector<HeadSpec> heads;

    int64_t fe_param_count() const {
        int64_t n = 0;
        for (const auto& fe : fes) n += fe.param_count();
        return n;
    }
    int64_t head_param_count() const {
        int64_t n = 0;
        for (const auto& h : heads) n += h.param_count();
        return n;
    }
    int64_t param_count() const { return fe_param_count() + head_param_count(); }
};

namespace detail {

inline BlockDesc make_block(const std::string& prefix, int64_t in_c, int64_t out_c,
                            int64_t stride, int64_t kernel) {
    const int64_t pad = kernel / 2;
    BlockDesc b;
    b.conv1 = {prefix + ".conv1", in_c, out_c, kernel, stride, pad, false};
    b.bn1 = {prefix + ".bn1", out_c};
    b.conv2 = {prefix + ".conv2", out_c, out_c, kernel, 1, pad, false};
    b.bn2 = {prefix + ".bn2", out_c};
    if (stride != 1 || in_c != out_c) {
        b.has_downsample = true;
        b.ds_conv = {prefix + ".downsample.0", in_c, out_c, 1, stride, 0, false};
        b.ds_bn = {prefix + ".downsample.1", out_c};
    }
    return b;
}

/// The shared 18-layer trunk skeleton: stem conv + four stages of two basic
/// blocks at widths {64,128,256,512}*width_mult, stride 2 entering stages 2-4.
inline FeSpec make_trunk(const ArchConfig& cfg, const std::string& prefix, int64_t in_channels,
                         bool gray_stem, int64_t stem_kernel, int64_t block_kernel,
                         bool strides_active, bool with_maxpool) {
    cfg.validate();
    FeSpec fe;
    fe.prefix = prefix;
    fe.gray_stem = gray_stem;
    fe.gray_coeffs = cfg.grayscale_coeffs;
    const int64_t w64 = cfg.width(64), w128 = cfg.width(128), w256 = cfg.width(256),
                  w512 = cfg.width(512);
    const int64_t stem_stride = strides_active ? 2 : 1;
    fe.conv1 = {prefix + "conv1", in_channels, w64, stem_kernel, stem_stride, stem_kernel / 2,
                false};
    fe.bn1 = {prefix + "bn1", w64};
    fe.has_maxpool = with_maxpool;
    const int64_t widths[4] = {w64, w128, w256, w512};
    int64_t in_c = w64;
    for (int64_t stage = 0; stage < 4; ++stage) {
        std::vector<BlockDesc> blocks;
        const int64_t out_c = widths[stage];
        const int64_t first_stride = (stage == 0 || !strides_active) ? 1 : 2;
        blocks.push_back(make_block(prefix + "layer" + std::to_string(stage + 1) + ".0", in_c,
                                    out_c, first_stride, block_kernel));
        blocks.push_back(make_block(prefix + "layer" + std::to_string(stage + 1) + ".1", out_c,
                                    out_c, 1, block_kernel));
        fe.stages.push_back(std::move(blocks));
        in_c = out_c;
    }
    fe.out_channels = w512;
    return fe;
}

}  // namespace detail

/// Standard residual trunk: 7x7 s2 conv -> bn -> relu -> 3x3 s2 maxpool ->
/// stages [2,2,2,2] with 1x1 stride-2 downsample shortcuts.
inline FeSpec build_resnet18_fe(const ArchConfig& cfg, const std::string& prefix = "",
                                int64_t in_channels = 3) {
    return detail::make_trunk(cfg, prefix, in_channels, false, 7, 3, true, true);
}

/// Color trunk: identical topology with every conv kernel 1x1. In the default
/// (faithful) mode strides and the maxpool are kept, so the map is spatially
/// subsampled but no learned filter has spatial extent. In strict mode every
/// stride is 1 and the maxpool is dropped, making the trunk an exact per-pixel
/// map whose globally pooled output is invariant to any spatial permutation.
inline FeSpec build_color_fe(const ArchConfig& cfg, const std::string& prefix = "") {
    const bool strict = cfg.strict_color;
    return detail::make_trunk(cfg, prefix, 3, false, 1, 1, !strict, !strict);
}

/// Shape trunk: grayscale stem followed by the standard trunk with a
/// single-channel first conv.
inline FeSpec build_shape_fe(const ArchConfig& cfg, const std::string& prefix = "") {
    return detail::make_trunk(cfg, prefix, 1, true, 7, 3, true, true);
}

namespace detail {

inline void check_tasks(const std::vector<int64_t>& task_classes) {
    if (task_classes.empty()) throw ConfigError("need at least one task");
    for (size_t t = 0; t < task_classes.size(); ++t)
        if (task_classes[t] < 1)
            throw ConfigError("task " + std::to_string(t) + " has no classes");
}

inline HeadSpec conv_head(const ArchConfig& cfg, int64_t task_id, int64_t in_channels,
                          int64_t classes) {
    HeadSpec h;
    h.task_id = task_id;
    h.prefix = "head." + std::to_string(task_id) + ".";
    h.has_conv = true;
    h.conv = {h.prefix + "conv", in_channels, cfg.head_channels, 1, 1, 0, true};
    h.fc_in = cfg.head_channels;
    h.fc_out = classes;
    return h;
}

inline HeadSpec linear_head(int64_t task_id, int64_t in_features, int64_t classes) {
    HeadSpec h;
    h.task_id = task_id;
    h.prefix = "head." + std::to_string(task_id) + ".";
    h.has_conv = false;
    h.fc_in = in_features;
    h.fc_out = classes;
    return h;
}

}  // namespace detail

/// Fused two-branch network: color FE and shape FE run in parallel on the same
/// image (RGB copy / grayscale copy), their pre-pool maps are concatenated on
/// channels before any pooling, and each task head entangles them with a
/// 1x1 conv -> relu -> global pool -> fc. In strict-color mode the color map
/// keeps full resolution, so fusion window-averages it onto the shape grid
/// first (the color statistic stays spatially symmetric either way).
inline MultiHeadSpec build_ds_network(const ArchConfig& cfg,
                                      const std::vector<int64_t>& task_classes) {
    detail::check_tasks(task_classes);
    MultiHeadSpec net;
    net.arch_name = "resnet18_ds";
    net.cfg = cfg;
    net.fes.push_back(build_color_fe(cfg, "color."));
    net.fes.push_back(build_shape_fe(cfg, "shape."));
    net.fusion = Fusion::channel_concat;
    net.trunk_pool = false;
    const int64_t concat_c = net.fes[0].out_channels + net.fes[1].out_channels;
    for (size_t t = 0; t < task_classes.size(); ++t)
        net.heads.push_back(detail::conv_head(cfg, static_cast<int64_t>(t), concat_c,
                                              task_classes[t]));
    return net;
}

/// Head-capacity control: the standard trunk (pre-pool map) feeding DS-style
/// conv heads whose 1x1 conv reads the single branch's channel width.
inline MultiHeadSpec build_h_network(const ArchConfig& cfg,
                                     const std::vector<int64_t>& task_classes) {
    detail::check_tasks(task_classes);
    MultiHeadSpec net;
    net.arch_name = "resnet18_h";
    net.cfg = cfg;
    net.fes.push_back(build_resnet18_fe(cfg));
    net.fusion = Fusion::none;
    net.trunk_pool = false;
    for (size_t t = 0; t < task_classes.size(); ++t)
        net.heads.push_back(detail::conv_head(cfg, static_cast<int64_t>(t),
                                              net.fes[0].out_channels, task_classes[t]));
    return net;
}

/// Plain single-trunk networks: FE -> global pool -> flatten feeding one
/// linear classifier per task.
inline MultiHeadSpec build_plain_network(const std::string& arch_name, const ArchConfig& cfg,
                                         const std::vector<int64_t>& task_classes) {
    detail::check_tasks(task_classes);
    MultiHeadSpec net;
    net.arch_name = arch_name;
    net.cfg = cfg;
    if (arch_name == "resnet18")
        net.fes.push_back(build_resnet18_fe(cfg));
    else if (arch_name == "color")
        net.fes.push_back(build_color_fe(cfg));
    else if (arch_name == "shape")
        net.fes.push_back(build_shape_fe(cfg));
    else
        throw ConfigError("unknown plain architecture '" + arch_name + "'");
    net.fusion = Fusion::none;
    net.trunk_pool = true;
    for (size_t t = 0; t < task_classes.size(); ++t)
        net.heads.push_back(detail::linear_head(static_cast<int64_t>(t),
                                                net.fes[0].out_channels, task_classes[t]));
    return net;
}

/// One entry point for every architecture name accepted by the config layer.
inline MultiHeadSpec build_network(const std::string& arch_name, const ArchConfig& cfg,
                                   const std::vector<int64_t>& task_classes) {
    if (arch_name == "resnet18_ds") return build_ds_network(cfg, task_classes);
    if (arch_name == "resnet18_h") return build_h_network(cfg, task_classes);
    return build_plain_network(arch_name, cfg, task_classes);
}

inline int64_t count_params(const MultiHeadSpec& spec) { return spec.param_count(); }

}  // namespace dscl
