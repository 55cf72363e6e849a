#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "chmfl/nn.hpp"
#include "chmfl/tensor.hpp"
#include "chmfl/volume.hpp"

namespace chmfl {

/// Architecture hyperparameters. At the defaults the per-level encoder
/// channels are (16,32,64,128,256) and the fused feature vector is 992 wide.
struct NetworkConfig {
    std::array<std::size_t, 3> input_extents{112, 112, 144};  // (D,H,W)
    std::size_t base_channels = 16;
    std::size_t levels = 5;  // input transition + (levels-1) downsamplers
    std::array<std::size_t, 2> fc_hidden{512, 128};
    std::size_t num_classes = 2;
    std::size_t seg_classes = 2;
    double dropout_p = 0.5;

    std::size_t channels(std::size_t level) const {  // level is 1-based
        return base_channels << (level - 1);
    }

    std::size_t fused_vector_width() const {
        std::size_t v = 0;
        for (std::size_t l = 1; l <= levels; ++l) v += 2 * channels(l);
        return v;
    }

    void validate() const {
        if (levels < 2) throw std::invalid_argument("network config: levels must be >= 2");
        if (base_channels == 0)
            throw std::invalid_argument("network config: base_channels must be positive");
        const std::size_t div = std::size_t(1) << (levels - 1);
        for (std::size_t e : input_extents)
            if (e % div != 0)
                throw std::invalid_argument(
                    "network config: input extents must be divisible by 2^(levels-1)");
        if (dropout_p < 0 || dropout_p >= 1)
            throw std::invalid_argument("network config: dropout_p must be in [0,1)");
    }

    bool operator==(const NetworkConfig&) const = default;
};

/// Named parameter tensors for the whole network (weights plus batch-norm
/// buffers). std::map keeps iteration order deterministic.
template <typename T>
using ModelParams = std::map<std::string, TensorPtr<T>>;

template <typename T>
struct ForwardOutput {
    TensorPtr<T> dm_logits;                   // [1 x num_classes]
    TensorPtr<T> seg_logits;                  // [1 x seg_classes x D x H x W]
    TensorPtr<T> fused_vector;                // [1 x V], diagnostic
    std::vector<TensorPtr<T>> level_maps;     // fused per-level maps, diagnostic
    std::vector<TensorPtr<T>> decoder_maps;   // post-residual decoder maps, diagnostic
};

// ---------------------------------------------------------------------------
// parameter layout
// ---------------------------------------------------------------------------

using ShapeMap = std::map<std::string, std::vector<std::size_t>>;

inline ShapeMap expected_param_shapes(const NetworkConfig& cfg) {
    cfg.validate();
    ShapeMap shapes;
    const std::size_t L = cfg.levels;
    auto add_conv = [&](const std::string& prefix, std::size_t out_ch, std::size_t in_ch,
                        std::size_t k) {
        shapes[prefix + ".weight"] = {out_ch, in_ch, k, k, k};
        shapes[prefix + ".bias"] = {out_ch};
    };
    auto add_bn = [&](const std::string& prefix, std::size_t ch) {
        shapes[prefix + ".gamma"] = {ch};
        shapes[prefix + ".beta"] = {ch};
        shapes[prefix + ".running_mean"] = {ch};
        shapes[prefix + ".running_var"] = {ch};
    };
    for (const std::string branch : {"pet", "ct"}) {
        add_conv(branch + ".input.conv", cfg.channels(1), 1, 5);
        add_bn(branch + ".input.bn", cfg.channels(1));
        for (std::size_t k = 1; k < L; ++k) {
            add_conv(branch + ".down" + std::to_string(k) + ".conv", cfg.channels(k + 1),
                     cfg.channels(k), 2);
            add_bn(branch + ".down" + std::to_string(k) + ".bn", cfg.channels(k + 1));
        }
    }
    for (std::size_t k = 1; k < L; ++k) {
        const std::size_t l = L - k;  // resolution level this block restores
        const std::size_t in_ch = k == 1 ? 2 * cfg.channels(L) : cfg.channels(l + 1);
        const std::size_t c = cfg.channels(l);
        const std::string up = "dec.up" + std::to_string(k);
        const std::string res = "dec.res" + std::to_string(k);
        add_conv(up + ".convt", c, in_ch, 2);
        add_bn(up + ".bn", c);
        shapes[res + ".proj.weight"] = {c, 3 * c, 1, 1, 1};
        shapes[res + ".proj.bias"] = {c};
        add_conv(res + ".conv1", c, c, 3);
        add_bn(res + ".bn1", c);
        add_conv(res + ".conv2", c, c, 3);
        add_bn(res + ".bn2", c);
    }
    add_conv("dec.out.conv", cfg.channels(1), cfg.channels(1), 5);
    add_bn("dec.out.bn", cfg.channels(1));
    shapes["dec.out.proj.weight"] = {cfg.seg_classes, cfg.channels(1), 1, 1, 1};
    shapes["dec.out.proj.bias"] = {cfg.seg_classes};
    const std::size_t v = cfg.fused_vector_width();
    shapes["head.fc1.weight"] = {cfg.fc_hidden[0], v};
    shapes["head.fc1.bias"] = {cfg.fc_hidden[0]};
    shapes["head.fc2.weight"] = {cfg.fc_hidden[1], cfg.fc_hidden[0]};
    shapes["head.fc2.bias"] = {cfg.fc_hidden[1]};
    shapes["head.fc3.weight"] = {cfg.num_classes, cfg.fc_hidden[1]};
    shapes["head.fc3.bias"] = {cfg.num_classes};
    return shapes;
}

/// Check that a parameter set matches the layout implied by the config.
template <typename T>
void audit_params(const ModelParams<T>& params, const NetworkConfig& cfg) {
    const auto expected = expected_param_shapes(cfg);
    for (const auto& [name, shape] : expected) {
        auto it = params.find(name);
        if (it == params.end())
            throw std::runtime_error("shape audit: missing parameter " + name);
        if (it->second->shape != shape)
            throw std::runtime_error("shape audit: wrong shape for " + name);
    }
    for (const auto& [name, t] : params)
        if (!expected.count(name))
            throw std::runtime_error("shape audit: unexpected parameter " + name);
}

/// He initialization: conv/FC weights ~ N(0, 2/fan_in); biases 0; batch-norm
/// gamma 1, beta 0, running stats (0,1).
template <typename T>
ModelParams<T> init_params(const NetworkConfig& cfg, std::mt19937_64& rng) {
    const auto shapes = expected_param_shapes(cfg);
    ModelParams<T> params;
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (const auto& [name, shape] : shapes) {
        const bool is_weight = name.ends_with(".weight");
        const bool is_buffer =
            name.ends_with(".running_mean") || name.ends_with(".running_var");
        auto t = Tensor<T>::zeros(shape, !is_buffer);
        if (is_weight) {
            std::size_t fan_in = shape[1];
            for (std::size_t d = 2; d < shape.size(); ++d) fan_in *= shape[d];
            const double stddev = std::sqrt(2.0 / (double)fan_in);
            for (auto& v : t->data) v = (T)(gauss(rng) * stddev);
        } else if (name.ends_with(".gamma") || name.ends_with(".running_var")) {
            std::fill(t->data.begin(), t->data.end(), T(1));
        }
        params.emplace(name, std::move(t));
    }
    return params;
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
TensorPtr<T> fetch(const ModelParams<T>& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::runtime_error("missing parameter " + name);
    return it->second;
}

template <typename T>
Conv3dParams<T> conv_at(const ModelParams<T>& params, const std::string& prefix,
                        std::size_t stride, std::size_t pad) {
    Conv3dParams<T> p;
    p.weight = fetch(params, prefix + ".weight");
    p.bias = fetch(params, prefix + ".bias");
    p.stride = {stride, stride, stride};
    p.padding = {pad, pad, pad};
    return p;
}

template <typename T>
BatchNormParams<T> bn_at(const ModelParams<T>& params, const std::string& prefix) {
    BatchNormParams<T> p;
    p.gamma = fetch(params, prefix + ".gamma");
    p.beta = fetch(params, prefix + ".beta");
    p.running_mean = fetch(params, prefix + ".running_mean");
    p.running_var = fetch(params, prefix + ".running_var");
    return p;
}

}  // namespace detail

/// One branch of the encoder: input transition (5x5x5, stride 1, pad 2) then
/// levels-1 strided blocks (2x2x2, stride 2), each halving spatial extents and
/// doubling channels. Returns the per-level feature maps.
template <typename T>
std::vector<TensorPtr<T>> encoder_forward(const ModelParams<T>& params,
                                          const std::string& branch, const TensorPtr<T>& x,
                                          const NetworkConfig& cfg, bool training,
                                          Tape<T>* tape = nullptr) {
    if (x->shape.size() != 5 || x->shape[2] != cfg.input_extents[0] ||
        x->shape[3] != cfg.input_extents[1] || x->shape[4] != cfg.input_extents[2])
        throw std::invalid_argument("encoder_forward: input extents do not match config");
    std::vector<TensorPtr<T>> maps;
    auto h = elu(batch_norm(conv3d(x, detail::conv_at(params, branch + ".input.conv", 1, 2), tape),
                            detail::bn_at(params, branch + ".input.bn"), training, tape),
                 tape);
    maps.push_back(h);
    for (std::size_t k = 1; k < cfg.levels; ++k) {
        const std::string p = branch + ".down" + std::to_string(k);
        h = elu(batch_norm(conv3d(h, detail::conv_at(params, p + ".conv", 2, 0), tape),
                           detail::bn_at(params, p + ".bn"), training, tape),
                tape);
        maps.push_back(h);
    }
    return maps;
}

/// Channel-concatenate the PET and CT maps per level and reduce each fused map
/// to a vector by global max pooling; the level vectors are concatenated into
/// the single fused feature vector.
template <typename T>
std::pair<TensorPtr<T>, std::vector<TensorPtr<T>>> hierarchical_fusion(
    const std::vector<TensorPtr<T>>& pet_maps, const std::vector<TensorPtr<T>>& ct_maps,
    Tape<T>* tape = nullptr) {
    if (pet_maps.size() != ct_maps.size())
        throw std::invalid_argument("hierarchical_fusion: level count mismatch");
    std::vector<TensorPtr<T>> fused;
    std::vector<TensorPtr<T>> pooled;
    for (std::size_t l = 0; l < pet_maps.size(); ++l) {
        if (pet_maps[l]->shape != ct_maps[l]->shape)
            throw std::invalid_argument("hierarchical_fusion: branch shape mismatch");
        auto f = concat<T>({pet_maps[l], ct_maps[l]}, 1, tape);
        fused.push_back(f);
        pooled.push_back(adaptive_max_pool_to_vector(f, tape));
    }
    auto vec = concat<T>(pooled, 1, tape);
    return {vec, fused};
}

/// Segmentation decoder: four transposed-convolution blocks with skip
/// concatenation of the fused map at the matching resolution and a residual
/// refinement at each level, then the output transition to seg_classes
/// channels (softmax is applied by the loss / inference layer).
template <typename T>
TensorPtr<T> cfl_decode(const ModelParams<T>& params,
                        const std::vector<TensorPtr<T>>& fused_maps, const NetworkConfig& cfg,
                        bool training, Tape<T>* tape = nullptr,
                        std::vector<TensorPtr<T>>* diagnostics = nullptr) {
    const std::size_t L = cfg.levels;
    if (fused_maps.size() != L)
        throw std::invalid_argument("cfl_decode: expected one fused map per level");
    auto h = fused_maps[L - 1];
    for (std::size_t k = 1; k < L; ++k) {
        const std::size_t l = L - k;
        const std::string up = "dec.up" + std::to_string(k);
        const std::string res = "dec.res" + std::to_string(k);
        h = elu(batch_norm(
                    conv_transpose3d(h, detail::conv_at(params, up + ".convt", 2, 0), tape),
                    detail::bn_at(params, up + ".bn"), training, tape),
                tape);
        const auto& skip = fused_maps[l - 1];
        if (h->shape[2] != skip->shape[2] || h->shape[3] != skip->shape[3] ||
            h->shape[4] != skip->shape[4])
            throw std::invalid_argument("cfl_decode: resolution mismatch on skip concat");
        auto cat = concat<T>({h, skip}, 1, tape);
        auto proj = conv3d(cat, detail::conv_at(params, res + ".proj", 1, 0), tape);
        auto r = elu(batch_norm(conv3d(proj, detail::conv_at(params, res + ".conv1", 1, 1), tape),
                                detail::bn_at(params, res + ".bn1"), training, tape),
                     tape);
        r = batch_norm(conv3d(r, detail::conv_at(params, res + ".conv2", 1, 1), tape),
                       detail::bn_at(params, res + ".bn2"), training, tape);
        h = elu(add(r, proj, tape), tape);
        if (diagnostics) diagnostics->push_back(h);
    }
    auto o = elu(batch_norm(conv3d(h, detail::conv_at(params, "dec.out.conv", 1, 2), tape),
                            detail::bn_at(params, "dec.out.bn"), training, tape),
                 tape);
    return conv3d(o, detail::conv_at(params, "dec.out.proj", 1, 0), tape);
}

/// Classification head: FC+ReLU+Dropout twice, then FC to num_classes.
template <typename T>
TensorPtr<T> classify(const ModelParams<T>& params, const TensorPtr<T>& fused_vector,
                      const NetworkConfig& cfg, bool training, std::mt19937_64& rng,
                      Tape<T>* tape = nullptr) {
    auto h = relu(fully_connected(fused_vector, detail::fetch(params, "head.fc1.weight"),
                                  detail::fetch(params, "head.fc1.bias"), tape),
                  tape);
    h = dropout(h, cfg.dropout_p, training, rng, tape);
    h = relu(fully_connected(h, detail::fetch(params, "head.fc2.weight"),
                             detail::fetch(params, "head.fc2.bias"), tape),
             tape);
    h = dropout(h, cfg.dropout_p, training, rng, tape);
    return fully_connected(h, detail::fetch(params, "head.fc3.weight"),
                           detail::fetch(params, "head.fc3.bias"), tape);
}

/// Full forward pass over a paired PET/CT input.
template <typename T>
ForwardOutput<T> forward(const ModelParams<T>& params, const NetworkConfig& cfg,
                         const TensorPtr<T>& pet, const TensorPtr<T>& ct, bool training,
                         std::mt19937_64& rng, Tape<T>* tape = nullptr) {
    ForwardOutput<T> out;
    auto pet_maps = encoder_forward(params, "pet", pet, cfg, training, tape);
    auto ct_maps = encoder_forward(params, "ct", ct, cfg, training, tape);
    auto [vec, fused] = hierarchical_fusion(pet_maps, ct_maps, tape);
    out.fused_vector = vec;
    out.level_maps = fused;
    out.seg_logits = cfl_decode(params, fused, cfg, training, tape, &out.decoder_maps);
    out.dm_logits = classify(params, vec, cfg, training, rng, tape);
    return out;
}

// ---------------------------------------------------------------------------
// checkpoint IO
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'C', 'H', 'C', 'K'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

/// Checkpoint layout: "CHCK", version, serialized NetworkConfig, tensor count,
/// then per tensor: u64 name length + UTF-8 name + tensor payload (u64 rank,
/// u64 extents, f32 LE data).
template <typename T>
void save_checkpoint(const ModelParams<T>& params, const NetworkConfig& cfg,
                     const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write(kCheckpointMagic, 4);
    os.put((char)kCheckpointVersion);
    for (std::size_t e : cfg.input_extents) io_detail::put_u64(os, e);
    io_detail::put_u64(os, cfg.base_channels);
    io_detail::put_u64(os, cfg.levels);
    io_detail::put_u64(os, cfg.fc_hidden[0]);
    io_detail::put_u64(os, cfg.fc_hidden[1]);
    io_detail::put_u64(os, cfg.num_classes);
    io_detail::put_u64(os, cfg.seg_classes);
    io_detail::put_f64(os, cfg.dropout_p);
    io_detail::put_u64(os, params.size());
    for (const auto& [name, t] : params) {
        io_detail::put_u64(os, name.size());
        os.write(name.data(), (std::streamsize)name.size());
        io_detail::put_u64(os, t->shape.size());
        for (std::size_t e : t->shape) io_detail::put_u64(os, e);
        for (T v : t->data) {
            float f = (float)v;
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            unsigned char b[4];
            for (int i = 0; i < 4; ++i) b[i] = (unsigned char)(bits >> (8 * i));
            os.write(reinterpret_cast<const char*>(b), 4);
        }
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

template <typename T>
std::pair<ModelParams<T>, NetworkConfig> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    if (is.get() != kCheckpointVersion)
        throw std::runtime_error("load_checkpoint: version mismatch in " + path);
    NetworkConfig cfg;
    for (auto& e : cfg.input_extents) e = io_detail::get_u64(is);
    cfg.base_channels = io_detail::get_u64(is);
    cfg.levels = io_detail::get_u64(is);
    cfg.fc_hidden[0] = io_detail::get_u64(is);
    cfg.fc_hidden[1] = io_detail::get_u64(is);
    cfg.num_classes = io_detail::get_u64(is);
    cfg.seg_classes = io_detail::get_u64(is);
    cfg.dropout_p = io_detail::get_f64(is);
    const std::uint64_t count = io_detail::get_u64(is);
    ModelParams<T> params;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t name_len = io_detail::get_u64(is);
        std::string name(name_len, '\0');
        is.read(name.data(), (std::streamsize)name_len);
        const std::uint64_t rank = io_detail::get_u64(is);
        std::vector<std::size_t> shape(rank);
        for (auto& e : shape) e = io_detail::get_u64(is);
        std::size_t n = 1;
        for (std::size_t e : shape) n *= e;
        std::vector<T> data(n);
        for (std::size_t j = 0; j < n; ++j) {
            unsigned char b[4];
            is.read(reinterpret_cast<char*>(b), 4);
            if (!is) throw std::runtime_error("load_checkpoint: truncated tensor in " + path);
            std::uint32_t bits = 0;
            for (int k = 0; k < 4; ++k) bits |= (std::uint32_t)b[k] << (8 * k);
            float f;
            std::memcpy(&f, &bits, 4);
            data[j] = (T)f;
        }
        const bool is_buffer =
            name.ends_with(".running_mean") || name.ends_with(".running_var");
        params.emplace(name, Tensor<T>::create(std::move(shape), std::move(data), !is_buffer));
    }
    audit_params(params, cfg);
    return {std::move(params), cfg};
}

// ---------------------------------------------------------------------------
// volume <-> tensor bridging
// ---------------------------------------------------------------------------

/// Lift a volume into a [1,1,D,H,W] network input tensor.
template <typename T>
TensorPtr<T> volume_to_tensor(const Volume& v) {
    std::vector<T> data(v.voxels.begin(), v.voxels.end());
    return Tensor<T>::create({1, 1, v.extents[0], v.extents[1], v.extents[2]},
                             std::move(data));
}

}  // namespace chmfl
