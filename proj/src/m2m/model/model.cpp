#include "m2m/model/model.h"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "m2m/core/rng.h"

namespace m2m {

namespace {

constexpr double kLeakySlope = 0.1;
constexpr char kMagic[8] = {'M', '2', 'M', 'C', 'K', 'P', 'T', '\0'};
constexpr uint32_t kVersion = 1;

struct LayerSpec {
    std::string name;
    int c_in;
    int c_out;
};

std::vector<LayerSpec> layer_specs(const ArchDescriptor& d) {
    std::vector<LayerSpec> layers;
    int levels = d.levels();
    for (int i = 0; i < levels; ++i)
        layers.push_back({"enc" + std::to_string(i), i == 0 ? d.in_channels : d.channels[i - 1],
                          d.channels[i]});
    for (int i = levels - 2; i >= 0; --i)
        layers.push_back({"dec" + std::to_string(i), d.channels[i + 1] + d.channels[i],
                          d.channels[i]});
    layers.push_back({"head", d.channels[0], 3});
    return layers;
}

}  // namespace

BackendKind parse_backend(const std::string& name) {
    if (name == "amortized") return BackendKind::Amortized;
    if (name == "field_bank") return BackendKind::FieldBank;
    throw std::invalid_argument("unknown backend '" + name +
                                "' (expected amortized or field_bank)");
}

const char* backend_name(BackendKind kind) {
    return kind == BackendKind::Amortized ? "amortized" : "field_bank";
}

void ArchDescriptor::validate() const {
    if (in_channels < 1) throw std::invalid_argument("architecture: in_channels must be >= 1");
    if (channels.empty()) throw std::invalid_argument("architecture: needs at least one level");
    for (int c : channels)
        if (c < 1) throw std::invalid_argument("architecture: channel counts must be positive");
    if (kernel != 3) throw std::invalid_argument("architecture: only 3x3x3 kernels are supported");
}

std::size_t param_count(const ArchDescriptor& desc) {
    desc.validate();
    std::size_t n = 0;
    for (const LayerSpec& l : layer_specs(desc))
        n += std::size_t(27) * l.c_in * l.c_out + l.c_out;
    return n;
}

const Grid<float>& ModelParams::tensor(const std::string& name) const {
    for (const auto& [n, g] : tensors)
        if (n == name) return g;
    throw std::out_of_range("model has no tensor named '" + name + "'");
}

Grid<float>& ModelParams::tensor(const std::string& name) {
    for (auto& [n, g] : tensors)
        if (n == name) return g;
    throw std::out_of_range("model has no tensor named '" + name + "'");
}

ModelParams init_params(const ArchDescriptor& desc, uint64_t seed) {
    desc.validate();
    ModelParams p;
    p.kind = BackendKind::Amortized;
    p.arch = desc;
    Rng rng(seed);
    auto layers = layer_specs(desc);
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const LayerSpec& l = layers[li];
        bool is_head = li + 1 == layers.size();
        Grid<float> w({3, 3, 3}, l.c_out * l.c_in, 0.0f);
        if (!is_head) {
            double scale = std::sqrt(2.0 / (27.0 * l.c_in));
            for (float& v : w.data) v = float(rng.normal() * scale);
        }
        p.tensors.emplace_back(l.name + ".w", std::move(w));
        p.tensors.emplace_back(l.name + ".b", Grid<float>({1, 1, 1}, l.c_out, 0.0f));
    }
    return p;
}

ModelParams init_field_bank(Shape3 field_shape) {
    for (int s : field_shape)
        if (s < 1) throw std::invalid_argument("field bank: shape must be positive");
    ModelParams p;
    p.kind = BackendKind::FieldBank;
    p.bank_shape = field_shape;
    return p;
}

void bank_register(ModelParams& params, const std::string& pair_id) {
    if (params.kind != BackendKind::FieldBank)
        throw std::logic_error("bank_register: not a field-bank model");
    params.bank.emplace(pair_id, Grid<float>(params.bank_shape, 3, 0.0f));
}

bool bank_has(const ModelParams& params, const std::string& pair_id) {
    return params.bank.count(pair_id) > 0;
}

const Grid<float>& bank_get(const ModelParams& params, const std::string& pair_id) {
    auto it = params.bank.find(pair_id);
    if (it == params.bank.end())
        throw std::out_of_range("field bank has no pair '" + pair_id + "'");
    return it->second;
}

Grid<float>& bank_ref(ModelParams& params, const std::string& pair_id) {
    auto it = params.bank.find(pair_id);
    if (it == params.bank.end())
        throw std::out_of_range("field bank has no pair '" + pair_id + "'");
    return it->second;
}

template <typename T>
typename Tape<T>::NodeId build_predict(Tape<T>& t, const ArchDescriptor& desc,
                                       const std::vector<int>& tensor_leaves, int source,
                                       int target) {
    desc.validate();
    auto layers = layer_specs(desc);
    if (tensor_leaves.size() != 2 * layers.size())
        throw std::invalid_argument("build_predict: expected " +
                                    std::to_string(2 * layers.size()) + " tensor leaves, got " +
                                    std::to_string(tensor_leaves.size()));
    const Shape3 full = t.value(source).shape;
    if (t.value(target).shape != full)
        throw std::invalid_argument("build_predict: source shape " + shape_str(full) +
                                    " vs target shape " + shape_str(t.value(target).shape));
    if (t.value(source).channels != 1 || t.value(target).channels != 1)
        throw std::invalid_argument("build_predict: inputs must be single-channel volumes");
    int pf = desc.pool_factor();
    for (int s : full)
        if (s % pf != 0)
            throw std::invalid_argument("build_predict: shape " + shape_str(full) +
                                        " not divisible by the pool factor " + std::to_string(pf));

    auto conv_block = [&](int input, std::size_t layer_idx, bool nonlinear) {
        int w = tensor_leaves[2 * layer_idx];
        int b = tensor_leaves[2 * layer_idx + 1];
        int out = t.broadcast_add(t.conv3(input, w, layers[layer_idx].c_out), b);
        return nonlinear ? t.leaky_relu(out, kLeakySlope) : out;
    };

    int levels = desc.levels();
    std::vector<int> enc;
    int cur = t.stack({source, target});
    for (int i = 0; i < levels; ++i) {
        if (i > 0) cur = t.avg_pool2(cur);
        cur = conv_block(cur, std::size_t(i), true);
        enc.push_back(cur);
    }
    std::size_t li = std::size_t(levels);
    for (int i = levels - 2; i >= 0; --i, ++li) {
        int up = t.resize_linear(cur, t.value(enc[i]).shape);
        cur = conv_block(t.stack({up, enc[i]}), li, true);
    }
    return conv_block(cur, li, false);
}

template int build_predict<float>(Tape<float>&, const ArchDescriptor&, const std::vector<int>&,
                                  int, int);
template int build_predict<double>(Tape<double>&, const ArchDescriptor&, const std::vector<int>&,
                                   int, int);

Grid<double> predict_field(const ModelParams& params, const Volume& source, const Volume& target) {
    if (params.kind != BackendKind::Amortized)
        throw std::logic_error(
            "predict_field: field-bank backend stores fields per pair id; use bank_get");
    if (source.shape() != target.shape())
        throw std::invalid_argument("predict_field: source shape " + shape_str(source.shape()) +
                                    " vs target shape " + shape_str(target.shape()));
    Tape<float> t;
    t.set_check_finite(true);
    std::vector<int> leaves;
    leaves.reserve(params.tensors.size());
    for (const auto& [name, g] : params.tensors) leaves.push_back(t.leaf(g, false));
    int src = t.leaf(source.values.cast<float>(), false);
    int tgt = t.leaf(target.values.cast<float>(), false);
    int field = build_predict(t, params.arch, leaves, src, tgt);
    return t.evaluate(field).cast<double>();
}

// ---- checkpoint I/O ----------------------------------------------------

namespace {

template <typename V>
void write_pod(std::ostream& out, const V& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& in, const std::string& path) {
    V v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!in) throw std::runtime_error("checkpoint truncated: " + path);
    return v;
}

}  // namespace

void write_named_grids(std::ostream& out,
                       const std::vector<std::pair<std::string, Grid<float>>>& grids) {
    write_pod(out, uint64_t(grids.size()));
    for (const auto& [name, g] : grids) {
        write_pod(out, uint32_t(name.size()));
        out.write(name.data(), std::streamsize(name.size()));
        write_pod(out, uint32_t(4));
        for (int s : g.shape) write_pod(out, uint64_t(s));
        write_pod(out, uint64_t(g.channels));
        out.write(reinterpret_cast<const char*>(g.data.data()),
                  std::streamsize(g.data.size() * sizeof(float)));
    }
}

std::vector<std::pair<std::string, Grid<float>>> read_named_grids(std::istream& in,
                                                                  const std::string& path) {
    auto count = read_pod<uint64_t>(in, path);
    std::vector<std::pair<std::string, Grid<float>>> grids;
    grids.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        auto name_len = read_pod<uint32_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        auto rank = read_pod<uint32_t>(in, path);
        if (rank != 4)
            throw std::runtime_error("checkpoint blob '" + name + "' has rank " +
                                     std::to_string(rank) + ", expected 4: " + path);
        Shape3 shape;
        for (int a = 0; a < 3; ++a) shape[a] = int(read_pod<uint64_t>(in, path));
        int channels = int(read_pod<uint64_t>(in, path));
        Grid<float> g(shape, channels);
        in.read(reinterpret_cast<char*>(g.data.data()),
                std::streamsize(g.data.size() * sizeof(float)));
        if (!in) throw std::runtime_error("checkpoint truncated: " + path);
        grids.emplace_back(std::move(name), std::move(g));
    }
    return grids;
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kVersion);
    write_pod(out, uint8_t(params.kind == BackendKind::Amortized ? 0 : 1));
    if (params.kind == BackendKind::Amortized) {
        write_pod(out, uint32_t(params.arch.in_channels));
        write_pod(out, uint32_t(params.arch.kernel));
        write_pod(out, uint32_t(params.arch.levels()));
        for (int c : params.arch.channels) write_pod(out, uint32_t(c));
        write_named_grids(out, params.tensors);
    } else {
        for (int s : params.bank_shape) write_pod(out, uint32_t(s));
        std::vector<std::pair<std::string, Grid<float>>> blobs(params.bank.begin(),
                                                               params.bank.end());
        write_named_grids(out, blobs);
    }
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("not a checkpoint file (bad magic): " + path);
    auto version = read_pod<uint32_t>(in, path);
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                                 ": " + path);
    auto kind = read_pod<uint8_t>(in, path);
    ModelParams p;
    if (kind == 0) {
        p.kind = BackendKind::Amortized;
        p.arch.in_channels = int(read_pod<uint32_t>(in, path));
        p.arch.kernel = int(read_pod<uint32_t>(in, path));
        int levels = int(read_pod<uint32_t>(in, path));
        p.arch.channels.clear();
        for (int i = 0; i < levels; ++i) p.arch.channels.push_back(int(read_pod<uint32_t>(in, path)));
        p.arch.validate();
        p.tensors = read_named_grids(in, path);
        // the descriptor must fully determine what we just read
        ModelParams expect = init_params(p.arch, 0);
        if (expect.tensors.size() != p.tensors.size())
            throw std::runtime_error("checkpoint tensor count mismatch: " + path);
        for (std::size_t i = 0; i < p.tensors.size(); ++i) {
            if (p.tensors[i].first != expect.tensors[i].first ||
                p.tensors[i].second.shape != expect.tensors[i].second.shape ||
                p.tensors[i].second.channels != expect.tensors[i].second.channels)
                throw std::runtime_error("checkpoint tensor '" + p.tensors[i].first +
                                         "' does not match the architecture: " + path);
        }
    } else if (kind == 1) {
        p.kind = BackendKind::FieldBank;
        for (int a = 0; a < 3; ++a) p.bank_shape[a] = int(read_pod<uint32_t>(in, path));
        for (auto& [name, g] : read_named_grids(in, path)) {
            if (g.channels != 3 || g.shape != p.bank_shape)
                throw std::runtime_error("checkpoint bank field '" + name +
                                         "' has a mismatched shape: " + path);
            p.bank.emplace(std::move(name), std::move(g));
        }
    } else {
        throw std::runtime_error("unknown backend tag in checkpoint: " + path);
    }
    return p;
}

}  // namespace m2m
