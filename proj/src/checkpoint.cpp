#include "fspool/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "fspool/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace fspool {

namespace {

constexpr char kMagic[5] = {'P', 'O', 'O', 'L', '1'};

struct Writer {
    std::ofstream out;
    size_t offset = 0;

    explicit Writer(const std::string& path) : out(path, std::ios::binary) {
        if (!out) throw FormatError("cannot open '" + path + "' for writing");
    }
    void bytes(const void* p, size_t n) {
        out.write(static_cast<const char*>(p), std::streamsize(n));
        offset += n;
    }
    void u32(uint32_t v) { bytes(&v, 4); }
    void u64(uint64_t v) { bytes(&v, 8); }
};

struct Reader {
    std::ifstream in;
    size_t offset = 0;
    std::string path;

    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw FormatError("cannot open '" + p + "' for reading");
    }
    void bytes(void* p, size_t n) {
        in.read(static_cast<char*>(p), std::streamsize(n));
        if (size_t(in.gcount()) != n) {
            throw FormatError("'" + path + "': truncated at byte offset " +
                              std::to_string(offset + size_t(in.gcount())));
        }
        offset += n;
    }
    uint32_t u32() {
        uint32_t v;
        bytes(&v, 4);
        return v;
    }
    uint64_t u64() {
        uint64_t v;
        bytes(&v, 8);
        return v;
    }
    bool at_eof() {
        in.peek();
        return in.eof();
    }
};

}  // namespace

const std::string& Checkpoint::require_meta(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("checkpoint metadata missing key '" + key + "'");
    return it->second;
}

const Tensor& Checkpoint::require_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return t;
    }
    throw FormatError("checkpoint missing tensor '" + name + "'");
}

bool Checkpoint::has_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return true;
    }
    return false;
}

std::vector<std::string> Checkpoint::domains() const { return split_csv(require_meta("domains")); }

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    if (s.empty()) return out;
    size_t start = 0;
    while (true) {
        const size_t comma = s.find(',', start);
        out.push_back(s.substr(start, comma == std::string::npos ? comma : comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::string join_csv(const std::vector<std::string>& items) {
    std::string out;
    for (size_t i = 0; i < items.size(); ++i) {
        if (i) out += ",";
        out += items[i];
    }
    return out;
}

void write_checkpoint(const Checkpoint& ck, const std::string& path) {
    Writer w(path);
    w.bytes(kMagic, sizeof(kMagic));
    w.u32(ck.version);

    std::string meta_block;
    for (const auto& [k, v] : ck.meta) {
        meta_block += k;
        meta_block += '=';
        meta_block += v;
        meta_block += '\n';
    }
    w.u32(uint32_t(meta_block.size()));
    w.bytes(meta_block.data(), meta_block.size());

    for (const auto& [name, tensor] : ck.tensors) {
        w.u32(uint32_t(name.size()));
        w.bytes(name.data(), name.size());
        w.u32(uint32_t(tensor.rank()));
        for (size_t d : tensor.shape()) w.u64(uint64_t(d));
        w.bytes(tensor.data(), tensor.size() * sizeof(float));
    }
    if (!w.out) throw FormatError("write failed for '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[5];
    r.bytes(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("'" + path + "': bad magic at byte offset 0, expected \"POOL1\"");
    }
    Checkpoint ck;
    ck.version = r.u32();
    if (ck.version != 1) {
        throw FormatError("'" + path + "': unsupported format version " +
                          std::to_string(ck.version));
    }

    const uint32_t meta_len = r.u32();
    std::string meta_block(meta_len, '\0');
    r.bytes(meta_block.data(), meta_len);
    size_t pos = 0;
    while (pos < meta_block.size()) {
        size_t nl = meta_block.find('\n', pos);
        if (nl == std::string::npos) nl = meta_block.size();
        const std::string line = meta_block.substr(pos, nl - pos);
        pos = nl + 1;
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError("'" + path + "': metadata line without '=': " + line);
        }
        ck.meta[line.substr(0, eq)] = line.substr(eq + 1);
    }

    while (!r.at_eof()) {
        const uint32_t name_len = r.u32();
        std::string name(name_len, '\0');
        r.bytes(name.data(), name_len);
        const uint32_t rank = r.u32();
        std::vector<size_t> shape(rank);
        size_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            shape[i] = size_t(r.u64());
            numel *= shape[i];
        }
        const size_t payload_offset = r.offset;
        std::vector<float> data(numel);
        r.bytes(data.data(), numel * sizeof(float));
        for (size_t i = 0; i < numel; ++i) {
            if (!std::isfinite(data[i])) {
                throw FormatError("'" + path + "': non-finite value in tensor '" + name +
                                  "' at byte offset " +
                                  std::to_string(payload_offset + i * sizeof(float)));
            }
        }
        ck.tensors.emplace_back(name, Tensor::from(std::move(shape), std::move(data)));
    }
    return ck;
}

namespace {

std::string layer_name(const std::string& prefix, size_t layer, const char* field) {
    return prefix + ".layer" + std::to_string(layer) + "." + field;
}

}  // namespace

void pack_pool(Checkpoint& ck, const ModelPool& pool) {
    ck.meta["input_dim"] = std::to_string(pool.spec.input_dim);
    std::vector<std::string> widths;
    for (size_t w : pool.spec.layer_widths) widths.push_back(std::to_string(w));
    ck.meta["layer_widths"] = join_csv(widths);
    ck.meta["normalize"] = pool.spec.normalize ? "1" : "0";
    ck.meta["modulator_kind"] = to_string(pool.kind);
    ck.meta["domains"] = join_csv(pool.domain_names);

    for (size_t l = 0; l < pool.theta.layers.size(); ++l) {
        const LayerParams& layer = pool.theta.layers[l];
        ck.tensors.emplace_back(layer_name("theta", l, "weight"), layer.weight);
        ck.tensors.emplace_back(layer_name("theta", l, "bias"), layer.bias);
        if (layer.norm_gamma.defined()) {
            ck.tensors.emplace_back(layer_name("theta", l, "norm_gamma"), layer.norm_gamma);
            ck.tensors.emplace_back(layer_name("theta", l, "norm_beta"), layer.norm_beta);
        }
    }
    for (size_t i = 0; i < pool.modulators.size(); ++i) {
        const Modulator& mod = pool.modulators[i];
        const std::string prefix = "alpha" + std::to_string(i + 1);
        for (size_t l = 0; l < mod.sites.size(); ++l) {
            const Modulator::Site& site = mod.sites[l];
            if (site.adapter.defined()) {
                ck.tensors.emplace_back(layer_name(prefix, l, "adapter"), site.adapter);
            }
            if (site.scale.defined()) {
                ck.tensors.emplace_back(layer_name(prefix, l, "scale"), site.scale);
                ck.tensors.emplace_back(layer_name(prefix, l, "shift"), site.shift);
            }
        }
    }
}

void pack_selector(Checkpoint& ck, const SelectionNetwork& phi) {
    ck.meta["selector_hidden"] = std::to_string(phi.w1.shape()[1]);
    ck.tensors.emplace_back("phi.w1", phi.w1);
    ck.tensors.emplace_back("phi.b1", phi.b1);
    ck.tensors.emplace_back("phi.w2", phi.w2);
    ck.tensors.emplace_back("phi.b2", phi.b2);
}

namespace {

Tensor as_param(const Tensor& stored) {
    Tensor t = Tensor::from(stored.shape(), {stored.values().begin(), stored.values().end()},
                            /*requires_grad=*/true);
    return t;
}

}  // namespace

ModelPool unpack_pool(const Checkpoint& ck) {
    ModelPool pool;
    pool.spec.input_dim = size_t(std::stoull(ck.require_meta("input_dim")));
    for (const std::string& w : split_csv(ck.require_meta("layer_widths"))) {
        pool.spec.layer_widths.push_back(size_t(std::stoull(w)));
    }
    pool.spec.normalize = ck.require_meta("normalize") == "1";
    pool.spec.validate();
    pool.kind = modulator_kind_from(ck.require_meta("modulator_kind"));
    pool.domain_names = ck.domains();

    for (size_t l = 0; l < pool.spec.layer_widths.size(); ++l) {
        LayerParams layer;
        layer.weight = as_param(ck.require_tensor(layer_name("theta", l, "weight")));
        layer.bias = as_param(ck.require_tensor(layer_name("theta", l, "bias")));
        if (pool.spec.normalize) {
            layer.norm_gamma = as_param(ck.require_tensor(layer_name("theta", l, "norm_gamma")));
            layer.norm_beta = as_param(ck.require_tensor(layer_name("theta", l, "norm_beta")));
        }
        pool.theta.layers.push_back(std::move(layer));
    }

    const std::string stage = ck.require_meta("stage");
    if (stage == "base") return pool;  // modulators not trained yet

    for (size_t i = 0; i < pool.domain_names.size(); ++i) {
        Modulator mod;
        mod.kind = pool.kind;
        const std::string prefix = "alpha" + std::to_string(i + 1);
        for (size_t l = 0; l < pool.spec.layer_widths.size(); ++l) {
            Modulator::Site site;
            if (pool.kind == ModulatorKind::Adapter) {
                site.adapter = as_param(ck.require_tensor(layer_name(prefix, l, "adapter")));
            } else if (pool.kind == ModulatorKind::ChannelAffine) {
                site.scale = as_param(ck.require_tensor(layer_name(prefix, l, "scale")));
                site.shift = as_param(ck.require_tensor(layer_name(prefix, l, "shift")));
            }
            mod.sites.push_back(std::move(site));
        }
        pool.modulators.push_back(std::move(mod));
    }
    if (pool.domain_names.size() != pool.modulators.size()) {
        throw FormatError("checkpoint domain list does not match modulator count");
    }
    return pool;
}

std::optional<SelectionNetwork> unpack_selector(const Checkpoint& ck) {
    if (!ck.has_tensor("phi.w1")) return std::nullopt;
    SelectionNetwork phi;
    phi.w1 = as_param(ck.require_tensor("phi.w1"));
    phi.b1 = as_param(ck.require_tensor("phi.b1"));
    phi.w2 = as_param(ck.require_tensor("phi.w2"));
    phi.b2 = as_param(ck.require_tensor("phi.b2"));
    return phi;
}

}  // namespace fspool
