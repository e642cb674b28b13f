#include "fspool/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "fspool/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "dataset I/O assumes a little-endian host");

namespace fspool {

void DomainDataset::validate() const {
    if (name.empty()) throw ContractError("dataset needs a name");
    if (feature_dim == 0) throw ContractError("dataset '" + name + "': feature_dim must be positive");
    if (classes.empty()) throw ContractError("dataset '" + name + "': no classes");
    for (size_t c = 0; c < classes.size(); ++c) {
        if (classes[c].empty()) {
            throw ContractError("dataset '" + name + "': class " + std::to_string(c) +
                                " has no examples");
        }
        for (const auto& x : classes[c]) {
            if (x.size() != feature_dim) {
                throw ContractError("dataset '" + name + "': class " + std::to_string(c) +
                                    " example with " + std::to_string(x.size()) +
                                    " features, expected " + std::to_string(feature_dim));
            }
            for (float v : x) {
                if (!std::isfinite(v)) {
                    throw ContractError("dataset '" + name + "': non-finite feature value");
                }
            }
        }
    }
}

const char* to_string(SplitPart part) {
    switch (part) {
        case SplitPart::Train: return "train";
        case SplitPart::Val: return "val";
        case SplitPart::Test: return "test";
    }
    return "?";
}

SplitPart split_part_from(const std::string& name) {
    if (name == "train") return SplitPart::Train;
    if (name == "val") return SplitPart::Val;
    if (name == "test") return SplitPart::Test;
    throw ConfigError("unknown split part '" + name + "'");
}

std::span<const size_t> ClassSplit::part(SplitPart p) const {
    switch (p) {
        case SplitPart::Train: return train;
        case SplitPart::Val: return val;
        case SplitPart::Test: return test;
    }
    return {};
}

ClassSplit split_classes(size_t class_count, uint64_t seed) {
    if (class_count < 3) {
        throw CapacityError("split_classes: need at least 3 classes, got " +
                            std::to_string(class_count));
    }
    // integer arithmetic keeps floor(0.7*C) and floor(0.15*C) exact
    const size_t n_train = class_count * 7 / 10;
    const size_t n_val = class_count * 15 / 100;
    return split_classes_explicit(class_count, seed, n_train, n_val,
                                  class_count - n_train - n_val);
}

ClassSplit split_classes_explicit(size_t class_count, uint64_t seed, size_t n_train, size_t n_val,
                                  size_t n_test) {
    if (n_train + n_val + n_test != class_count) {
        throw ConfigError("split sizes " + std::to_string(n_train) + "+" + std::to_string(n_val) +
                          "+" + std::to_string(n_test) + " do not sum to " +
                          std::to_string(class_count) + " classes");
    }
    std::vector<size_t> ids(class_count);
    std::iota(ids.begin(), ids.end(), size_t{0});
    Rng rng(seed);
    rng.shuffle(ids);
    ClassSplit split;
    split.train.assign(ids.begin(), ids.begin() + ptrdiff_t(n_train));
    split.val.assign(ids.begin() + ptrdiff_t(n_train), ids.begin() + ptrdiff_t(n_train + n_val));
    split.test.assign(ids.begin() + ptrdiff_t(n_train + n_val), ids.end());
    return split;
}

Episode sample_episode(const DomainDataset& dataset, const ClassSplit& split, SplitPart part,
                       size_t way, size_t shot, size_t queries, Rng& rng) {
    std::span<const size_t> pool = split.part(part);
    if (pool.size() < way) {
        throw CapacityError("sample_episode: " + dataset.name + " " + to_string(part) +
                            " split has " + std::to_string(pool.size()) + " classes, need " +
                            std::to_string(way) + " (short by " +
                            std::to_string(way - pool.size()) + ")");
    }
    std::vector<size_t> class_ids(pool.begin(), pool.end());
    rng.partial_shuffle(class_ids, way);
    class_ids.resize(way);

    Episode ep;
    ep.domain_name = dataset.name;
    ep.task.way = way;
    ep.task.shot = shot;
    ep.task.queries_per_class = queries;
    const size_t need = shot + queries;
    for (size_t label = 0; label < way; ++label) {
        const auto& members = dataset.classes[class_ids[label]];
        if (members.size() < need) {
            throw CapacityError("sample_episode: " + dataset.name + " class " +
                                std::to_string(class_ids[label]) + " has " +
                                std::to_string(members.size()) + " examples, need " +
                                std::to_string(need) + " (short by " +
                                std::to_string(need - members.size()) + ")");
        }
        std::vector<size_t> idx(members.size());
        std::iota(idx.begin(), idx.end(), size_t{0});
        rng.partial_shuffle(idx, need);
        for (size_t i = 0; i < shot; ++i) {
            ep.task.support.push_back({members[idx[i]], label});
        }
        for (size_t i = shot; i < need; ++i) {
            ep.task.query.push_back({members[idx[i]], label});
        }
    }
    return ep;
}

AggregateDataset aggregate_classes(std::span<const DomainDataset> domains,
                                   std::span<const ClassSplit> splits) {
    if (domains.empty()) throw ContractError("aggregate_classes: no domains");
    if (domains.size() != splits.size()) {
        throw ContractError("aggregate_classes: " + std::to_string(domains.size()) +
                            " domains but " + std::to_string(splits.size()) + " splits");
    }
    AggregateDataset agg;
    agg.feature_dim = domains[0].feature_dim;
    for (size_t d = 0; d < domains.size(); ++d) {
        if (domains[d].feature_dim != agg.feature_dim) {
            throw ContractError("aggregate_classes: domain '" + domains[d].name + "' has " +
                                std::to_string(domains[d].feature_dim) +
                                " features, expected " + std::to_string(agg.feature_dim));
        }
        for (size_t class_id : splits[d].train) {
            for (const auto& x : domains[d].classes[class_id]) {
                agg.examples.push_back({x, agg.class_count, domains[d].name});
            }
            agg.class_count++;
        }
    }
    return agg;
}

void DomainTransform::apply(std::vector<float>& x) const {
    switch (kind) {
        case TransformKind::Rotation:
            for (size_t p = 0; p < angles.size(); ++p) {
                const size_t i = 2 * p, j = 2 * p + 1;
                if (j >= x.size()) break;
                const float c = std::cos(angles[p]), s = std::sin(angles[p]);
                const float xi = x[i], xj = x[j];
                x[i] = c * xi - s * xj;
                x[j] = s * xi + c * xj;
            }
            break;
        case TransformKind::AxisMask: {
            std::vector<float> kept(x.size(), 0.0f);
            for (size_t d : kept_dims) {
                if (d < x.size()) kept[d] = x[d];
            }
            x = std::move(kept);
            break;
        }
        case TransformKind::Frequency:
            if (freq_dims.empty()) {
                for (float& v : x) {
                    v += freq_amp * std::sin(freq_omega * v + freq_phase);
                }
            } else {
                for (size_t d : freq_dims) {
                    if (d < x.size()) {
                        x[d] += freq_amp * std::sin(freq_omega * x[d] + freq_phase);
                    }
                }
            }
            break;
    }
}

void SyntheticDomainSpec::validate() const {
    if (name.empty()) throw ConfigError("synthetic domain needs a name");
    if (feature_dim == 0) throw ConfigError("domain '" + name + "': feature_dim must be positive");
    if (class_count < 5) {
        throw ConfigError("domain '" + name + "': class_count must be at least 5, got " +
                          std::to_string(class_count));
    }
    if (examples_per_class == 0) {
        throw ConfigError("domain '" + name + "': examples_per_class must be positive");
    }
    if (cluster_spread < 0.0f) {
        throw ConfigError("domain '" + name + "': cluster_spread must be non-negative");
    }
    if (transform.kind == TransformKind::AxisMask) {
        if (transform.kept_dims.empty()) {
            throw ConfigError("domain '" + name + "': axis mask keeps no dimensions");
        }
        for (size_t d : transform.kept_dims) {
            if (d >= feature_dim) {
                throw ConfigError("domain '" + name + "': kept dimension " + std::to_string(d) +
                                  " out of range");
            }
        }
    }
    if (transform.kind == TransformKind::Rotation &&
        transform.angles.size() > feature_dim / 2) {
        throw ConfigError("domain '" + name + "': " + std::to_string(transform.angles.size()) +
                          " rotation planes need " +
                          std::to_string(2 * transform.angles.size()) + " dimensions");
    }
    if (transform.kind == TransformKind::Frequency) {
        for (size_t d : transform.freq_dims) {
            if (d >= feature_dim) {
                throw ConfigError("domain '" + name + "': warped dimension " + std::to_string(d) +
                                  " out of range");
            }
        }
    }
}

DomainDataset gen_synthetic_domain(const SyntheticDomainSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    DomainDataset ds;
    ds.name = spec.name;
    ds.feature_dim = spec.feature_dim;
    for (size_t c = 0; c < spec.class_count; ++c) {
        std::vector<float> center(spec.feature_dim);
        for (float& v : center) v = float(rng.gaussian());
        std::vector<std::vector<float>> members;
        for (size_t e = 0; e < spec.examples_per_class; ++e) {
            std::vector<float> x(spec.feature_dim);
            for (size_t j = 0; j < spec.feature_dim; ++j) {
                x[j] = center[j] + spec.cluster_spread * float(rng.gaussian());
            }
            spec.transform.apply(x);
            members.push_back(std::move(x));
        }
        ds.classes.push_back(std::move(members));
    }
    ds.validate();
    return ds;
}

namespace {

constexpr char kMagic[5] = {'F', 'S', 'D', 'S', '1'};

}  // namespace

void write_dataset(const DomainDataset& dataset, const std::string& path) {
    dataset.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    auto put = [&](const void* p, size_t n) { out.write(static_cast<const char*>(p), std::streamsize(n)); };
    auto put_u32 = [&](uint32_t v) { put(&v, 4); };

    put(kMagic, sizeof(kMagic));
    put_u32(1);  // version
    put_u32(uint32_t(dataset.name.size()));
    put(dataset.name.data(), dataset.name.size());
    put_u32(uint32_t(dataset.feature_dim));
    put_u32(uint32_t(dataset.classes.size()));
    for (const auto& members : dataset.classes) {
        put_u32(uint32_t(members.size()));
        for (const auto& x : members) put(x.data(), x.size() * sizeof(float));
    }
    if (!out) throw FormatError("write failed for '" + path + "'");
}

DomainDataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "' for reading");
    size_t offset = 0;
    auto need = [&](void* p, size_t n) {
        in.read(static_cast<char*>(p), std::streamsize(n));
        if (size_t(in.gcount()) != n) {
            throw FormatError("'" + path + "': truncated at byte offset " +
                              std::to_string(offset + size_t(in.gcount())));
        }
        offset += n;
    };
    auto get_u32 = [&]() {
        uint32_t v;
        need(&v, 4);
        return v;
    };

    char magic[5];
    need(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("'" + path + "': bad magic at byte offset 0, expected \"FSDS1\"");
    }
    const uint32_t version = get_u32();
    if (version != 1) {
        throw FormatError("'" + path + "': unsupported format version " + std::to_string(version));
    }
    DomainDataset ds;
    const uint32_t name_len = get_u32();
    ds.name.resize(name_len);
    need(ds.name.data(), name_len);
    ds.feature_dim = get_u32();
    const uint32_t class_count = get_u32();
    for (uint32_t c = 0; c < class_count; ++c) {
        const uint32_t n_examples = get_u32();
        if (n_examples == 0) {
            throw FormatError("'" + path + "': class " + std::to_string(c) +
                              " is empty at byte offset " + std::to_string(offset - 4));
        }
        std::vector<std::vector<float>> members(n_examples);
        for (uint32_t e = 0; e < n_examples; ++e) {
            const size_t value_offset = offset;
            members[e].resize(ds.feature_dim);
            need(members[e].data(), ds.feature_dim * sizeof(float));
            for (size_t j = 0; j < ds.feature_dim; ++j) {
                if (!std::isfinite(members[e][j])) {
                    throw FormatError("'" + path + "': non-finite value at byte offset " +
                                      std::to_string(value_offset + j * sizeof(float)));
                }
            }
        }
        ds.classes.push_back(std::move(members));
    }
    in.peek();
    if (!in.eof()) {
        throw FormatError("'" + path + "': trailing bytes at offset " + std::to_string(offset));
    }
    ds.validate();
    return ds;
}

}  // namespace fspool
