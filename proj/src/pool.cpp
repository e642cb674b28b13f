#include "fspool/pool.hpp"

#include <cmath>

#include "fspool/error.hpp"

namespace fspool {

const char* to_string(ModulatorKind kind) {
    switch (kind) {
        case ModulatorKind::Identity: return "identity";
        case ModulatorKind::Adapter: return "adapter";
        case ModulatorKind::ChannelAffine: return "channel_affine";
    }
    return "?";
}

ModulatorKind modulator_kind_from(const std::string& name) {
    if (name == "identity") return ModulatorKind::Identity;
    if (name == "adapter") return ModulatorKind::Adapter;
    if (name == "channel_affine") return ModulatorKind::ChannelAffine;
    throw ConfigError("unknown modulator kind '" + name + "'");
}

void BackboneSpec::validate() const {
    if (input_dim == 0) throw ConfigError("backbone input_dim must be positive");
    if (layer_widths.empty()) throw ConfigError("backbone needs at least one layer");
    for (size_t w : layer_widths) {
        if (w == 0) throw ConfigError("backbone layer widths must be positive");
    }
}

std::vector<Tensor> BaseParams::all() const {
    std::vector<Tensor> out;
    for (const LayerParams& l : layers) {
        out.push_back(l.weight);
        out.push_back(l.bias);
        if (l.norm_gamma.defined()) {
            out.push_back(l.norm_gamma);
            out.push_back(l.norm_beta);
        }
    }
    return out;
}

std::vector<Tensor> Modulator::params() const {
    std::vector<Tensor> out;
    for (const Site& s : sites) {
        if (s.adapter.defined()) out.push_back(s.adapter);
        if (s.scale.defined()) {
            out.push_back(s.scale);
            out.push_back(s.shift);
        }
    }
    return out;
}

std::vector<Tensor> SelectionNetwork::params() const { return {w1, b1, w2, b2}; }

std::vector<Tensor> FineTuneHead::params() const { return {weight, bias}; }

Tensor embed(const Tensor& x, const ModelPool& pool, size_t model_index) {
    if (model_index >= pool.model_count()) {
        throw IndexError("embed: model index " + std::to_string(model_index) +
                         " out of range for pool of " + std::to_string(pool.model_count()) +
                         " models");
    }
    const Modulator* mod = model_index == 0 ? nullptr : &pool.modulators[model_index - 1];
    Tensor h = x;
    const size_t n_layers = pool.spec.layer_widths.size();
    for (size_t l = 0; l < n_layers; ++l) {
        const LayerParams& layer = pool.theta.layers[l];
        h = add_rowvec(matmul(h, layer.weight), layer.bias);
        if (pool.spec.normalize) {
            h = layer_norm(h, layer.norm_gamma, layer.norm_beta);
        }
        if (mod) {
            const Modulator::Site& site = mod->sites[l];
            switch (mod->kind) {
                case ModulatorKind::Identity:
                    break;
                case ModulatorKind::Adapter:
                    h = add(h, matmul(h, site.adapter));
                    break;
                case ModulatorKind::ChannelAffine:
                    h = add_rowvec(mul_rowvec(h, site.scale), site.shift);
                    break;
            }
        }
        if (l + 1 != n_layers) h = relu(h);
    }
    return h;
}

Tensor select_logits(const Tensor& z_task, const SelectionNetwork& phi) {
    Tensor z = z_task.rank() == 1 ? reshape(z_task, {1, z_task.shape()[0]}) : z_task;
    if (z.shape()[1] != phi.w1.shape()[0]) {
        throw DimensionError("select_logits: task representation " + shape_string(z.shape()) +
                             " vs selector input " + shape_string(phi.w1.shape()));
    }
    Tensor hidden = relu(add_rowvec(matmul(z, phi.w1), phi.b1));
    Tensor logits = add_rowvec(matmul(hidden, phi.w2), phi.b2);
    return reshape(logits, {phi.output_arity()});
}

size_t count_modulator_params(std::span<const size_t> insertion_widths, ModulatorKind kind) {
    size_t total = 0;
    for (size_t w : insertion_widths) {
        if (w == 0) throw ConfigError("insertion widths must be positive");
        switch (kind) {
            case ModulatorKind::Identity: break;
            case ModulatorKind::Adapter: total += w * w; break;
            case ModulatorKind::ChannelAffine: total += 2 * w; break;
        }
    }
    return total;
}

Modulator init_modulator(const BackboneSpec& spec, ModulatorKind kind) {
    spec.validate();
    if (kind == ModulatorKind::Identity) {
        throw ConfigError("init_modulator: identity carries no parameters");
    }
    Modulator m;
    m.kind = kind;
    for (size_t w : spec.layer_widths) {
        Modulator::Site site;
        if (kind == ModulatorKind::Adapter) {
            site.adapter = Tensor::zeros({w, w}, /*requires_grad=*/true);
        } else {
            site.scale = Tensor::full({w}, 1.0f, /*requires_grad=*/true);
            site.shift = Tensor::zeros({w}, /*requires_grad=*/true);
        }
        m.sites.push_back(std::move(site));
    }
    return m;
}

namespace {

Tensor xavier_uniform(size_t fan_in, size_t fan_out, Rng& rng) {
    const float limit = std::sqrt(6.0f / float(fan_in + fan_out));
    std::vector<float> data(fan_in * fan_out);
    for (float& x : data) x = rng.uniform_f32(-limit, limit);
    return Tensor::from({fan_in, fan_out}, std::move(data), /*requires_grad=*/true);
}

}  // namespace

BaseParams init_base(const BackboneSpec& spec, Rng& rng) {
    spec.validate();
    BaseParams theta;
    size_t in = spec.input_dim;
    for (size_t w : spec.layer_widths) {
        LayerParams layer;
        layer.weight = xavier_uniform(in, w, rng);
        layer.bias = Tensor::zeros({w}, /*requires_grad=*/true);
        if (spec.normalize) {
            layer.norm_gamma = Tensor::full({w}, 1.0f, /*requires_grad=*/true);
            layer.norm_beta = Tensor::zeros({w}, /*requires_grad=*/true);
        }
        theta.layers.push_back(std::move(layer));
        in = w;
    }
    return theta;
}

SelectionNetwork init_selector(size_t embedding_dim, size_t hidden, size_t n_modulators,
                               Rng& rng) {
    SelectionNetwork phi;
    phi.w1 = xavier_uniform(embedding_dim, hidden, rng);
    phi.b1 = Tensor::zeros({hidden}, /*requires_grad=*/true);
    phi.w2 = xavier_uniform(hidden, n_modulators + 1, rng);
    phi.b2 = Tensor::zeros({n_modulators + 1}, /*requires_grad=*/true);
    return phi;
}

FineTuneHead init_head(size_t embedding_dim, size_t n_way) {
    FineTuneHead head;
    head.weight = Tensor::zeros({embedding_dim, n_way}, /*requires_grad=*/true);
    head.bias = Tensor::zeros({n_way}, /*requires_grad=*/true);
    return head;
}

}  // namespace fspool
