#pragma once

#include <span>
#include <string>
#include <vector>

#include "fspool/rng.hpp"
#include "fspool/tensor.hpp"

namespace fspool {

enum class ModulatorKind { Identity, Adapter, ChannelAffine };

const char* to_string(ModulatorKind kind);
ModulatorKind modulator_kind_from(const std::string& name);

// Stack of affine layers with optional per-layer normalization. The last width
// is the embedding dimension; every layer is a modulator insertion point.
struct BackboneSpec {
    size_t input_dim = 0;
    std::vector<size_t> layer_widths;
    bool normalize = false;

    size_t embedding_dim() const { return layer_widths.back(); }
    void validate() const;
};

struct LayerParams {
    Tensor weight;      // [in x out]
    Tensor bias;        // [out]
    Tensor norm_gamma;  // [out], defined iff spec.normalize
    Tensor norm_beta;   // [out], defined iff spec.normalize
};

// Shared base parameters (theta).
struct BaseParams {
    std::vector<LayerParams> layers;
    std::vector<Tensor> all() const;
};

// Per-domain modulator (alpha_i). One site per backbone layer.
// Adapter adds a parallel residual map h + h*W (W zero at init);
// ChannelAffine rescales per feature, h*scale + shift (1/0 at init).
// Either way a fresh modulator is an exact identity.
struct Modulator {
    ModulatorKind kind = ModulatorKind::Identity;
    struct Site {
        Tensor adapter;  // [w x w] for Adapter
        Tensor scale;    // [w] for ChannelAffine
        Tensor shift;    // [w] for ChannelAffine
    };
    std::vector<Site> sites;
    std::vector<Tensor> params() const;
};

// M+1 embedding models sharing theta; index 0 is the unmodulated base,
// index i in 1..M applies modulators[i-1] trained on domain_names[i-1].
struct ModelPool {
    BackboneSpec spec;
    BaseParams theta;
    ModulatorKind kind = ModulatorKind::Identity;
    std::vector<Modulator> modulators;
    std::vector<std::string> domain_names;

    size_t model_count() const { return modulators.size() + 1; }
};

// Two-layer MLP mapping a task representation to pool-member logits.
struct SelectionNetwork {
    Tensor w1;  // [d x hidden]
    Tensor b1;  // [hidden]
    Tensor w2;  // [hidden x (M+1)]
    Tensor b2;  // [M+1]

    size_t output_arity() const { return b2.shape()[0]; }
    std::vector<Tensor> params() const;
};

// N-way linear classifier over embeddings, used by the fine-tune baseline and
// further adaptation. Zero-initialized.
struct FineTuneHead {
    Tensor weight;  // [d x n_way]
    Tensor bias;    // [n_way]
    std::vector<Tensor> params() const;
};

// Forward pass of model `model_index` over a [batch x input_dim] matrix.
Tensor embed(const Tensor& x, const ModelPool& pool, size_t model_index);

// layer2(relu(layer1(z_task))). Callers apply log_softmax or argmax.
Tensor select_logits(const Tensor& z_task, const SelectionNetwork& phi);

// ChannelAffine: 2 * sum(widths); Adapter: sum(widths^2); Identity: 0.
size_t count_modulator_params(std::span<const size_t> insertion_widths, ModulatorKind kind);

// Identity-initialized modulator for the given backbone (deterministic).
Modulator init_modulator(const BackboneSpec& spec, ModulatorKind kind);

// Xavier-uniform weights, zero biases, unit normalization affine.
BaseParams init_base(const BackboneSpec& spec, Rng& rng);

SelectionNetwork init_selector(size_t embedding_dim, size_t hidden, size_t n_modulators, Rng& rng);

FineTuneHead init_head(size_t embedding_dim, size_t n_way);

}  // namespace fspool
