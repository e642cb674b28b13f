#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fspool/rng.hpp"

namespace fspool {

// One domain: named dataset of classes, each a list of feature vectors.
struct DomainDataset {
    std::string name;
    size_t feature_dim = 0;
    std::vector<std::vector<std::vector<float>>> classes;  // [class][example][dim]

    size_t class_count() const { return classes.size(); }
    void validate() const;
};

enum class SplitPart { Train, Val, Test };

const char* to_string(SplitPart part);
SplitPart split_part_from(const std::string& name);

struct ClassSplit {
    std::vector<size_t> train;
    std::vector<size_t> val;
    std::vector<size_t> test;

    std::span<const size_t> part(SplitPart p) const;
};

struct Example {
    std::vector<float> x;
    size_t label = 0;
};

// The part of an episode inference methods are allowed to see: no provenance.
struct EpisodeData {
    size_t way = 0;
    size_t shot = 0;
    size_t queries_per_class = 0;
    std::vector<Example> support;  // way*shot, labels 0..way-1
    std::vector<Example> query;    // way*queries_per_class
};

// Sampler output; the harness keeps the provenance, methods get .task only.
struct Episode {
    EpisodeData task;
    std::string domain_name;
};

struct AggregateExample {
    std::vector<float> x;
    size_t class_id = 0;
    std::string domain;
};

// Union of all train-split classes across domains under fresh contiguous ids.
struct AggregateDataset {
    std::vector<AggregateExample> examples;
    size_t class_count = 0;
    size_t feature_dim = 0;
};

enum class TransformKind { Rotation, AxisMask, Frequency };

struct DomainTransform {
    TransformKind kind = TransformKind::Rotation;
    std::vector<float> angles;      // rotation: one angle per (2i, 2i+1) plane
    std::vector<size_t> kept_dims;  // axis mask: surviving dimensions
    float freq_amp = 0.0f;          // frequency: x += amp*sin(omega*x + phase)
    float freq_omega = 0.0f;
    float freq_phase = 0.0f;
    std::vector<size_t> freq_dims;  // dimensions the warp touches; empty = all

    void apply(std::vector<float>& x) const;
};

struct SyntheticDomainSpec {
    std::string name;
    size_t feature_dim = 0;
    size_t class_count = 0;
    size_t examples_per_class = 0;
    float cluster_spread = 0.0f;
    DomainTransform transform;
    uint64_t seed = 0;

    void validate() const;
};

// Seeded shuffle, then sizes (floor(0.7*C), floor(0.15*C), remainder).
ClassSplit split_classes(size_t class_count, uint64_t seed);

// Explicit split sizes (must sum to class_count), same seeded shuffle.
ClassSplit split_classes_explicit(size_t class_count, uint64_t seed, size_t n_train, size_t n_val,
                                  size_t n_test);

// N classes without replacement from the split part, K+T examples per class
// without replacement, first K to support. Episode labels follow the sampled
// class order.
Episode sample_episode(const DomainDataset& dataset, const ClassSplit& split, SplitPart part,
                       size_t way, size_t shot, size_t queries, Rng& rng);

AggregateDataset aggregate_classes(std::span<const DomainDataset> domains,
                                   std::span<const ClassSplit> splits);

// Gaussian class clusters pushed through the domain transform; pure in spec.
DomainDataset gen_synthetic_domain(const SyntheticDomainSpec& spec);

// FSDS1 container: magic "FSDS1", u32 version, length-prefixed domain name,
// u32 feature_dim, u32 class_count, then per class a u32 example count and the
// f32 LE payload. Bitwise round trips.
DomainDataset read_dataset(const std::string& path);
void write_dataset(const DomainDataset& dataset, const std::string& path);

}  // namespace fspool
