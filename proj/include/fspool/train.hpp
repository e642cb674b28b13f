#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "fspool/data.hpp"
#include "fspool/pool.hpp"
#include "fspool/tensor.hpp"

namespace fspool {

// Per-stage training knobs. episodes_per_stage is the stage budget: optimizer
// steps for base pretraining, episodes for the episodic stages. Early stopping
// watches a validation metric every eval_every steps and gives up after
// `patience` evaluations without improvement, restoring the best parameters.
struct TrainConfig {
    float lr = 0.001f;
    size_t batch_size = 32;
    size_t episodes_per_stage = 2000;
    size_t eval_every = 200;
    size_t patience = 5;
    size_t val_episodes = 40;
    uint64_t seed = 0;
    size_t way = 5;
    size_t shot = 5;
    size_t queries = 10;

    void validate() const;
};

// Ground-truth label for the selection network: per-model query accuracies and
// the argmax index (ties to the lowest index, so the unmodulated model wins).
struct SelectionLabel {
    size_t best_index = 0;
    std::vector<float> accuracies;
};

// --- episode plumbing --------------------------------------------------------

Tensor support_matrix(const EpisodeData& task);
Tensor query_matrix(const EpisodeData& task);
std::vector<size_t> support_labels(const EpisodeData& task);
std::vector<size_t> query_labels(const EpisodeData& task);

// Row argmax with ties resolved to the lowest index.
size_t argmax_row(std::span<const float> row);

// Nearest-prototype predictions and accuracy for one model, evaluation mode.
std::vector<size_t> nearest_prototype_predictions(const EpisodeData& task, const ModelPool& pool,
                                                  size_t model_index);
float episode_accuracy(const EpisodeData& task, const ModelPool& pool, size_t model_index);

// --- Step 1: base network over the aggregated source classes ----------------

// Cross-entropy on a temporary linear head over global classes; the head is
// discarded and only the embedding parameters are returned.
BaseParams train_base(const AggregateDataset& agg, const BackboneSpec& spec,
                      const TrainConfig& cfg, std::ostream* log = nullptr);

// --- Step 2: per-domain modulators -------------------------------------------

// Mean query cross-entropy against distances to class prototypes built from
// the support set.
Tensor prototypical_loss(const EpisodeData& task, const ModelPool& pool, size_t model_index);

// Optimizes modulator `slot` (1..M) in place on episodes from the domain's
// train split. Base parameters are left untouched.
void train_modulator(const DomainDataset& domain, const ClassSplit& split, ModelPool& pool,
                     size_t slot, const TrainConfig& cfg, std::ostream* log = nullptr);

// --- Step 3: selection network ------------------------------------------------

// Mean support embedding under the unmodulated base network.
Tensor task_representation(const EpisodeData& task, const ModelPool& pool);

// Scores all M+1 models on the episode's queries; argmax accuracy labels.
SelectionLabel best_model_label(const EpisodeData& task, const ModelPool& pool);

SelectionNetwork train_selector(std::span<const DomainDataset> domains,
                                std::span<const ClassSplit> splits, const ModelPool& pool,
                                const TrainConfig& cfg, size_t selector_hidden,
                                std::ostream* log = nullptr);

// --- independent members (Simple-Avg baseline) --------------------------------

// Prototypical episodic training of a standalone network on one domain,
// sharing nothing with the pool.
BaseParams train_protonet_member(const DomainDataset& domain, const ClassSplit& split,
                                 const BackboneSpec& spec, const TrainConfig& cfg,
                                 size_t member_index, std::ostream* log = nullptr);

}  // namespace fspool
