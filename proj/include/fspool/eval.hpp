#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fspool/data.hpp"
#include "fspool/pool.hpp"
#include "fspool/tensor.hpp"

namespace fspool {

enum class Method { Proto, DoS, DoA, SimpleAvg, FineTune };

const char* to_string(Method method);
Method method_from(const std::string& name);

// Embedding models trained per domain with no parameter sharing; the
// Simple-Avg baseline averages their class probabilities.
struct IndependentPool {
    BackboneSpec spec;
    std::vector<BaseParams> members;
    std::vector<std::string> domain_names;
};

// Evaluation-mode forward pass of one embedding model over a batch.
using Embedder = std::function<Tensor(const Tensor&)>;

Embedder pool_embedder(const ModelPool& pool, size_t model_index);
Embedder member_embedder(const BackboneSpec& spec, const BaseParams& theta);

// Per-query class probabilities for one embedding model: row-wise softmax over
// negative squared distances to the support prototypes.
Tensor classify_probs(const EpisodeData& task, const Embedder& embed_fn);

struct DosPrediction {
    std::vector<size_t> predictions;
    size_t chosen_model = 0;
};

// Picks the pool member via the selection network, classifies with it alone.
DosPrediction predict_dos(const EpisodeData& task, const ModelPool& pool,
                          const SelectionNetwork& phi);

// Averages class probabilities over all M+1 pool members.
std::vector<size_t> predict_doa(const EpisodeData& task, const ModelPool& pool);

// Averages class probabilities over the independent members.
std::vector<size_t> predict_simple_avg(const EpisodeData& task, const IndependentPool& ipool);

struct FineTuneResult {
    std::vector<size_t> predictions;
    Tensor query_probs;  // softmax of the trained head's logits
};

// Trains a zero-initialized linear head on the frozen support embeddings with
// Adam and classifies the queries with it.
FineTuneResult fine_tune_linear(const EpisodeData& task, const Embedder& embed_fn,
                                size_t iterations, float lr);

struct EvalSettings {
    Method method = Method::Proto;
    SplitPart split = SplitPart::Test;
    size_t episodes = 600;
    size_t way = 5;
    size_t shot = 5;
    size_t queries = 10;
    uint64_t seed = 0;
    bool further_adapt = false;
    bool unseen = false;
    size_t adapt_iterations = 100;
    float adapt_lr = 0.01f;
};

struct EpisodeResult {
    size_t index = 0;
    std::string domain;
    float accuracy = 0.0f;
    int chosen_model = -1;  // DoS only
};

struct EvalReport {
    std::string method;
    std::vector<std::string> target_domains;
    std::vector<EpisodeResult> episodes;
    float mean = 0.0f;
    float ci95 = 0.0f;  // 1.96 * sample stddev / sqrt(E)
    // per-episode per-model correct counts, averaging methods only
    std::vector<std::vector<size_t>> contributions;
    std::map<std::string, std::string> settings;
};

// Samples episodes uniformly over the target domains (method-independent
// given the seed) and scores them with the requested method. In unseen mode
// every target domain must be absent from `source_domains`.
EvalReport evaluate(const EvalSettings& settings, std::span<const DomainDataset> targets,
                    std::span<const ClassSplit> target_splits, const ModelPool* pool,
                    const SelectionNetwork* phi, const IndependentPool* ipool,
                    std::span<const std::string> source_domains);

// Per-episode, per-model counts of correctly classified queries.
std::vector<std::vector<size_t>> contribution_report(const ModelPool& pool,
                                                     std::span<const EpisodeData> episodes);

// key=value header lines, then the per-episode CSV, then the contributions CSV.
void write_report(const EvalReport& report, const std::string& path);

}  // namespace fspool
