#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "fspool/data.hpp"
#include "fspool/eval.hpp"
#include "fspool/pool.hpp"
#include "fspool/train.hpp"

namespace fspool {

// Flat key=value configuration. Unknown keys are rejected; command-line flags
// override file values.
struct RunConfig {
    std::string data_dir;
    BackboneSpec backbone{16, {64, 64}, true};
    ModulatorKind kind = ModulatorKind::Adapter;
    size_t selector_hidden = 128;
    uint64_t seed = 0;
    size_t split_train = 0;  // 0/0/0 = floor(0.7/0.15/rest) rule
    size_t split_val = 0;
    size_t split_test = 0;
    size_t way = 5;
    size_t shot = 5;
    size_t queries = 10;
    size_t val_episodes = 40;
    TrainConfig base_cfg;
    TrainConfig mod_cfg;
    TrainConfig sel_cfg;
    TrainConfig ipool_cfg;
    size_t eval_episodes = 600;
    size_t adapt_iterations = 100;
    float adapt_lr = 0.01f;
    std::vector<std::string> train_domains;  // empty = every domain in the manifest

    void apply(const std::string& key, const std::string& value);
    // propagates the shared fields (seed, way/shot/query, val_episodes) into
    // the per-stage train configs
    void finalize();
};

RunConfig load_config(const std::string& path);

std::vector<SyntheticDomainSpec> parse_domain_specs(const std::string& path);

// Domain datasets as listed by the manifest, optionally restricted, with the
// class splits derived from (seed, optional explicit sizes) and the digest of
// the entries actually used.
struct LoadedData {
    std::vector<DomainDataset> domains;
    std::vector<ClassSplit> splits;
    std::string digest;
};

LoadedData load_data(const std::string& data_dir, const std::vector<std::string>& restrict_to,
                     uint64_t split_seed, size_t split_train, size_t split_val, size_t split_test);

// --- commands ------------------------------------------------------------------

void cmd_gen_data(const std::string& spec_path, const std::string& out_dir, uint64_t seed,
                  std::ostream* log = nullptr);

// stage is "base", "modulators" or "selector"; earlier stages must have run.
void cmd_train(const std::string& stage, const RunConfig& cfg, const std::string& in_ckpt,
               const std::string& out_ckpt, std::ostream* log = nullptr);

struct EvalFlags {
    std::string method = "proto";
    std::string split = "test";
    size_t episodes = 600;
    size_t way = 5;
    size_t shot = 5;
    size_t queries = 10;
    uint64_t seed = 0;
    bool further_adapt = false;
    std::string holdout;  // non-empty selects the unseen protocol
};

EvalReport cmd_eval(const RunConfig& cfg, const std::string& ckpt_path, const EvalFlags& flags,
                    const std::string& report_path, std::ostream* log = nullptr);

void cmd_contributions(const RunConfig& cfg, const std::string& ckpt_path, const EvalFlags& flags,
                       const std::string& report_path, std::ostream* log = nullptr);

// Runs the registered gradient checks; returns 0 when every case passes.
int cmd_gradcheck(std::ostream& out);

// Full argv interface; maps errors to exit codes (1 verification, 2 usage or
// config, 3 format).
int run_cli(int argc, const char* const* argv);

}  // namespace fspool
