#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fspool/pool.hpp"
#include "fspool/tensor.hpp"

namespace fspool {

// POOL1 container: magic "POOL1", u32 LE format version, length-prefixed
// key=value metadata block, then named tensor records
// (u32 name length + name, u32 rank, u64 dims, f32 LE payload).
// Written and parsed byte-exactly; round trips are bitwise.
struct Checkpoint {
    uint32_t version = 1;
    std::map<std::string, std::string> meta;  // sorted -> deterministic bytes
    std::vector<std::pair<std::string, Tensor>> tensors;

    const std::string& require_meta(const std::string& key) const;
    const Tensor& require_tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const;

    // Convenience accessors over metadata.
    std::string stage() const { return require_meta("stage"); }
    std::vector<std::string> domains() const;
};

void write_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

// Pool/selector <-> checkpoint packing. Metadata not owned by the pool
// (stage, seed, digests) is supplied/kept by the caller.
void pack_pool(Checkpoint& ck, const ModelPool& pool);
void pack_selector(Checkpoint& ck, const SelectionNetwork& phi);
ModelPool unpack_pool(const Checkpoint& ck);
std::optional<SelectionNetwork> unpack_selector(const Checkpoint& ck);

std::vector<std::string> split_csv(const std::string& s);
std::string join_csv(const std::vector<std::string>& items);

}  // namespace fspool
