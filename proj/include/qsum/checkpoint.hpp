#pragma once

#include <functional>
#include <string>
#include <vector>

#include "qsum/nn.hpp"

namespace qsum {

// On disk: "QSUM" | u32 version | u32 count | entries | u64 config_hash |
// i32 stage_id, all little-endian. Each entry: u32 name_len | name | u8 dtype
// | u8 rank | u32 dims[rank] | raw values.
struct CkptTensor {
    std::string name;
    DType dtype = DType::f32;
    Shape dims;
    std::vector<unsigned char> raw;

    int64_t count() const { return numel(dims); }
};

struct Checkpoint {
    std::vector<CkptTensor> tensors;  // file order == insertion order
    uint64_t config_hash = 0;
    int32_t stage_id = -1;

    const CkptTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// snapshot the parameters selected by `keep` into a checkpoint
template <class S>
Checkpoint snapshot(const ParamStore<S>& ps, const std::function<bool(const std::string&)>& keep,
                    uint64_t config_hash, int32_t stage_id) {
    Checkpoint c;
    c.config_hash = config_hash;
    c.stage_id = stage_id;
    for (const auto& [name, t] : ps.items()) {
        if (!keep(name)) continue;
        for (S v : t.values())
            if (!std::isfinite(static_cast<double>(v)))
                throw std::runtime_error("checkpoint: non-finite value in parameter '" + name +
                                         "'");
        CkptTensor e;
        e.name = name;
        e.dtype = dtype_of<S>();
        e.dims = t.shape();
        e.raw.resize(sizeof(S) * static_cast<size_t>(t.size()));
        std::memcpy(e.raw.data(), t.data(), e.raw.size());
        c.tensors.push_back(std::move(e));
    }
    return c;
}

// copy checkpoint values into matching parameters; every checkpoint entry
// must exist in the store with identical shape and dtype, while store
// parameters absent from the checkpoint keep their current values
template <class S>
void restore(ParamStore<S>& ps, const Checkpoint& ckpt) {
    for (const auto& e : ckpt.tensors) {
        if (!ps.contains(e.name))
            throw std::runtime_error("checkpoint entry '" + e.name +
                                     "' has no matching parameter (config mismatch?)");
        Tensor<S>& t = ps.get(e.name);
        if (e.dtype != dtype_of<S>())
            throw std::runtime_error("checkpoint entry '" + e.name + "' has the wrong dtype");
        if (e.dims != t.shape())
            throw std::runtime_error("checkpoint entry '" + e.name + "' has shape " +
                                     shape_str(e.dims) + " but the parameter is " +
                                     shape_str(t.shape()));
        std::memcpy(t.data(), e.raw.data(), e.raw.size());
    }
}

}  // namespace qsum
