#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "m2m/core/grid.h"
#include "m2m/core/volume.h"
#include "m2m/tape/tape.h"

namespace m2m {

enum class BackendKind { Amortized, FieldBank };

BackendKind parse_backend(const std::string& name);
const char* backend_name(BackendKind kind);

// Encoder-decoder layout: one entry of `channels` per resolution level, each
// halving resolution; the decoder mirrors the encoder with skip
// concatenations and ends in a zero-initialized 3-channel head, so a fresh
// model predicts the identity transform.
struct ArchDescriptor {
    int in_channels = 2;
    std::vector<int> channels = {8, 16, 32};
    int kernel = 3;

    int levels() const { return int(channels.size()); }
    int pool_factor() const { return 1 << (levels() - 1); }
    void validate() const;
};

// Number of scalars across all parameter tensors of `desc`.
std::size_t param_count(const ArchDescriptor& desc);

// Parameters in a fixed, documented order (enc0..encN, decN-1..dec0, head,
// each weight before bias) for the amortized backend, or one stored
// displacement field per ordered pair id for the bank backend.
struct ModelParams {
    BackendKind kind = BackendKind::Amortized;
    ArchDescriptor arch;
    std::vector<std::pair<std::string, Grid<float>>> tensors;

    Shape3 bank_shape{0, 0, 0};
    std::map<std::string, Grid<float>> bank;

    const Grid<float>& tensor(const std::string& name) const;
    Grid<float>& tensor(const std::string& name);
};

ModelParams init_params(const ArchDescriptor& desc, uint64_t seed);
ModelParams init_field_bank(Shape3 field_shape);

void bank_register(ModelParams& params, const std::string& pair_id);
bool bank_has(const ModelParams& params, const std::string& pair_id);
const Grid<float>& bank_get(const ModelParams& params, const std::string& pair_id);
Grid<float>& bank_ref(ModelParams& params, const std::string& pair_id);

// Builds the displacement predictor as a graph. `tensor_leaves` must hold one
// leaf per params.tensors entry, in the same order. `source` and `target` are
// single-channel grids on the same shape, which must be divisible by the
// descriptor's pool factor.
template <typename T>
typename Tape<T>::NodeId build_predict(Tape<T>& t, const ArchDescriptor& desc,
                                       const std::vector<int>& tensor_leaves, int source,
                                       int target);

// Eager convenience wrapper (amortized backend only): casts the volumes to
// model precision, runs the graph, returns a double field on target's grid.
Grid<double> predict_field(const ModelParams& params, const Volume& source, const Volume& target);

// Checkpoint container: magic, version, backend tag, descriptor or bank
// shape, then named float32 blobs, all little-endian.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

// Named-blob layer reused by the optimizer-state sidecar.
void write_named_grids(std::ostream& out,
                       const std::vector<std::pair<std::string, Grid<float>>>& grids);
std::vector<std::pair<std::string, Grid<float>>> read_named_grids(std::istream& in,
                                                                  const std::string& path);

}  // namespace m2m
