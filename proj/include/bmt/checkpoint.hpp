#pragma once

#include <string>

#include "bmt/model.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

/// Everything stored in a checkpoint file.
struct Checkpoint {
  TransformerConfig config;
  ParamStore params;
  PackedWeights packed;  ///< weight-binarized tensors stored as sign bits
  ParamStore extras;     ///< e.g. optimizer moments
};

/// Binary layout (little-endian): "BMT1", u32 version, config block, u32
/// tensor count, then per tensor: u32 name length, name, u8 dtype (0 float32,
/// 1 packed bits), u32 rank, u32 dims, payload. Packed payload is u32 bound
/// count, float32 bounds, u64 words. With `packed_export` every
/// weight-binarized matrix is written as bits.
void save_checkpoint(const std::string& path, const Transformer& model, bool packed_export = false,
                     const ParamStore* extras = nullptr);

/// Reads a checkpoint; packed tensors are also expanded to +-B/2 floats.
Checkpoint read_checkpoint(const std::string& path);

/// Rebuilds the model. Packed weights, when present, drive the bit kernels.
Transformer load_checkpoint(const std::string& path);

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
