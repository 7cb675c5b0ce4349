#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "vitkd/layers.hpp"
#include "vitkd/vit.hpp"

namespace vitkd {

// "VKD1" | u32 count | per tensor: u16 name length, name, u8 rank, u32 dims,
// f32 payload | u32 CRC32 of everything before it. All little-endian.
struct Checkpoint {
  NamedTensors tensors;

  const Tensor* find(const std::string& name) const;
};

// The bytes exactly as they are written to disk.
std::string checkpoint_serialize(const Checkpoint& ckpt);
Checkpoint checkpoint_deserialize(const std::string& bytes, const std::string& origin = "<memory>");

void checkpoint_save(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint checkpoint_load(const std::filesystem::path& path);

// Model parameters plus the architecture echo stored as "meta.vit_config".
Checkpoint model_checkpoint(const VisionTransformer& model);
ViTConfig config_from_checkpoint(const Checkpoint& ckpt);
// Rebuilds the architecture and copies every parameter; missing or
// mis-shaped tensors are a FormatError.
std::unique_ptr<VisionTransformer> model_from_checkpoint(const Checkpoint& ckpt);
void load_parameters(VisionTransformer& model, const Checkpoint& ckpt);

}  // namespace vitkd
