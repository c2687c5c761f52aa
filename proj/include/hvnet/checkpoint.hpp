#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "hvnet/network.hpp"
#include "hvnet/optimizer.hpp"

namespace hvnet {

// Training-state block stored after the model tensors so an interrupted run
// can continue exactly where it stopped.
struct CheckpointExtras {
    bool present = false;
    AdamState adam;
    PlateauSchedule schedule;
    int epochs_completed = 0;
};

// Binary format: magic "HVNC", version u32, tensor count u32, then per
// tensor: name length u16, name bytes, dtype u8 (0 = f32, 1 = f64), rank u8,
// extents u32 each, little-endian payload. An optional optimizer block
// (presence u8, then the same framing) follows, and a CRC-32 of every
// preceding byte closes the file. The model config rides along as scalar
// "config.*" tensors so a checkpoint is self-describing.
void checkpoint_save(const Model& model, const CheckpointExtras* extras, int image_size,
                     const std::string& path);

struct LoadedCheckpoint {
    Model model;
    CheckpointExtras extras;
    int image_size = 0;
};

// Validates magic, version, framing and CRC, then rebuilds the model from
// the embedded config and overwrites its tensors bitwise.
LoadedCheckpoint checkpoint_load(const std::string& path);

// Reflected CRC-32 (polynomial 0xEDB88320), the zlib/PNG convention.
std::uint32_t crc32(const void* data, std::size_t length);

} // namespace hvnet
