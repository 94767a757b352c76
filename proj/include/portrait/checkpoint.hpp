#pragma once

#include <string>

#include "portrait/training.hpp"

namespace portrait {

// Unified checkpoint container. Layout: magic "HFPC1", little-endian int32
// version, then named sections (refiner, hifinet, vae, unet, config), each as
// [int32 name_len][name][uint64 payload_len][payload][uint32 crc32]. Parameter
// payloads are little-endian float32 blobs in collect() order; the hifinet
// section carries the HiFi-Net parameters followed by the none-adapter
// parameters. The config section holds the full config as JSON.
void save_checkpoint(const std::string& path, ModelState& model);

// Reads only the embedded config (for rebuilding the model shell).
Config load_checkpoint_config(const std::string& path);

// Fills an already-built model; shapes must match the stored config.
// Throws CheckpointNotFound when the file is missing, IOFailure on corruption.
void load_checkpoint(const std::string& path, ModelState& model);

// Convenience: rebuild the model from the stored config and load weights.
ModelState load_checkpoint_state(const std::string& path);

}  // namespace portrait
