#pragma once

#include <stdexcept>
#include <string>

#include "knnattn/vit.hpp"

namespace knnattn::vit {

// Structural problems with a checkpoint file (bad magic, truncated block,
// manifest mismatch). The CLI maps this to invalid-input.
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Layout: 8-byte magic, little-endian u64 header length, JSON header (model
// config, epoch counter, optimizer flag, tensor manifest with
// names/shapes/offsets), then one raw block of little-endian doubles in
// manifest order, row-major.
void save_checkpoint(const std::string& path, const Model& model, const AdamState* adam,
                     std::size_t epochs_done);

struct LoadedCheckpoint {
    Model model;
    AdamState adam;
    bool has_adam = false;
    std::size_t epochs_done = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace knnattn::vit
