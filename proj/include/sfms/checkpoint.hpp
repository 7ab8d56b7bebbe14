#pragma once

// Checkpoint container: a versioned, ordered map from parameter path strings
// to shape-tagged float32 arrays. Optimizer moments and the step counter are
// stored as ordinary entries under reserved "opt/" paths, so a checkpoint is
// sufficient for bitwise training resumption.

#include <string>
#include <utility>
#include <vector>

#include "sfms/mat.hpp"

namespace sfms {

struct CheckpointEntry {
    std::string name;
    Mat<float> value;
};

void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

}  // namespace sfms
