#pragma once

#include <string>

#include <json.hpp>

#include "mpq/model.hpp"

namespace mpq {

// MPQ1 checkpoint: 4-byte magic "MPQ1", uint32 little-endian header length,
// UTF-8 JSON header, then contiguous little-endian float64 blobs in manifest
// order. The header carries the model config, a tensor manifest with byte
// offsets, and any caller-supplied extra fields (e.g. the run config or
// quantization parameters). Readers reject unknown magic and truncated blobs.

void save_checkpoint(const std::string& path, const ToyViT& m,
                     const nlohmann::ordered_json& extra = nlohmann::ordered_json::object());

struct LoadedCheckpoint {
    ToyViT model;
    nlohmann::json header;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace mpq
