#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "impact/model.hpp"
#include "impact/tensor.hpp"

namespace impact {

// Archive layout: 16-byte header (8-byte magic, u32 version, u32 manifest
// length), then a JSON manifest mapping tensor name -> {shape, dtype "f32",
// offset, nbytes} plus free-form "meta", then one little-endian f32 blob.
// Offsets are relative to the blob start, tensors packed contiguously in
// name order, so file size = 16 + manifest length + sum of nbytes.
struct Archive {
    std::map<std::string, Tensor> tensors;
    nlohmann::json meta;
};

void save_archive(const std::string& path, const std::map<std::string, Tensor>& tensors,
                  const nlohmann::json& meta = {});
Archive load_archive(const std::string& path);

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

void save_model(const VitModel& model, const std::string& path);
VitModel load_model(const std::string& path);

}  // namespace impact
