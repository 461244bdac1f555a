#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "mdf/params.hpp"

namespace mdf {

/// On-disk layout:
///   "MDF1" | u64 LE manifest length | manifest (UTF-8 JSON) | fp32 LE arrays
///
/// The manifest maps each tensor name to {shape, dtype, offset, kind}; offsets
/// are byte offsets into the data section and arrays appear in manifest order.
/// An optional "meta" object carries model/run configuration.
inline constexpr char kCheckpointMagic[4] = {'M', 'D', 'F', '1'};

struct Checkpoint {
    ParamStore store;
    nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const ParamStore& store, const nlohmann::json& meta = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mdf
