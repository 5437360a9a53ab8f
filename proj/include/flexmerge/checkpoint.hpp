#pragma once
// Bit-exact persistence: one raw little-endian float32 blob plus a JSON
// manifest describing every tensor (name, shape, offset, role, trainable) and
// a SHA-256 fingerprint over config + tensor table + blob. Saves are atomic
// (temp files renamed into place).
#include <filesystem>
#include <string>

#include "flexmerge/branch.hpp"
#include "flexmerge/model.hpp"

namespace flexmerge {

// Returns the checkpoint fingerprint.
std::string save_model(const MoeModel& m, const std::filesystem::path& dir);
MoeModel load_model(const std::filesystem::path& dir);

std::string save_bundle(const ExpertBundle& b, const std::filesystem::path& dir);
ExpertBundle load_bundle(const std::filesystem::path& dir);

// Reads just the stored fingerprint (no blob verification).
std::string stored_fingerprint(const std::filesystem::path& dir);

// "expert_ffn", "router_row", or "shared" from the tensor name.
std::string tensor_role(const std::string& name);

} // namespace flexmerge
