#pragma once

// Flat tensor archive used for every checkpoint.
//
// Layout: 8-byte magic "RCTARCH1", little-endian u64 index length, UTF-8 JSON
// index [{name, shape, dtype, offset, nbytes}], then the raw little-endian
// float32 blob. Offsets are relative to the blob start. Identical parameters
// always serialize to identical bytes, so the archive hash is a content hash.

#include <filesystem>
#include <string>

#include "ragcap/ag/layers.hpp"

namespace ragcap::ag {

std::string serialize_params(const ParamList<float>& params);
/// Copies archive values into `params`, matching by name and shape.
void deserialize_params(const std::string& bytes, const ParamList<float>& params);

void save_params(const std::filesystem::path& path, const ParamList<float>& params);
void load_params(const std::filesystem::path& path, const ParamList<float>& params);

std::string sha256_hex(const std::string& bytes);
/// SHA-256 of the serialized archive.
std::string params_hash(const ParamList<float>& params);

}  // namespace ragcap::ag
