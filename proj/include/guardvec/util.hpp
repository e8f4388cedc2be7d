// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <json.hpp>
#include <string>
#include <string_view>
#include <vector>

namespace guardvec {

inline constexpr std::string_view kToolkitVersion = "guardvec 0.1.0";

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);  // streaming, throws RuntimeFailure

/// One JSON object per line on stderr: {"ts", "level", "event", ...fields}.
void log_line(std::string_view level, std::string_view event,
              const nlohmann::json& fields = nlohmann::json::object());

/// Reproducibility record written alongside every output: the full config,
/// its hash, a digest per input file, and the toolkit version. The creation
/// timestamp lives here and nowhere else.
nlohmann::json build_manifest(const nlohmann::json& config,
                              const std::vector<std::filesystem::path>& inputs);

/// Conventional manifest location for an output file.
std::filesystem::path manifest_path_for(const std::filesystem::path& output);

void write_manifest(const nlohmann::json& manifest, const std::filesystem::path& path);

}  // namespace guardvec
