#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>

#include <json.hpp>

namespace m1lab::cli {

// Flat `section.key -> value` settings, ordered so every rendering is stable.
using Config = std::map<std::string, std::string>;

// Line-oriented `section.key = value`; blank lines and lines starting with
// '#' are ignored. Malformed lines and repeated keys are config errors.
Config parse_config_text(std::string_view text);
Config read_config_file(const std::string& path);
std::string render_config(const std::string& command, const Config& config);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

// Human-readable summary of a machine report; a pure function of the JSON.
std::string render_report_text(const nlohmann::ordered_json& report);

// Runs one subcommand. Exit status: 0 success, 1 module error, 2 usage error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace m1lab::cli
