#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace vk {

using KeyValues = std::map<std::string, std::string>;

/// Parses "key = value" lines; '#' starts a comment, blank lines are skipped.
KeyValues parse_kv(const std::string& text, const std::string& origin = "<string>");
KeyValues read_kv_file(const std::filesystem::path& path);

double kv_double(const KeyValues& kv, const std::string& key, double fallback);
std::size_t kv_size(const KeyValues& kv, const std::string& key, std::size_t fallback);
std::uint64_t kv_u64(const KeyValues& kv, const std::string& key, std::uint64_t fallback);
bool kv_bool(const KeyValues& kv, const std::string& key, bool fallback);

/// Decimal text that parses back to exactly the same double.
std::string exact_double(double v);

}  // namespace vk
