#pragma once

#include <map>
#include <string>

namespace difl {

// Flat "key = value" text, one pair per line; '#' starts a comment.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text);
std::string format_key_values(const KeyValues& kv);

KeyValues read_key_values_file(const std::string& path);

int64_t kv_int(const KeyValues& kv, const std::string& key, int64_t fallback);
double kv_real(const KeyValues& kv, const std::string& key, double fallback);
std::string kv_string(const KeyValues& kv, const std::string& key, const std::string& fallback);
bool kv_bool(const KeyValues& kv, const std::string& key, bool fallback);

}  // namespace difl
