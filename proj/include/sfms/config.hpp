#pragma once

// Flat key = value configuration files. '#' starts a comment, blank lines are
// skipped, keys may appear once. Typed getters record which keys were read so
// a misspelled key is reported by name instead of being silently ignored.

#include <map>
#include <set>
#include <string>

#include "sfms/common.hpp"

namespace sfms {

class KvConfig {
  public:
    static KvConfig parse_text(const std::string& text);
    static KvConfig load(const std::string& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback);
    long get_long(const std::string& key, long fallback);
    int get_int(const std::string& key, int fallback);
    double get_double(const std::string& key, double fallback);
    bool get_bool(const std::string& key, bool fallback);

    // Throws ParseError naming every key that no getter asked for.
    void reject_unknown_keys() const;

  private:
    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
    std::string source_;  // path or "<text>", for error messages
};

}  // namespace sfms
