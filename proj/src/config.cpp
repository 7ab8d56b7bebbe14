#include "sfms/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace sfms {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

KvConfig KvConfig::parse_text(const std::string& text) {
    KvConfig cfg;
    cfg.source_ = "<text>";
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError("config line " + std::to_string(lineno) + ": missing '='", 0);
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ParseError("config line " + std::to_string(lineno) + ": empty key", 0);
        if (cfg.values_.count(key))
            throw ParseError("config line " + std::to_string(lineno) + ": duplicate key '" + key +
                                 "'",
                             0);
        cfg.values_[key] = value;
    }
    return cfg;
}

KvConfig KvConfig::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    KvConfig cfg = parse_text(buf.str());
    cfg.source_ = path;
    return cfg;
}

std::string KvConfig::get_string(const std::string& key, const std::string& fallback) {
    consumed_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

long KvConfig::get_long(const std::string& key, long fallback) {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    char* end = nullptr;
    long v = std::strtol(it->second.c_str(), &end, 10);
    if (end == it->second.c_str() || *end != '\0')
        throw ParseError("config key '" + key + "': expected integer, got '" + it->second + "'", 0);
    return v;
}

int KvConfig::get_int(const std::string& key, int fallback) {
    return static_cast<int>(get_long(key, fallback));
}

double KvConfig::get_double(const std::string& key, double fallback) {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    char* end = nullptr;
    double v = std::strtod(it->second.c_str(), &end);
    if (end == it->second.c_str() || *end != '\0')
        throw ParseError("config key '" + key + "': expected number, got '" + it->second + "'", 0);
    return v;
}

bool KvConfig::get_bool(const std::string& key, bool fallback) {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ParseError("config key '" + key + "': expected boolean, got '" + v + "'", 0);
}

void KvConfig::reject_unknown_keys() const {
    std::string unknown;
    for (const auto& [key, value] : values_) {
        if (!consumed_.count(key)) {
            if (!unknown.empty()) unknown += ", ";
            unknown += "'" + key + "'";
        }
    }
    if (!unknown.empty())
        throw ParseError("unknown config key(s) in " + source_ + ": " + unknown, 0);
}

}  // namespace sfms
