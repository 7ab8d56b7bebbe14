#include "sfms/quantizer.hpp"

#include <nlohmann/json.hpp>

#include "sfms/binio.hpp"

namespace sfms::quant {

void write_tokens(const std::string& path, const TokenSequence& tokens) {
    tokens.validate();
    nlohmann::json j;
    j["length"] = tokens.length;
    j["classes"] = tokens.classes;
    j["codebook_kind"] = tokens.codebook_kind == Kind::kVq ? "vq" : "fsq";
    j["codebook_size"] = tokens.codebook_size;
    binio::write_file(path, j.dump(2) + "\n");
}

TokenSequence read_tokens(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(binio::read_file(path));
    } catch (const nlohmann::json::parse_error& err) {
        throw ParseError(path + ": " + err.what(), err.byte);
    }
    TokenSequence tokens;
    tokens.length = j.at("length").get<int>();
    tokens.classes = j.at("classes").get<std::vector<int>>();
    std::string kind = j.at("codebook_kind").get<std::string>();
    if (kind == "vq")
        tokens.codebook_kind = Kind::kVq;
    else if (kind == "fsq")
        tokens.codebook_kind = Kind::kFsq;
    else
        throw ParseError(path + ": unknown codebook kind '" + kind + "'", 0);
    tokens.codebook_size = j.at("codebook_size").get<int>();
    tokens.validate();
    return tokens;
}

}  // namespace sfms::quant
