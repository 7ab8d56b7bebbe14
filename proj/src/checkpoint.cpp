#include "sfms/checkpoint.hpp"

#include "sfms/binio.hpp"
#include "sfms/common.hpp"

namespace sfms {

namespace {
constexpr char kMagic[4] = {'S', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
    std::string out;
    out.append(kMagic, 4);
    binio::put_u32(out, kVersion);
    binio::put_u32(out, static_cast<std::uint32_t>(entries.size()));
    for (const CheckpointEntry& e : entries) {
        if (!e.value.all_finite())
            throw ValidationError("checkpoint entry not finite: " + e.name);
        binio::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out.append(e.name);
        binio::put_u32(out, static_cast<std::uint32_t>(e.value.rows));
        binio::put_u32(out, static_cast<std::uint32_t>(e.value.cols));
        for (float v : e.value.a) binio::put_f32(out, v);
    }
    binio::write_file(path, out);
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
    binio::Reader r(binio::read_file(path), path);
    std::string magic = r.bytes(4, "magic");
    if (magic != std::string(kMagic, 4))
        throw ParseError(path + ": bad magic (expected SFCK)", 0);
    std::uint32_t version = r.u32("version");
    if (version != kVersion)
        throw ParseError(path + ": unsupported version " + std::to_string(version), 4);
    std::uint32_t count = r.u32("entry count");
    std::vector<CheckpointEntry> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t name_len = r.u32("name length");
        std::string name = r.bytes(name_len, "name");
        std::uint32_t rows = r.u32("rows");
        std::uint32_t cols = r.u32("cols");
        if (rows == 0 || cols == 0)
            throw ParseError(path + ": zero-sized entry " + name, r.offset() - 8);
        Mat<float> m(static_cast<int>(rows), static_cast<int>(cols));
        r.f32_block(m.a.data(), m.size(), "entry payload");
        entries.push_back({std::move(name), std::move(m)});
    }
    r.expect_end();
    return entries;
}

}  // namespace sfms
