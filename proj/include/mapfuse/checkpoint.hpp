#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mapfuse/common.hpp"
#include "mapfuse/tensor.hpp"

namespace mapfuse {

// Checkpoint layout: magic "MFW1", little-endian u32 entry count, then per
// entry: u16 name length, UTF-8 name, u8 rank, u32 dims, raw f32 payload.

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

inline void save_checkpoint(const std::filesystem::path& path,
                            const std::vector<CheckpointEntry>& entries) {
    std::string buf;
    buf += "MFW1";
    put_u32_le(buf, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        if (e.name.size() > 0xffff) throw UsageError("checkpoint: name too long: " + e.name);
        if (e.shape.size() > 0xff) throw UsageError("checkpoint: rank too large");
        put_u16_le(buf, static_cast<uint16_t>(e.name.size()));
        buf += e.name;
        buf.push_back(static_cast<char>(e.shape.size()));
        for (int d : e.shape) put_u32_le(buf, static_cast<uint32_t>(d));
        for (float f : e.data) put_f32_le(buf, f);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open checkpoint for writing: " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FormatError("checkpoint write failed: " + path.string());
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path.string());
    std::vector<unsigned char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    size_t pos = 0;
    auto need = [&](size_t bytes) {
        if (pos + bytes > raw.size())
            throw FormatError("truncated checkpoint: " + path.string());
    };
    need(4);
    if (std::string(raw.begin(), raw.begin() + 4) != "MFW1")
        throw FormatError("bad checkpoint magic in " + path.string());
    pos = 4;
    need(4);
    const uint32_t count = get_u32_le(raw.data() + pos);
    pos += 4;
    std::vector<CheckpointEntry> entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        need(2);
        const uint16_t name_len = get_u16_le(raw.data() + pos);
        pos += 2;
        need(name_len);
        e.name.assign(raw.begin() + static_cast<ptrdiff_t>(pos),
                      raw.begin() + static_cast<ptrdiff_t>(pos + name_len));
        pos += name_len;
        need(1);
        const uint8_t rank = raw[pos++];
        int64_t numel = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            need(4);
            const uint32_t dim = get_u32_le(raw.data() + pos);
            pos += 4;
            if (dim == 0 || dim > (1u << 28)) throw FormatError("checkpoint dim out of range");
            numel *= dim;
            if (numel > (int64_t(1) << 33)) throw FormatError("checkpoint tensor too large");
            e.shape.push_back(static_cast<int>(dim));
        }
        need(static_cast<size_t>(numel) * 4);
        e.data.resize(static_cast<size_t>(numel));
        for (int64_t j = 0; j < numel; ++j) {
            e.data[static_cast<size_t>(j)] = get_f32_le(raw.data() + pos);
            pos += 4;
        }
        entries.push_back(std::move(e));
    }
    if (pos != raw.size()) throw FormatError("trailing bytes in checkpoint: " + path.string());
    return entries;
}

}  // namespace mapfuse
