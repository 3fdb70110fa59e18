#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mapfuse/common.hpp"

namespace mapfuse {

// Dense class-id grid; 255 marks pixels without ground truth.
struct LabelMap {
    static constexpr uint8_t kUndefined = 255;

    int height = 0, width = 0;
    std::vector<uint8_t> values;

    LabelMap() = default;
    LabelMap(int h, int w, uint8_t fill = 0)
        : height(h), width(w), values(static_cast<size_t>(h) * w, fill) {}

    uint8_t& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }
    int64_t size() const { return static_cast<int64_t>(height) * width; }
};

// CHW float raster.
struct MultiChannelRaster {
    int channels = 0, height = 0, width = 0;
    std::vector<float> data;

    MultiChannelRaster() = default;
    MultiChannelRaster(int c, int h, int w, float fill = 0.0f)
        : channels(c), height(h), width(w), data(static_cast<size_t>(c) * h * w, fill) {}

    float& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    float* channel(int c) { return data.data() + static_cast<size_t>(c) * height * width; }
    const float* channel(int c) const {
        return data.data() + static_cast<size_t>(c) * height * width;
    }
    int64_t plane_size() const { return static_cast<int64_t>(height) * width; }
};

enum class Encoding { Binary, Sdt };

inline std::string encoding_name(Encoding e) { return e == Encoding::Binary ? "binary" : "sdt"; }
inline Encoding encoding_from_name(const std::string& s) {
    if (s == "binary") return Encoding::Binary;
    if (s == "sdt") return Encoding::Sdt;
    throw UsageError("unknown encoding: " + s);
}

// Per-theme binary masks derived from vector annotations, all sharing one
// grid. `encoding` records how the set is meant to enter the network.
struct MapLayerSet {
    std::vector<std::string> layer_names;
    int height = 0, width = 0;
    std::vector<std::vector<uint8_t>> masks;  // 0/1 per layer
    Encoding encoding = Encoding::Binary;

    static std::vector<std::string> default_layer_names() {
        return {"roads", "buildings", "vegetation", "water"};
    }

    int layer_count() const { return static_cast<int>(layer_names.size()); }
};

// ---------------------------------------------------------------------------
// Raster file format: magic "MFR1", u8 dtype (0=f32, 1=u8), u8 rank,
// little-endian u32 dims, raw payload.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open raster file: " + path.string());
    return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                      std::istreambuf_iterator<char>());
}

struct RasterHeader {
    uint8_t dtype = 0;
    std::vector<uint32_t> dims;
    size_t payload_offset = 0;
    int64_t numel = 1;
};

inline RasterHeader parse_raster_header(const std::vector<unsigned char>& raw,
                                        const std::string& origin) {
    if (raw.size() < 6 || std::string(raw.begin(), raw.begin() + 4) != "MFR1")
        throw FormatError("bad raster magic in " + origin);
    RasterHeader h;
    h.dtype = raw[4];
    if (h.dtype > 1) throw FormatError("unknown raster dtype in " + origin);
    const uint8_t rank = raw[5];
    size_t pos = 6;
    for (uint8_t i = 0; i < rank; ++i) {
        if (pos + 4 > raw.size()) throw FormatError("truncated raster header in " + origin);
        const uint32_t d = get_u32_le(raw.data() + pos);
        pos += 4;
        if (d == 0 || d > (1u << 28)) throw FormatError("raster dim out of range in " + origin);
        h.numel *= d;
        if (h.numel > (int64_t(1) << 31)) throw FormatError("raster too large in " + origin);
        h.dims.push_back(d);
    }
    h.payload_offset = pos;
    const size_t elem = h.dtype == 0 ? 4 : 1;
    if (raw.size() != pos + static_cast<size_t>(h.numel) * elem)
        throw FormatError("raster payload size mismatch in " + origin);
    return h;
}

inline void write_bytes(const std::filesystem::path& path, const std::string& buf) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FormatError("write failed: " + path.string());
}

}  // namespace detail

inline void write_raster(const MultiChannelRaster& r, const std::filesystem::path& path) {
    std::string buf;
    buf += "MFR1";
    buf.push_back(0);  // dtype f32
    buf.push_back(3);  // rank
    put_u32_le(buf, static_cast<uint32_t>(r.channels));
    put_u32_le(buf, static_cast<uint32_t>(r.height));
    put_u32_le(buf, static_cast<uint32_t>(r.width));
    for (float f : r.data) put_f32_le(buf, f);
    detail::write_bytes(path, buf);
}

inline MultiChannelRaster read_raster(const std::filesystem::path& path) {
    const auto raw = detail::read_file_bytes(path);
    const auto h = detail::parse_raster_header(raw, path.string());
    if (h.dtype != 0 || h.dims.size() != 3)
        throw FormatError("expected f32 rank-3 raster in " + path.string());
    MultiChannelRaster r(static_cast<int>(h.dims[0]), static_cast<int>(h.dims[1]),
                         static_cast<int>(h.dims[2]));
    for (int64_t i = 0; i < h.numel; ++i)
        r.data[static_cast<size_t>(i)] = get_f32_le(raw.data() + h.payload_offset + 4 * i);
    return r;
}

inline void write_labels(const LabelMap& m, const std::filesystem::path& path) {
    std::string buf;
    buf += "MFR1";
    buf.push_back(1);  // dtype u8
    buf.push_back(2);  // rank
    put_u32_le(buf, static_cast<uint32_t>(m.height));
    put_u32_le(buf, static_cast<uint32_t>(m.width));
    buf.append(reinterpret_cast<const char*>(m.values.data()), m.values.size());
    detail::write_bytes(path, buf);
}

inline LabelMap read_labels(const std::filesystem::path& path) {
    const auto raw = detail::read_file_bytes(path);
    const auto h = detail::parse_raster_header(raw, path.string());
    if (h.dtype != 1 || h.dims.size() != 2)
        throw FormatError("expected u8 rank-2 label map in " + path.string());
    LabelMap m(static_cast<int>(h.dims[0]), static_cast<int>(h.dims[1]));
    std::copy(raw.begin() + static_cast<ptrdiff_t>(h.payload_offset), raw.end(), m.values.begin());
    return m;
}

// Binary layer masks stored as u8 rank-2 rasters.
inline void write_mask(const std::vector<uint8_t>& mask, int h, int w,
                       const std::filesystem::path& path) {
    LabelMap m(h, w);
    m.values = mask;
    write_labels(m, path);
}

inline std::vector<uint8_t> read_mask(const std::filesystem::path& path, int& h, int& w) {
    LabelMap m = read_labels(path);
    h = m.height;
    w = m.width;
    return m.values;
}

}  // namespace mapfuse
