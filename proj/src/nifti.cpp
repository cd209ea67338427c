#include "vesselkit/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "vesselkit/error.hpp"

namespace vk::nifti {

namespace {

// Header byte offsets (NIfTI-1).
constexpr std::size_t kOffSizeofHdr = 0;
constexpr std::size_t kOffDim = 40;
constexpr std::size_t kOffDatatype = 70;
constexpr std::size_t kOffBitpix = 72;
constexpr std::size_t kOffPixdim = 76;
constexpr std::size_t kOffVoxOffset = 108;
constexpr std::size_t kOffSclSlope = 112;
constexpr std::size_t kOffSclInter = 116;
constexpr std::size_t kOffXyztUnits = 123;
constexpr std::size_t kOffDescrip = 148;
constexpr std::size_t kDescripLen = 80;
constexpr std::size_t kOffMagic = 344;

constexpr std::string_view kKindTag = "vesselkit:kind=";

std::string at_byte(std::size_t offset) { return " (byte offset " + std::to_string(offset) + ")"; }

template <class T>
T byteswap_value(T v) {
    std::array<std::uint8_t, sizeof(T)> raw{};
    std::memcpy(raw.data(), &v, sizeof(T));
    std::reverse(raw.begin(), raw.end());
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
}

class HeaderReader {
public:
    HeaderReader(std::span<const std::uint8_t> bytes, bool swap) : bytes_(bytes), swap_(swap) {}

    template <class T>
    T get(std::size_t offset) const {
        if (offset + sizeof(T) > bytes_.size()) {
            fail(ErrorCode::format, "header truncated" + at_byte(offset));
        }
        T v;
        std::memcpy(&v, bytes_.data() + offset, sizeof(T));
        return swap_ ? byteswap_value(v) : v;
    }

private:
    std::span<const std::uint8_t> bytes_;
    bool swap_;
};

template <class T>
void put(std::vector<std::uint8_t>& buf, std::size_t offset, T v) {
    static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");
    std::memcpy(buf.data() + offset, &v, sizeof(T));
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::io, "cannot open '" + path.string() + "' for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool is_gzip(std::span<const std::uint8_t> bytes) {
    return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> bytes) {
    z_stream zs{};
    if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) fail(ErrorCode::io, "zlib inflateInit failed");
    zs.next_in = const_cast<Bytef*>(bytes.data());
    zs.avail_in = static_cast<uInt>(bytes.size());
    std::vector<std::uint8_t> out;
    std::array<std::uint8_t, 1 << 16> chunk{};
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        zs.next_out = chunk.data();
        zs.avail_out = static_cast<uInt>(chunk.size());
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            fail(ErrorCode::format, "corrupt gzip stream" + at_byte(zs.total_in));
        }
        out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
        if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
            inflateEnd(&zs);
            fail(ErrorCode::format, "gzip stream truncated" + at_byte(bytes.size()));
        }
    }
    inflateEnd(&zs);
    return out;
}

std::vector<std::uint8_t> gzip(std::span<const std::uint8_t> bytes) {
    z_stream zs{};
    if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 16 + MAX_WBITS, 8,
                     Z_DEFAULT_STRATEGY) != Z_OK) {
        fail(ErrorCode::io, "zlib deflateInit failed");
    }
    std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(bytes.size())));
    zs.next_in = const_cast<Bytef*>(bytes.data());
    zs.avail_in = static_cast<uInt>(bytes.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = deflate(&zs, Z_FINISH);
    deflateEnd(&zs);
    if (rc != Z_STREAM_END) fail(ErrorCode::io, "gzip compression failed");
    out.resize(zs.total_out);
    return out;
}

struct ParsedHeader {
    Dims dims;
    Spacing spacing;
    std::int16_t datatype = 0;
    std::size_t vox_offset = kVoxOffset;
    float slope = 0.0F;
    float inter = 0.0F;
    bool swap = false;
    bool paired = false;  // "ni1": payload lives in a separate .img file
    VolumeKind kind = VolumeKind::intensity;
};

std::size_t bytes_per_voxel(std::int16_t datatype) {
    switch (datatype) {
        case kUint8: return 1;
        case kInt16: return 2;
        case kFloat32: return 4;
        case kFloat64: return 8;
        default:
            fail(ErrorCode::unsupported_type,
                 "NIfTI datatype code " + std::to_string(datatype) +
                     " is not supported (expected 2=uint8, 4=int16, 16=float32, 64=float64)");
    }
}

ParsedHeader parse_header(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kHeaderSize) {
        fail(ErrorCode::format, "file holds " + std::to_string(bytes.size()) +
                                    " bytes, shorter than the 348-byte header" + at_byte(bytes.size()));
    }
    ParsedHeader h;
    std::int32_t sizeof_hdr = 0;
    std::memcpy(&sizeof_hdr, bytes.data() + kOffSizeofHdr, sizeof sizeof_hdr);
    if (sizeof_hdr != static_cast<std::int32_t>(kHeaderSize)) {
        if (byteswap_value(sizeof_hdr) == static_cast<std::int32_t>(kHeaderSize)) {
            h.swap = true;
        } else {
            fail(ErrorCode::format, "sizeof_hdr is " + std::to_string(sizeof_hdr) + ", expected 348" +
                                        at_byte(kOffSizeofHdr));
        }
    }
    const HeaderReader r(bytes, h.swap);

    const char* magic = reinterpret_cast<const char*>(bytes.data() + kOffMagic);
    if (std::memcmp(magic, "n+1\0", 4) == 0) {
        h.paired = false;
    } else if (std::memcmp(magic, "ni1\0", 4) == 0) {
        h.paired = true;
    } else {
        fail(ErrorCode::format, "bad magic, expected \"n+1\\0\" or \"ni1\\0\"" + at_byte(kOffMagic));
    }

    std::array<std::int16_t, 8> dim{};
    for (std::size_t i = 0; i < 8; ++i) dim[i] = r.get<std::int16_t>(kOffDim + 2 * i);
    const int rank = dim[0];
    if (rank < 1 || rank > 7) {
        fail(ErrorCode::format, "dim[0] = " + std::to_string(rank) + " outside 1..7" + at_byte(kOffDim));
    }
    for (int i = 1; i <= rank; ++i) {
        if (dim[i] < 1) {
            fail(ErrorCode::format, "dim[" + std::to_string(i) + "] = " + std::to_string(dim[i]) +
                                        " is not positive" + at_byte(kOffDim + 2 * i));
        }
    }
    for (int i = 4; i <= rank; ++i) {
        if (dim[i] != 1) {
            fail(ErrorCode::rank, "image has rank " + std::to_string(rank) + " with dim[" + std::to_string(i) +
                                      "] = " + std::to_string(dim[i]) + "; only 3D volumes are supported");
        }
    }
    auto dim_or_one = [&](int i) { return i <= rank ? static_cast<std::size_t>(dim[i]) : std::size_t{1}; };
    h.dims = {dim_or_one(1), dim_or_one(2), dim_or_one(3)};

    h.datatype = r.get<std::int16_t>(kOffDatatype);
    const std::size_t bpv = bytes_per_voxel(h.datatype);
    const auto bitpix = r.get<std::int16_t>(kOffBitpix);
    if (bitpix != 0 && static_cast<std::size_t>(bitpix) != 8 * bpv) {
        fail(ErrorCode::format, "bitpix " + std::to_string(bitpix) + " inconsistent with datatype " +
                                    std::to_string(h.datatype) + at_byte(kOffBitpix));
    }

    // pixdim beyond the declared rank is often garbage, so only used axes are read
    auto pix = [&](int i) {
        const float p = i <= rank ? r.get<float>(kOffPixdim + 4 * i) : 1.0F;
        if (!(std::isfinite(p) && p > 0.0F)) {
            fail(ErrorCode::format, "pixdim[" + std::to_string(i) + "] = " + std::to_string(p) +
                                        " is not a positive spacing" + at_byte(kOffPixdim + 4 * i));
        }
        return p;
    };
    h.spacing = {pix(1), pix(2), pix(3)};

    const float vox = r.get<float>(kOffVoxOffset);
    if (!h.paired) {
        if (!(vox >= static_cast<float>(kVoxOffset)) || vox != std::floor(vox)) {
            fail(ErrorCode::format, "vox_offset " + std::to_string(vox) + " must be an integer >= 352" +
                                        at_byte(kOffVoxOffset));
        }
        h.vox_offset = static_cast<std::size_t>(vox);
    } else {
        h.vox_offset = (std::isfinite(vox) && vox >= 0.0F) ? static_cast<std::size_t>(vox) : 0;
    }
    h.slope = r.get<float>(kOffSclSlope);
    h.inter = r.get<float>(kOffSclInter);

    std::string descrip(reinterpret_cast<const char*>(bytes.data() + kOffDescrip), kDescripLen);
    descrip = descrip.substr(0, descrip.find('\0'));
    if (auto pos = descrip.find(kKindTag); pos != std::string::npos) {
        auto value = descrip.substr(pos + kKindTag.size());
        value = value.substr(0, value.find(' '));
        h.kind = volume_kind_from_string(value);
    }
    return h;
}

Volume3D decode_payload(const ParsedHeader& h, std::span<const std::uint8_t> payload,
                        std::size_t payload_offset) {
    const std::size_t n = h.dims.count();
    const std::size_t bpv = bytes_per_voxel(h.datatype);
    if (payload.size() < n * bpv) {
        fail(ErrorCode::format, "voxel payload truncated: need " + std::to_string(n * bpv) + " bytes, found " +
                                    std::to_string(payload.size()) + at_byte(payload_offset));
    }
    std::vector<float> data(n);
    const std::uint8_t* p = payload.data();
    auto read_as = [&]<class T>(T /*tag*/) {
        for (std::size_t i = 0; i < n; ++i) {
            T v;
            std::memcpy(&v, p + i * sizeof(T), sizeof(T));
            if (h.swap) v = byteswap_value(v);
            data[i] = static_cast<float>(v);
        }
    };
    switch (h.datatype) {
        case kUint8: read_as(std::uint8_t{}); break;
        case kInt16: read_as(std::int16_t{}); break;
        case kFloat32: read_as(float{}); break;
        case kFloat64: read_as(double{}); break;
        default: break;
    }
    const bool scaled = h.slope != 0.0F && std::isfinite(h.slope) && !(h.slope == 1.0F && h.inter == 0.0F);
    if (scaled) {
        for (auto& v : data) v = static_cast<float>(static_cast<double>(h.slope) * v + h.inter);
    }
    VolumeKind kind = h.kind;
    if (scaled && kind != VolumeKind::intensity) kind = VolumeKind::intensity;
    return Volume3D(h.dims, h.spacing, std::move(data), kind);
}

}  // namespace

Volume3D decode(std::span<const std::uint8_t> bytes) {
    const ParsedHeader h = parse_header(bytes);
    if (h.paired) fail(ErrorCode::format, "\"ni1\" header needs its .img payload file" + at_byte(kOffMagic));
    if (bytes.size() < h.vox_offset) {
        fail(ErrorCode::format, "file ends before vox_offset " + std::to_string(h.vox_offset) +
                                    at_byte(bytes.size()));
    }
    return decode_payload(h, bytes.subspan(h.vox_offset), h.vox_offset);
}

Volume3D read(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes = slurp(path);
    if (is_gzip(bytes)) bytes = gunzip(bytes);
    const ParsedHeader h = parse_header(bytes);
    if (!h.paired) return decode(bytes);

    auto img = path;
    img.replace_extension(".img");
    if (path.extension() == ".gz") {
        img = path;
        img.replace_extension("");  // strip .gz
        img.replace_extension(".img.gz");
    }
    std::vector<std::uint8_t> payload = slurp(img);
    if (is_gzip(payload)) payload = gunzip(payload);
    if (payload.size() < h.vox_offset) {
        fail(ErrorCode::format, "payload file shorter than vox_offset" + at_byte(payload.size()));
    }
    return decode_payload(h, std::span<const std::uint8_t>(payload).subspan(h.vox_offset), h.vox_offset);
}

std::vector<std::uint8_t> encode(const Volume3D& v) {
    const bool mask = v.kind() == VolumeKind::binary_mask;
    const std::int16_t datatype = mask ? kUint8 : kFloat32;
    const std::size_t bpv = mask ? 1 : 4;
    std::vector<std::uint8_t> buf(kVoxOffset + v.size() * bpv, 0);

    put<std::int32_t>(buf, kOffSizeofHdr, static_cast<std::int32_t>(kHeaderSize));
    const std::array<std::size_t, 3> d{v.dims().nx, v.dims().ny, v.dims().nz};
    for (std::size_t a = 0; a < 3; ++a) {
        if (d[a] > 32767) fail(ErrorCode::dimension, "axis length exceeds NIfTI-1 int16 range");
    }
    put<std::int16_t>(buf, kOffDim, 3);
    for (std::size_t a = 0; a < 3; ++a) put<std::int16_t>(buf, kOffDim + 2 * (a + 1), static_cast<std::int16_t>(d[a]));
    for (std::size_t a = 4; a < 8; ++a) put<std::int16_t>(buf, kOffDim + 2 * a, 1);
    put<std::int16_t>(buf, kOffDatatype, datatype);
    put<std::int16_t>(buf, kOffBitpix, static_cast<std::int16_t>(8 * bpv));
    put<float>(buf, kOffPixdim, 1.0F);  // qfac
    put<float>(buf, kOffPixdim + 4, v.spacing().sx);
    put<float>(buf, kOffPixdim + 8, v.spacing().sy);
    put<float>(buf, kOffPixdim + 12, v.spacing().sz);
    for (std::size_t i = 4; i < 8; ++i) put<float>(buf, kOffPixdim + 4 * i, 1.0F);
    put<float>(buf, kOffVoxOffset, static_cast<float>(kVoxOffset));
    put<float>(buf, kOffSclSlope, 0.0F);
    put<float>(buf, kOffSclInter, 0.0F);
    buf[kOffXyztUnits] = 2;  // mm
    const std::string descrip = std::string(kKindTag) + std::string(to_string(v.kind()));
    std::memcpy(buf.data() + kOffDescrip, descrip.data(), std::min(descrip.size(), kDescripLen - 1));
    std::memcpy(buf.data() + kOffMagic, "n+1\0", 4);

    std::uint8_t* out = buf.data() + kVoxOffset;
    if (mask) {
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] == 1.0F ? 1 : 0;
    } else {
        std::memcpy(out, v.data().data(), v.size() * sizeof(float));
    }
    return buf;
}

void write(const Volume3D& v, const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes = encode(v);
    if (path.extension() == ".gz") bytes = gzip(bytes);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::io, "write to '" + path.string() + "' failed");
}

}  // namespace vk::nifti
