#include "brainstrip/nifti.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace brainstrip {

namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kVoxOffset = 352;

constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kDtFloat64 = 64;

// Little-endian field access into a raw header buffer. The host is assumed
// little-endian (checked at read time via sizeof_hdr).
template <typename T>
T get_le(const unsigned char* buf, std::size_t offset) {
    T v;
    std::memcpy(&v, buf + offset, sizeof(T));
    return v;
}

template <typename T>
void put_le(unsigned char* buf, std::size_t offset, T v) {
    std::memcpy(buf + offset, &v, sizeof(T));
}

std::int16_t dtype_code(DType dt) {
    switch (dt) {
        case DType::UInt8: return kDtUint8;
        case DType::Int16: return kDtInt16;
        case DType::Float32: return kDtFloat32;
        case DType::Float64: return kDtFloat64;
    }
    return 0;
}

std::int16_t dtype_bitpix(DType dt) {
    switch (dt) {
        case DType::UInt8: return 8;
        case DType::Int16: return 16;
        case DType::Float32: return 32;
        case DType::Float64: return 64;
    }
    return 0;
}

}  // namespace

Volume3D read_nifti(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open NIfTI file: " + path);

    unsigned char hdr[kHeaderSize];
    in.read(reinterpret_cast<char*>(hdr), kHeaderSize);
    if (in.gcount() != static_cast<std::streamsize>(kHeaderSize))
        throw FormatError("malformed header: file shorter than 348-byte header");

    const auto sizeof_hdr = get_le<std::int32_t>(hdr, 0);
    if (sizeof_hdr != 348) {
        if (sizeof_hdr == 1543569408)  // 348 byte-swapped
            throw FormatError("malformed header: sizeof_hdr is big-endian (unsupported)");
        throw FormatError("malformed header: sizeof_hdr != 348");
    }
    if (std::memcmp(hdr + 344, "n+1\0", 4) != 0)
        throw FormatError("malformed header: magic is not \"n+1\"");

    const auto ndim = get_le<std::int16_t>(hdr, 40);
    if (ndim != 3)
        throw FormatError("malformed header: dim[0] must be 3 spatial dimensions");
    const auto nx = get_le<std::int16_t>(hdr, 42);
    const auto ny = get_le<std::int16_t>(hdr, 44);
    const auto nz = get_le<std::int16_t>(hdr, 46);
    if (nx < 1 || ny < 1 || nz < 1)
        throw FormatError("malformed header: dim[1..3] must be positive");

    const auto datatype = get_le<std::int16_t>(hdr, 70);
    DType dt;
    switch (datatype) {
        case kDtUint8: dt = DType::UInt8; break;
        case kDtInt16: dt = DType::Int16; break;
        case kDtFloat32: dt = DType::Float32; break;
        case kDtFloat64: dt = DType::Float64; break;
        default:
            throw FormatError("unsupported datatype code " + std::to_string(datatype));
    }
    const auto bitpix = get_le<std::int16_t>(hdr, 72);
    if (bitpix != dtype_bitpix(dt))
        throw FormatError("malformed header: bitpix does not match datatype");

    const float px = get_le<float>(hdr, 80);
    const float py = get_le<float>(hdr, 84);
    const float pz = get_le<float>(hdr, 88);
    if (!(px > 0.f) || !(py > 0.f) || !(pz > 0.f))
        throw FormatError("malformed header: pixdim[1..3] must be strictly positive");

    const float vox_offset = get_le<float>(hdr, 108);
    if (vox_offset < 348.f)
        throw FormatError("malformed header: vox_offset < 348");

    float scl_slope = get_le<float>(hdr, 112);
    const float scl_inter = get_le<float>(hdr, 116);
    if (scl_slope == 0.f) scl_slope = 1.f;

    Origin origin{};
    const auto qform_code = get_le<std::int16_t>(hdr, 252);
    const auto sform_code = get_le<std::int16_t>(hdr, 254);
    if (sform_code > 0) {
        origin = Origin{get_le<float>(hdr, 280 + 12), get_le<float>(hdr, 296 + 12),
                        get_le<float>(hdr, 312 + 12)};
    } else if (qform_code > 0) {
        origin = Origin{get_le<float>(hdr, 268), get_le<float>(hdr, 272),
                        get_le<float>(hdr, 276)};
    }

    const Dims dims{static_cast<std::size_t>(nx), static_cast<std::size_t>(ny),
                    static_cast<std::size_t>(nz)};
    const std::size_t count = dims.count();
    const std::size_t elem = static_cast<std::size_t>(dtype_bitpix(dt)) / 8;

    in.seekg(static_cast<std::streamoff>(vox_offset));
    std::vector<unsigned char> raw(count * elem);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw FormatError("truncated data section: expected " +
                          std::to_string(raw.size()) + " bytes after vox_offset");

    std::vector<double> data(count);
    switch (dt) {
        case DType::UInt8:
            for (std::size_t i = 0; i < count; ++i) data[i] = raw[i];
            break;
        case DType::Int16:
            for (std::size_t i = 0; i < count; ++i)
                data[i] = get_le<std::int16_t>(raw.data(), i * 2);
            break;
        case DType::Float32:
            for (std::size_t i = 0; i < count; ++i)
                data[i] = get_le<float>(raw.data(), i * 4);
            break;
        case DType::Float64:
            for (std::size_t i = 0; i < count; ++i)
                data[i] = get_le<double>(raw.data(), i * 8);
            break;
    }
    if (scl_slope != 1.f || scl_inter != 0.f) {
        for (double& v : data)
            v = v * static_cast<double>(scl_slope) + static_cast<double>(scl_inter);
    }

    return Volume3D(dims, std::move(data),
                    Spacing{static_cast<double>(px), static_cast<double>(py),
                            static_cast<double>(pz)},
                    origin, dt);
}

void write_nifti(const Volume3D& vol, const std::string& path) {
    const Dims& d = vol.dims();
    if (d.nx > 32767 || d.ny > 32767 || d.nz > 32767)
        throw ValueError("dims overflow the 16-bit NIfTI dim field");

    unsigned char hdr[kVoxOffset];
    std::memset(hdr, 0, sizeof(hdr));
    put_le<std::int32_t>(hdr, 0, 348);
    hdr[38] = 'r';  // regular
    put_le<std::int16_t>(hdr, 40, 3);
    put_le<std::int16_t>(hdr, 42, static_cast<std::int16_t>(d.nx));
    put_le<std::int16_t>(hdr, 44, static_cast<std::int16_t>(d.ny));
    put_le<std::int16_t>(hdr, 46, static_cast<std::int16_t>(d.nz));
    for (std::size_t i = 4; i <= 7; ++i)
        put_le<std::int16_t>(hdr, 40 + i * 2, 1);
    put_le<std::int16_t>(hdr, 70, dtype_code(vol.dtype()));
    put_le<std::int16_t>(hdr, 72, dtype_bitpix(vol.dtype()));
    put_le<float>(hdr, 76, 1.f);  // pixdim[0] (qfac)
    put_le<float>(hdr, 80, static_cast<float>(vol.spacing().sx));
    put_le<float>(hdr, 84, static_cast<float>(vol.spacing().sy));
    put_le<float>(hdr, 88, static_cast<float>(vol.spacing().sz));
    put_le<float>(hdr, 108, static_cast<float>(kVoxOffset));
    put_le<float>(hdr, 112, 1.f);  // scl_slope
    put_le<float>(hdr, 116, 0.f);  // scl_inter
    hdr[123] = 2;                  // xyzt_units: millimetres
    std::memcpy(hdr + 148, "brainstrip", 10);  // descrip
    put_le<std::int16_t>(hdr, 254, 1);         // sform_code: scanner anat
    put_le<float>(hdr, 280, static_cast<float>(vol.spacing().sx));
    put_le<float>(hdr, 292, static_cast<float>(vol.origin().ox));
    put_le<float>(hdr, 300, static_cast<float>(vol.spacing().sy));
    put_le<float>(hdr, 308, static_cast<float>(vol.origin().oy));
    put_le<float>(hdr, 320, static_cast<float>(vol.spacing().sz));
    put_le<float>(hdr, 324, static_cast<float>(vol.origin().oz));
    std::memcpy(hdr + 344, "n+1\0", 4);
    // bytes 348..351 stay zero: no header extensions.

    const std::size_t count = vol.size();
    const std::size_t elem = static_cast<std::size_t>(dtype_bitpix(vol.dtype())) / 8;
    std::vector<unsigned char> raw(count * elem);
    switch (vol.dtype()) {
        case DType::UInt8:
            for (std::size_t i = 0; i < count; ++i) {
                const double v = std::clamp(vol[i], 0.0, 255.0);
                raw[i] = static_cast<unsigned char>(std::llround(v));
            }
            break;
        case DType::Int16:
            for (std::size_t i = 0; i < count; ++i) {
                const double v = std::clamp(vol[i], -32768.0, 32767.0);
                put_le<std::int16_t>(raw.data(), i * 2,
                                     static_cast<std::int16_t>(std::llround(v)));
            }
            break;
        case DType::Float32:
            for (std::size_t i = 0; i < count; ++i)
                put_le<float>(raw.data(), i * 4, static_cast<float>(vol[i]));
            break;
        case DType::Float64:
            for (std::size_t i = 0; i < count; ++i)
                put_le<double>(raw.data(), i * 8, vol[i]);
            break;
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + path);
}

}  // namespace brainstrip
