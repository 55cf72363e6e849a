#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace chmfl {

enum class Modality : std::uint8_t { CT = 0, PET = 1, MASK = 2 };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::CT: return "CT";
        case Modality::PET: return "PET";
        case Modality::MASK: return "MASK";
    }
    return "?";
}

/// A 3D scalar field with voxel spacing in millimetres. Voxels are stored
/// row-major with D as the outermost axis.
struct Volume {
    std::array<std::size_t, 3> extents{0, 0, 0};  // (D, H, W)
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
    Modality modality = Modality::CT;
    std::vector<float> voxels;

    std::size_t size() const { return extents[0] * extents[1] * extents[2]; }

    float& at(std::size_t d, std::size_t h, std::size_t w) {
        return voxels[(d * extents[1] + h) * extents[2] + w];
    }
    float at(std::size_t d, std::size_t h, std::size_t w) const {
        return voxels[(d * extents[1] + h) * extents[2] + w];
    }

    void validate() const {
        if (extents[0] == 0 || extents[1] == 0 || extents[2] == 0)
            throw std::invalid_argument("volume: zero extent");
        if (spacing[0] <= 0 || spacing[1] <= 0 || spacing[2] <= 0)
            throw std::invalid_argument("volume: non-positive spacing");
        if (voxels.size() != size())
            throw std::invalid_argument("volume: voxel count does not match extents");
        if (modality == Modality::MASK) {
            for (float v : voxels)
                if (v != 0.0f && v != 1.0f)
                    throw std::invalid_argument("volume: MASK voxels must be 0 or 1");
        }
        if (modality == Modality::PET) {
            for (float v : voxels)
                if (v < 0.0f)
                    throw std::invalid_argument("volume: PET voxels must be non-negative (SUV)");
        }
    }
};

namespace io_detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw std::runtime_error("volume: truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= (std::uint64_t)b[i] << (8 * i);
    return v;
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

inline double get_f64(std::istream& is) {
    std::uint64_t bits = get_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace io_detail

inline constexpr char kVolumeMagic[4] = {'C', 'H', 'V', 'L'};
inline constexpr std::uint8_t kVolumeVersion = 1;

/// Container layout: "CHVL", version byte, modality byte, three u64 LE
/// extents (D,H,W), three f64 LE spacings, then D*H*W f32 LE voxels.
inline void write_volume(const Volume& v, const std::string& path) {
    v.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_volume: cannot open " + path);
    os.write(kVolumeMagic, 4);
    os.put((char)kVolumeVersion);
    os.put((char)static_cast<std::uint8_t>(v.modality));
    for (std::size_t e : v.extents) io_detail::put_u64(os, e);
    for (double s : v.spacing) io_detail::put_f64(os, s);
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(v.voxels.data()),
             (std::streamsize)(v.voxels.size() * 4));
    if (!os) throw std::runtime_error("write_volume: write failed for " + path);
}

inline Volume read_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_volume: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kVolumeMagic, 4) != 0)
        throw std::runtime_error("read_volume: bad magic in " + path);
    const int version = is.get();
    if (version != kVolumeVersion)
        throw std::runtime_error("read_volume: unsupported version in " + path);
    const int mod = is.get();
    if (mod < 0 || mod > 2)
        throw std::runtime_error("read_volume: unknown modality tag in " + path);
    Volume v;
    v.modality = static_cast<Modality>(mod);
    for (auto& e : v.extents) e = io_detail::get_u64(is);
    for (auto& s : v.spacing) s = io_detail::get_f64(is);
    const std::size_t n = v.extents[0] * v.extents[1] * v.extents[2];
    v.voxels.resize(n);
    is.read(reinterpret_cast<char*>(v.voxels.data()), (std::streamsize)(n * 4));
    if ((std::size_t)is.gcount() != n * 4)
        throw std::runtime_error("read_volume: truncated payload in " + path);
    v.validate();
    return v;
}

}  // namespace chmfl
