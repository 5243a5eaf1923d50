#include "maps/safetensors.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "maps/errors.hpp"

namespace maps::safetensors {

namespace fs = std::filesystem;
using nlohmann::json;

std::optional<DType> parse_dtype(const std::string& s) {
    if (s == "F64") return DType::F64;
    if (s == "F32") return DType::F32;
    if (s == "F16") return DType::F16;
    if (s == "BF16") return DType::BF16;
    return std::nullopt;
}

std::string dtype_name(DType t) {
    switch (t) {
        case DType::F64: return "F64";
        case DType::F32: return "F32";
        case DType::F16: return "F16";
        case DType::BF16: return "BF16";
    }
    return "?";
}

std::size_t dtype_size(DType t) {
    switch (t) {
        case DType::F64: return 8;
        case DType::F32: return 4;
        case DType::F16:
        case DType::BF16: return 2;
    }
    return 0;
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: renormalize
            exp = 127 - 15 + 1;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3ffu;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

std::uint16_t float_to_half(float f) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t abs = x & 0x7fffffffu;
    if (abs >= 0x7f800000u) {
        return sign | 0x7c00u | (abs > 0x7f800000u ? 0x200u : 0u);
    }
    if (abs >= 0x477ff000u) return sign | 0x7c00u;  // rounds to inf
    if (abs < 0x38800000u) {
        // subnormal half or zero
        if (abs < 0x33000000u) return sign;
        const std::uint32_t e = abs >> 23;
        const std::uint32_t m = (abs & 0x7fffffu) | 0x800000u;
        const std::uint32_t shift = 126 - e;  // 14 - (e - 127) + 13 - 1
        std::uint32_t half_m = m >> (shift);
        const std::uint32_t rem = m & ((1u << shift) - 1);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_m & 1u))) ++half_m;
        return sign | static_cast<std::uint16_t>(half_m);
    }
    std::uint32_t r = abs - 0x38000000u;  // rebias exponent
    const std::uint32_t rem = r & 0x1fffu;
    r >>= 13;
    if (rem > 0x1000u || (rem == 0x1000u && (r & 1u))) ++r;
    return sign | static_cast<std::uint16_t>(r);
}

float bfloat16_to_float(std::uint16_t b) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(b) << 16);
}

std::uint16_t float_to_bfloat16(float f) {
    std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    if ((x & 0x7fffffffu) > 0x7f800000u) return static_cast<std::uint16_t>((x >> 16) | 0x40u);
    x += 0x7fffu + ((x >> 16) & 1u);
    return static_cast<std::uint16_t>(x >> 16);
}

std::size_t TensorInfo::numel() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

namespace {

std::uint64_t read_u64_le(const unsigned char* b) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

Archive Archive::open(const fs::path& path) {
    Archive a;
    if (!fs::exists(path)) throw IoError(path.string(), "no such file or directory");
    if (fs::is_directory(path)) {
        std::vector<fs::path> shards;
        for (const auto& entry : fs::directory_iterator(path)) {
            if (entry.path().extension() == ".safetensors") shards.push_back(entry.path());
        }
        if (shards.empty()) throw DataError(path.string() + ": directory has no .safetensors files");
        std::sort(shards.begin(), shards.end());
        for (const auto& s : shards) a.add_file(s);
    } else {
        a.add_file(path);
    }
    return a;
}

void Archive::add_file(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError(file.string(), "cannot open");
    const auto file_size = static_cast<std::uint64_t>(fs::file_size(file));
    unsigned char len_bytes[8];
    if (file_size < 8 || !in.read(reinterpret_cast<char*>(len_bytes), 8)) {
        throw DataError(file.string() + ": truncated safetensors header");
    }
    const std::uint64_t header_len = read_u64_le(len_bytes);
    if (header_len > file_size - 8) {
        throw DataError(file.string() + ": header length exceeds file size");
    }
    std::string header(header_len, '\0');
    if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) {
        throw DataError(file.string() + ": truncated safetensors header");
    }
    json j;
    try {
        j = json::parse(header);
    } catch (const json::exception& e) {
        throw DataError(file.string() + ": malformed header JSON: " + e.what());
    }
    if (!j.is_object()) throw DataError(file.string() + ": header is not an object");
    const std::uint64_t data_start = 8 + header_len;
    const std::uint64_t data_size = file_size - data_start;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() == "__metadata__") {
            if (it->is_object()) {
                for (auto m = it->begin(); m != it->end(); ++m) {
                    if (m->is_string()) metadata_[m.key()] = m->get<std::string>();
                }
            }
            continue;
        }
        const json& t = *it;
        TensorInfo info;
        info.name = it.key();
        info.file = file;
        info.data_start = data_start;
        try {
            const auto dt = parse_dtype(t.at("dtype").get<std::string>());
            if (!dt) {
                throw DataError(file.string() + ": tensor '" + info.name +
                                "' has unsupported dtype " + t.at("dtype").get<std::string>());
            }
            info.dtype = *dt;
            info.shape = t.at("shape").get<std::vector<std::size_t>>();
            const auto offs = t.at("data_offsets").get<std::vector<std::uint64_t>>();
            if (offs.size() != 2) throw DataError("bad data_offsets");
            info.begin = offs[0];
            info.end = offs[1];
        } catch (const json::exception& e) {
            throw DataError(file.string() + ": tensor '" + info.name + "' has a bad header entry: " +
                            e.what());
        }
        if (info.end < info.begin || info.end > data_size ||
            info.end - info.begin != info.numel() * dtype_size(info.dtype)) {
            throw DataError(file.string() + ": tensor '" + info.name +
                            "' byte range does not match its shape");
        }
        if (tensors_.count(info.name)) {
            throw DataError(file.string() + ": duplicate tensor '" + info.name + "'");
        }
        tensors_.emplace(info.name, std::move(info));
    }
}

const TensorInfo& Archive::info(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw DataError("missing tensor '" + name + "'");
    return it->second;
}

std::vector<float> Archive::read(const std::string& name) const {
    const TensorInfo& t = info(name);
    std::ifstream in(t.file, std::ios::binary);
    if (!in) throw IoError(t.file.string(), "cannot open");
    std::vector<unsigned char> raw(t.end - t.begin);
    in.seekg(static_cast<std::streamoff>(t.data_start + t.begin));
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
        throw IoError(t.file.string(), "short read for tensor '" + name + "'");
    }
    const std::size_t n = t.numel();
    std::vector<float> out(n);
    const unsigned char* p = raw.data();
    switch (t.dtype) {
        case DType::F32:
            for (std::size_t i = 0; i < n; ++i) {
                std::uint32_t v = 0;
                for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(p[4 * i + b]) << (8 * b);
                out[i] = std::bit_cast<float>(v);
            }
            break;
        case DType::F64:
            for (std::size_t i = 0; i < n; ++i) {
                std::uint64_t v = read_u64_le(p + 8 * i);
                out[i] = static_cast<float>(std::bit_cast<double>(v));
            }
            break;
        case DType::F16:
            for (std::size_t i = 0; i < n; ++i) {
                out[i] = half_to_float(static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8)));
            }
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < n; ++i) {
                out[i] =
                    bfloat16_to_float(static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8)));
            }
            break;
    }
    return out;
}

Matrix Archive::read_matrix(const std::string& name) const {
    const TensorInfo& t = info(name);
    if (t.shape.size() == 1) return Matrix(1, t.shape[0], read(name));
    if (t.shape.size() != 2) {
        throw DataError("tensor '" + name + "' is not 2-D (rank " + std::to_string(t.shape.size()) +
                        ")");
    }
    return Matrix(t.shape[0], t.shape[1], read(name));
}

void write(const fs::path& path, std::vector<TensorToWrite> tensors,
           const std::map<std::string, std::string>& metadata) {
    std::sort(tensors.begin(), tensors.end(),
              [](const auto& a, const auto& b) { return a.name < b.name; });
    json header = json::object();
    if (!metadata.empty()) header["__metadata__"] = metadata;
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        std::size_t n = 1;
        for (auto s : t.shape) n *= s;
        if (n != t.values.size()) {
            throw DataError("tensor '" + t.name + "': value count does not match shape");
        }
        const std::uint64_t bytes = n * dtype_size(t.dtype);
        header[t.name] = {{"dtype", dtype_name(t.dtype)},
                          {"shape", t.shape},
                          {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string h = header.dump();
    while (h.size() % 8 != 0) h.push_back(' ');

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path.string(), "cannot open for writing");
    const std::uint64_t len = h.size();
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((len >> (8 * i)) & 0xffu));
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    std::vector<unsigned char> buf;
    for (const auto& t : tensors) {
        buf.clear();
        for (float v : t.values) {
            switch (t.dtype) {
                case DType::F32: {
                    const auto b = std::bit_cast<std::uint32_t>(v);
                    for (int i = 0; i < 4; ++i) buf.push_back((b >> (8 * i)) & 0xffu);
                    break;
                }
                case DType::F64: {
                    const auto b = std::bit_cast<std::uint64_t>(static_cast<double>(v));
                    for (int i = 0; i < 8; ++i) buf.push_back((b >> (8 * i)) & 0xffu);
                    break;
                }
                case DType::F16: {
                    const auto b = float_to_half(v);
                    buf.push_back(b & 0xffu);
                    buf.push_back(b >> 8);
                    break;
                }
                case DType::BF16: {
                    const auto b = float_to_bfloat16(v);
                    buf.push_back(b & 0xffu);
                    buf.push_back(b >> 8);
                    break;
                }
            }
        }
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    }
    if (!out) throw IoError(path.string(), "write failed");
}

}  // namespace maps::safetensors
