#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "maps/tensor.hpp"

namespace maps::safetensors {

enum class DType { F64, F32, F16, BF16 };

std::optional<DType> parse_dtype(const std::string& s);
std::string dtype_name(DType t);
std::size_t dtype_size(DType t);

float half_to_float(std::uint16_t h);
std::uint16_t float_to_half(float f);
float bfloat16_to_float(std::uint16_t b);
std::uint16_t float_to_bfloat16(float f);

struct TensorInfo {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::size_t> shape;
    std::uint64_t begin = 0;  // relative to the data section
    std::uint64_t end = 0;
    std::filesystem::path file;
    std::uint64_t data_start = 0;  // absolute offset of the data section in `file`

    std::size_t numel() const;
};

// Header index over one file, or over every *.safetensors file in a directory
// (sharded checkpoints). Tensor payloads are read lazily and upcast to float.
class Archive {
public:
    static Archive open(const std::filesystem::path& path);

    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    const TensorInfo& info(const std::string& name) const;
    const std::map<std::string, TensorInfo>& tensors() const { return tensors_; }
    const std::map<std::string, std::string>& metadata() const { return metadata_; }

    // Reads the full tensor as float32, row-major in its stored shape.
    std::vector<float> read(const std::string& name) const;

    // 2-D tensor as a Matrix; 1-D tensors become a single row.
    Matrix read_matrix(const std::string& name) const;

private:
    void add_file(const std::filesystem::path& file);

    std::map<std::string, TensorInfo> tensors_;
    std::map<std::string, std::string> metadata_;
};

struct TensorToWrite {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> values;
    DType dtype = DType::F32;
};

// Writes tensors (sorted by name, packed contiguously) with optional
// string metadata under "__metadata__".
void write(const std::filesystem::path& path, std::vector<TensorToWrite> tensors,
           const std::map<std::string, std::string>& metadata = {});

}  // namespace maps::safetensors
