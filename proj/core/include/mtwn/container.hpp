#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mtwn/tensor.hpp"

namespace mtwn {

// Sectioned binary container used for model checkpoints and per-utterance
// feature files. Layout (all integers little-endian):
//   magic   8 bytes  "MTWNCONT"
//   version u32      (currently 1; readers reject anything else)
//   kind    u32 len + bytes   ("checkpoint", "features", ...)
//   meta    u32 len + bytes   (JSON text)
//   count   u32
//   count * { name: u32 len + bytes; rank: u32; dims: u64 each;
//             payload: float-64 little-endian, row-major }
struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Container {
    std::string kind;
    std::string meta_json;
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const;
    const NamedArray& require(const std::string& name) const;  // FormatError if absent
    void add(const std::string& name, const Tensor& tensor);
    Tensor tensor(const std::string& name, bool requires_grad = false) const;
};

inline constexpr std::uint32_t kContainerVersion = 1;

void container_write(const std::filesystem::path& path, const Container& container);
Container container_read(const std::filesystem::path& path);

}  // namespace mtwn
