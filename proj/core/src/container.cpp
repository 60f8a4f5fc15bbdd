#include "mtwn/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mtwn {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'T', 'W', 'N', 'C', 'O', 'N', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), 8);
}

void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& in, const char* what) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in) throw FormatError(std::string("container: truncated while reading ") + what);
    return v;
}

std::uint64_t get_u64(std::istream& in, const char* what) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    if (!in) throw FormatError(std::string("container: truncated while reading ") + what);
    return v;
}

std::string get_string(std::istream& in, const char* what) {
    const std::uint32_t len = get_u32(in, what);
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw FormatError(std::string("container: truncated while reading ") + what);
    return s;
}

}  // namespace

const NamedArray* Container::find(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return &a;
    return nullptr;
}

const NamedArray& Container::require(const std::string& name) const {
    const auto* a = find(name);
    if (!a) throw FormatError("container: missing array '" + name + "'");
    return *a;
}

void Container::add(const std::string& name, const Tensor& tensor) {
    NamedArray a;
    a.name = name;
    a.shape = tensor.shape();
    auto d = tensor.data();
    a.values.assign(d.begin(), d.end());
    arrays.push_back(std::move(a));
}

Tensor Container::tensor(const std::string& name, bool requires_grad) const {
    const auto& a = require(name);
    return Tensor::from_data(a.values, a.shape, requires_grad);
}

void container_write(const std::filesystem::path& path, const Container& container) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("container: cannot open " + path.string() + " for writing");
    out.write(kMagic, 8);
    put_u32(out, kContainerVersion);
    put_string(out, container.kind);
    put_string(out, container.meta_json);
    put_u32(out, static_cast<std::uint32_t>(container.arrays.size()));
    for (const auto& a : container.arrays) {
        put_string(out, a.name);
        put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
        for (std::size_t d : a.shape) put_u64(out, static_cast<std::uint64_t>(d));
        out.write(reinterpret_cast<const char*>(a.values.data()),
                  static_cast<std::streamsize>(a.values.size() * sizeof(double)));
    }
    if (!out) throw IoError("container: write failed for " + path.string());
}

Container container_read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("container: cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw FormatError("container: bad magic in " + path.string());
    const std::uint32_t version = get_u32(in, "version");
    if (version != kContainerVersion)
        throw FormatError("container: unsupported format version " + std::to_string(version) +
                          " in " + path.string());

    Container c;
    c.kind = get_string(in, "kind");
    c.meta_json = get_string(in, "meta");
    const std::uint32_t count = get_u32(in, "array count");
    c.arrays.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        a.name = get_string(in, "array name");
        const std::uint32_t rank = get_u32(in, "array rank");
        std::size_t total = 1;
        a.shape.resize(rank);
        for (std::uint32_t d = 0; d < rank; ++d) {
            a.shape[d] = static_cast<std::size_t>(get_u64(in, "array dim"));
            total *= a.shape[d];
        }
        a.values.resize(total);
        in.read(reinterpret_cast<char*>(a.values.data()),
                static_cast<std::streamsize>(total * sizeof(double)));
        if (!in) throw FormatError("container: truncated payload for array '" + a.name + "'");
        c.arrays.push_back(std::move(a));
    }
    return c;
}

}  // namespace mtwn
