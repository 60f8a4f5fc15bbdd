// RIFF/WAVE PCM16 mono I/O.
//
// Layout written (44-byte canonical header):
//   "RIFF" <u32 riff_size> "WAVE"
//   "fmt " <u32 16> <u16 format=1 (PCM)> <u16 channels=1> <u32 sample_rate>
//          <u32 byte_rate> <u16 block_align=2> <u16 bits=16>
//   "data" <u32 data_size> <int16 little-endian samples...>
// The reader accepts any chunk ordering and skips unknown chunks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "mtwn/codec.hpp"

namespace mtwn {

namespace {

std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void append_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void append_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace

WaveformBuffer wav_read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("wav_read: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t n = bytes.size();

    if (n < 12 || std::memcmp(p, "RIFF", 4) != 0)
        throw FormatError("wav_read: missing RIFF magic in " + path.string());
    if (std::memcmp(p + 8, "WAVE", 4) != 0)
        throw FormatError("wav_read: RIFF form type is not WAVE in " + path.string());

    bool have_fmt = false;
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t sample_rate = 0;
    const unsigned char* data_ptr = nullptr;
    std::uint32_t data_size = 0;

    std::size_t off = 12;
    while (off + 8 <= n) {
        const char* id = bytes.data() + off;
        const std::uint32_t chunk_size = read_u32(p + off + 4);
        const std::size_t body = off + 8;
        if (body + chunk_size > n)
            throw FormatError("wav_read: chunk '" + std::string(id, 4) +
                              "' overruns file in " + path.string());
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (chunk_size < 16) throw FormatError("wav_read: fmt chunk too short");
            format = read_u16(p + body + 0);
            channels = read_u16(p + body + 2);
            sample_rate = read_u32(p + body + 4);
            bits = read_u16(p + body + 14);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            data_ptr = p + body;
            data_size = chunk_size;
        }
        off = body + chunk_size + (chunk_size & 1);  // chunks are word-aligned
    }

    if (!have_fmt) throw FormatError("wav_read: no fmt chunk in " + path.string());
    if (format != 1)
        throw FormatError("wav_read: fmt.format = " + std::to_string(format) +
                          " (only PCM = 1 supported)");
    if (channels != 1)
        throw FormatError("wav_read: fmt.channels = " + std::to_string(channels) +
                          " (only mono supported)");
    if (bits != 16)
        throw FormatError("wav_read: fmt.bits_per_sample = " + std::to_string(bits) +
                          " (only 16 supported)");
    if (!data_ptr && data_size != 0) throw FormatError("wav_read: no data chunk");

    WaveformBuffer wave;
    wave.sample_rate = static_cast<int>(sample_rate);
    const std::size_t count = data_size / 2;
    wave.samples.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::int16_t s =
            static_cast<std::int16_t>(read_u16(data_ptr + 2 * i));
        wave.samples[i] = static_cast<double>(s) / 32768.0;
    }
    return wave;
}

void wav_write(const std::filesystem::path& path, const WaveformBuffer& wave) {
    const std::uint32_t data_size = static_cast<std::uint32_t>(wave.samples.size() * 2);
    std::string out;
    out.reserve(44 + data_size);
    out.append("RIFF");
    append_u32(out, 36 + data_size);
    out.append("WAVE");
    out.append("fmt ");
    append_u32(out, 16);
    append_u16(out, 1);  // PCM
    append_u16(out, 1);  // mono
    append_u32(out, static_cast<std::uint32_t>(wave.sample_rate));
    append_u32(out, static_cast<std::uint32_t>(wave.sample_rate) * 2);
    append_u16(out, 2);
    append_u16(out, 16);
    out.append("data");
    append_u32(out, data_size);
    for (double s : wave.samples) {
        long v = std::lround(s * 32767.0);
        v = std::clamp(v, -32768L, 32767L);
        append_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("wav_write: cannot open " + path.string() + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("wav_write: write failed for " + path.string());
}

}  // namespace mtwn
