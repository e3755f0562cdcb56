#include "entlink/timetag.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace entlink {

namespace {

constexpr char kMagic[4] = {'E', 'T', 'A', 'G'};

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint16_t get_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

}  // namespace

TimeTag encode_tag(unsigned channel, double time_s) {
    if (channel > kMaxChannel) throw std::out_of_range("tag channel exceeds 15");
    if (!(time_s >= 0.0)) throw std::out_of_range("tag time is negative");
    const double ticks = std::round(time_s / kTickSeconds);
    if (ticks > static_cast<double>(kMaxTick)) {
        throw std::out_of_range("tag time exceeds the 60-bit tick range");
    }
    return TimeTag(channel, static_cast<std::uint64_t>(ticks));
}

std::vector<std::uint8_t> write_stream(const TagStream& stream) {
    std::vector<std::uint8_t> out;
    out.reserve(kStreamHeaderBytes + 8 * stream.tags.size());
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u16(out, kStreamVersion);
    out.push_back(stream.party);
    out.push_back(0);  // reserved
    put_u64(out, stream.epoch_s);
    put_u64(out, stream.tags.size());
    for (const TimeTag& t : stream.tags) put_u64(out, t.raw());
    return out;
}

TagStream read_stream(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kStreamHeaderBytes) {
        throw StreamFormatError(StreamFault::truncated, "stream shorter than header");
    }
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw StreamFormatError(StreamFault::bad_magic, "bad stream magic");
    }
    const std::uint16_t version = get_u16(bytes.data() + 4);
    if (version != kStreamVersion) {
        throw StreamFormatError(StreamFault::bad_version,
                                "unsupported stream version " + std::to_string(version));
    }
    TagStream s;
    s.party = bytes[6];
    s.epoch_s = get_u64(bytes.data() + 8);
    const std::uint64_t count = get_u64(bytes.data() + 16);
    if (bytes.size() != kStreamHeaderBytes + 8 * count) {
        throw StreamFormatError(StreamFault::truncated,
                                "stream payload truncated: header announces " +
                                    std::to_string(count) + " tags");
    }
    s.tags.reserve(count);
    std::uint64_t prev_tick = 0;
    for (std::uint64_t i = 0; i < count; ++i) {
        const TimeTag t = TimeTag::from_raw(get_u64(bytes.data() + kStreamHeaderBytes + 8 * i));
        if (i > 0 && t.tick() < prev_tick) {
            throw StreamFormatError(StreamFault::unsorted,
                                    "stream payload not sorted at tag " + std::to_string(i));
        }
        prev_tick = t.tick();
        s.tags.push_back(t);
    }
    return s;
}

void write_stream_file(const TagStream& stream, const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = write_stream(stream);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to " + path.string());
}

TagStream read_stream_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    const std::streamsize size = f.tellg();
    f.seekg(0);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
    f.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!f) throw std::runtime_error("short read from " + path.string());
    return read_stream(bytes);
}

}  // namespace entlink
