#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace entlink {

// One tick of the time-tagging unit.
inline constexpr double kTickSeconds = 156e-12;

inline constexpr int kTickBits = 60;
inline constexpr std::uint64_t kMaxTick = (std::uint64_t{1} << kTickBits) - 1;
inline constexpr unsigned kMaxChannel = 15;

// Detector channels 0..3 of the four-channel polarization analyzer.
enum class PolChannel : std::uint8_t { h = 0, v = 1, p = 2, m = 3 };

// Packed 64-bit detection record: bits 0..59 hold the tick count
// (1 tick = 156 ps), bits 60..63 the detector channel. 2^60 ticks cover
// about 5.7 years, so wraparound is not handled.
class TimeTag {
public:
    TimeTag() = default;
    TimeTag(unsigned channel, std::uint64_t tick)
        : word_((static_cast<std::uint64_t>(channel) << kTickBits) | tick) {}

    static TimeTag from_raw(std::uint64_t word) {
        TimeTag t;
        t.word_ = word;
        return t;
    }

    std::uint64_t raw() const { return word_; }
    unsigned channel() const { return static_cast<unsigned>(word_ >> kTickBits); }
    std::uint64_t tick() const { return word_ & kMaxTick; }
    double time_s() const { return static_cast<double>(tick()) * kTickSeconds; }
    PolChannel pol_channel() const { return static_cast<PolChannel>(channel() & 3u); }

    friend bool operator==(TimeTag a, TimeTag b) { return a.word_ == b.word_; }

private:
    std::uint64_t word_ = 0;
};

// Rounds time_s to the nearest tick. Throws std::out_of_range when the
// channel exceeds 15 or the time falls outside the 60-bit tick range.
// Second-valued round trips are tick-exact up to 2^50 ticks (about two days,
// the double mantissa limit); the full 60-bit range is format headroom.
TimeTag encode_tag(unsigned channel, double time_s);

// Ordered detection record of one party.
struct TagStream {
    std::uint8_t party = 0;    // 0 = Alice, 1 = Bob
    std::uint64_t epoch_s = 0; // GPS-referenced start second
    std::vector<TimeTag> tags; // sorted by tick, ties allowed across channels

    std::size_t size() const { return tags.size(); }
    bool empty() const { return tags.empty(); }
    // span of the recorded tags in seconds relative to the epoch
    double span_s() const {
        return tags.empty() ? 0.0 : tags.back().time_s() - tags.front().time_s();
    }
};

enum class StreamFault { bad_magic, bad_version, truncated, unsorted };

class StreamFormatError : public std::runtime_error {
public:
    StreamFormatError(StreamFault fault, const std::string& what)
        : std::runtime_error(what), fault_(fault) {}
    StreamFault fault() const { return fault_; }

private:
    StreamFault fault_;
};

// .etag serialization. Layout (little-endian throughout):
//   magic "ETAG" | version u16 | party u8 | reserved u8 | epoch u64 | count u64
// followed by count packed 64-bit tag words. Header is exactly 24 bytes.
inline constexpr std::size_t kStreamHeaderBytes = 24;
inline constexpr std::uint16_t kStreamVersion = 1;

std::vector<std::uint8_t> write_stream(const TagStream& stream);
TagStream read_stream(std::span<const std::uint8_t> bytes);

void write_stream_file(const TagStream& stream, const std::filesystem::path& path);
TagStream read_stream_file(const std::filesystem::path& path);

}  // namespace entlink
