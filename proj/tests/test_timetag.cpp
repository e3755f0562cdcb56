#include <doctest.h>

#include <cmath>

#include "entlink/rng.hpp"
#include "entlink/timetag.hpp"

using namespace entlink;

TEST_CASE("tag encoding basics") {
    CHECK(encode_tag(0, 0.0).raw() == 0);

    const TimeTag t = encode_tag(2, 156e-12);
    CHECK(t.channel() == 2);
    CHECK(t.tick() == 1);
    CHECK(t.time_s() == doctest::Approx(156e-12));

    CHECK_THROWS_AS(encode_tag(16, 0.0), std::out_of_range);
    CHECK_THROWS_AS(encode_tag(0, -1e-9), std::out_of_range);
    CHECK_THROWS_AS(encode_tag(0, 2e8), std::out_of_range);  // beyond 60-bit range
}

TEST_CASE("round trip is exact and error stays within half a tick") {
    Rng rng(23);
    // double-valued times are tick-exact up to 2^50 ticks (~2 days), far
    // beyond any run; the remaining 60-bit range is format headroom
    for (int i = 0; i < 1000000; ++i) {
        const unsigned ch = static_cast<unsigned>(rng.below(16));
        const std::uint64_t tick = rng.below(std::uint64_t{1} << 50);
        const TimeTag t(ch, tick);
        const TimeTag back = encode_tag(t.channel(), t.time_s());
        REQUIRE(back.raw() == t.raw());
    }
    for (int i = 0; i < 100000; ++i) {
        const double time = rng.uniform() * 400.0;  // realistic run times
        const TimeTag t = encode_tag(3, time);
        // half a tick plus the double quantization of the input itself
        CHECK(std::abs(t.time_s() - time) <= 78e-12 + 4.0 * time * 2.3e-16);
    }
}

TEST_CASE("encode is monotone in time") {
    Rng rng(29);
    double t1 = 0.0;
    for (int i = 0; i < 100000; ++i) {
        const double t2 = t1 + rng.uniform() * 1e-9;
        CHECK(encode_tag(0, t2).tick() >= encode_tag(0, t1).tick());
        t1 = t2;
    }
}

TEST_CASE("empty stream serializes to the 24-byte header") {
    TagStream s;
    s.party = 1;
    s.epoch_s = 123;
    const auto bytes = write_stream(s);
    CHECK(bytes.size() == 24);
    const TagStream back = read_stream(bytes);
    CHECK(back.party == 1);
    CHECK(back.epoch_s == 123);
    CHECK(back.tags.empty());
}

TEST_CASE("golden header and payload bytes") {
    TagStream s;
    s.party = 1;
    s.epoch_s = 0x0102030405060708ULL;
    s.tags = {TimeTag(2, 1)};  // word = (2 << 60) | 1
    const auto bytes = write_stream(s);
    const std::uint8_t expected[32] = {
        'E', 'T', 'A', 'G',             // magic
        0x01, 0x00,                     // version 1
        0x01,                           // party
        0x00,                           // reserved
        0x08, 0x07, 0x06, 0x05, 0x04, 0x03, 0x02, 0x01,  // epoch LE
        0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,  // count LE
        0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x20,  // tag word LE
    };
    REQUIRE(bytes.size() == 32);
    for (std::size_t i = 0; i < 32; ++i) {
        CAPTURE(i);
        CHECK(bytes[i] == expected[i]);
    }
}

TEST_CASE("write then read round trip") {
    Rng rng(31);
    TagStream s;
    s.party = 0;
    s.epoch_s = 1234567890;
    std::uint64_t tick = 0;
    for (int i = 0; i < 50000; ++i) {
        tick += rng.below(10000);
        s.tags.emplace_back(static_cast<unsigned>(rng.below(4)), tick);
    }
    const TagStream back = read_stream(write_stream(s));
    REQUIRE(back.tags.size() == s.tags.size());
    CHECK(back.epoch_s == s.epoch_s);
    for (std::size_t i = 0; i < s.tags.size(); ++i) {
        REQUIRE(back.tags[i].raw() == s.tags[i].raw());
    }
}

TEST_CASE("distinct errors for magic, version, truncation and order") {
    TagStream s;
    s.tags = {TimeTag(0, 5), TimeTag(1, 9)};
    auto bytes = write_stream(s);

    auto corrupted = bytes;
    corrupted[0] = 'X';
    CHECK_THROWS_WITH_AS(read_stream(corrupted), "bad stream magic", StreamFormatError);
    try {
        read_stream(corrupted);
    } catch (const StreamFormatError& e) {
        CHECK(e.fault() == StreamFault::bad_magic);
    }

    corrupted = bytes;
    corrupted[4] = 9;
    try {
        read_stream(corrupted);
        FAIL("expected bad_version");
    } catch (const StreamFormatError& e) {
        CHECK(e.fault() == StreamFault::bad_version);
    }

    corrupted = bytes;
    corrupted.pop_back();
    try {
        read_stream(corrupted);
        FAIL("expected truncated");
    } catch (const StreamFormatError& e) {
        CHECK(e.fault() == StreamFault::truncated);
    }

    TagStream unsorted;
    unsorted.tags = {TimeTag(0, 9), TimeTag(0, 5)};
    // serialize by hand: write_stream does not police order, read must
    auto raw = write_stream(unsorted);
    try {
        read_stream(raw);
        FAIL("expected unsorted");
    } catch (const StreamFormatError& e) {
        CHECK(e.fault() == StreamFault::unsorted);
    }

    std::vector<std::uint8_t> tiny(bytes.begin(), bytes.begin() + 10);
    try {
        read_stream(tiny);
        FAIL("expected truncated");
    } catch (const StreamFormatError& e) {
        CHECK(e.fault() == StreamFault::truncated);
    }
}

TEST_CASE("file round trip") {
    TagStream s;
    s.party = 1;
    s.epoch_s = 42;
    s.tags = {TimeTag(0, 1), TimeTag(3, 2), TimeTag(1, 2)};
    const auto path = std::filesystem::temp_directory_path() / "entlink_tagstream_test.etag";
    write_stream_file(s, path);
    const TagStream back = read_stream_file(path);
    REQUIRE(back.tags.size() == 3);
    CHECK(back.tags[1].raw() == s.tags[1].raw());
    std::filesystem::remove(path);
}
