#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "entlink/analysis.hpp"
#include "entlink/sync.hpp"
#include "entlink/timetag.hpp"

namespace entlink::net {

// Wire format: magic "ELNK" | version u16 | type u8 | flags u8 |
// payload length u32 | payload, little-endian. TAG_BATCH payload is a
// contiguous run of packed 64-bit tags, sorted, at most 65535 of them.
inline constexpr std::uint16_t kProtocolVersion = 1;
inline constexpr std::size_t kFrameHeaderBytes = 12;
inline constexpr std::size_t kMaxTagsPerBatch = 65535;
inline constexpr std::size_t kMaxPayloadBytes = kMaxTagsPerBatch * 8;

enum class FrameType : std::uint8_t {
    hello = 1,
    epoch_sync = 2,
    tag_batch = 3,
    stats = 4,
    bye = 5,
    ack = 6,
};

struct Frame {
    FrameType type = FrameType::hello;
    std::uint8_t flags = 0;
    std::vector<std::uint8_t> payload;
};

class FramingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_frame(const Frame& frame);

// Incremental decoder; survives arbitrary byte-boundary fragmentation.
class FrameDecoder {
public:
    void feed(std::span<const std::uint8_t> bytes);
    std::optional<Frame> next();  // a complete frame, if buffered

private:
    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

struct HelloPayload {
    std::uint16_t version = kProtocolVersion;
    std::uint8_t party = 0;
};

struct EpochSyncPayload {
    std::uint64_t epoch_s = 0;        // proposed/recorded integer start second
    std::uint64_t local_clock_ms = 0; // sender's clock sample for the NTP check
};

struct StatsPayload {
    std::uint64_t tags_sent = 0;
    std::uint64_t drops = 0;
    std::uint64_t coincidence_rate_mcps = 0;  // milli-cps
};

Frame make_hello(const HelloPayload& p);
Frame make_epoch_sync(const EpochSyncPayload& p);
Frame make_tag_batch(std::span<const TimeTag> tags);
Frame make_stats(const StatsPayload& p);
Frame make_ack(std::uint64_t received_tags);
Frame make_bye();

HelloPayload parse_hello(const Frame& f);
EpochSyncPayload parse_epoch_sync(const Frame& f);
std::vector<TimeTag> parse_tag_batch(const Frame& f);
StatsPayload parse_stats(const Frame& f);
std::uint64_t parse_ack(const Frame& f);

class NetworkError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class HandshakeError : public NetworkError {
public:
    using NetworkError::NetworkError;
};

// Connection ended (peer close, reset, injected fault). Recoverable through
// reconnect + resume.
class ChannelClosed : public NetworkError {
public:
    using NetworkError::NetworkError;
};

inline constexpr double kMaxEpochDisagreementS = 0.5;

struct EpochAgreement {
    std::uint64_t epoch_s = 0;  // agreed integer start second
    double delta_s = 0.0;       // measured clock disagreement
};

// NTP-style start agreement: both parties must report clocks within 500 ms,
// otherwise HandshakeError. The agreed epoch is the next full second after
// the later clock, plus a one-second guard.
EpochAgreement agree_epoch(double initiator_clock_s, double responder_clock_s);

// Reliable ordered byte stream.
class ByteChannel {
public:
    virtual ~ByteChannel() = default;
    virtual void send(std::span<const std::uint8_t> bytes) = 0;
    // blocks; returns 0 on orderly close
    virtual std::size_t receive(std::uint8_t* buf, std::size_t max) = 0;
    virtual void close() = 0;
};

// Loopback channel pair for tests: what one end sends the other receives.
// chunk_limit caps bytes handed out per receive() to exercise fragmentation;
// fail_after_frames injects a connection loss after that many send() calls.
struct LoopbackOptions {
    std::size_t chunk_limit = 0;        // 0 = unlimited
    std::uint64_t fragment_seed = 0;    // random chunk sizes when nonzero
    std::int64_t fail_after_sends = -1; // -1 = never
};
std::pair<std::unique_ptr<ByteChannel>, std::unique_ptr<ByteChannel>> make_loopback(
    const LoopbackOptions& a_to_b = {}, const LoopbackOptions& b_to_a = {});

std::unique_ptr<ByteChannel> tcp_connect(const std::string& host, std::uint16_t port,
                                         double timeout_s);

class TcpServer {
public:
    explicit TcpServer(std::uint16_t port);  // port 0 picks an ephemeral port
    ~TcpServer();
    std::uint16_t port() const { return port_; }
    std::unique_ptr<ByteChannel> accept(double timeout_s);

private:
    int fd_ = -1;
    std::uint16_t port_ = 0;
};

// --- Bob side: stream a recorded tag stream to Alice ---------------------

struct SenderOptions {
    std::size_t batch_size = 4096;
    std::size_t stats_every_batches = 16;
    double local_clock_s = 0.0;
    int max_reconnects = 32;
};

struct SenderReport {
    std::uint64_t tags_sent = 0;
    std::uint64_t batches = 0;
    std::uint64_t reconnects = 0;
    StatsPayload last_peer_stats;
};

using ChannelFactory = std::function<std::unique_ptr<ByteChannel>()>;

// Streams the tags in batches, lock-step with the receiver's ACKs, resuming
// from the last acknowledged tag after a connection loss.
SenderReport stream_tags(const ChannelFactory& connect, const TagStream& bob,
                         const SenderOptions& options);

// --- Alice side: receive, synchronize online, match in real time ---------

enum class SessionPhase { handshake, syncing, locked, degraded, done };

const char* to_string(SessionPhase phase);

struct ReceiverOptions {
    AnalysisOptions analysis;
    double local_clock_s = 0.0;
    std::size_t queue_capacity = 64;  // batches buffered between the tasks
    int max_connections = 32;
};

// Receives Bob's stream and extracts coincidences online. Tag ingestion and
// coincidence extraction run as two tasks over a bounded queue; the emitted
// pair set is identical to offline processing of the completed streams.
class ReceiverSession {
public:
    ReceiverSession(TagStream alice, const ReceiverOptions& options);
    ~ReceiverSession();

    // serves connections until BYE; use accept() as the channel source
    void run(const std::function<std::unique_ptr<ByteChannel>()>& accept);

    SessionPhase phase() const;
    const std::vector<CoincidencePair>& pairs() const;  // emitted online
    const TagStream& bob_received() const;
    const TagStream& alice_stream() const;
    const std::vector<std::string>& log() const;
    std::uint64_t batches_received() const;
    double live_rate_cps() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace entlink::net
