#include "entlink/net.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <sstream>
#include <thread>

#include "entlink/rng.hpp"

namespace entlink::net {

namespace {

constexpr char kMagic[4] = {'E', 'L', 'N', 'K'};

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint16_t get_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

void require_payload(const Frame& f, std::size_t size, const char* what) {
    if (f.payload.size() != size) {
        throw FramingError(std::string(what) + ": unexpected payload size " +
                           std::to_string(f.payload.size()));
    }
}

}  // namespace

std::vector<std::uint8_t> encode_frame(const Frame& frame) {
    if (frame.payload.size() > kMaxPayloadBytes) {
        throw FramingError("payload exceeds the frame limit");
    }
    std::vector<std::uint8_t> out;
    out.reserve(kFrameHeaderBytes + frame.payload.size());
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u16(out, kProtocolVersion);
    out.push_back(static_cast<std::uint8_t>(frame.type));
    out.push_back(frame.flags);
    put_u32(out, static_cast<std::uint32_t>(frame.payload.size()));
    out.insert(out.end(), frame.payload.begin(), frame.payload.end());
    return out;
}

void FrameDecoder::feed(std::span<const std::uint8_t> bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
}

std::optional<Frame> FrameDecoder::next() {
    if (pos_ > 0 && pos_ == buf_.size()) {
        buf_.clear();
        pos_ = 0;
    }
    if (buf_.size() - pos_ < kFrameHeaderBytes) return std::nullopt;
    const std::uint8_t* p = buf_.data() + pos_;
    if (std::memcmp(p, kMagic, 4) != 0) throw FramingError("bad frame magic");
    const std::uint16_t version = get_u16(p + 4);
    if (version != kProtocolVersion) {
        throw FramingError("unsupported protocol version " + std::to_string(version));
    }
    const std::uint32_t len = get_u32(p + 8);
    if (len > kMaxPayloadBytes) throw FramingError("frame payload too large");
    if (buf_.size() - pos_ < kFrameHeaderBytes + len) return std::nullopt;
    Frame f;
    f.type = static_cast<FrameType>(p[6]);
    f.flags = p[7];
    f.payload.assign(p + kFrameHeaderBytes, p + kFrameHeaderBytes + len);
    pos_ += kFrameHeaderBytes + len;
    if (pos_ > (1u << 20)) {
        buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
        pos_ = 0;
    }
    return f;
}

Frame make_hello(const HelloPayload& p) {
    Frame f;
    f.type = FrameType::hello;
    put_u16(f.payload, p.version);
    f.payload.push_back(p.party);
    f.payload.push_back(0);
    return f;
}

Frame make_epoch_sync(const EpochSyncPayload& p) {
    Frame f;
    f.type = FrameType::epoch_sync;
    put_u64(f.payload, p.epoch_s);
    put_u64(f.payload, p.local_clock_ms);
    return f;
}

Frame make_tag_batch(std::span<const TimeTag> tags) {
    if (tags.size() > kMaxTagsPerBatch) throw FramingError("batch exceeds 65535 tags");
    Frame f;
    f.type = FrameType::tag_batch;
    f.payload.reserve(tags.size() * 8);
    for (const TimeTag& t : tags) put_u64(f.payload, t.raw());
    return f;
}

Frame make_stats(const StatsPayload& p) {
    Frame f;
    f.type = FrameType::stats;
    put_u64(f.payload, p.tags_sent);
    put_u64(f.payload, p.drops);
    put_u64(f.payload, p.coincidence_rate_mcps);
    return f;
}

Frame make_ack(std::uint64_t received_tags) {
    Frame f;
    f.type = FrameType::ack;
    put_u64(f.payload, received_tags);
    return f;
}

Frame make_bye() {
    Frame f;
    f.type = FrameType::bye;
    return f;
}

HelloPayload parse_hello(const Frame& f) {
    require_payload(f, 4, "HELLO");
    return {get_u16(f.payload.data()), f.payload[2]};
}

EpochSyncPayload parse_epoch_sync(const Frame& f) {
    require_payload(f, 16, "EPOCH_SYNC");
    return {get_u64(f.payload.data()), get_u64(f.payload.data() + 8)};
}

std::vector<TimeTag> parse_tag_batch(const Frame& f) {
    if (f.payload.size() % 8 != 0) throw FramingError("TAG_BATCH payload not a tag multiple");
    std::vector<TimeTag> tags;
    tags.reserve(f.payload.size() / 8);
    for (std::size_t i = 0; i < f.payload.size(); i += 8) {
        tags.push_back(TimeTag::from_raw(get_u64(f.payload.data() + i)));
    }
    return tags;
}

StatsPayload parse_stats(const Frame& f) {
    require_payload(f, 24, "STATS");
    return {get_u64(f.payload.data()), get_u64(f.payload.data() + 8),
            get_u64(f.payload.data() + 16)};
}

std::uint64_t parse_ack(const Frame& f) {
    require_payload(f, 8, "ACK");
    return get_u64(f.payload.data());
}

EpochAgreement agree_epoch(double initiator_clock_s, double responder_clock_s) {
    EpochAgreement agreement;
    agreement.delta_s = std::abs(initiator_clock_s - responder_clock_s);
    if (agreement.delta_s > kMaxEpochDisagreementS) {
        std::ostringstream msg;
        msg << "epoch disagreement " << agreement.delta_s << " s exceeds "
            << kMaxEpochDisagreementS << " s";
        throw HandshakeError(msg.str());
    }
    agreement.epoch_s = static_cast<std::uint64_t>(
        std::floor(std::max(initiator_clock_s, responder_clock_s))) + 2;
    return agreement;
}

// --- loopback channel -----------------------------------------------------

namespace {

struct Pipe {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<std::uint8_t> data;
    bool closed = false;
    LoopbackOptions opt;
    std::int64_t sends_left = -1;
    Rng rng{1};

    explicit Pipe(const LoopbackOptions& o) : opt(o), sends_left(o.fail_after_sends) {
        if (o.fragment_seed != 0) rng = Rng(o.fragment_seed);
    }

    void send(std::span<const std::uint8_t> bytes) {
        std::unique_lock lk(mu);
        if (closed) throw ChannelClosed("loopback channel closed");
        if (sends_left >= 0) {
            if (sends_left == 0) {
                closed = true;
                cv.notify_all();
                throw ChannelClosed("injected connection loss");
            }
            --sends_left;
        }
        data.insert(data.end(), bytes.begin(), bytes.end());
        cv.notify_all();
    }

    std::size_t receive(std::uint8_t* buf, std::size_t max) {
        std::unique_lock lk(mu);
        cv.wait(lk, [&] { return closed || !data.empty(); });
        if (data.empty()) return 0;  // closed
        std::size_t n = std::min(max, data.size());
        if (opt.chunk_limit > 0) n = std::min(n, opt.chunk_limit);
        if (opt.fragment_seed != 0 && n > 1) {
            n = 1 + static_cast<std::size_t>(rng.below(n));
        }
        for (std::size_t i = 0; i < n; ++i) {
            buf[i] = data.front();
            data.pop_front();
        }
        return n;
    }

    void close() {
        std::lock_guard lk(mu);
        closed = true;
        cv.notify_all();
    }
};

class LoopbackEnd : public ByteChannel {
public:
    LoopbackEnd(std::shared_ptr<Pipe> out, std::shared_ptr<Pipe> in)
        : out_(std::move(out)), in_(std::move(in)) {}
    ~LoopbackEnd() override { close(); }

    void send(std::span<const std::uint8_t> bytes) override { out_->send(bytes); }
    std::size_t receive(std::uint8_t* buf, std::size_t max) override {
        return in_->receive(buf, max);
    }
    void close() override {
        out_->close();
        in_->close();
    }

private:
    std::shared_ptr<Pipe> out_;
    std::shared_ptr<Pipe> in_;
};

}  // namespace

std::pair<std::unique_ptr<ByteChannel>, std::unique_ptr<ByteChannel>> make_loopback(
    const LoopbackOptions& a_to_b, const LoopbackOptions& b_to_a) {
    auto ab = std::make_shared<Pipe>(a_to_b);
    auto ba = std::make_shared<Pipe>(b_to_a);
    return {std::make_unique<LoopbackEnd>(ab, ba), std::make_unique<LoopbackEnd>(ba, ab)};
}

// --- TCP channel ------------------------------------------------------------

namespace {

class TcpChannel : public ByteChannel {
public:
    explicit TcpChannel(int fd) : fd_(fd) {
        const int one = 1;
        ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    }
    ~TcpChannel() override { close(); }

    void send(std::span<const std::uint8_t> bytes) override {
        std::size_t sent = 0;
        while (sent < bytes.size()) {
            const ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent,
                                     MSG_NOSIGNAL);
            if (n <= 0) throw ChannelClosed("tcp send failed: " + std::string(strerror(errno)));
            sent += static_cast<std::size_t>(n);
        }
    }

    std::size_t receive(std::uint8_t* buf, std::size_t max) override {
        const ssize_t n = ::recv(fd_, buf, max, 0);
        if (n < 0) throw ChannelClosed("tcp recv failed: " + std::string(strerror(errno)));
        return static_cast<std::size_t>(n);
    }

    void close() override {
        if (fd_ >= 0) {
            ::shutdown(fd_, SHUT_RDWR);
            ::close(fd_);
            fd_ = -1;
        }
    }

private:
    int fd_;
};

}  // namespace

std::unique_ptr<ByteChannel> tcp_connect(const std::string& host, std::uint16_t port,
                                         double timeout_s) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw NetworkError("socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd);
        throw NetworkError("cannot parse address " + host);
    }
    timeval tv{};
    tv.tv_sec = static_cast<long>(timeout_s);
    tv.tv_usec = static_cast<long>((timeout_s - std::floor(timeout_s)) * 1e6);
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(fd);
        throw NetworkError("connect to " + host + ":" + std::to_string(port) + " failed: " +
                           strerror(errno));
    }
    return std::make_unique<TcpChannel>(fd);
}

TcpServer::TcpServer(std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw NetworkError("socket() failed");
    const int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw NetworkError("bind to port " + std::to_string(port) + " failed");
    }
    if (::listen(fd_, 4) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw NetworkError("listen failed");
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
}

TcpServer::~TcpServer() {
    if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<ByteChannel> TcpServer::accept(double timeout_s) {
    pollfd pfd{fd_, POLLIN, 0};
    const int rc = ::poll(&pfd, 1, static_cast<int>(timeout_s * 1000.0));
    if (rc == 0) throw NetworkError("accept timed out");
    if (rc < 0) throw NetworkError("poll failed");
    const int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) throw NetworkError("accept failed");
    return std::make_unique<TcpChannel>(fd);
}

// --- framed connection helper ----------------------------------------------

namespace {

class FrameLink {
public:
    explicit FrameLink(ByteChannel& ch) : ch_(ch) {}

    void send(const Frame& f) { ch_.send(encode_frame(f)); }

    Frame read() {
        for (;;) {
            if (auto f = decoder_.next()) return std::move(*f);
            std::uint8_t buf[16384];
            const std::size_t n = ch_.receive(buf, sizeof(buf));
            if (n == 0) throw ChannelClosed("peer closed the connection");
            decoder_.feed({buf, n});
        }
    }

    Frame expect(FrameType type) {
        Frame f = read();
        if (f.type == FrameType::bye && type != FrameType::bye) {
            throw HandshakeError("peer rejected the session");
        }
        if (f.type != type) {
            throw FramingError("unexpected frame type " +
                               std::to_string(static_cast<int>(f.type)));
        }
        return f;
    }

private:
    ByteChannel& ch_;
    FrameDecoder decoder_;
};

}  // namespace

// --- sender ------------------------------------------------------------------

SenderReport stream_tags(const ChannelFactory& connect, const TagStream& bob,
                         const SenderOptions& options) {
    if (options.batch_size == 0 || options.batch_size > kMaxTagsPerBatch) {
        throw std::invalid_argument("batch_size must lie in [1, 65535]");
    }
    SenderReport report;
    const std::uint64_t total = bob.tags.size();
    std::uint64_t acked = 0;
    bool finished = false;
    int attempts = 0;

    while (!finished) {
        if (attempts++ > options.max_reconnects) {
            throw NetworkError("exceeded the reconnect limit");
        }
        std::unique_ptr<ByteChannel> ch = connect();
        FrameLink link(*ch);
        try {
            link.send(make_hello({kProtocolVersion, 1}));
            link.send(make_epoch_sync(
                {bob.epoch_s,
                 static_cast<std::uint64_t>(options.local_clock_s * 1000.0)}));
            (void)parse_hello(link.expect(FrameType::hello));
            const EpochSyncPayload peer = parse_epoch_sync(link.expect(FrameType::epoch_sync));
            // symmetric NTP check; the receiver enforces it too
            agree_epoch(options.local_clock_s,
                        static_cast<double>(peer.local_clock_ms) / 1000.0);
            acked = parse_ack(link.expect(FrameType::ack));
            if (acked > total) throw FramingError("peer acknowledged more tags than exist");

            std::uint64_t cursor = acked;
            std::size_t batches_since_stats = 0;
            while (cursor < total) {
                const std::size_t n =
                    std::min<std::uint64_t>(options.batch_size, total - cursor);
                link.send(make_tag_batch(
                    {bob.tags.data() + cursor, static_cast<std::size_t>(n)}));
                ++report.batches;
                // lock-step: wait for the cumulative ACK before the next batch
                for (;;) {
                    Frame f = link.read();
                    if (f.type == FrameType::ack) {
                        acked = parse_ack(f);
                        break;
                    }
                    if (f.type == FrameType::stats) {
                        report.last_peer_stats = parse_stats(f);
                        continue;
                    }
                    throw FramingError("unexpected frame while waiting for ACK");
                }
                cursor = acked;
                if (++batches_since_stats >= options.stats_every_batches) {
                    batches_since_stats = 0;
                    link.send(make_stats({acked, 0, 0}));
                }
            }
            link.send(make_bye());
            for (;;) {
                Frame f = link.read();
                if (f.type == FrameType::stats) {
                    report.last_peer_stats = parse_stats(f);
                    continue;
                }
                if (f.type == FrameType::ack) {
                    acked = parse_ack(f);
                    if (acked == total) break;
                    continue;
                }
                if (f.type == FrameType::bye) break;
                throw FramingError("unexpected frame after BYE");
            }
            finished = true;
            report.tags_sent = total;
        } catch (const ChannelClosed&) {
            ++report.reconnects;
            continue;  // resume from the last cumulative ACK
        }
    }
    return report;
}

// --- receiver session --------------------------------------------------------

const char* to_string(SessionPhase phase) {
    switch (phase) {
        case SessionPhase::handshake: return "handshake";
        case SessionPhase::syncing: return "syncing";
        case SessionPhase::locked: return "locked";
        case SessionPhase::degraded: return "degraded";
        case SessionPhase::done: return "done";
    }
    return "?";
}

namespace {

template <typename T>
class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

    void push(T item) {
        std::unique_lock lk(mu_);
        cv_space_.wait(lk, [&] { return items_.size() < capacity_ || closed_; });
        if (closed_) return;
        items_.push_back(std::move(item));
        cv_items_.notify_one();
    }

    std::optional<T> pop() {
        std::unique_lock lk(mu_);
        cv_items_.wait(lk, [&] { return !items_.empty() || closed_; });
        if (items_.empty()) return std::nullopt;
        T item = std::move(items_.front());
        items_.pop_front();
        cv_space_.notify_one();
        return item;
    }

    void close() {
        std::lock_guard lk(mu_);
        closed_ = true;
        cv_items_.notify_all();
        cv_space_.notify_all();
    }

private:
    std::mutex mu_;
    std::condition_variable cv_items_;
    std::condition_variable cv_space_;
    std::deque<T> items_;
    std::size_t capacity_;
    bool closed_ = false;
};

// One-to-one greedy matching over a growing Bob stream. Events are grouped
// into clusters separated by gaps larger than the window; a closed cluster
// matches exactly as the offline matcher would.
class StreamingMatcher {
public:
    StreamingMatcher(const TagStream& alice, double window_s)
        : alice_(alice), w_(window_s) {}

    void push_bob(TimeTag tag, double mapped) { pending_.push_back({tag, mapped}); }

    void advance(double safe_until, std::vector<CoincidencePair>& out) {
        std::size_t ta = ai_;
        std::size_t tb = 0;
        std::size_t ca = ta;
        std::size_t cb = tb;
        double cluster_end = 0.0;
        bool open = false;
        for (;;) {
            const double na =
                ta < alice_.tags.size() ? alice_.tags[ta].time_s() : HUGE_VAL;
            const double nb = tb < pending_.size() ? pending_[tb].mapped : HUGE_VAL;
            const double t = std::min(na, nb);
            if (open && t - cluster_end > w_) {
                flush(ca, ta, cb, tb, out);
                ca = ta;
                cb = tb;
                open = false;
                ai_ = ta;
                committed_b_ = tb;
            }
            if (t >= safe_until || t == HUGE_VAL) break;
            open = true;
            cluster_end = t;
            if (na <= nb) ++ta; else ++tb;
        }
        pending_.erase(pending_.begin(),
                       pending_.begin() + static_cast<std::ptrdiff_t>(committed_b_));
        committed_b_ = 0;
    }

    void finish(std::vector<CoincidencePair>& out) { advance(HUGE_VAL, out); }

private:
    struct BobEv {
        TimeTag tag;
        double mapped;
    };

    void flush(std::size_t a_lo, std::size_t a_hi, std::size_t b_lo, std::size_t b_hi,
               std::vector<CoincidencePair>& out) {
        if (b_lo == b_hi || a_lo == a_hi) return;
        struct Candidate {
            double abs_res;
            double res;
            std::size_t ai;
            std::size_t bi;
        };
        std::vector<Candidate> cand;
        for (std::size_t bi = b_lo; bi < b_hi; ++bi) {
            const double bt = pending_[bi].mapped;
            for (std::size_t ai = a_lo; ai < a_hi; ++ai) {
                const double res = alice_.tags[ai].time_s() - bt;
                if (res < -w_ / 2.0) continue;
                if (res > w_ / 2.0) break;
                cand.push_back({std::abs(res), res, ai, bi});
            }
        }
        // same ordering rule as the offline matcher: indices preserve the
        // per-stream tag order inside the cluster
        std::sort(cand.begin(), cand.end(), [](const Candidate& x, const Candidate& y) {
            if (x.abs_res != y.abs_res) return x.abs_res < y.abs_res;
            if (x.ai != y.ai) return x.ai < y.ai;
            return x.bi < y.bi;
        });
        std::vector<CoincidencePair> matched;
        std::vector<bool> a_used(a_hi - a_lo, false);
        std::vector<bool> b_used(b_hi - b_lo, false);
        for (const Candidate& c : cand) {
            if (a_used[c.ai - a_lo] || b_used[c.bi - b_lo]) continue;
            a_used[c.ai - a_lo] = true;
            b_used[c.bi - b_lo] = true;
            matched.push_back({alice_.tags[c.ai], pending_[c.bi].tag, c.res});
        }
        std::sort(matched.begin(), matched.end(),
                  [](const CoincidencePair& x, const CoincidencePair& y) {
                      if (x.alice.tick() != y.alice.tick()) return x.alice.tick() < y.alice.tick();
                      if (x.bob.tick() != y.bob.tick()) return x.bob.tick() < y.bob.tick();
                      return x.alice.raw() < y.alice.raw();
                  });
        out.insert(out.end(), matched.begin(), matched.end());
    }

    const TagStream& alice_;
    double w_;
    std::deque<BobEv> pending_;
    std::size_t ai_ = 0;
    std::size_t committed_b_ = 0;
};

}  // namespace

struct ReceiverSession::Impl {
    TagStream alice;
    ReceiverOptions opt;

    mutable std::mutex mu;
    TagStream bob;
    std::vector<CoincidencePair> emitted;
    std::vector<std::string> events;
    SessionPhase phase = SessionPhase::handshake;
    std::uint64_t batches = 0;
    std::uint64_t received_tags = 0;  // ingestion-side cursor for ACKs
    std::uint64_t last_tick = 0;
    bool have_epoch = false;
    bool done = false;
    std::atomic<double> live_rate{0.0};

    // online sync state
    bool locked = false;
    OffsetEstimate initial;
    std::vector<ClockKnot> knots;
    std::size_t seg_next = 0;      // next segment index to refine
    std::size_t seg_j = 0;         // first bob index of that segment
    std::size_t push_frontier = 0; // bob tags handed to the matcher
    double next_lock_span = 0.0;
    StreamingMatcher matcher;

    BoundedQueue<std::vector<TimeTag>> queue;

    Impl(TagStream a, const ReceiverOptions& o)
        : alice(std::move(a)), opt(o), matcher(alice, o.analysis.window_s),
          queue(o.queue_capacity) {
        next_lock_span = opt.analysis.segment_s;
    }

    void log_event(const std::string& msg) { events.push_back(msg); }

    void set_phase(SessionPhase p, const std::string& cause) {
        if (phase == p) return;
        phase = p;
        log_event(std::string(to_string(p)) + ": " + cause);
    }

    double delta_epoch() const {
        return static_cast<double>(static_cast<std::int64_t>(bob.epoch_s) -
                                   static_cast<std::int64_t>(alice.epoch_s));
    }

    double bob_time(std::size_t j) const { return bob.tags[j].time_s() + delta_epoch(); }

    double bob_span() const {
        return bob.tags.empty() ? 0.0 : bob_time(bob.tags.size() - 1) - bob_time(0);
    }

    // extraction task: consume batches, maintain lock and emit pairs
    void extraction_loop() {
        while (auto batch = queue.pop()) {
            std::lock_guard lk(mu);
            bob.tags.insert(bob.tags.end(), batch->begin(), batch->end());
            process_locked();
        }
        std::lock_guard lk(mu);
        finalize_locked();
    }

    void try_initial_lock() {
        OffsetSearchParams search;
        search.search_span_s = opt.analysis.search_span_s;
        search.coarse_bin_s = opt.analysis.coarse_bin_s;
        search.confidence_threshold = opt.analysis.confidence_threshold;
        try {
            initial = estimate_offset(alice, bob, search);
            locked = true;
            std::ostringstream msg;
            msg << "offset " << initial.offset_s * 1e6 << " us, confidence "
                << initial.confidence;
            set_phase(SessionPhase::locked, msg.str());
        } catch (const SyncError& e) {
            log_event(std::string("lock attempt failed: ") + e.what());
        }
    }

    void process_locked() {
        if (bob.tags.empty()) return;
        if (!locked) {
            if (bob_span() >= next_lock_span) {
                try_initial_lock();
                next_lock_span = bob_span() + opt.analysis.segment_s;
            }
            if (!locked) return;
        }
        advance_segments(false);
        advance_matching(false);
        const double span = bob_span();
        live_rate.store(span > 0.0 ? static_cast<double>(emitted.size()) / span : 0.0);
    }

    // refine segment knots exactly as track_drift would; while streaming,
    // segment k is only final once segment k+1 is known to be complete
    // (the last segment absorbs the remainder of the run)
    void advance_segments(bool at_end) {
        const double t0 = bob_time(0);
        const double seg = opt.analysis.segment_s;
        const double span = bob_span();
        const auto final_count =
            at_end ? static_cast<std::size_t>(std::floor(span / seg)) : 0;
        if (at_end && final_count < 2) return;  // constant solution; no knots

        auto refine_next = [&](double seg_hi, bool inclusive) {
            const std::size_t j_begin = seg_j;
            std::size_t j = seg_j;
            while (j < bob.tags.size() &&
                   (bob_time(j) < seg_hi || (inclusive && bob_time(j) <= seg_hi))) {
                ++j;
            }
            const double predicted = knots.empty() ? initial.offset_s : knots.back().offset_s;
            const OffsetEstimate est =
                refine_offset(alice, bob, j_begin, j, predicted, 0.5e-6,
                              2e-9);
            if (est.confidence < opt.analysis.confidence_threshold) {
                std::ostringstream msg;
                msg << "segment " << seg_next << " confidence " << est.confidence
                    << " below threshold";
                throw SyncError(SyncFault::lock_lost, msg.str(), est.confidence);
            }
            return std::pair{est.offset_s, j};
        };

        try {
            for (;;) {
                if (at_end) {
                    if (seg_next >= final_count) break;
                    const bool last = seg_next + 1 == final_count;
                    const double lo = t0 + seg * static_cast<double>(seg_next);
                    const double hi =
                        last ? bob_time(bob.tags.size() - 1) : t0 + seg * static_cast<double>(seg_next + 1);
                    auto [offset, j] = refine_next(hi, last);
                    knots.push_back({0.5 * (lo + hi), offset});
                    seg_j = j;
                    ++seg_next;
                } else {
                    // completable only when this segment cannot be the last
                    if (span < seg * static_cast<double>(seg_next + 2)) break;
                    const double lo = t0 + seg * static_cast<double>(seg_next);
                    const double hi = t0 + seg * static_cast<double>(seg_next + 1);
                    auto [offset, j] = refine_next(hi, false);
                    knots.push_back({0.5 * (lo + hi), offset});
                    seg_j = j;
                    ++seg_next;
                }
            }
        } catch (const SyncError& e) {
            locked = false;
            set_phase(SessionPhase::degraded, e.what());
            // re-acquire from scratch on further data
            next_lock_span = bob_span() + opt.analysis.segment_s;
        }
    }

    void advance_matching(bool at_end) {
        if (at_end) {
            ClockSolution sol = knots.size() >= 2 ? ClockSolution(knots)
                                                  : ClockSolution::constant(initial.offset_s);
            const double delta = delta_epoch();
            while (push_frontier < bob.tags.size()) {
                const TimeTag t = bob.tags[push_frontier];
                matcher.push_bob(t, sol.map_to_alice(t.time_s() + delta));
                ++push_frontier;
            }
            matcher.finish(emitted);
            return;
        }
        if (knots.size() < 2) return;
        ClockSolution sol{knots};
        const double delta = delta_epoch();
        const double limit = knots.back().t_b;
        while (push_frontier < bob.tags.size() &&
               bob.tags[push_frontier].time_s() + delta <= limit) {
            const TimeTag t = bob.tags[push_frontier];
            matcher.push_bob(t, sol.map_to_alice(t.time_s() + delta));
            ++push_frontier;
        }
        matcher.advance(sol.map_to_alice(limit) - 2.0 * opt.analysis.window_s, emitted);
    }

    void finalize_locked() {
        if (!bob.tags.empty()) {
            const auto final_count = static_cast<std::size_t>(
                std::floor(bob_span() / opt.analysis.segment_s));
            if (final_count < 2 && knots.empty()) {
                // short run: offline processing takes a single whole-stream
                // estimate, so redo the lock over the complete data
                locked = false;
                try_initial_lock();
            } else if (!locked) {
                try_initial_lock();
            }
        }
        if (locked) {
            advance_segments(true);
            if (locked) {  // may have degraded during the final refinement
                advance_matching(true);
                const double span = bob_span();
                live_rate.store(span > 0.0 ? static_cast<double>(emitted.size()) / span : 0.0);
            }
        }
        if (phase != SessionPhase::degraded) {
            set_phase(SessionPhase::done, "stream complete");
        }
        done = true;
    }
};

ReceiverSession::ReceiverSession(TagStream alice, const ReceiverOptions& options)
    : impl_(std::make_unique<Impl>(std::move(alice), options)) {}

ReceiverSession::~ReceiverSession() = default;

void ReceiverSession::run(const std::function<std::unique_ptr<ByteChannel>()>& accept) {
    std::thread extraction([this] { impl_->extraction_loop(); });

    bool bye = false;
    int connections = 0;
    std::exception_ptr fatal;
    while (!bye) {
        if (connections++ >= impl_->opt.max_connections) {
            fatal = std::make_exception_ptr(NetworkError("exceeded the connection limit"));
            break;
        }
        std::unique_ptr<ByteChannel> ch;
        try {
            ch = accept();
        } catch (...) {
            fatal = std::current_exception();
            break;
        }
        FrameLink link(*ch);
        try {
            const HelloPayload hello = parse_hello(link.expect(FrameType::hello));
            if (hello.version != kProtocolVersion) {
                throw HandshakeError("peer protocol version mismatch");
            }
            const EpochSyncPayload peer = parse_epoch_sync(link.expect(FrameType::epoch_sync));
            EpochAgreement agreement;
            try {
                agreement = agree_epoch(static_cast<double>(peer.local_clock_ms) / 1000.0,
                                        impl_->opt.local_clock_s);
            } catch (const HandshakeError&) {
                Frame reject = make_bye();
                reject.flags = 1;
                link.send(reject);
                throw;
            }
            {
                std::lock_guard lk(impl_->mu);
                if (!impl_->have_epoch) {
                    impl_->bob.party = 1;
                    impl_->bob.epoch_s = peer.epoch_s;
                    impl_->have_epoch = true;
                    std::ostringstream msg;
                    msg << "epoch agreed at " << agreement.epoch_s << ", clock delta "
                        << agreement.delta_s << " s";
                    impl_->set_phase(SessionPhase::syncing, msg.str());
                } else if (impl_->bob.epoch_s != peer.epoch_s) {
                    throw HandshakeError("peer changed its epoch across reconnects");
                } else {
                    impl_->log_event("peer reconnected");
                }
            }
            link.send(make_hello({kProtocolVersion, 0}));
            link.send(make_epoch_sync(
                {impl_->alice.epoch_s,
                 static_cast<std::uint64_t>(impl_->opt.local_clock_s * 1000.0)}));
            link.send(make_ack(impl_->received_tags));

            std::size_t batches_since_stats = 0;
            for (;;) {
                Frame f = link.read();
                if (f.type == FrameType::tag_batch) {
                    std::vector<TimeTag> tags = parse_tag_batch(f);
                    for (const TimeTag& t : tags) {
                        if (t.tick() < impl_->last_tick) {
                            throw FramingError("batch breaks stream ordering");
                        }
                        impl_->last_tick = t.tick();
                    }
                    impl_->received_tags += tags.size();
                    {
                        std::lock_guard lk(impl_->mu);
                        ++impl_->batches;
                    }
                    impl_->queue.push(std::move(tags));
                    link.send(make_ack(impl_->received_tags));
                    if (++batches_since_stats >= 16) {
                        batches_since_stats = 0;
                        link.send(make_stats(
                            {impl_->received_tags, 0,
                             static_cast<std::uint64_t>(impl_->live_rate.load() * 1000.0)}));
                    }
                } else if (f.type == FrameType::stats) {
                    continue;  // sender-side progress report
                } else if (f.type == FrameType::bye) {
                    link.send(make_stats(
                        {impl_->received_tags, 0,
                         static_cast<std::uint64_t>(impl_->live_rate.load() * 1000.0)}));
                    link.send(make_ack(impl_->received_tags));
                    bye = true;
                    break;
                } else {
                    throw FramingError("unexpected frame type in session");
                }
            }
        } catch (const ChannelClosed& e) {
            std::lock_guard lk(impl_->mu);
            impl_->log_event(std::string("connection lost: ") + e.what() +
                             "; awaiting reconnect");
            continue;
        } catch (...) {
            fatal = std::current_exception();
            break;
        }
    }

    impl_->queue.close();
    extraction.join();
    if (fatal) std::rethrow_exception(fatal);
}

SessionPhase ReceiverSession::phase() const {
    std::lock_guard lk(impl_->mu);
    return impl_->phase;
}

const std::vector<CoincidencePair>& ReceiverSession::pairs() const { return impl_->emitted; }

const TagStream& ReceiverSession::bob_received() const { return impl_->bob; }

const TagStream& ReceiverSession::alice_stream() const { return impl_->alice; }

const std::vector<std::string>& ReceiverSession::log() const { return impl_->events; }

std::uint64_t ReceiverSession::batches_received() const {
    std::lock_guard lk(impl_->mu);
    return impl_->batches;
}

double ReceiverSession::live_rate_cps() const { return impl_->live_rate.load(); }

}  // namespace entlink::net
