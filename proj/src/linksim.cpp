#include "entlink/linksim.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace entlink {

namespace {

constexpr double kFadingDt = 0.5;  // s, resolution of the fading series in a run

double db_to_linear(double loss_db) { return std::pow(10.0, -loss_db / 10.0); }

}  // namespace

void validate(const SourceConfig& c) {
    if (!(c.rep_rate_hz > 0.0)) throw std::invalid_argument("rep_rate_hz must be positive");
    if (!(c.pair_prob_per_pulse >= 0.0 && c.pair_prob_per_pulse < 0.1)) {
        throw std::invalid_argument("pair_prob_per_pulse must lie in [0, 0.1)");
    }
    if (!(c.local_coupling_eff >= 0.0 && c.local_coupling_eff <= 1.0)) {
        throw std::invalid_argument("local_coupling_eff must lie in [0, 1]");
    }
}

void validate(const ChannelConfig& c) {
    if (!std::isfinite(c.link_loss_db) || c.link_loss_db < 0.0) {
        throw std::invalid_argument("link_loss_db must be finite and >= 0");
    }
    if (!(c.background_cps_per_detector >= 0.0)) {
        throw std::invalid_argument("background_cps_per_detector must be >= 0");
    }
    if (!(c.depolarization_prob >= 0.0 && c.depolarization_prob <= 1.0)) {
        throw std::invalid_argument("depolarization_prob must lie in [0, 1]");
    }
}

void validate(const DetectorConfig& c) {
    if (!(c.efficiency >= 0.0 && c.efficiency <= 1.0)) {
        throw std::invalid_argument("detector efficiency must lie in [0, 1]");
    }
    if (!(c.dark_cps >= 0.0)) throw std::invalid_argument("dark_cps must be >= 0");
    if (!(c.jitter_sigma_s >= 0.0)) throw std::invalid_argument("jitter_sigma_s must be >= 0");
    if (!(c.dead_time_s >= 0.0)) throw std::invalid_argument("dead_time_s must be >= 0");
}

void validate(const ClockConfig& c) {
    if (!(std::abs(c.drift_rate) <= 1e-6)) {
        throw std::invalid_argument("|drift_rate| must be <= 1e-6");
    }
    if (c.gps_correction && std::abs(c.drift_rate) > 1e-11) {
        throw std::invalid_argument("GPS-disciplined clocks allow |drift_rate| <= 1e-11");
    }
    if (!std::isfinite(c.offset_s)) throw std::invalid_argument("offset_s must be finite");
}

std::vector<PairEmission> sample_pair_emissions(const SourceConfig& cfg, double duration_s,
                                                Rng& rng) {
    validate(cfg);
    if (!(duration_s >= 0.0)) throw std::invalid_argument("duration must be >= 0");
    std::vector<PairEmission> out;
    const double p = cfg.pair_prob_per_pulse;
    if (p <= 0.0 || duration_s == 0.0) return out;
    const auto n_pulses = static_cast<std::uint64_t>(duration_s * cfg.rep_rate_hz);
    out.reserve(static_cast<std::size_t>(1.05 * p * static_cast<double>(n_pulses)) + 16);
    // geometric gaps over the pulse grid: an exact Bernoulli(p)-per-pulse
    // process without iterating 1e10 empty pulses
    std::uint64_t pulse = rng.geometric(p);
    while (pulse < n_pulses) {
        out.push_back({pulse, static_cast<double>(pulse) / cfg.rep_rate_hz});
        pulse += 1 + rng.geometric(p);
    }
    return out;
}

PolChannel channel_for(Basis basis, Outcome out) {
    if (basis == Basis::hv) return out == Outcome::plus ? PolChannel::h : PolChannel::v;
    return out == Outcome::plus ? PolChannel::p : PolChannel::m;
}

Basis basis_of(PolChannel ch) {
    return (ch == PolChannel::h || ch == PolChannel::v) ? Basis::hv : Basis::diag;
}

Outcome outcome_of(PolChannel ch) {
    return (ch == PolChannel::h || ch == PolChannel::p) ? Outcome::plus : Outcome::minus;
}

PairOutcome measure_pair(const SingletModel& model, const MeasurementSettings& alice,
                         const MeasurementSettings& bob, Rng& rng) {
    PairOutcome r;
    r.basis_a = rng.bernoulli(0.5) ? Basis::hv : Basis::diag;
    r.basis_b = rng.bernoulli(0.5) ? Basis::hv : Basis::diag;
    const AnalyzerAngle a = r.basis_a == Basis::hv ? alice.hv_path : alice.diag_path;
    const AnalyzerAngle b = r.basis_b == Basis::hv ? bob.hv_path : bob.diag_path;
    const double p_pp = joint_probability(model, a, b, Outcome::plus, Outcome::plus);
    const double p_pm = joint_probability(model, a, b, Outcome::plus, Outcome::minus);
    const double p_mp = joint_probability(model, a, b, Outcome::minus, Outcome::plus);
    const double u = rng.uniform();
    if (u < p_pp) {
        r.out_a = Outcome::plus;
        r.out_b = Outcome::plus;
    } else if (u < p_pp + p_pm) {
        r.out_a = Outcome::plus;
        r.out_b = Outcome::minus;
    } else if (u < p_pp + p_pm + p_mp) {
        r.out_a = Outcome::minus;
        r.out_b = Outcome::plus;
    } else {
        r.out_a = Outcome::minus;
        r.out_b = Outcome::minus;
    }
    r.channel_a = channel_for(r.basis_a, r.out_a);
    r.channel_b = channel_for(r.basis_b, r.out_b);
    return r;
}

namespace {

// Loss lookup over an optional fading series. When fading is active it
// replaces the static link_loss_db.
struct LossSeries {
    double static_loss_db = 0.0;
    std::vector<double> efficiency_db;  // empty when fading is off
    double dt = kFadingDt;

    double loss_db_at(double t) const {
        if (efficiency_db.empty()) return static_loss_db;
        auto i = static_cast<std::size_t>(t / dt);
        if (i >= efficiency_db.size()) i = efficiency_db.size() - 1;
        return -efficiency_db[i];
    }
};

LossSeries make_loss_series(const ChannelConfig& ch, double duration_s, Rng& rng) {
    LossSeries s;
    s.static_loss_db = ch.link_loss_db;
    if (ch.fading) {
        s.efficiency_db =
            link_efficiency_series(*ch.fading, duration_s, kFadingDt, rng.next_u64());
    }
    return s;
}

struct RawEvent {
    double t = 0.0;
    PolChannel channel = PolChannel::h;
    EventOrigin origin = EventOrigin::pair;
    std::int64_t pair_id = -1;
};

void append_noise(std::vector<RawEvent>& out, double rate_per_detector, EventOrigin origin,
                  double duration_s, Rng& rng) {
    const double total = 4.0 * rate_per_detector;
    if (total <= 0.0) return;
    double t = rng.exponential(total);
    while (t < duration_s) {
        out.push_back({t, static_cast<PolChannel>(rng.below(4)), origin, -1});
        t += rng.exponential(total);
    }
}

void sort_events(std::vector<RawEvent>& ev) {
    std::sort(ev.begin(), ev.end(), [](const RawEvent& x, const RawEvent& y) {
        if (x.t != y.t) return x.t < y.t;
        if (x.channel != y.channel) return x.channel < y.channel;
        return x.origin < y.origin;
    });
}

// Drops events within dead_time of the previous accepted event on the same
// detector. Input must be sorted by time.
template <typename Ev, typename TimeFn>
std::vector<Ev> dead_time_filter(std::vector<Ev> events, double dead_time_s, TimeFn time_of) {
    if (dead_time_s <= 0.0) return events;
    double last[4] = {-1e300, -1e300, -1e300, -1e300};
    std::vector<Ev> kept;
    kept.reserve(events.size());
    for (const Ev& e : events) {
        const auto ch = static_cast<unsigned>(e.channel) & 3u;
        if (time_of(e) - last[ch] >= dead_time_s) {
            last[ch] = time_of(e);
            kept.push_back(e);
        }
    }
    return kept;
}

}  // namespace

std::vector<DetectionEvent> apply_channel_and_detect(std::vector<DetectionEvent> photons,
                                                     const ChannelConfig& channel,
                                                     const DetectorConfig& det,
                                                     double duration_s, Rng& rng) {
    validate(channel);
    validate(det);
    const Party party = photons.empty() ? Party::bob : photons.front().party;
    const LossSeries loss = make_loss_series(channel, duration_s, rng);

    std::vector<RawEvent> ev;
    ev.reserve(photons.size() / 4 + 64);
    for (const DetectionEvent& ph : photons) {
        const double survival = db_to_linear(loss.loss_db_at(ph.true_time_s)) * det.efficiency;
        if (!rng.bernoulli(survival)) continue;
        const double t = std::max(0.0, ph.true_time_s + rng.normal(0.0, det.jitter_sigma_s));
        ev.push_back({t, ph.channel, ph.origin, ph.pair_id});
    }
    append_noise(ev, channel.background_cps_per_detector, EventOrigin::background, duration_s,
                 rng);
    append_noise(ev, det.dark_cps, EventOrigin::dark, duration_s, rng);
    sort_events(ev);
    ev = dead_time_filter(std::move(ev), det.dead_time_s,
                          [](const RawEvent& e) { return e.t; });

    std::vector<DetectionEvent> out;
    out.reserve(ev.size());
    for (const RawEvent& e : ev) {
        out.push_back({e.t, party, e.channel, e.origin, e.pair_id});
    }
    return out;
}

std::vector<LocalEvent> apply_clock(const std::vector<DetectionEvent>& events,
                                    const ClockConfig& clock) {
    validate(clock);
    std::vector<LocalEvent> out;
    out.reserve(events.size());
    for (const DetectionEvent& e : events) {
        out.push_back({e.true_time_s * (1.0 + clock.drift_rate) + clock.offset_s, e.channel,
                       e.origin});
    }
    return out;
}

std::vector<double> link_efficiency_series(const FadingModel& fading, double duration_s,
                                           double dt_s, std::uint64_t seed) {
    if (!(dt_s > 0.0)) throw std::invalid_argument("fading dt must be positive");
    const auto n = static_cast<std::size_t>(std::ceil(duration_s / dt_s)) + 1;
    std::vector<double> series(n);
    if (fading.tracking_off) {
        for (std::size_t i = 0; i < n; ++i) {
            series[i] = fading.mean_efficiency_db - fading.ramp_db_per_s * (dt_s * static_cast<double>(i));
        }
        return series;
    }
    Rng rng(seed);
    const double rho = std::exp(-dt_s / fading.correlation_time_s);
    const double innovation = fading.sigma_db * std::sqrt(1.0 - rho * rho);
    double x = fading.mean_efficiency_db + fading.sigma_db * rng.normal();
    for (std::size_t i = 0; i < n; ++i) {
        series[i] = x;
        x = fading.mean_efficiency_db + (x - fading.mean_efficiency_db) * rho +
            innovation * rng.normal();
    }
    return series;
}

SimulationResult simulate_run(const RunConfig& cfg, double duration_s, std::uint64_t seed) {
    validate(cfg.source);
    validate(cfg.channel);
    validate(cfg.detector);
    validate(cfg.clock_alice);
    validate(cfg.clock_bob);
    validate(cfg.singlet.visibility);
    if (!(duration_s >= 0.0)) throw std::invalid_argument("duration must be >= 0");

    Rng master(seed);
    Rng pair_rng = master.fork(1);
    Rng alice_noise_rng = master.fork(2);
    Rng bob_noise_rng = master.fork(3);
    Rng fading_rng = master.fork(4);

    // Channel depolarization acts as a static visibility factor on the
    // measured correlations.
    SingletModel link_model = cfg.singlet;
    link_model.visibility.v_hv *= 1.0 - cfg.channel.depolarization_prob;
    link_model.visibility.v_diag *= 1.0 - cfg.channel.depolarization_prob;

    const LossSeries loss = make_loss_series(cfg.channel, duration_s, fading_rng);
    const double p = cfg.source.pair_prob_per_pulse;
    const double jitter = cfg.detector.jitter_sigma_s;

    SimulationResult res;
    res.truth.alice_clock = cfg.clock_alice;
    res.truth.bob_clock = cfg.clock_bob;

    std::vector<RawEvent> alice_raw;
    std::vector<RawEvent> bob_raw;
    {
        const double pair_rate = p * cfg.source.rep_rate_hz;
        alice_raw.reserve(static_cast<std::size_t>(
            1.05 * duration_s * (pair_rate * cfg.source.local_coupling_eff +
                                 4.0 * cfg.detector.dark_cps)) + 64);
        const double bob_signal_rate =
            pair_rate * db_to_linear(cfg.channel.link_loss_db) * cfg.detector.efficiency;
        bob_raw.reserve(static_cast<std::size_t>(
            1.1 * duration_s * (bob_signal_rate + 4.0 * (cfg.detector.dark_cps +
                                cfg.channel.background_cps_per_detector))) + 64);
    }

    if (p > 0.0 && duration_s > 0.0) {
        const auto n_pulses = static_cast<std::uint64_t>(duration_s * cfg.source.rep_rate_hz);
        std::uint64_t pulse = pair_rng.geometric(p);
        std::int64_t pair_id = 0;
        while (pulse < n_pulses) {
            const double t = static_cast<double>(pulse) / cfg.source.rep_rate_hz;
            ++res.truth.emitted_pairs;
            const bool alice_hit = pair_rng.bernoulli(cfg.source.local_coupling_eff);
            const double bob_survival =
                db_to_linear(loss.loss_db_at(t)) * cfg.detector.efficiency;
            const bool bob_hit = pair_rng.bernoulli(bob_survival);
            if (alice_hit || bob_hit) {
                const PairOutcome o =
                    measure_pair(link_model, cfg.alice_settings, cfg.bob_settings, pair_rng);
                if (alice_hit) {
                    const double ta = std::max(0.0, t + pair_rng.normal(0.0, jitter));
                    alice_raw.push_back({ta, o.channel_a, EventOrigin::pair, pair_id});
                }
                if (bob_hit) {
                    const double tb = std::max(0.0, t + pair_rng.normal(0.0, jitter));
                    bob_raw.push_back({tb, o.channel_b, EventOrigin::pair, pair_id});
                }
                if (alice_hit && bob_hit) ++res.truth.shared_pair_detections;
            }
            ++pair_id;
            pulse += 1 + pair_rng.geometric(p);
        }
    }

    // Alice measures at the source: dark counts apply, channel background
    // does not.
    append_noise(alice_raw, cfg.detector.dark_cps, EventOrigin::dark, duration_s,
                 alice_noise_rng);
    append_noise(bob_raw, cfg.channel.background_cps_per_detector, EventOrigin::background,
                 duration_s, bob_noise_rng);
    append_noise(bob_raw, cfg.detector.dark_cps, EventOrigin::dark, duration_s, bob_noise_rng);

    sort_events(alice_raw);
    sort_events(bob_raw);
    alice_raw = dead_time_filter(std::move(alice_raw), cfg.detector.dead_time_s,
                                 [](const RawEvent& e) { return e.t; });
    bob_raw = dead_time_filter(std::move(bob_raw), cfg.detector.dead_time_s,
                               [](const RawEvent& e) { return e.t; });

    auto finalize = [&](std::vector<RawEvent>& raw, const ClockConfig& clock, Party party,
                        PartyCounts& counts) {
        TagStream stream;
        stream.party = static_cast<std::uint8_t>(party);
        stream.epoch_s = cfg.epoch_s;
        stream.tags.reserve(raw.size());
        std::uint64_t prev_tick = 0;
        for (const RawEvent& e : raw) {
            const double local = e.t * (1.0 + clock.drift_rate) + clock.offset_s;
            if (local < 0.0) continue;  // precedes the local tagger start
            const TimeTag tag = encode_tag(static_cast<unsigned>(e.channel), local);
            if (tag.tick() < prev_tick) {
                throw std::logic_error("clock transform broke stream ordering");
            }
            prev_tick = tag.tick();
            stream.tags.push_back(tag);
            switch (e.origin) {
                case EventOrigin::pair: ++counts.pair; break;
                case EventOrigin::background: ++counts.background; break;
                case EventOrigin::dark: ++counts.dark; break;
            }
        }
        raw.clear();
        raw.shrink_to_fit();
        return stream;
    };

    res.alice = finalize(alice_raw, cfg.clock_alice, Party::alice, res.truth.alice);
    res.bob = finalize(bob_raw, cfg.clock_bob, Party::bob, res.truth.bob);
    return res;
}

std::string format_ground_truth(const GroundTruth& truth) {
    std::ostringstream os;
    os << "emitted_pairs = " << truth.emitted_pairs << "\n";
    os << "shared_pair_detections = " << truth.shared_pair_detections << "\n";
    os << "alice_pair = " << truth.alice.pair << "\n";
    os << "alice_background = " << truth.alice.background << "\n";
    os << "alice_dark = " << truth.alice.dark << "\n";
    os << "alice_total = " << truth.alice.total() << "\n";
    os << "bob_pair = " << truth.bob.pair << "\n";
    os << "bob_background = " << truth.bob.background << "\n";
    os << "bob_dark = " << truth.bob.dark << "\n";
    os << "bob_total = " << truth.bob.total() << "\n";
    os << "alice_clock_offset_s = " << truth.alice_clock.offset_s << "\n";
    os << "alice_clock_drift = " << truth.alice_clock.drift_rate << "\n";
    os << "bob_clock_offset_s = " << truth.bob_clock.offset_s << "\n";
    os << "bob_clock_drift = " << truth.bob_clock.drift_rate << "\n";
    return os.str();
}

}  // namespace entlink
