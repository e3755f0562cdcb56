#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "entlink/linksim.hpp"
#include "entlink/physics.hpp"
#include "entlink/rng.hpp"

using namespace entlink;

namespace {

// Source settings that reproduce the local characterization: 1 Mcps singles
// per arm and 145 kcps coincidences when both arms have 14.5% end-to-end
// efficiency (pair rate 6.9e6 / s).
SourceConfig local_source() {
    SourceConfig s;
    s.rep_rate_hz = 249e6;
    s.pair_prob_per_pulse = 145e3 / (0.145 * 0.145 * 249e6);
    s.local_coupling_eff = 0.145;
    return s;
}

RunConfig local_characterization() {
    RunConfig cfg;
    cfg.source = local_source();
    cfg.detector.efficiency = 0.145;  // Bob's arm measured locally, matched
    cfg.detector.dark_cps = 0.0;
    cfg.detector.jitter_sigma_s = 300e-12;
    cfg.detector.dead_time_s = 0.0;
    cfg.bob_settings = {AnalyzerAngle(0), AnalyzerAngle(45)};
    return cfg;
}

}  // namespace

TEST_CASE("pair emissions sit on the pulse grid with binomial counts") {
    SourceConfig cfg;
    cfg.rep_rate_hz = 249e6;
    cfg.pair_prob_per_pulse = 0.0;
    Rng rng(3);
    CHECK(sample_pair_emissions(cfg, 1.0, rng).empty());

    cfg.pair_prob_per_pulse = 145e3 / 249e6;  // pair rate 145 kcps
    Rng rng2(5);
    const auto emissions = sample_pair_emissions(cfg, 1.0, rng2);
    const double expected = 145e3;
    const double sigma = std::sqrt(expected * (1.0 - cfg.pair_prob_per_pulse));
    CHECK(std::abs(static_cast<double>(emissions.size()) - expected) <= 3.0 * sigma);

    const double period = 1.0 / cfg.rep_rate_hz;  // 4.0161 ns
    for (std::size_t i = 0; i < emissions.size(); i += 97) {
        const double n = emissions[i].time_s / period;
        CHECK(std::abs(n - std::round(n)) < 1e-6);
        CHECK(emissions[i].time_s ==
              doctest::Approx(static_cast<double>(emissions[i].pulse_index) * period));
    }
    CHECK(std::is_sorted(emissions.begin(), emissions.end(),
                         [](const PairEmission& a, const PairEmission& b) {
                             return a.pulse_index < b.pulse_index;
                         }));

    cfg.pair_prob_per_pulse = 0.1;
    Rng rng3(7);
    CHECK_THROWS_AS(sample_pair_emissions(cfg, 1.0, rng3), std::invalid_argument);
}

TEST_CASE("measure_pair: singlet anticorrelation in matched bases") {
    const SingletModel ideal{{1.0, 1.0}};
    const MeasurementSettings hv_diag{AnalyzerAngle(0), AnalyzerAngle(45)};
    Rng rng(11);
    int same_basis = 0;
    for (int i = 0; i < 20000; ++i) {
        const PairOutcome o = measure_pair(ideal, hv_diag, hv_diag, rng);
        if (o.basis_a != o.basis_b) continue;
        ++same_basis;
        CHECK(o.out_a != o.out_b);  // perfectly anticorrelated
    }
    CHECK(same_basis > 8000);
}

TEST_CASE("measure_pair: basis choices are 50/50 per party") {
    const SingletModel ideal{{1.0, 1.0}};
    const MeasurementSettings s{AnalyzerAngle(0), AnalyzerAngle(45)};
    Rng rng(13);
    const int n = 100000;
    std::map<std::pair<Basis, Basis>, int> counts;
    for (int i = 0; i < n; ++i) {
        const PairOutcome o = measure_pair(ideal, s, s, rng);
        ++counts[{o.basis_a, o.basis_b}];
    }
    const double sigma = std::sqrt(n * 0.25 * 0.75);
    for (const auto& [combo, c] : counts) {
        CHECK(std::abs(c - n * 0.25) <= 3.0 * sigma);
    }
    CHECK(counts.size() == 4);
}

TEST_CASE("measure_pair: Monte-Carlo correlations match the analytic model") {
    const SingletModel ideal{{1.0, 1.0}};
    const MeasurementSettings alice{AnalyzerAngle(0), AnalyzerAngle(45)};
    const MeasurementSettings bob{AnalyzerAngle(22.5), AnalyzerAngle(67.5)};
    Rng rng(17);
    const int n = 1000000;
    struct Cell {
        long same = 0;
        long total = 0;
    };
    std::map<std::pair<Basis, Basis>, Cell> cells;
    for (int i = 0; i < n; ++i) {
        const PairOutcome o = measure_pair(ideal, alice, bob, rng);
        Cell& c = cells[{o.basis_a, o.basis_b}];
        ++c.total;
        if (o.out_a == o.out_b) ++c.same;
    }
    for (const auto& [combo, cell] : cells) {
        const AnalyzerAngle a = combo.first == Basis::hv ? alice.hv_path : alice.diag_path;
        const AnalyzerAngle b = combo.second == Basis::hv ? bob.hv_path : bob.diag_path;
        const double e_model = correlation_expectation(ideal, a, b);
        const double e_hat =
            (2.0 * static_cast<double>(cell.same) - static_cast<double>(cell.total)) /
            static_cast<double>(cell.total);
        const double sigma = std::sqrt((1.0 - e_model * e_model) /
                                       static_cast<double>(cell.total));
        CHECK(std::abs(e_hat - e_model) <= 3.0 * sigma);
    }
}

TEST_CASE("transparent channel keeps every photon, jitter aside") {
    std::vector<DetectionEvent> photons;
    for (int i = 0; i < 1000; ++i) {
        photons.push_back({1e-6 * (i + 1), Party::bob,
                           static_cast<PolChannel>(i % 4), EventOrigin::pair, i});
    }
    ChannelConfig ch;  // 0 dB, no background
    DetectorConfig det;
    det.efficiency = 1.0;
    det.jitter_sigma_s = 50e-12;
    det.dead_time_s = 0.0;
    Rng rng(19);
    const auto out = apply_channel_and_detect(photons, ch, det, 1e-3, rng);
    REQUIRE(out.size() == photons.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(out[i].channel == photons[i].channel);
        CHECK(std::abs(out[i].true_time_s - photons[i].true_time_s) < 1e-9);
    }
}

TEST_CASE("thinning follows the configured survival probability") {
    std::vector<DetectionEvent> photons;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        photons.push_back({1e-7 * i, Party::bob, PolChannel::h, EventOrigin::pair, i});
    }
    ChannelConfig ch;
    ch.link_loss_db = 7.0;
    DetectorConfig det;
    det.efficiency = 0.5;
    det.dead_time_s = 0.0;
    Rng rng(23);
    const auto out = apply_channel_and_detect(photons, ch, det, 1e-7 * n, rng);
    const double p = std::pow(10.0, -0.7) * 0.5;
    const double sigma = std::sqrt(n * p * (1.0 - p));
    CHECK(std::abs(static_cast<double>(out.size()) - n * p) <= 3.0 * sigma);
}

TEST_CASE("paper rates: signal plus background plus dark lands near 1250 cps") {
    // 1 Mcps into -30 dB and 25% efficiency leaves ~250 cps of signal
    const double duration = 40.0;
    std::vector<DetectionEvent> photons;
    Rng gen(29);
    double t = 0.0;
    while ((t += gen.exponential(1e6)) < duration) {
        photons.push_back({t, Party::bob, static_cast<PolChannel>(gen.below(4)),
                           EventOrigin::pair, -1});
    }
    ChannelConfig ch;
    ch.link_loss_db = 30.0;
    ch.background_cps_per_detector = 50.0;
    DetectorConfig det;
    det.efficiency = 0.25;
    det.dark_cps = 200.0;
    Rng rng(31);
    const auto out = apply_channel_and_detect(photons, ch, det, duration, rng);

    std::uint64_t signal = 0;
    for (const auto& e : out) {
        if (e.origin == EventOrigin::pair) ++signal;
    }
    CHECK(std::abs(static_cast<double>(signal) / duration - 250.0) < 25.0);
    // 250 signal + 4 x 50 background + 4 x 200 dark = 1250 cps total
    const double total_rate = static_cast<double>(out.size()) / duration;
    CHECK(std::abs(total_rate - 1250.0) / 1250.0 < 0.10);
    CHECK(std::is_sorted(out.begin(), out.end(),
                         [](const DetectionEvent& a, const DetectionEvent& b) {
                             return a.true_time_s < b.true_time_s;
                         }));
}

TEST_CASE("background and dark counts are Poisson per detector") {
    ChannelConfig ch;
    ch.background_cps_per_detector = 500.0;
    DetectorConfig det;
    det.efficiency = 1.0;
    det.dark_cps = 500.0;
    det.dead_time_s = 0.0;
    Rng rng(37);
    std::vector<double> counts;
    for (int batch = 0; batch < 400; ++batch) {
        const auto out = apply_channel_and_detect({}, ch, det, 1.0, rng);
        counts.push_back(static_cast<double>(out.size()));
    }
    double mean = 0.0;
    for (double c : counts) mean += c;
    mean /= static_cast<double>(counts.size());
    double var = 0.0;
    for (double c : counts) var += (c - mean) * (c - mean);
    var /= static_cast<double>(counts.size() - 1);
    CHECK(var / mean > 0.9);
    CHECK(var / mean < 1.1);
    CHECK(mean == doctest::Approx(4000.0).epsilon(0.05));
}

TEST_CASE("dead-time filter enforces the per-detector gap") {
    std::vector<DetectionEvent> photons;
    Rng gen(41);
    double t = 0.0;
    for (int i = 0; i < 50000; ++i) {
        t += gen.exponential(2e6);
        photons.push_back({t, Party::bob, static_cast<PolChannel>(gen.below(4)),
                           EventOrigin::pair, i});
    }
    ChannelConfig ch;
    DetectorConfig det;
    det.efficiency = 1.0;
    det.jitter_sigma_s = 0.0;
    det.dead_time_s = 50e-9;
    Rng rng(43);
    const auto out = apply_channel_and_detect(photons, ch, det, t + 1e-6, rng);
    CHECK(out.size() < photons.size());
    double last[4] = {-1.0, -1.0, -1.0, -1.0};
    for (const auto& e : out) {
        const int c = static_cast<int>(e.channel);
        if (last[c] >= 0.0) CHECK(e.true_time_s - last[c] >= det.dead_time_s);
        last[c] = e.true_time_s;
    }
}

TEST_CASE("apply_clock examples and monotonicity") {
    std::vector<DetectionEvent> events;
    for (int i = 0; i < 1000; ++i) {
        events.push_back({1e-4 * i, Party::bob, PolChannel::h, EventOrigin::pair, i});
    }
    SUBCASE("identity") {
        const auto out = apply_clock(events, ClockConfig{0.0, 0.0, true});
        for (std::size_t i = 0; i < out.size(); ++i) {
            CHECK(out[i].local_time_s == events[i].true_time_s);
        }
    }
    SUBCASE("constant offset shifts every tag") {
        const auto out = apply_clock(events, ClockConfig{487e-6, 0.0, true});
        for (std::size_t i = 0; i < out.size(); ++i) {
            CHECK(out[i].local_time_s - events[i].true_time_s ==
                  doctest::Approx(487e-6).epsilon(1e-12));
        }
    }
    SUBCASE("drift accumulates linearly") {
        std::vector<DetectionEvent> ev{{100.0, Party::bob, PolChannel::h, EventOrigin::pair, 0}};
        const auto out = apply_clock(ev, ClockConfig{0.0, 1e-11, true});
        CHECK(out[0].local_time_s - 100.0 == doctest::Approx(1e-9).epsilon(1e-3));
    }
    SUBCASE("order preserved under the largest allowed drift") {
        const auto out = apply_clock(events, ClockConfig{0.0, -1e-6, false});
        CHECK(std::is_sorted(out.begin(), out.end(),
                             [](const LocalEvent& a, const LocalEvent& b) {
                                 return a.local_time_s < b.local_time_s;
                             }));
    }
    SUBCASE("invariants rejected") {
        CHECK_THROWS_AS(apply_clock(events, ClockConfig{0.0, 2e-6, false}),
                        std::invalid_argument);
        CHECK_THROWS_AS(apply_clock(events, ClockConfig{0.0, 1e-9, true}),
                        std::invalid_argument);
    }
}

TEST_CASE("simulate_run: zero duration, determinism and bookkeeping") {
    RunConfig cfg = local_characterization();

    const SimulationResult empty = simulate_run(cfg, 0.0, 1);
    CHECK(empty.alice.tags.empty());
    CHECK(empty.bob.tags.empty());
    CHECK(empty.truth.emitted_pairs == 0);

    const SimulationResult r1 = simulate_run(cfg, 0.5, 42);
    const SimulationResult r2 = simulate_run(cfg, 0.5, 42);
    REQUIRE(r1.alice.size() == r2.alice.size());
    REQUIRE(r1.bob.size() == r2.bob.size());
    for (std::size_t i = 0; i < r1.alice.size(); ++i) {
        REQUIRE(r1.alice.tags[i].raw() == r2.alice.tags[i].raw());
    }
    for (std::size_t i = 0; i < r1.bob.size(); ++i) {
        REQUIRE(r1.bob.tags[i].raw() == r2.bob.tags[i].raw());
    }

    const SimulationResult r3 = simulate_run(cfg, 0.5, 43);
    CHECK(r1.alice.size() != r3.alice.size());  // different seed, different stream

    CHECK(r1.truth.alice.total() == r1.alice.size());
    CHECK(r1.truth.bob.total() == r1.bob.size());
}

TEST_CASE("simulate_run reproduces the local source characterization") {
    // both arms at 14.5%: 1 Mcps singles each, 145 kcps coincident
    RunConfig cfg = local_characterization();
    const double duration = 1.0;
    const SimulationResult r = simulate_run(cfg, duration, 4242);

    const double singles_a = static_cast<double>(r.alice.size()) / duration;
    const double singles_b = static_cast<double>(r.bob.size()) / duration;
    const double coinc = static_cast<double>(r.truth.shared_pair_detections) / duration;
    CHECK(std::abs(singles_a - 1e6) <= 3.0 * std::sqrt(1e6));
    CHECK(std::abs(singles_b - 1e6) <= 3.0 * std::sqrt(1e6));
    CHECK(std::abs(coinc - 145e3) <= 3.0 * std::sqrt(145e3));

    CHECK(std::is_sorted(r.alice.tags.begin(), r.alice.tags.end(),
                         [](TimeTag a, TimeTag b) { return a.tick() < b.tick(); }));
    CHECK(r.alice.tags.back().time_s() < duration + 1e-6);
}

TEST_CASE("dead time shows up in the emitted streams") {
    RunConfig cfg = local_characterization();
    cfg.detector.dead_time_s = 50e-9;
    const SimulationResult r = simulate_run(cfg, 0.2, 7);
    std::uint64_t last[4] = {0, 0, 0, 0};
    bool seen[4] = {false, false, false, false};
    for (const TimeTag& t : r.alice.tags) {
        const unsigned c = t.channel() & 3u;
        if (seen[c]) {
            CHECK(static_cast<double>(t.tick() - last[c]) * kTickSeconds >= 50e-9 - 1e-10);
        }
        seen[c] = true;
        last[c] = t.tick();
    }
}

TEST_CASE("clock config lands in the emitted tags") {
    RunConfig cfg = local_characterization();
    cfg.source.pair_prob_per_pulse = 1e-5;
    cfg.clock_bob.offset_s = 487e-6;
    cfg.clock_bob.drift_rate = 0.0;
    const SimulationResult r = simulate_run(cfg, 0.1, 11);
    REQUIRE(!r.bob.tags.empty());
    // every bob tag is offset by ~487 us from its emission
    CHECK(r.bob.tags.front().time_s() >= 487e-6 - 1e-6);
    CHECK(r.truth.bob_clock.offset_s == 487e-6);
}

TEST_CASE("fading series: constant, banded, and tracking-off modes") {
    FadingModel f;
    f.mean_efficiency_db = -30.0;
    f.sigma_db = 0.0;
    auto series = link_efficiency_series(f, 100.0, 1.0, 5);
    for (double v : series) CHECK(v == doctest::Approx(-30.0));

    f.sigma_db = 1.8;
    f.correlation_time_s = 30.0;
    series = link_efficiency_series(f, 10000.0, 1.0, 6);
    int inside = 0;
    for (double v : series) {
        if (v >= -40.0 && v <= -25.0) ++inside;
    }
    CHECK(static_cast<double>(inside) / static_cast<double>(series.size()) >= 0.99);

    f.tracking_off = true;
    f.ramp_db_per_s = 0.2;
    series = link_efficiency_series(f, 100.0, 1.0, 7);
    for (std::size_t i = 1; i < series.size(); ++i) {
        CHECK(-series[i] >= -series[i - 1]);  // loss never decreases
    }
}

TEST_CASE("fading modulates the simulated link") {
    RunConfig cfg = local_characterization();
    cfg.detector.efficiency = 1.0;
    FadingModel f;
    f.mean_efficiency_db = -10.0;
    f.sigma_db = 0.0;
    cfg.channel.fading = f;
    const SimulationResult r = simulate_run(cfg, 0.2, 13);
    // -10 dB fading on Bob's arm: his rate drops to ~10% of the pair rate
    const double pair_rate = cfg.source.pair_prob_per_pulse * cfg.source.rep_rate_hz;
    const double expect = 0.1 * pair_rate * 0.2;
    CHECK(std::abs(static_cast<double>(r.bob.size()) - expect) <= 4.0 * std::sqrt(expect));
}
