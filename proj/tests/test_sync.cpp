#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "entlink/linksim.hpp"
#include "entlink/rng.hpp"
#include "entlink/sync.hpp"

using namespace entlink;

namespace {

// paper-style link run with a lighter loss so short unit runs accumulate
// thousands of coincidences
RunConfig link_run(double loss_db = 15.0, double bob_drift = 0.0) {
    RunConfig cfg;
    cfg.source = {249e6, 4.026e-3, 0.145};
    cfg.singlet = {{0.98, 0.96}};
    cfg.channel.link_loss_db = loss_db;
    cfg.channel.background_cps_per_detector = 50.0;
    cfg.channel.depolarization_prob = 0.06;
    cfg.detector = {0.25, 200.0, 350e-12, 50e-9};
    cfg.clock_bob.offset_s = 487e-6;
    cfg.clock_bob.drift_rate = bob_drift;
    cfg.clock_bob.gps_correction = std::abs(bob_drift) <= 1e-11;
    cfg.alice_settings = {AnalyzerAngle(0), AnalyzerAngle(45)};
    cfg.bob_settings = {AnalyzerAngle(22.5), AnalyzerAngle(67.5)};
    return cfg;
}

TagStream make_stream(std::uint8_t party, const std::vector<double>& times,
                      std::uint64_t epoch = 0) {
    TagStream s;
    s.party = party;
    s.epoch_s = epoch;
    for (double t : times) s.tags.push_back(encode_tag(0, t));
    std::sort(s.tags.begin(), s.tags.end(),
              [](TimeTag a, TimeTag b) { return a.tick() < b.tick(); });
    return s;
}

// quadratic reference matcher: all candidate pairs, nearest residual first,
// earlier tags first
std::vector<std::pair<std::size_t, std::size_t>> brute_force_pairs(
    const TagStream& a, const TagStream& b, const ClockSolution& clock, double window) {
    const double delta = static_cast<double>(static_cast<std::int64_t>(b.epoch_s) -
                                             static_cast<std::int64_t>(a.epoch_s));
    struct Cand {
        double ar;
        std::size_t i, j;
    };
    std::vector<Cand> cands;
    for (std::size_t j = 0; j < b.tags.size(); ++j) {
        const double bt = clock.map_to_alice(b.tags[j].time_s() + delta);
        for (std::size_t i = 0; i < a.tags.size(); ++i) {
            const double res = a.tags[i].time_s() - bt;
            if (std::abs(res) <= window / 2.0) cands.push_back({std::abs(res), i, j});
        }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
        if (x.ar != y.ar) return x.ar < y.ar;
        if (x.i != y.i) return x.i < y.i;
        return x.j < y.j;
    });
    std::vector<bool> ua(a.tags.size(), false), ub(b.tags.size(), false);
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const Cand& c : cands) {
        if (ua[c.i] || ub[c.j]) continue;
        ua[c.i] = ub[c.j] = true;
        out.emplace_back(c.i, c.j);
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

TEST_CASE("offset zero on identical streams") {
    std::vector<double> times;
    Rng rng(3);
    double t = 0.0;
    for (int i = 0; i < 3000; ++i) times.push_back(t += rng.exponential(1e4));
    const TagStream a = make_stream(0, times);
    const TagStream b = make_stream(1, times);
    OffsetSearchParams p;
    p.search_span_s = 1e-4;
    const OffsetEstimate est = estimate_offset(a, b, p);
    CHECK(std::abs(est.offset_s) <= kTickSeconds);
    CHECK(est.confidence > 100.0);
}

TEST_CASE("light travel time over 144 km is ~480.3 us") {
    CHECK(144e3 / 299792458.0 == doctest::Approx(480.29e-6).epsilon(1e-3));
}

TEST_CASE("487 us offset recovered to within one fine bin") {
    const SimulationResult r = simulate_run(link_run(), 10.0, 101);
    REQUIRE(r.bob.size() > 5000);
    const OffsetEstimate est = estimate_offset(r.alice, r.bob);
    CHECK(std::abs(est.offset_s - 487e-6) <= kTickSeconds);
    CHECK(est.confidence > 5.0);
}

TEST_CASE("pure background shows no significant peak") {
    Rng rng(7);
    std::vector<double> ta, tb;
    double t = 0.0;
    while ((t += rng.exponential(2e4)) < 5.0) ta.push_back(t);
    t = 0.0;
    while ((t += rng.exponential(2e3)) < 5.0) tb.push_back(t);
    const TagStream a = make_stream(0, ta);
    const TagStream b = make_stream(1, tb);
    CHECK_THROWS_AS(estimate_offset(a, b), SyncError);
    try {
        estimate_offset(a, b);
    } catch (const SyncError& e) {
        CHECK(e.fault() == SyncFault::no_significant_peak);
        CHECK(e.confidence() < 5.0);
    }
}

TEST_CASE("empty streams are rejected up front") {
    const TagStream a = make_stream(0, {1e-3});
    TagStream empty;
    CHECK_THROWS_AS(estimate_offset(a, empty), std::invalid_argument);
    CHECK_THROWS_AS(estimate_offset(empty, a), std::invalid_argument);
}

TEST_CASE("drift tracking: zero drift gives agreeing segments") {
    const SimulationResult r = simulate_run(link_run(), 25.0, 103);
    const OffsetEstimate initial = estimate_offset(r.alice, r.bob);
    const ClockSolution sol = track_drift(r.alice, r.bob, initial);
    REQUIRE(sol.knots().size() >= 2);
    for (const ClockKnot& k : sol.knots()) {
        CHECK(std::abs(k.offset_s - 487e-6) <= kTickSeconds);
    }
    CHECK(std::abs(sol.fitted_drift()) < 5e-12);
}

TEST_CASE("drift tracking recovers 1e-9 and keeps the rate") {
    // GPS-free drift: 1e-9 smears the peak by 30 ns over 30 s if untracked
    const SimulationResult drifting = simulate_run(link_run(15.0, 1e-9), 30.0, 105);
    const SimulationResult steady = simulate_run(link_run(15.0, 0.0), 30.0, 105);

    const OffsetEstimate init_d = estimate_offset(drifting.alice, drifting.bob);
    const ClockSolution sol_d = track_drift(drifting.alice, drifting.bob, init_d);
    CHECK(sol_d.fitted_drift() == doctest::Approx(1e-9).epsilon(0.05));

    const OffsetEstimate init_s = estimate_offset(steady.alice, steady.bob);
    const ClockSolution sol_s = track_drift(steady.alice, steady.bob, init_s);

    const auto pairs_d = find_coincidences(drifting.alice, drifting.bob, sol_d, 0.8e-9);
    const auto pairs_s = find_coincidences(steady.alice, steady.bob, sol_s, 0.8e-9);
    CHECK(std::abs(static_cast<double>(pairs_d.size()) - static_cast<double>(pairs_s.size())) /
              static_cast<double>(pairs_s.size()) <
          0.05);

    // residual peak stays centered over the whole run
    double mean_res = 0.0;
    for (const CoincidencePair& p : pairs_d) {
        CHECK(std::abs(p.residual_s) <= 0.4e-9);
        mean_res += p.residual_s;
    }
    mean_res /= static_cast<double>(pairs_d.size());
    CHECK(std::abs(mean_res) < 0.8e-9 / 4.0);
}

TEST_CASE("lock lost on a segment without correlations") {
    // bob's signal dies after 12 s and only uncorrelated noise remains
    SimulationResult r = simulate_run(link_run(), 30.0, 107);
    const double cut = 12.0 + 487e-6;
    TagStream chopped = r.bob;
    chopped.tags.erase(std::remove_if(chopped.tags.begin(), chopped.tags.end(),
                                      [&](TimeTag t) { return t.time_s() > cut; }),
                       chopped.tags.end());
    Rng noise(55);
    double t = cut;
    while ((t += noise.exponential(1000.0)) < 30.0) {
        chopped.tags.push_back(encode_tag(noise.below(4), t));
    }
    const OffsetEstimate initial = estimate_offset(r.alice, chopped);
    try {
        track_drift(r.alice, chopped, initial);
        FAIL("expected lock_lost");
    } catch (const SyncError& e) {
        CHECK(e.fault() == SyncFault::lock_lost);
    }
}

TEST_CASE("coincidence matcher equals the brute-force oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t na = 5 + rng.below(400);
        const std::size_t nb = 5 + rng.below(400);
        std::vector<double> ta, tb;
        double t = 0.0;
        for (std::size_t i = 0; i < na; ++i) ta.push_back(t += rng.exponential(1e5));
        t = 1e-5 * rng.uniform();  // relative offset
        for (std::size_t i = 0; i < nb; ++i) tb.push_back(t += rng.exponential(1e5));
        const TagStream a = make_stream(0, ta);
        const TagStream b = make_stream(1, tb);
        const ClockSolution clock = ClockSolution::constant(rng.uniform(-1e-6, 1e-6));
        const double window = rng.uniform(0.5, 4.0) * 1e-6;

        const auto fast = find_coincidences(a, b, clock, window);
        const auto slow = brute_force_pairs(a, b, clock, window);
        REQUIRE(fast.size() == slow.size());
        std::set<std::pair<std::uint64_t, std::uint64_t>> fast_set;
        for (const auto& p : fast) fast_set.insert({p.alice.tick(), p.bob.tick()});
        for (const auto& [i, j] : slow) {
            CHECK(fast_set.count({a.tags[i].tick(), b.tags[j].tick()}) == 1);
        }
        for (const auto& p : fast) {
            CHECK(std::abs(p.residual_s) <= window / 2.0);
        }
    }
}

TEST_CASE("matching is symmetric under stream swap with a negated map") {
    Rng rng(13);
    std::vector<double> ta, tb;
    double t = 0.0;
    for (int i = 0; i < 500; ++i) ta.push_back(t += rng.exponential(1e5));
    t = 3e-7;
    for (int i = 0; i < 480; ++i) tb.push_back(t += rng.exponential(1e5));
    const TagStream a = make_stream(0, ta);
    const TagStream b = make_stream(1, tb);
    const double offset = 2.5e-7;
    const auto fwd = find_coincidences(a, b, ClockSolution::constant(offset), 1e-6);
    const auto rev = find_coincidences(b, a, ClockSolution::constant(-offset), 1e-6);
    REQUIRE(fwd.size() == rev.size());
    std::set<std::pair<std::uint64_t, std::uint64_t>> fwd_set, rev_set;
    for (const auto& p : fwd) fwd_set.insert({p.alice.tick(), p.bob.tick()});
    for (const auto& p : rev) rev_set.insert({p.bob.tick(), p.alice.tick()});
    CHECK(fwd_set == rev_set);
}

TEST_CASE("empty inputs give empty pair lists") {
    TagStream a, b;
    CHECK(find_coincidences(a, b, ClockSolution::constant(0.0), 1e-9).empty());
    a = make_stream(0, {1.0, 2.0});
    CHECK(find_coincidences(a, b, ClockSolution::constant(0.0), 1e-9).empty());
}

TEST_CASE("histogram: single bin for jitter-free pairs, totals match") {
    std::vector<double> times;
    for (int i = 1; i <= 200; ++i) times.push_back(1e-4 * i);
    const TagStream a = make_stream(0, times);
    const TagStream b = make_stream(1, times);
    const auto hist =
        coincidence_histogram(a, b, ClockSolution::constant(0.0), 20e-9, kTickSeconds);
    CHECK(hist.total() == 200);
    std::size_t populated = 0;
    for (std::uint64_t c : hist.bins) {
        if (c > 0) ++populated;
    }
    CHECK(populated == 1);

    // totals equal the brute-force pair count inside the span
    Rng rng(17);
    std::vector<double> ta, tb;
    double t = 0.0;
    for (int i = 0; i < 400; ++i) ta.push_back(t += rng.exponential(2e5));
    t = 0.0;
    for (int i = 0; i < 300; ++i) tb.push_back(t += rng.exponential(2e5));
    const TagStream ra = make_stream(0, ta);
    const TagStream rb = make_stream(1, tb);
    const double span = 4e-6;
    const auto h2 = coincidence_histogram(ra, rb, ClockSolution::constant(0.0), span, 1e-8);
    std::uint64_t expected = 0;
    for (const TimeTag& x : ra.tags) {
        for (const TimeTag& y : rb.tags) {
            if (std::abs(x.time_s() - y.time_s()) <= span / 2.0) ++expected;
        }
    }
    CHECK(h2.total() == expected);
    CHECK_THROWS_AS(coincidence_histogram(ra, rb, ClockSolution::constant(0.0), 1e-6, 1e-13),
                    std::invalid_argument);
}

TEST_CASE("histogram CSV has the documented columns") {
    const TagStream a = make_stream(0, {1e-3});
    const TagStream b = make_stream(1, {1e-3});
    const auto hist =
        coincidence_histogram(a, b, ClockSolution::constant(0.0), 1e-9, kTickSeconds);
    const std::string csv = histogram_csv(hist);
    CHECK(csv.rfind("bin_center_s,count\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + static_cast<long>(hist.bins.size()));
}

TEST_CASE("pulse gate keeps in-phase pairs and estimates the phase") {
    const double period = 1.0 / 249e6;
    Rng rng(19);
    std::vector<CoincidencePair> pairs;
    int in_gate = 0;
    for (int i = 0; i < 4000; ++i) {
        const double pulse = std::floor(rng.uniform() * 1e6) * period;
        // alternate: in-phase pairs and mid-pulse strays
        const bool stray = i % 4 == 3;
        const double phase = stray ? period / 2.0 : rng.normal(0.0, 60e-12);
        const double t = 1e-3 + pulse + phase;
        CoincidencePair p;
        p.alice = encode_tag(0, t);
        p.bob = encode_tag(1, t);
        p.residual_s = 0.0;
        pairs.push_back(p);
        if (!stray) ++in_gate;
    }
    const GateResult gated = pulse_gate(pairs, period, 0.8e-9);
    CHECK(static_cast<double>(gated.pairs.size()) ==
          doctest::Approx(static_cast<double>(in_gate)).epsilon(0.02));
    CHECK(gated.dropped == pairs.size() - gated.pairs.size());

    // gate as wide as the period keeps everything
    const GateResult all = pulse_gate(pairs, period, period);
    CHECK(all.pairs.size() == pairs.size());
}

TEST_CASE("pulse gate rejects phase-less streams") {
    Rng rng(23);
    std::vector<CoincidencePair> pairs;
    for (int i = 0; i < 2000; ++i) {
        const double t = rng.uniform() * 1e-2;
        CoincidencePair p;
        p.alice = encode_tag(0, t);
        p.bob = encode_tag(1, t);
        pairs.push_back(p);
    }
    CHECK_THROWS_AS(pulse_gate(pairs, 1.0 / 249e6, 0.8e-9), SyncError);
    try {
        pulse_gate(pairs, 1.0 / 249e6, 0.8e-9);
    } catch (const SyncError& e) {
        CHECK(e.fault() == SyncFault::no_pulse_structure);
    }
    // explicit phase bypasses the estimate
    const GateResult g = pulse_gate(pairs, 1.0 / 249e6, 0.8e-9, 0.0);
    CHECK(g.pairs.size() < pairs.size());
}

TEST_CASE("clock solution interpolates and fits") {
    const ClockSolution sol({{5.0, 100e-6}, {15.0, 110e-6}, {25.0, 120e-6}});
    CHECK(sol.offset_at(10.0) == doctest::Approx(105e-6));
    CHECK(sol.offset_at(0.0) == doctest::Approx(95e-6));  // edge extrapolation
    CHECK(sol.offset_at(30.0) == doctest::Approx(125e-6));
    CHECK(sol.fitted_drift() == doctest::Approx(1e-6));
    CHECK(sol.linear_fit().intercept == doctest::Approx(95e-6));
    CHECK(sol.map_to_alice(15.0) == doctest::Approx(15.0 - 110e-6));
    const auto segs = sol.segments();
    REQUIRE(segs.size() == 2);
    CHECK(segs[0].t_start == 5.0);
    CHECK(segs[0].drift == doctest::Approx(1e-6));
    CHECK_THROWS_AS(ClockSolution({}), std::invalid_argument);
    CHECK_THROWS_AS(ClockSolution({{5.0, 0.0}, {1.0, 0.0}}), std::invalid_argument);
}
