#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "entlink/physics.hpp"
#include "entlink/rng.hpp"
#include "entlink/timetag.hpp"

namespace entlink {

// Pulsed SPDC pair source. Rates are calibrated so that, detecting both
// photons locally, singles per arm are pair_rate * local_coupling_eff and
// coincidences are pair_rate * local_coupling_eff^2.
struct SourceConfig {
    double rep_rate_hz = 249e6;
    double pair_prob_per_pulse = 0.0;  // must stay < 0.1 (low-gain regime)
    double local_coupling_eff = 1.0;   // collection + detection, local arm
};

// Slow log-amplitude variation of the link efficiency, expressed in dB of
// optical efficiency (negative numbers, e.g. -30 dB).
struct FadingModel {
    double mean_efficiency_db = -30.0;
    double sigma_db = 1.8;
    double correlation_time_s = 30.0;
    bool tracking_off = false;        // beam drifts off: loss ramps monotonically
    double ramp_db_per_s = 0.1;       // efficiency decay rate in tracking-off mode
};

struct ChannelConfig {
    double link_loss_db = 0.0;                 // total attenuation, >= 0
    double background_cps_per_detector = 0.0;  // stray light at the receiver
    // Residual depolarization of the transported photon. Equivalent to a
    // static visibility factor (1 - depolarization_prob) on both bases.
    double depolarization_prob = 0.0;
    std::optional<FadingModel> fading;
};

struct DetectorConfig {
    double efficiency = 1.0;         // quantum efficiency, [0, 1]
    double dark_cps = 0.0;           // per detector
    double jitter_sigma_s = 300e-12; // Gaussian timing jitter
    double dead_time_s = 50e-9;      // per detector
};

struct ClockConfig {
    double offset_s = 0.0;      // constant offset incl. light travel time
    double drift_rate = 0.0;    // fractional frequency offset, |d| <= 1e-6
    bool gps_correction = true; // bounds |d| <= 1e-11
};

// Throw std::invalid_argument on violated invariants.
void validate(const SourceConfig& c);
void validate(const ChannelConfig& c);
void validate(const DetectorConfig& c);
void validate(const ClockConfig& c);

enum class Party : std::uint8_t { alice = 0, bob = 1 };
enum class EventOrigin : std::uint8_t { pair = 0, background = 1, dark = 2 };

// Physical-truth record, before any clock distortion.
struct DetectionEvent {
    double true_time_s = 0.0;
    Party party = Party::alice;
    PolChannel channel = PolChannel::h;
    EventOrigin origin = EventOrigin::pair;
    std::int64_t pair_id = -1;  // shared across parties for pair events
};

struct PairEmission {
    std::uint64_t pulse_index = 0;
    double time_s = 0.0;
};

// Samples the pulses that emit a pair. Emission times lie exactly on the
// pulse grid n / rep_rate; at most one pair per pulse (low-gain regime).
// Throws std::invalid_argument when pair_prob_per_pulse >= 0.1.
std::vector<PairEmission> sample_pair_emissions(const SourceConfig& cfg, double duration_s,
                                                Rng& rng);

// Analyzer orientations one party's passive basis choice selects between.
struct MeasurementSettings {
    AnalyzerAngle hv_path{0.0};    // angle realized on the H/V analyzer path
    AnalyzerAngle diag_path{45.0}; // angle realized on the +-45 analyzer path
};

struct PairOutcome {
    Basis basis_a = Basis::hv;
    Basis basis_b = Basis::hv;
    Outcome out_a = Outcome::plus;
    Outcome out_b = Outcome::plus;
    PolChannel channel_a = PolChannel::h;
    PolChannel channel_b = PolChannel::h;
};

// Detector channel seen for a given basis path and outcome port.
PolChannel channel_for(Basis basis, Outcome out);
Basis basis_of(PolChannel ch);
Outcome outcome_of(PolChannel ch);

// Draws one joint measurement: each party's basis comes from its 50/50
// splitter, outcome pairs follow joint_probability at the analyzer angles
// the bases select.
PairOutcome measure_pair(const SingletModel& model, const MeasurementSettings& alice,
                         const MeasurementSettings& bob, Rng& rng);

// Passes a sorted photon stream through loss, detector jitter, background
// and dark counts, and the per-detector dead-time filter. Survival
// probability per photon is 10^(-link_loss_db/10) * det.efficiency.
std::vector<DetectionEvent> apply_channel_and_detect(std::vector<DetectionEvent> photons,
                                                     const ChannelConfig& channel,
                                                     const DetectorConfig& det,
                                                     double duration_s, Rng& rng);

struct LocalEvent {
    double local_time_s = 0.0;
    PolChannel channel = PolChannel::h;
    EventOrigin origin = EventOrigin::pair;
};

// local_time = true_time * (1 + drift_rate) + offset_s. Order-preserving
// for any |drift_rate| < 1.
std::vector<LocalEvent> apply_clock(const std::vector<DetectionEvent>& events,
                                    const ClockConfig& clock);

// Per-party stream bookkeeping; counts refer to the final emitted stream.
struct PartyCounts {
    std::uint64_t pair = 0;
    std::uint64_t background = 0;
    std::uint64_t dark = 0;
    std::uint64_t total() const { return pair + background + dark; }
};

struct GroundTruth {
    std::uint64_t emitted_pairs = 0;
    // pairs for which both parties kept a detection (coincidence-eligible)
    std::uint64_t shared_pair_detections = 0;
    PartyCounts alice;
    PartyCounts bob;
    ClockConfig alice_clock;
    ClockConfig bob_clock;
};

// Full configuration of one simulated run.
struct RunConfig {
    SourceConfig source;
    SingletModel singlet;
    ChannelConfig channel;   // Bob's free-space link
    DetectorConfig detector; // used by both parties
    ClockConfig clock_alice;
    ClockConfig clock_bob;
    MeasurementSettings alice_settings;
    MeasurementSettings bob_settings;
    std::uint64_t epoch_s = 0;
};

struct SimulationResult {
    TagStream alice;
    TagStream bob;
    GroundTruth truth;
};

// Generates both parties' time-tag streams for one run. Deterministic for a
// given seed. Alice detects locally (no channel loss beyond the source
// coupling); Bob's photons pass the configured channel and detector.
SimulationResult simulate_run(const RunConfig& cfg, double duration_s, std::uint64_t seed);

// Link efficiency over time in dB (negative values). With zero variance the
// series is constant at the mean; in tracking-off mode the loss grows
// monotonically.
std::vector<double> link_efficiency_series(const FadingModel& fading, double duration_s,
                                           double dt_s, std::uint64_t seed);

// Human-readable ground-truth summary (key = value lines).
std::string format_ground_truth(const GroundTruth& truth);

}  // namespace entlink
