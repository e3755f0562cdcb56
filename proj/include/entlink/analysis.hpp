#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "entlink/bell.hpp"
#include "entlink/linksim.hpp"
#include "entlink/qkd.hpp"
#include "entlink/sync.hpp"
#include "entlink/timetag.hpp"

namespace entlink {

// Knobs of the offline analysis chain (synchronize, match, gate, evaluate).
struct AnalysisOptions {
    double window_s = 0.8e-9;
    double search_span_s = 2e-3;
    double coarse_bin_s = 1e-6;
    double confidence_threshold = 5.0;
    double segment_s = 10.0;

    bool pulse_gating = true;
    double pulse_period_s = 1.0 / 249e6;
    double gate_width_s = 0.8e-9;

    MeasurementSettings alice_settings;
    MeasurementSettings bob_settings;

    // QKD post-processing
    std::uint64_t security_param = 30;
    int cascade_passes = 4;
    QberMode::Kind qber_mode = QberMode::Kind::oracle;
    double qber_sample_fraction = 0.25;
    std::uint64_t qkd_seed = 7;

    // histogram mode
    double histogram_span_s = 40e-9;
    double histogram_bin_s = kTickSeconds;
};

// Synchronization stage shared by every analysis mode.
struct SyncSummary {
    OffsetEstimate offset;
    ClockSolution::LinearFit clock_fit;
    std::size_t knots = 0;
    std::size_t pairs_matched = 0;  // inside the coincidence window
    std::size_t pairs_used = 0;     // after optional pulse gating
    bool gated = false;
    double gate_phase_s = 0.0;
    double duration_s = 0.0;        // analyzed span (Alice stream)
    double rate_cps = 0.0;          // pairs_used / duration
};

struct BellReport {
    SyncSummary sync;
    TallyResult tally;
    std::vector<Correlation> correlations;  // parallel to tally.settings
    ChshResult chsh;
};

struct QkdReport {
    SyncSummary sync;
    std::size_t raw_bits = 0;
    double sifting_fraction = 0.0;
    QberEstimate qber;
    ReconciliationTranscript transcript;
    bool corrected_keys_identical = false;
    bool residual_error = false;  // cascade left mismatched bits; no key emitted
    PrivacyLedger ledger;
    std::vector<std::uint8_t> alice_key;
    std::vector<std::uint8_t> bob_key;
    bool final_keys_identical = false;
};

struct HistogramReport {
    SyncSummary sync;
    CoincidenceHistogram histogram;
};

// Offline pipelines over two recorded streams. Throw SyncError when no lock
// is reached and KeyExhaustedError when no secret bits remain.
BellReport analyze_bell(const TagStream& a, const TagStream& b, const AnalysisOptions& opt);
QkdReport analyze_qkd(const TagStream& a, const TagStream& b, const AnalysisOptions& opt);
HistogramReport analyze_histogram(const TagStream& a, const TagStream& b,
                                  const AnalysisOptions& opt);

// Matched pairs plus the sync summary, the common front end of the above.
struct MatchedStreams {
    SyncSummary sync;
    std::vector<CoincidencePair> pairs;  // gated when options say so
    ClockSolution clock = ClockSolution::constant(0.0);
};
MatchedStreams match_streams(const TagStream& a, const TagStream& b,
                             const AnalysisOptions& opt);

std::string to_text(const BellReport& r);
std::string to_csv(const BellReport& r);
std::string to_text(const QkdReport& r);
std::string to_csv(const QkdReport& r);
std::string to_text(const HistogramReport& r);

std::string bits_to_hex(const std::vector<std::uint8_t>& bits);

}  // namespace entlink
