#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "entlink/timetag.hpp"

namespace entlink {

enum class SyncFault { no_significant_peak, lock_lost, no_pulse_structure };

class SyncError : public std::runtime_error {
public:
    SyncError(SyncFault fault, const std::string& what, double confidence = 0.0)
        : std::runtime_error(what), fault_(fault), confidence_(confidence) {}
    SyncFault fault() const { return fault_; }
    double confidence() const { return confidence_; }

private:
    SyncFault fault_;
    double confidence_;
};

// Cross-correlation peak between the two timescales. offset_s is the lag of
// Bob's local times relative to Alice's (Bob's epoch difference included),
// so Alice-frame time = Bob time - offset.
struct OffsetEstimate {
    double offset_s = 0.0;
    double peak_height = 0.0;      // counts in the peak fine bin
    double background_level = 0.0; // mean fine-bin count away from the peak
    double confidence = 0.0;       // (peak + 1) / (background + 1)
};

struct ClockKnot {
    double t_b = 0.0;      // Bob time (Alice-epoch frame) of this estimate
    double offset_s = 0.0; // offset at that time
};

// Piecewise-linear map from Bob's timescale to Alice's, built from
// per-segment offset estimates. Continuous by construction; constant
// extrapolation slope beyond the outer knots.
class ClockSolution {
public:
    static ClockSolution constant(double offset_s);
    explicit ClockSolution(std::vector<ClockKnot> knots);

    double offset_at(double t_b) const;
    double map_to_alice(double t_b) const { return t_b - offset_at(t_b); }

    // least-squares line through the knots: offset(t) = intercept + drift * t
    struct LinearFit {
        double intercept = 0.0;
        double drift = 0.0;
    };
    LinearFit linear_fit() const;
    double fitted_drift() const { return linear_fit().drift; }

    struct Segment {
        double t_start = 0.0;
        double offset_s = 0.0;
        double drift = 0.0;
    };
    std::vector<Segment> segments() const;
    const std::vector<ClockKnot>& knots() const { return knots_; }

private:
    std::vector<ClockKnot> knots_;
};

struct OffsetSearchParams {
    double search_span_s = 2e-3;         // scan lag in +-span/2 around the epoch delta
    double coarse_bin_s = 1e-6;
    double confidence_threshold = 5.0;
    double centroid_halfwidth_s = 2e-9;  // window for the sub-bin peak centroid
};

// Two-stage cross-correlation: a coarse binned scan locates the peak, a
// tick-resolution refinement around it yields the offset (peak centroid) and
// the confidence. Throws SyncError(no_significant_peak) below the threshold
// and std::invalid_argument for empty streams.
OffsetEstimate estimate_offset(const TagStream& a, const TagStream& b,
                               const OffsetSearchParams& params = {});

struct DriftTrackParams {
    double segment_s = 10.0;
    double refine_halfwidth_s = 0.5e-6;  // fine search around the predicted offset
    double confidence_threshold = 5.0;
    double centroid_halfwidth_s = 2e-9;
};

// Segmentation used by track_drift: floor(span / segment_s) segments from
// the first b tag, the last one absorbing the partial remainder. count == 0
// asks for a constant solution (run shorter than two segments).
struct SegmentPlan {
    double t0 = 0.0;  // first b tag, alice-epoch frame
    double t1 = 0.0;  // last b tag
    double segment_s = 0.0;
    std::size_t count = 0;

    double lo(std::size_t k) const { return t0 + segment_s * static_cast<double>(k); }
    double hi(std::size_t k) const {
        return k + 1 == count ? t1 : t0 + segment_s * static_cast<double>(k + 1);
    }
    double mid(std::size_t k) const { return 0.5 * (lo(k) + hi(k)); }
};
SegmentPlan plan_segments(const TagStream& a, const TagStream& b, double segment_s);

// Re-estimates the offset per segment and assembles the piecewise-linear
// clock solution. Throws SyncError(lock_lost) when a segment shows no
// significant peak.
ClockSolution track_drift(const TagStream& a, const TagStream& b, const OffsetEstimate& initial,
                          const DriftTrackParams& params = {});

// Tick-aligned fine scan around a predicted offset, restricted to the b tags
// in [b_begin, b_end). The primitive under estimate_offset's refinement
// stage and track_drift's segments; online processing calls it with the
// same inputs to reproduce offline results exactly. Applies no confidence
// threshold.
OffsetEstimate refine_offset(const TagStream& a, const TagStream& b, std::size_t b_begin,
                             std::size_t b_end, double predicted_offset_s, double halfwidth_s,
                             double centroid_halfwidth_s);

// One matched detection pair. residual_s = alice time - corrected bob time.
struct CoincidencePair {
    TimeTag alice;
    TimeTag bob;
    double residual_s = 0.0;
};

// One-to-one greedy matching over the corrected timescales: candidate pairs
// within the window are taken nearest-residual first, earlier tags first on
// ties. Output is sorted by Alice tick.
std::vector<CoincidencePair> find_coincidences(const TagStream& a, const TagStream& b,
                                               const ClockSolution& clock, double window_s);

struct CoincidenceHistogram {
    double bin_width_s = 0.0;
    double lag_min_s = 0.0;  // left edge of bin 0
    std::vector<std::uint64_t> bins;

    std::uint64_t total() const;
    double bin_center(std::size_t i) const {
        return lag_min_s + (static_cast<double>(i) + 0.5) * bin_width_s;
    }
};

// Residual histogram of every tag pair with |corrected difference| <= span/2.
CoincidenceHistogram coincidence_histogram(const TagStream& a, const TagStream& b,
                                           const ClockSolution& clock, double span_s,
                                           double bin_s);

// CSV export, columns bin_center_s,count.
std::string histogram_csv(const CoincidenceHistogram& hist);

struct GateResult {
    std::vector<CoincidencePair> pairs;
    double phase_s = 0.0;  // gate center within the pulse period
    std::size_t dropped = 0;
};

// Keeps pairs whose Alice-side tag phase within the pulse period falls
// inside the gate. Without an explicit phase the gate center is estimated
// from the tag phases; throws SyncError(no_pulse_structure) when those are
// compatible with uniform (Rayleigh test).
GateResult pulse_gate(const std::vector<CoincidencePair>& pairs, double period_s,
                      double gate_width_s, std::optional<double> phase_s = std::nullopt);

}  // namespace entlink
