#include "entlink/sync.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace entlink {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// background window around the peak, in fine bins
constexpr std::int64_t kBgInnerBins = 64;
constexpr std::int64_t kBgOuterBins = 640;

double epoch_delta_s(const TagStream& a, const TagStream& b) {
    return static_cast<double>(static_cast<std::int64_t>(b.epoch_s) -
                               static_cast<std::int64_t>(a.epoch_s));
}

// Tick-resolution lag histogram of (bob - alice) over lag in
// [center - halfwidth, center + halfwidth], restricted to the b tags in
// [j_begin, j_end). Bins are aligned to absolute lag ticks so that scans
// around nearby predictions agree bin for bin.
struct FineScan {
    std::int64_t bin_lo = 0;  // absolute tick index of bin 0
    std::vector<std::uint32_t> counts;

    double lag_of_bin(std::int64_t i) const {
        return (static_cast<double>(bin_lo + i) + 0.5) * kTickSeconds;
    }
};

FineScan fine_scan(const TagStream& a, const TagStream& b, double delta_epoch,
                   std::size_t j_begin, std::size_t j_end, double center, double halfwidth) {
    FineScan scan;
    scan.bin_lo = static_cast<std::int64_t>(std::floor((center - halfwidth) / kTickSeconds));
    const auto bin_hi =
        static_cast<std::int64_t>(std::floor((center + halfwidth) / kTickSeconds));
    const auto nbins = static_cast<std::size_t>(std::max<std::int64_t>(bin_hi - scan.bin_lo, 0) + 1);
    scan.counts.assign(nbins, 0);

    const double lag_lo = center - halfwidth;
    const double lag_hi = center + halfwidth;
    // first a tag that can matter for the first b tag in range
    std::size_t i_lo = 0;
    if (j_begin < b.tags.size()) {
        const double first_a = b.tags[j_begin].time_s() + delta_epoch - lag_hi;
        i_lo = static_cast<std::size_t>(
            std::lower_bound(a.tags.begin(), a.tags.end(), first_a,
                             [](const TimeTag& t, double v) { return t.time_s() < v; }) -
            a.tags.begin());
    }
    for (std::size_t j = j_begin; j < j_end; ++j) {
        const double bt = b.tags[j].time_s() + delta_epoch;
        while (i_lo < a.tags.size() && a.tags[i_lo].time_s() < bt - lag_hi) ++i_lo;
        for (std::size_t i = i_lo; i < a.tags.size(); ++i) {
            const double lag = bt - a.tags[i].time_s();
            if (lag < lag_lo) break;  // a times ascend, lag descends
            const auto bin = static_cast<std::int64_t>(std::floor(lag / kTickSeconds)) - scan.bin_lo;
            if (bin >= 0 && static_cast<std::size_t>(bin) < scan.counts.size()) {
                ++scan.counts[static_cast<std::size_t>(bin)];
            }
        }
    }
    return scan;
}

// Peak pick, local background and sub-bin centroid on a fine scan.
OffsetEstimate summarize_scan(const FineScan& scan, double centroid_halfwidth) {
    OffsetEstimate est;
    if (scan.counts.empty()) return est;
    const auto n = static_cast<std::int64_t>(scan.counts.size());
    std::int64_t peak = 0;
    for (std::int64_t i = 1; i < n; ++i) {
        if (scan.counts[static_cast<std::size_t>(i)] >
            scan.counts[static_cast<std::size_t>(peak)]) {
            peak = i;
        }
    }
    est.peak_height = scan.counts[static_cast<std::size_t>(peak)];

    const std::int64_t inner = std::min<std::int64_t>(kBgInnerBins, std::max<std::int64_t>(n / 8, 1));
    const std::int64_t outer = std::min<std::int64_t>(kBgOuterBins, n - 1);
    double bg_sum = 0.0;
    std::int64_t bg_cnt = 0;
    for (std::int64_t d = inner + 1; d <= outer; ++d) {
        for (const std::int64_t i : {peak - d, peak + d}) {
            if (i >= 0 && i < n) {
                bg_sum += scan.counts[static_cast<std::size_t>(i)];
                ++bg_cnt;
            }
        }
    }
    est.background_level = bg_cnt > 0 ? bg_sum / static_cast<double>(bg_cnt) : 0.0;
    est.confidence = (est.peak_height + 1.0) / (est.background_level + 1.0);

    const auto cw =
        std::max<std::int64_t>(1, static_cast<std::int64_t>(centroid_halfwidth / kTickSeconds));
    double wsum = 0.0;
    double wlag = 0.0;
    for (std::int64_t i = std::max<std::int64_t>(0, peak - cw);
         i <= std::min<std::int64_t>(n - 1, peak + cw); ++i) {
        const double w =
            std::max(0.0, scan.counts[static_cast<std::size_t>(i)] - est.background_level);
        wsum += w;
        wlag += w * scan.lag_of_bin(i);
    }
    est.offset_s = wsum > 0.0 ? wlag / wsum : scan.lag_of_bin(peak);
    return est;
}

}  // namespace

ClockSolution ClockSolution::constant(double offset_s) {
    return ClockSolution({ClockKnot{0.0, offset_s}});
}

ClockSolution::ClockSolution(std::vector<ClockKnot> knots) : knots_(std::move(knots)) {
    if (knots_.empty()) throw std::invalid_argument("ClockSolution requires at least one knot");
    if (!std::is_sorted(knots_.begin(), knots_.end(),
                        [](const ClockKnot& x, const ClockKnot& y) { return x.t_b < y.t_b; })) {
        throw std::invalid_argument("ClockSolution knots must be sorted in time");
    }
}

double ClockSolution::offset_at(double t_b) const {
    if (knots_.size() == 1) return knots_.front().offset_s;
    auto it = std::lower_bound(knots_.begin(), knots_.end(), t_b,
                               [](const ClockKnot& k, double t) { return k.t_b < t; });
    std::size_t hi = static_cast<std::size_t>(it - knots_.begin());
    if (hi == 0) hi = 1;                              // extrapolate with the first interval
    if (hi == knots_.size()) hi = knots_.size() - 1;  // ... or the last one
    const ClockKnot& k0 = knots_[hi - 1];
    const ClockKnot& k1 = knots_[hi];
    const double slope = (k1.offset_s - k0.offset_s) / (k1.t_b - k0.t_b);
    return k0.offset_s + slope * (t_b - k0.t_b);
}

ClockSolution::LinearFit ClockSolution::linear_fit() const {
    LinearFit fit;
    const auto n = static_cast<double>(knots_.size());
    if (knots_.size() < 2) {
        fit.intercept = knots_.front().offset_s;
        return fit;
    }
    double st = 0.0, so = 0.0, stt = 0.0, sto = 0.0;
    for (const ClockKnot& k : knots_) {
        st += k.t_b;
        so += k.offset_s;
        stt += k.t_b * k.t_b;
        sto += k.t_b * k.offset_s;
    }
    const double denom = n * stt - st * st;
    fit.drift = denom != 0.0 ? (n * sto - st * so) / denom : 0.0;
    fit.intercept = (so - fit.drift * st) / n;
    return fit;
}

std::vector<ClockSolution::Segment> ClockSolution::segments() const {
    std::vector<Segment> segs;
    if (knots_.size() == 1) {
        segs.push_back({knots_.front().t_b, knots_.front().offset_s, 0.0});
        return segs;
    }
    for (std::size_t i = 0; i + 1 < knots_.size(); ++i) {
        const double drift =
            (knots_[i + 1].offset_s - knots_[i].offset_s) / (knots_[i + 1].t_b - knots_[i].t_b);
        segs.push_back({knots_[i].t_b, knots_[i].offset_s, drift});
    }
    return segs;
}

OffsetEstimate refine_offset(const TagStream& a, const TagStream& b, std::size_t b_begin,
                             std::size_t b_end, double predicted_offset_s, double halfwidth_s,
                             double centroid_halfwidth_s) {
    const double delta = epoch_delta_s(a, b);
    const FineScan scan =
        fine_scan(a, b, delta, b_begin, b_end, predicted_offset_s, halfwidth_s);
    return summarize_scan(scan, centroid_halfwidth_s);
}

OffsetEstimate estimate_offset(const TagStream& a, const TagStream& b,
                               const OffsetSearchParams& params) {
    if (a.tags.empty() || b.tags.empty()) {
        throw std::invalid_argument("estimate_offset requires two non-empty streams");
    }
    if (!(params.search_span_s > 0.0) || !(params.coarse_bin_s > 0.0)) {
        throw std::invalid_argument("search span and coarse bin must be positive");
    }
    const double delta = epoch_delta_s(a, b);
    const double coarse_bin = std::max(params.coarse_bin_s, kTickSeconds);
    const double lag_lo = delta - params.search_span_s / 2.0;
    const double lag_hi = delta + params.search_span_s / 2.0;
    const auto nbins =
        static_cast<std::size_t>(std::ceil((lag_hi - lag_lo) / coarse_bin)) + 1;

    std::vector<std::uint64_t> coarse(nbins, 0);
    std::size_t i_lo = 0;
    for (const TimeTag& btag : b.tags) {
        const double bt = btag.time_s() + delta;
        while (i_lo < a.tags.size() && a.tags[i_lo].time_s() < bt - lag_hi) ++i_lo;
        for (std::size_t i = i_lo; i < a.tags.size(); ++i) {
            const double lag = bt - a.tags[i].time_s();
            if (lag < lag_lo) break;
            const auto bin = static_cast<std::size_t>((lag - lag_lo) / coarse_bin);
            if (bin < nbins) ++coarse[bin];
        }
    }
    const std::size_t best =
        static_cast<std::size_t>(std::max_element(coarse.begin(), coarse.end()) - coarse.begin());
    const double candidate = lag_lo + (static_cast<double>(best) + 0.5) * coarse_bin;

    const FineScan scan =
        fine_scan(a, b, delta, 0, b.tags.size(), candidate, 1.5 * coarse_bin);
    OffsetEstimate est = summarize_scan(scan, params.centroid_halfwidth_s);
    if (est.confidence < params.confidence_threshold) {
        std::ostringstream msg;
        msg << "no significant peak: confidence " << est.confidence << " below threshold "
            << params.confidence_threshold;
        throw SyncError(SyncFault::no_significant_peak, msg.str(), est.confidence);
    }
    return est;
}

SegmentPlan plan_segments(const TagStream& a, const TagStream& b, double segment_s) {
    if (a.tags.empty() || b.tags.empty()) {
        throw std::invalid_argument("segmentation requires two non-empty streams");
    }
    if (!(segment_s > 0.0)) throw std::invalid_argument("segment_s must be positive");
    const double delta = epoch_delta_s(a, b);
    SegmentPlan plan;
    plan.t0 = b.tags.front().time_s() + delta;
    plan.t1 = b.tags.back().time_s() + delta;
    plan.segment_s = segment_s;
    const auto n_seg = static_cast<std::size_t>(std::floor((plan.t1 - plan.t0) / segment_s));
    plan.count = n_seg < 2 ? 0 : n_seg;
    return plan;
}

ClockSolution track_drift(const TagStream& a, const TagStream& b, const OffsetEstimate& initial,
                          const DriftTrackParams& params) {
    const SegmentPlan plan = plan_segments(a, b, params.segment_s);
    if (plan.count == 0) {
        return ClockSolution::constant(initial.offset_s);
    }
    const double delta = epoch_delta_s(a, b);

    std::vector<ClockKnot> knots;
    knots.reserve(plan.count);
    std::size_t j = 0;
    for (std::size_t k = 0; k < plan.count; ++k) {
        const double seg_hi = plan.hi(k);
        const bool last = k + 1 == plan.count;
        const std::size_t j_begin = j;
        while (j < b.tags.size() && (b.tags[j].time_s() + delta < seg_hi ||
                                     (last && b.tags[j].time_s() + delta <= seg_hi))) {
            ++j;
        }
        const double predicted = knots.empty() ? initial.offset_s : knots.back().offset_s;
        const OffsetEstimate est = refine_offset(a, b, j_begin, j, predicted,
                                                 params.refine_halfwidth_s,
                                                 params.centroid_halfwidth_s);
        if (est.confidence < params.confidence_threshold) {
            std::ostringstream msg;
            msg << "lock lost in segment " << k << ": confidence " << est.confidence
                << " below threshold " << params.confidence_threshold;
            throw SyncError(SyncFault::lock_lost, msg.str(), est.confidence);
        }
        knots.push_back({plan.mid(k), est.offset_s});
    }
    return ClockSolution(std::move(knots));
}

std::vector<CoincidencePair> find_coincidences(const TagStream& a, const TagStream& b,
                                               const ClockSolution& clock, double window_s) {
    std::vector<CoincidencePair> out;
    if (a.tags.empty() || b.tags.empty()) return out;
    if (!(window_s > 0.0)) throw std::invalid_argument("window must be positive");
    const double delta = epoch_delta_s(a, b);
    const double half = window_s / 2.0;

    struct Candidate {
        double abs_res;
        double res;
        std::uint32_t ai;
        std::uint32_t bi;
    };
    std::vector<Candidate> candidates;
    std::size_t i_lo = 0;
    for (std::size_t jj = 0; jj < b.tags.size(); ++jj) {
        const double bt = clock.map_to_alice(b.tags[jj].time_s() + delta);
        while (i_lo < a.tags.size() && a.tags[i_lo].time_s() < bt - half) ++i_lo;
        for (std::size_t i = i_lo; i < a.tags.size(); ++i) {
            const double res = a.tags[i].time_s() - bt;
            if (res > half) break;
            candidates.push_back({std::abs(res), res, static_cast<std::uint32_t>(i),
                                  static_cast<std::uint32_t>(jj)});
        }
    }
    // nearest residual first; earlier tags win ties (indices are total even
    // when two tags share a tick across channels)
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& x, const Candidate& y) {
        if (x.abs_res != y.abs_res) return x.abs_res < y.abs_res;
        if (x.ai != y.ai) return x.ai < y.ai;
        return x.bi < y.bi;
    });

    std::vector<bool> a_used(a.tags.size(), false);
    std::vector<bool> b_used(b.tags.size(), false);
    out.reserve(std::min(a.tags.size(), b.tags.size()) / 4 + 16);
    for (const Candidate& c : candidates) {
        if (a_used[c.ai] || b_used[c.bi]) continue;
        a_used[c.ai] = true;
        b_used[c.bi] = true;
        out.push_back({a.tags[c.ai], b.tags[c.bi], c.res});
    }
    std::sort(out.begin(), out.end(), [](const CoincidencePair& x, const CoincidencePair& y) {
        if (x.alice.tick() != y.alice.tick()) return x.alice.tick() < y.alice.tick();
        if (x.bob.tick() != y.bob.tick()) return x.bob.tick() < y.bob.tick();
        return x.alice.raw() < y.alice.raw();
    });
    return out;
}

std::uint64_t CoincidenceHistogram::total() const {
    std::uint64_t t = 0;
    for (std::uint64_t c : bins) t += c;
    return t;
}

CoincidenceHistogram coincidence_histogram(const TagStream& a, const TagStream& b,
                                           const ClockSolution& clock, double span_s,
                                           double bin_s) {
    if (bin_s < kTickSeconds) {
        throw std::invalid_argument("histogram bin must be at least one tick");
    }
    CoincidenceHistogram hist;
    hist.bin_width_s = bin_s;
    hist.lag_min_s = -span_s / 2.0;
    hist.bins.assign(static_cast<std::size_t>(std::ceil(span_s / bin_s)), 0);
    if (hist.bins.empty() || a.tags.empty() || b.tags.empty()) return hist;

    const double delta = epoch_delta_s(a, b);
    const double half = span_s / 2.0;
    std::size_t i_lo = 0;
    for (const TimeTag& btag : b.tags) {
        const double bt = clock.map_to_alice(btag.time_s() + delta);
        while (i_lo < a.tags.size() && a.tags[i_lo].time_s() < bt - half) ++i_lo;
        for (std::size_t i = i_lo; i < a.tags.size(); ++i) {
            const double res = a.tags[i].time_s() - bt;
            if (res > half) break;
            auto bin = static_cast<std::size_t>((res - hist.lag_min_s) / bin_s);
            if (bin >= hist.bins.size()) bin = hist.bins.size() - 1;
            ++hist.bins[bin];
        }
    }
    return hist;
}

std::string histogram_csv(const CoincidenceHistogram& hist) {
    std::ostringstream os;
    os << "bin_center_s,count\n";
    os.precision(12);
    for (std::size_t i = 0; i < hist.bins.size(); ++i) {
        os << hist.bin_center(i) << "," << hist.bins[i] << "\n";
    }
    return os.str();
}

GateResult pulse_gate(const std::vector<CoincidencePair>& pairs, double period_s,
                      double gate_width_s, std::optional<double> phase_s) {
    if (!(period_s > 0.0) || !(gate_width_s > 0.0)) {
        throw std::invalid_argument("period and gate width must be positive");
    }
    if (gate_width_s >= period_s) {
        return {pairs, phase_s.value_or(0.0), 0};
    }

    GateResult result;
    if (phase_s) {
        result.phase_s = std::fmod(*phase_s, period_s);
        if (result.phase_s < 0.0) result.phase_s += period_s;
    } else {
        // circular mean of the Alice-side tag phases; Rayleigh test against
        // a phase-less (uniform) stream
        double c = 0.0, s = 0.0;
        for (const CoincidencePair& p : pairs) {
            const double theta = kTwoPi * std::fmod(p.alice.time_s(), period_s) / period_s;
            c += std::cos(theta);
            s += std::sin(theta);
        }
        const double n = static_cast<double>(pairs.size());
        const double z = n > 0.0 ? (c * c + s * s) / n : 0.0;
        if (z < 10.0) {
            throw SyncError(SyncFault::no_pulse_structure,
                            "no pulse structure: Rayleigh statistic " + std::to_string(z), z);
        }
        double phase = std::atan2(s, c) / kTwoPi * period_s;
        if (phase < 0.0) phase += period_s;
        result.phase_s = phase;
    }

    for (const CoincidencePair& p : pairs) {
        double x = std::fmod(std::fmod(p.alice.time_s(), period_s) - result.phase_s, period_s);
        if (x < -period_s / 2.0) x += period_s;
        if (x >= period_s / 2.0) x -= period_s;
        if (std::abs(x) <= gate_width_s / 2.0) {
            result.pairs.push_back(p);
        } else {
            ++result.dropped;
        }
    }
    return result;
}

}  // namespace entlink
