#include "entlink/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace entlink {

MatchedStreams match_streams(const TagStream& a, const TagStream& b,
                             const AnalysisOptions& opt) {
    OffsetSearchParams search;
    search.search_span_s = opt.search_span_s;
    search.coarse_bin_s = opt.coarse_bin_s;
    search.confidence_threshold = opt.confidence_threshold;

    DriftTrackParams drift;
    drift.segment_s = opt.segment_s;
    drift.confidence_threshold = opt.confidence_threshold;

    MatchedStreams m;
    m.sync.offset = estimate_offset(a, b, search);
    m.clock = track_drift(a, b, m.sync.offset, drift);
    m.sync.clock_fit = m.clock.linear_fit();
    m.sync.knots = m.clock.knots().size();

    m.pairs = find_coincidences(a, b, m.clock, opt.window_s);
    m.sync.pairs_matched = m.pairs.size();
    if (opt.pulse_gating) {
        GateResult gate = pulse_gate(m.pairs, opt.pulse_period_s, opt.gate_width_s);
        m.pairs = std::move(gate.pairs);
        m.sync.gated = true;
        m.sync.gate_phase_s = gate.phase_s;
    }
    m.sync.pairs_used = m.pairs.size();
    m.sync.duration_s = a.span_s();
    m.sync.rate_cps = m.sync.duration_s > 0.0
                          ? static_cast<double>(m.sync.pairs_used) / m.sync.duration_s
                          : 0.0;
    return m;
}

BellReport analyze_bell(const TagStream& a, const TagStream& b, const AnalysisOptions& opt) {
    MatchedStreams m = match_streams(a, b, opt);
    BellReport r;
    r.sync = m.sync;
    r.tally = tally_coincidences(m.pairs,
                                 SettingMap::from_settings(opt.alice_settings, opt.bob_settings));
    r.correlations.reserve(r.tally.settings.size());
    for (const SettingCounts& s : r.tally.settings) {
        r.correlations.push_back(s.total() > 0 ? correlation_coefficient(s) : Correlation{});
    }
    if (r.correlations.size() == 4) {
        r.chsh = chsh_s(r.correlations[0], r.correlations[1], r.correlations[2],
                        r.correlations[3]);
    }
    return r;
}

QkdReport analyze_qkd(const TagStream& a, const TagStream& b, const AnalysisOptions& opt) {
    MatchedStreams m = match_streams(a, b, opt);
    QkdReport r;
    r.sync = m.sync;

    RawKeyPair raw = sift(m.pairs);
    r.raw_bits = raw.size();
    r.sifting_fraction = m.pairs.empty()
                             ? 0.0
                             : static_cast<double>(raw.size()) / static_cast<double>(m.pairs.size());
    if (raw.empty()) {
        throw KeyExhaustedError("no raw key bits after sifting");
    }

    const QberMode mode = opt.qber_mode == QberMode::Kind::oracle
                              ? QberMode::oracle()
                              : QberMode::sampled(opt.qber_sample_fraction, opt.qkd_seed);
    r.qber = estimate_qber(raw, mode);
    if (r.qber.qber >= 0.15) {
        throw KeyExhaustedError("QBER " + std::to_string(r.qber.qber) +
                                " above the reconciliation limit");
    }

    // cascade needs a nonzero error-rate hint even for clean runs
    const double hint = std::max(r.qber.qber, 0.01);
    CascadeResult cas = cascade(raw, hint, opt.cascade_passes, opt.qkd_seed);
    r.transcript = cas.transcript;
    r.corrected_keys_identical = cas.transcript.converged;
    if (!cas.transcript.converged) {
        r.residual_error = true;
        return r;  // residual errors are reported, never hashed into a key
    }

    const std::uint64_t disclosed = r.qber.bits_disclosed + cas.transcript.parity_bits_disclosed;
    const std::uint64_t toeplitz_seed = opt.qkd_seed ^ 0x9e3779b97f4a7c15ULL;
    SecretKey alice_key = privacy_amplification(cas.corrected.alice_bits, r.qber.qber, disclosed,
                                                opt.security_param, toeplitz_seed);
    SecretKey bob_key = privacy_amplification(cas.corrected.bob_bits, r.qber.qber, disclosed,
                                              opt.security_param, toeplitz_seed);
    r.ledger = alice_key.ledger;
    r.alice_key = std::move(alice_key.bits);
    r.bob_key = std::move(bob_key.bits);
    r.final_keys_identical = r.alice_key == r.bob_key;
    return r;
}

HistogramReport analyze_histogram(const TagStream& a, const TagStream& b,
                                  const AnalysisOptions& opt) {
    OffsetSearchParams search;
    search.search_span_s = opt.search_span_s;
    search.coarse_bin_s = opt.coarse_bin_s;
    search.confidence_threshold = opt.confidence_threshold;
    DriftTrackParams drift;
    drift.segment_s = opt.segment_s;
    drift.confidence_threshold = opt.confidence_threshold;

    HistogramReport r;
    r.sync.offset = estimate_offset(a, b, search);
    const ClockSolution clock = track_drift(a, b, r.sync.offset, drift);
    r.sync.clock_fit = clock.linear_fit();
    r.sync.knots = clock.knots().size();
    r.sync.duration_s = a.span_s();
    r.histogram = coincidence_histogram(a, b, clock, opt.histogram_span_s, opt.histogram_bin_s);
    return r;
}

namespace {

std::string sync_text(const SyncSummary& s) {
    std::ostringstream os;
    os << "sync: offset " << std::setprecision(9) << s.offset.offset_s * 1e6
       << " us, confidence " << std::setprecision(4) << s.offset.confidence << ", drift "
       << std::scientific << std::setprecision(3) << s.clock_fit.drift << std::defaultfloat
       << ", knots " << s.knots << "\n";
    os << "coincidences: " << s.pairs_matched << " matched";
    if (s.gated) {
        os << ", " << s.pairs_used << " after gating (phase "
           << std::setprecision(4) << s.gate_phase_s * 1e9 << " ns)";
    }
    os << ", rate " << std::setprecision(4) << s.rate_cps << " cps over "
       << std::setprecision(6) << s.duration_s << " s\n";
    return os.str();
}

}  // namespace

std::string to_text(const BellReport& r) {
    std::ostringstream os;
    os << sync_text(r.sync);
    os << "setting    Phi_A    Phi_B       N_pp     N_pm     N_mp     N_mm          E      sigma\n";
    for (std::size_t i = 0; i < r.tally.settings.size(); ++i) {
        const SettingCounts& s = r.tally.settings[i];
        const Correlation& c = r.correlations[i];
        os << std::left << std::setw(8) << i + 1 << std::right << std::fixed
           << std::setprecision(1) << std::setw(8) << s.phi_a.degrees() << std::setw(9)
           << s.phi_b.degrees() << std::setw(11) << s.n_pp << std::setw(9) << s.n_pm
           << std::setw(9) << s.n_mp << std::setw(9) << s.n_mm << std::setprecision(4)
           << std::setw(11) << c.e_value << std::setw(11) << c.sigma << "\n"
           << std::defaultfloat;
    }
    if (r.tally.unmapped > 0) os << "unmapped coincidences: " << r.tally.unmapped << "\n";
    os << std::fixed << std::setprecision(4);
    os << "S = " << r.chsh.s_value << "  |S| = " << r.chsh.abs_s()
       << "  sigma_S = " << r.chsh.sigma_s << "  violation = " << std::setprecision(1)
       << r.chsh.violation_sigmas << " sigma\n";
    os << std::defaultfloat;
    return os.str();
}

std::string to_csv(const BellReport& r) {
    std::ostringstream os;
    os << "phi_a_deg,phi_b_deg,n_pp,n_pm,n_mp,n_mm,e,sigma\n";
    os << std::setprecision(10);
    for (std::size_t i = 0; i < r.tally.settings.size(); ++i) {
        const SettingCounts& s = r.tally.settings[i];
        os << s.phi_a.degrees() << "," << s.phi_b.degrees() << "," << s.n_pp << "," << s.n_pm
           << "," << s.n_mp << "," << s.n_mm << "," << r.correlations[i].e_value << ","
           << r.correlations[i].sigma << "\n";
    }
    return os.str();
}

std::string to_text(const QkdReport& r) {
    std::ostringstream os;
    os << sync_text(r.sync);
    os << "raw key: " << r.raw_bits << " bits (sifting fraction " << std::fixed
       << std::setprecision(4) << r.sifting_fraction << ")\n";
    os << "qber: " << std::setprecision(2) << r.qber.qber * 100.0 << " % (" << r.qber.errors
       << " errors / " << r.qber.compared << " bits, "
       << (r.qber.bits_disclosed > 0 ? "sampled" : "oracle") << " estimate, "
       << r.qber.bits_disclosed << " bits disclosed)\n";
    os << "cascade: " << r.transcript.passes << " passes, "
       << r.transcript.parity_bits_disclosed << " parities disclosed, "
       << r.transcript.bits_corrected << " bits corrected, keys "
       << (r.corrected_keys_identical ? "identical" : "NOT identical") << "\n";
    if (r.residual_error) {
        os << "residual errors remain after reconciliation; no key distilled\n";
        os << std::defaultfloat;
        return os.str();
    }
    os << "privacy amplification: n=" << r.ledger.raw_length << " qber=" << std::setprecision(4)
       << r.ledger.qber << " disclosed=" << r.ledger.disclosed_bits
       << " s=" << r.ledger.security_param << " -> " << r.ledger.final_length << " bits\n";
    os << "final keys identical: " << (r.final_keys_identical ? "yes" : "NO") << "\n";
    os << "key: " << bits_to_hex(r.alice_key) << "\n";
    os << std::defaultfloat;
    return os.str();
}

std::string to_csv(const QkdReport& r) {
    std::ostringstream os;
    os << "raw_bits,qber,qber_disclosed,cascade_parities,bits_corrected,final_bits,"
          "keys_identical\n";
    os << r.raw_bits << "," << std::setprecision(10) << r.qber.qber << ","
       << r.qber.bits_disclosed << "," << r.transcript.parity_bits_disclosed << ","
       << r.transcript.bits_corrected << "," << (r.residual_error ? 0 : r.ledger.final_length)
       << "," << (r.final_keys_identical ? 1 : 0) << "\n";
    return os.str();
}

std::string to_text(const HistogramReport& r) {
    std::ostringstream os;
    os << "sync: offset " << std::setprecision(9) << r.sync.offset.offset_s * 1e6
       << " us, confidence " << std::setprecision(4) << r.sync.offset.confidence << "\n";
    os << "histogram: " << r.histogram.bins.size() << " bins of "
       << r.histogram.bin_width_s * 1e12 << " ps, " << r.histogram.total() << " entries\n";
    return os.str();
}

std::string bits_to_hex(const std::vector<std::uint8_t>& bits) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve((bits.size() + 3) / 4);
    for (std::size_t i = 0; i < bits.size(); i += 4) {
        unsigned v = 0;
        for (std::size_t j = 0; j < 4 && i + j < bits.size(); ++j) {
            v = (v << 1) | (bits[i + j] & 1u);
        }
        if (bits.size() - i < 4) v <<= 4 - (bits.size() - i);
        out.push_back(digits[v]);
    }
    return out;
}

}  // namespace entlink
