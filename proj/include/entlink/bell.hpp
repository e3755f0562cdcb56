#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "entlink/linksim.hpp"
#include "entlink/physics.hpp"
#include "entlink/sync.hpp"

namespace entlink {

// Coincidence counts for one pair of analyzer settings.
struct SettingCounts {
    AnalyzerAngle phi_a;
    AnalyzerAngle phi_b;
    std::uint64_t n_pp = 0;
    std::uint64_t n_pm = 0;
    std::uint64_t n_mp = 0;
    std::uint64_t n_mm = 0;

    std::uint64_t total() const { return n_pp + n_pm + n_mp + n_mm; }
};

struct Correlation {
    double e_value = 0.0;
    double sigma = 0.0;
};

// E = (N++ + N-- - N+- - N-+) / N with the first-order Poisson error.
// Throws std::invalid_argument when the total count is zero.
Correlation correlation_coefficient(const SettingCounts& counts);

struct ChshResult {
    double s_value = 0.0;          // signed
    double sigma_s = 0.0;
    double violation_sigmas = 0.0; // (|S| - 2) / sigma_S

    double abs_s() const { return s_value < 0.0 ? -s_value : s_value; }
};

// Signs applied to the four correlations; the published combination is
// S = E1 - E2 + E3 + E4.
struct SignPattern {
    std::array<int, 4> signs{+1, -1, +1, +1};
};

ChshResult chsh_s(const Correlation& e1, const Correlation& e2, const Correlation& e3,
                  const Correlation& e4, const SignPattern& pattern = {});

// Assigns analyzer angles to each (basis_A, basis_B) combination. Unmapped
// combinations are tallied separately, never dropped.
struct SettingMap {
    std::optional<std::array<AnalyzerAngle, 2>> angles[2][2];

    static SettingMap from_settings(const MeasurementSettings& alice,
                                    const MeasurementSettings& bob);
    void set(Basis a, Basis b, AnalyzerAngle phi_a, AnalyzerAngle phi_b);
};

struct TallyResult {
    std::vector<SettingCounts> settings;  // one entry per mapped combination
    std::uint64_t unmapped = 0;

    std::uint64_t total() const;
};

// Bins coincidences by the basis combination of the two detector channels.
TallyResult tally_coincidences(const std::vector<CoincidencePair>& pairs, const SettingMap& map);

}  // namespace entlink
