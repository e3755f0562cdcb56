#pragma once

#include <array>

namespace entlink {

inline constexpr double kPi = 3.14159265358979323846;

// Polarization analyzer setting. Analyzers are pi-periodic, so the angle is
// kept normalized to [0, 180) degrees.
class AnalyzerAngle {
public:
    AnalyzerAngle() = default;
    explicit AnalyzerAngle(double degrees);

    double degrees() const { return degrees_; }
    double radians() const { return degrees_ * kPi / 180.0; }

    friend bool operator==(AnalyzerAngle a, AnalyzerAngle b) {
        return a.degrees_ == b.degrees_;
    }

private:
    double degrees_ = 0.0;
};

// The two output ports of a two-channel polarization analyzer.
enum class Outcome : int { plus = +1, minus = -1 };

inline int sign_of(Outcome o) { return static_cast<int>(o); }

// Analyzer basis, selected passively by the 50/50 beam splitter.
// HV corresponds to analyzer angle 0 deg, DIAG to 45 deg, project-wide.
enum class Basis { hv, diag };

AnalyzerAngle basis_angle(Basis b);

// Correlation visibilities measured in the two analysis bases.
struct VisibilityModel {
    double v_hv = 1.0;
    double v_diag = 1.0;
};

// Two-photon polarization-singlet source with imperfect visibility.
// With v_hv = v_diag = 1 this is the ideal |psi-> state.
struct SingletModel {
    VisibilityModel visibility;
};

// Throws std::invalid_argument when a visibility is outside [0, 1].
void validate(const VisibilityModel& v);

// Visibility governing a joint measurement at angles a and b: the H/V value
// when both angles are H/V-aligned (0 or 90 deg), the diagonal value when
// both are +-45 aligned, and the geometric mean otherwise.
double effective_visibility(const SingletModel& model, AnalyzerAngle a, AnalyzerAngle b);

// P(i, j | a, b) = 1/4 (1 - s_ij V cos 2(a-b)), s_ij = +1 when i == j.
// The four outcomes sum to one; at V = 1 and i == j this is sin^2(a-b)/2.
double joint_probability(const SingletModel& model, AnalyzerAngle a, AnalyzerAngle b,
                         Outcome i, Outcome j);

// E(a, b) = -V cos 2(a-b) = sum_ij s_ij P(i, j | a, b).
double correlation_expectation(const SingletModel& model, AnalyzerAngle a, AnalyzerAngle b);

// One CHSH measurement configuration {Phi_A, Phi_A', Phi_B, Phi_B'}.
struct ChshSettings {
    AnalyzerAngle phi_a;
    AnalyzerAngle phi_a_prime;
    AnalyzerAngle phi_b;
    AnalyzerAngle phi_b_prime;

    // {0, 45, 22.5, 67.5} deg, the settings that maximize |S| at 2 sqrt(2)
    static ChshSettings canonical();
};

// Signed S = E(a,b) - E(a,b') + E(a',b) + E(a',b').
// At the canonical settings and visibility V this is -2 sqrt(2) V.
double ideal_chsh(const SingletModel& model, const ChshSettings& settings);

}  // namespace entlink
