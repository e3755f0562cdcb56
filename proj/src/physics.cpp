#include "entlink/physics.hpp"

#include <cmath>
#include <stdexcept>

namespace entlink {

namespace {

constexpr double kAngleEps = 1e-9;  // degrees

bool near_any(double deg, std::initializer_list<double> targets) {
    for (double t : targets) {
        if (std::abs(deg - t) < kAngleEps) return true;
    }
    return false;
}

}  // namespace

AnalyzerAngle::AnalyzerAngle(double degrees) {
    double d = std::fmod(degrees, 180.0);
    if (d < 0.0) d += 180.0;
    degrees_ = d;
}

AnalyzerAngle basis_angle(Basis b) {
    return AnalyzerAngle(b == Basis::hv ? 0.0 : 45.0);
}

void validate(const VisibilityModel& v) {
    if (!(v.v_hv >= 0.0 && v.v_hv <= 1.0) || !(v.v_diag >= 0.0 && v.v_diag <= 1.0)) {
        throw std::invalid_argument("visibility must lie in [0, 1]");
    }
}

double effective_visibility(const SingletModel& model, AnalyzerAngle a, AnalyzerAngle b) {
    validate(model.visibility);
    const bool a_hv = near_any(a.degrees(), {0.0, 90.0, 180.0});
    const bool b_hv = near_any(b.degrees(), {0.0, 90.0, 180.0});
    if (a_hv && b_hv) return model.visibility.v_hv;
    const bool a_diag = near_any(a.degrees(), {45.0, 135.0});
    const bool b_diag = near_any(b.degrees(), {45.0, 135.0});
    if (a_diag && b_diag) return model.visibility.v_diag;
    return std::sqrt(model.visibility.v_hv * model.visibility.v_diag);
}

double joint_probability(const SingletModel& model, AnalyzerAngle a, AnalyzerAngle b,
                         Outcome i, Outcome j) {
    const double v = effective_visibility(model, a, b);
    const double s = (i == j) ? 1.0 : -1.0;
    const double delta = a.radians() - b.radians();
    return 0.25 * (1.0 - s * v * std::cos(2.0 * delta));
}

double correlation_expectation(const SingletModel& model, AnalyzerAngle a, AnalyzerAngle b) {
    const double v = effective_visibility(model, a, b);
    const double delta = a.radians() - b.radians();
    return -v * std::cos(2.0 * delta);
}

ChshSettings ChshSettings::canonical() {
    return {AnalyzerAngle(0.0), AnalyzerAngle(45.0), AnalyzerAngle(22.5), AnalyzerAngle(67.5)};
}

double ideal_chsh(const SingletModel& model, const ChshSettings& s) {
    return correlation_expectation(model, s.phi_a, s.phi_b)
         - correlation_expectation(model, s.phi_a, s.phi_b_prime)
         + correlation_expectation(model, s.phi_a_prime, s.phi_b)
         + correlation_expectation(model, s.phi_a_prime, s.phi_b_prime);
}

}  // namespace entlink
