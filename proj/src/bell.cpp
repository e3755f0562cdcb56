#include "entlink/bell.hpp"

#include <cmath>
#include <stdexcept>

namespace entlink {

Correlation correlation_coefficient(const SettingCounts& counts) {
    const double total = static_cast<double>(counts.total());
    if (total <= 0.0) {
        throw std::invalid_argument("correlation undefined for zero total counts");
    }
    const double same = static_cast<double>(counts.n_pp + counts.n_mm);
    const double diff = static_cast<double>(counts.n_pm + counts.n_mp);
    Correlation c;
    c.e_value = (same - diff) / total;
    // first-order Poisson propagation; 4*A*B/N^3 equals (1 - e^2)/N and stays
    // defined when a cell is empty
    c.sigma = std::sqrt(4.0 * same * diff / (total * total * total));
    return c;
}

ChshResult chsh_s(const Correlation& e1, const Correlation& e2, const Correlation& e3,
                  const Correlation& e4, const SignPattern& pattern) {
    const Correlation* e[4] = {&e1, &e2, &e3, &e4};
    ChshResult r;
    double var = 0.0;
    for (int i = 0; i < 4; ++i) {
        r.s_value += pattern.signs[static_cast<std::size_t>(i)] * e[i]->e_value;
        var += e[i]->sigma * e[i]->sigma;
    }
    r.sigma_s = std::sqrt(var);
    r.violation_sigmas = r.sigma_s > 0.0 ? (r.abs_s() - 2.0) / r.sigma_s
                                         : (r.abs_s() > 2.0 ? HUGE_VAL : -HUGE_VAL);
    return r;
}

SettingMap SettingMap::from_settings(const MeasurementSettings& alice,
                                     const MeasurementSettings& bob) {
    SettingMap m;
    m.set(Basis::hv, Basis::hv, alice.hv_path, bob.hv_path);
    m.set(Basis::hv, Basis::diag, alice.hv_path, bob.diag_path);
    m.set(Basis::diag, Basis::hv, alice.diag_path, bob.hv_path);
    m.set(Basis::diag, Basis::diag, alice.diag_path, bob.diag_path);
    return m;
}

void SettingMap::set(Basis a, Basis b, AnalyzerAngle phi_a, AnalyzerAngle phi_b) {
    angles[static_cast<int>(a)][static_cast<int>(b)] = {phi_a, phi_b};
}

std::uint64_t TallyResult::total() const {
    std::uint64_t t = unmapped;
    for (const SettingCounts& s : settings) t += s.total();
    return t;
}

TallyResult tally_coincidences(const std::vector<CoincidencePair>& pairs,
                               const SettingMap& map) {
    TallyResult result;
    int index[2][2] = {{-1, -1}, {-1, -1}};
    for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
            if (map.angles[a][b]) {
                index[a][b] = static_cast<int>(result.settings.size());
                SettingCounts counts;
                counts.phi_a = (*map.angles[a][b])[0];
                counts.phi_b = (*map.angles[a][b])[1];
                result.settings.push_back(counts);
            }
        }
    }
    for (const CoincidencePair& p : pairs) {
        const Basis ba = basis_of(p.alice.pol_channel());
        const Basis bb = basis_of(p.bob.pol_channel());
        const int idx = index[static_cast<int>(ba)][static_cast<int>(bb)];
        if (idx < 0) {
            ++result.unmapped;
            continue;
        }
        SettingCounts& c = result.settings[static_cast<std::size_t>(idx)];
        const bool a_plus = outcome_of(p.alice.pol_channel()) == Outcome::plus;
        const bool b_plus = outcome_of(p.bob.pol_channel()) == Outcome::plus;
        if (a_plus && b_plus) ++c.n_pp;
        else if (a_plus) ++c.n_pm;
        else if (b_plus) ++c.n_mp;
        else ++c.n_mm;
    }
    return result;
}

}  // namespace entlink
