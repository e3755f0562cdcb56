#include "entlink/scenario.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace entlink {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

struct Cursor {
    const std::string& file;
    int line = 0;

    [[noreturn]] void fail(const std::string& message) const {
        throw ScenarioError(file, line, message);
    }
};

double parse_double(const Cursor& c, std::string_view v) {
    const std::string s(v);
    char* end = nullptr;
    const double x = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || s.empty()) c.fail("expected a number, got '" + s + "'");
    return x;
}

std::uint64_t parse_u64(const Cursor& c, std::string_view v) {
    const std::string s(v);
    char* end = nullptr;
    const unsigned long long x = std::strtoull(s.c_str(), &end, 10);
    if (end != s.c_str() + s.size() || s.empty()) {
        c.fail("expected a non-negative integer, got '" + s + "'");
    }
    return x;
}

bool parse_bool(const Cursor& c, std::string_view v) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    c.fail("expected a boolean (on/off/true/false), got '" + std::string(v) + "'");
}

std::pair<AnalyzerAngle, AnalyzerAngle> parse_angle_pair(const Cursor& c, std::string_view v) {
    const auto comma = v.find(',');
    if (comma == std::string_view::npos) {
        c.fail("expected two comma-separated angles, got '" + std::string(v) + "'");
    }
    const double a = parse_double(c, trim(v.substr(0, comma)));
    const double b = parse_double(c, trim(v.substr(comma + 1)));
    return {AnalyzerAngle(a), AnalyzerAngle(b)};
}

double parse_in_range(const Cursor& c, std::string_view v, double lo, double hi,
                      const char* what) {
    const double x = parse_double(c, v);
    if (!(x >= lo && x <= hi)) {
        std::ostringstream msg;
        msg << what << " must lie in [" << lo << ", " << hi << "]";
        c.fail(msg.str());
    }
    return x;
}

double parse_nonneg(const Cursor& c, std::string_view v, const char* what) {
    const double x = parse_double(c, v);
    if (!(x >= 0.0)) c.fail(std::string(what) + " must be >= 0");
    return x;
}

}  // namespace

Scenario parse_scenario(std::string_view text, const std::string& name) {
    Scenario sc;
    FadingModel fading;
    bool fading_enabled = false;

    Cursor cur{name, 0};
    std::string section;
    std::istringstream in{std::string(text)};
    std::string raw_line;
    while (std::getline(in, raw_line)) {
        ++cur.line;
        std::string_view line = trim(raw_line);
        if (line.empty() || line.front() == '#') continue;
        if (line.front() == '[') {
            if (line.back() != ']') cur.fail("unterminated section header");
            section = std::string(trim(line.substr(1, line.size() - 2)));
            if (section != "run" && section != "source" && section != "channel" &&
                section != "detector" && section != "clock_alice" && section != "clock_bob" &&
                section != "analysis") {
                cur.fail("unknown section [" + section + "]");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) cur.fail("expected 'key = value'");
        const std::string key{trim(line.substr(0, eq))};
        const std::string_view value = trim(line.substr(eq + 1));
        if (key.empty()) cur.fail("empty key");
        if (section.empty()) cur.fail("key '" + key + "' before any section");

        if (section == "run") {
            if (key == "duration_s") sc.duration_s = parse_nonneg(cur, value, "duration_s");
            else if (key == "seed") sc.seed = parse_u64(cur, value);
            else if (key == "epoch_s") sc.run.epoch_s = parse_u64(cur, value);
            else cur.fail("unknown key '" + key + "' in [run]");
        } else if (section == "source") {
            if (key == "rep_rate_hz") {
                sc.run.source.rep_rate_hz = parse_double(cur, value);
                if (!(sc.run.source.rep_rate_hz > 0.0)) cur.fail("rep_rate_hz must be positive");
            } else if (key == "pair_prob_per_pulse") {
                sc.run.source.pair_prob_per_pulse = parse_double(cur, value);
                if (!(sc.run.source.pair_prob_per_pulse >= 0.0 &&
                      sc.run.source.pair_prob_per_pulse < 0.1)) {
                    cur.fail("pair_prob_per_pulse must lie in [0, 0.1)");
                }
            } else if (key == "local_coupling_eff") {
                sc.run.source.local_coupling_eff =
                    parse_in_range(cur, value, 0.0, 1.0, "local_coupling_eff");
            } else if (key == "visibility_hv") {
                sc.run.singlet.visibility.v_hv =
                    parse_in_range(cur, value, 0.0, 1.0, "visibility_hv");
            } else if (key == "visibility_diag") {
                sc.run.singlet.visibility.v_diag =
                    parse_in_range(cur, value, 0.0, 1.0, "visibility_diag");
            } else {
                cur.fail("unknown key '" + key + "' in [source]");
            }
        } else if (section == "channel") {
            if (key == "link_loss_db") {
                sc.run.channel.link_loss_db = parse_nonneg(cur, value, "link_loss_db");
            } else if (key == "background_cps_per_detector") {
                sc.run.channel.background_cps_per_detector =
                    parse_nonneg(cur, value, "background_cps_per_detector");
            } else if (key == "depolarization_prob") {
                sc.run.channel.depolarization_prob =
                    parse_in_range(cur, value, 0.0, 1.0, "depolarization_prob");
            } else if (key == "fading_enabled") {
                fading_enabled = parse_bool(cur, value);
            } else if (key == "fading_mean_efficiency_db") {
                fading.mean_efficiency_db = parse_double(cur, value);
            } else if (key == "fading_sigma_db") {
                fading.sigma_db = parse_nonneg(cur, value, "fading_sigma_db");
            } else if (key == "fading_correlation_time_s") {
                fading.correlation_time_s = parse_double(cur, value);
                if (!(fading.correlation_time_s > 0.0)) {
                    cur.fail("fading_correlation_time_s must be positive");
                }
            } else if (key == "fading_tracking_off") {
                fading.tracking_off = parse_bool(cur, value);
            } else if (key == "fading_ramp_db_per_s") {
                fading.ramp_db_per_s = parse_nonneg(cur, value, "fading_ramp_db_per_s");
            } else {
                cur.fail("unknown key '" + key + "' in [channel]");
            }
        } else if (section == "detector") {
            if (key == "efficiency") {
                sc.run.detector.efficiency = parse_in_range(cur, value, 0.0, 1.0, "efficiency");
            } else if (key == "dark_cps") {
                sc.run.detector.dark_cps = parse_nonneg(cur, value, "dark_cps");
            } else if (key == "jitter_sigma_s") {
                sc.run.detector.jitter_sigma_s = parse_nonneg(cur, value, "jitter_sigma_s");
            } else if (key == "dead_time_s") {
                sc.run.detector.dead_time_s = parse_nonneg(cur, value, "dead_time_s");
            } else {
                cur.fail("unknown key '" + key + "' in [detector]");
            }
        } else if (section == "clock_alice" || section == "clock_bob") {
            ClockConfig& clk = section == "clock_alice" ? sc.run.clock_alice : sc.run.clock_bob;
            if (key == "offset_s") {
                clk.offset_s = parse_double(cur, value);
            } else if (key == "drift_rate") {
                clk.drift_rate = parse_double(cur, value);
                if (std::abs(clk.drift_rate) > 1e-6) cur.fail("|drift_rate| must be <= 1e-6");
            } else if (key == "gps_correction") {
                clk.gps_correction = parse_bool(cur, value);
            } else {
                cur.fail("unknown key '" + key + "' in [" + section + "]");
            }
        } else if (section == "analysis") {
            if (key == "window_s") {
                sc.analysis.window_s = parse_double(cur, value);
                if (!(sc.analysis.window_s > 0.0)) cur.fail("window_s must be positive");
            } else if (key == "search_span_s") {
                sc.analysis.search_span_s = parse_double(cur, value);
                if (!(sc.analysis.search_span_s > 0.0)) cur.fail("search_span_s must be positive");
            } else if (key == "coarse_bin_s") {
                sc.analysis.coarse_bin_s = parse_double(cur, value);
                if (!(sc.analysis.coarse_bin_s > 0.0)) cur.fail("coarse_bin_s must be positive");
            } else if (key == "confidence_threshold") {
                sc.analysis.confidence_threshold =
                    parse_nonneg(cur, value, "confidence_threshold");
            } else if (key == "segment_s") {
                sc.analysis.segment_s = parse_double(cur, value);
                if (!(sc.analysis.segment_s > 0.0)) cur.fail("segment_s must be positive");
            } else if (key == "pulse_gating") {
                sc.analysis.pulse_gating = parse_bool(cur, value);
            } else if (key == "gate_width_s") {
                sc.analysis.gate_width_s = parse_double(cur, value);
                if (!(sc.analysis.gate_width_s > 0.0)) cur.fail("gate_width_s must be positive");
            } else if (key == "alice_angles") {
                const auto [hv, diag] = parse_angle_pair(cur, value);
                sc.analysis.alice_settings = {hv, diag};
            } else if (key == "bob_angles") {
                const auto [hv, diag] = parse_angle_pair(cur, value);
                sc.analysis.bob_settings = {hv, diag};
            } else if (key == "security_param") {
                sc.analysis.security_param = parse_u64(cur, value);
            } else if (key == "cascade_passes") {
                sc.analysis.cascade_passes = static_cast<int>(parse_u64(cur, value));
                if (sc.analysis.cascade_passes < 1) cur.fail("cascade_passes must be >= 1");
            } else if (key == "qber_mode") {
                if (value == "oracle") sc.analysis.qber_mode = QberMode::Kind::oracle;
                else if (value == "sampled") sc.analysis.qber_mode = QberMode::Kind::sampled;
                else cur.fail("qber_mode must be 'oracle' or 'sampled'");
            } else if (key == "qber_sample_fraction") {
                sc.analysis.qber_sample_fraction =
                    parse_in_range(cur, value, 0.0, 1.0, "qber_sample_fraction");
            } else if (key == "qkd_seed") {
                sc.analysis.qkd_seed = parse_u64(cur, value);
            } else if (key == "histogram_span_s") {
                sc.analysis.histogram_span_s = parse_double(cur, value);
                if (!(sc.analysis.histogram_span_s > 0.0)) {
                    cur.fail("histogram_span_s must be positive");
                }
            } else if (key == "histogram_bin_s") {
                sc.analysis.histogram_bin_s = parse_double(cur, value);
                if (sc.analysis.histogram_bin_s < kTickSeconds) {
                    cur.fail("histogram_bin_s must be at least one tick (156 ps)");
                }
            } else {
                cur.fail("unknown key '" + key + "' in [analysis]");
            }
        }
    }

    if (fading_enabled) sc.run.channel.fading = fading;
    sc.run.alice_settings = sc.analysis.alice_settings;
    sc.run.bob_settings = sc.analysis.bob_settings;
    sc.analysis.pulse_period_s = 1.0 / sc.run.source.rep_rate_hz;

    try {
        validate(sc.run.source);
        validate(sc.run.channel);
        validate(sc.run.detector);
        validate(sc.run.clock_alice);
        validate(sc.run.clock_bob);
        validate(sc.run.singlet.visibility);
    } catch (const std::invalid_argument& e) {
        throw ScenarioError(name, 0, e.what());
    }
    return sc;
}

Scenario load_scenario(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open scenario file " + path.string());
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_scenario(buf.str(), path.filename().string());
}

}  // namespace entlink
