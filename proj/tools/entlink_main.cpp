#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "entlink/analysis.hpp"
#include "entlink/linksim.hpp"
#include "entlink/net.hpp"
#include "entlink/scenario.hpp"
#include "entlink/timetag.hpp"

namespace {

// process exit codes, one class per failure family
enum ExitCode : int {
    kOk = 0,
    kUsage = 1,
    kSchema = 2,
    kSyncLock = 3,
    kKeyExhausted = 4,
    kNetwork = 5,
    kFileFormat = 6,
};

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    f << text;
}

struct EndpointParts {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;
};

EndpointParts parse_endpoint(const std::string& endpoint) {
    EndpointParts ep;
    const auto colon = endpoint.rfind(':');
    std::string port_str = endpoint;
    if (colon != std::string::npos) {
        if (colon > 0) ep.host = endpoint.substr(0, colon);
        port_str = endpoint.substr(colon + 1);
    }
    const unsigned long port = std::stoul(port_str);
    if (port == 0 || port > 65535) throw std::runtime_error("invalid port in " + endpoint);
    ep.port = static_cast<std::uint16_t>(port);
    return ep;
}

entlink::MeasurementSettings parse_angles(const std::string& spec) {
    const auto comma = spec.find(',');
    if (comma == std::string::npos) {
        throw std::runtime_error("angles must be 'hv_deg,diag_deg', got '" + spec + "'");
    }
    return {entlink::AnalyzerAngle(std::stod(spec.substr(0, comma))),
            entlink::AnalyzerAngle(std::stod(spec.substr(comma + 1)))};
}

int cmd_simulate(const std::string& scenario_path, const std::string& out_dir,
                 std::optional<std::uint64_t> seed, std::optional<double> duration) {
    entlink::Scenario sc = entlink::load_scenario(scenario_path);
    if (seed) sc.seed = *seed;
    if (duration) sc.duration_s = *duration;

    const entlink::SimulationResult result =
        entlink::simulate_run(sc.run, sc.duration_s, sc.seed);

    const std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    entlink::write_stream_file(result.alice, dir / "alice.etag");
    entlink::write_stream_file(result.bob, dir / "bob.etag");
    const std::string truth = entlink::format_ground_truth(result.truth);
    write_text_file(dir / "ground_truth.txt", truth);

    std::cout << "wrote " << (dir / "alice.etag").string() << " (" << result.alice.size()
              << " tags), " << (dir / "bob.etag").string() << " (" << result.bob.size()
              << " tags)\n";
    std::cout << truth;
    return kOk;
}

entlink::AnalysisOptions build_options(const std::optional<std::string>& scenario_path) {
    if (scenario_path) return entlink::load_scenario(*scenario_path).analysis;
    return {};
}

int analyze_streams(const entlink::TagStream& alice, const entlink::TagStream& bob,
                    const std::string& mode, const entlink::AnalysisOptions& opt,
                    const std::optional<std::string>& out_dir) {
    std::filesystem::path dir;
    if (out_dir) {
        dir = *out_dir;
        std::filesystem::create_directories(dir);
    }

    if (mode == "bell") {
        const entlink::BellReport report = entlink::analyze_bell(alice, bob, opt);
        std::cout << entlink::to_text(report);
        if (out_dir) write_text_file(dir / "bell.csv", entlink::to_csv(report));
    } else if (mode == "qkd") {
        const entlink::QkdReport report = entlink::analyze_qkd(alice, bob, opt);
        std::cout << entlink::to_text(report);
        if (out_dir) write_text_file(dir / "qkd.csv", entlink::to_csv(report));
        if (report.residual_error) return kKeyExhausted;
    } else if (mode == "histogram") {
        const entlink::HistogramReport report = entlink::analyze_histogram(alice, bob, opt);
        std::cout << entlink::to_text(report);
        const std::string csv = entlink::histogram_csv(report.histogram);
        if (out_dir) {
            write_text_file(dir / "histogram.csv", csv);
        } else {
            std::cout << csv;
        }
    } else {
        throw CLI::ValidationError("--mode", "unknown mode " + mode);
    }
    return kOk;
}

int cmd_analyze(const std::string& alice_path, const std::string& bob_path,
                const std::string& mode, const entlink::AnalysisOptions& opt,
                const std::optional<std::string>& out_dir) {
    const entlink::TagStream alice = entlink::read_stream_file(alice_path);
    const entlink::TagStream bob = entlink::read_stream_file(bob_path);
    return analyze_streams(alice, bob, mode, opt, out_dir);
}

int cmd_net_bob(const std::string& endpoint, const std::string& stream_path,
                double timeout_s, double clock_s, std::size_t batch_size) {
    const entlink::TagStream bob = entlink::read_stream_file(stream_path);
    const EndpointParts ep = parse_endpoint(endpoint);
    entlink::net::SenderOptions opt;
    opt.batch_size = batch_size;
    opt.local_clock_s = clock_s;
    const entlink::net::SenderReport report = entlink::net::stream_tags(
        [&] { return entlink::net::tcp_connect(ep.host, ep.port, timeout_s); }, bob, opt);
    std::cout << "sent " << report.tags_sent << " tags in " << report.batches << " batches, "
              << report.reconnects << " reconnects\n";
    std::cout << "receiver reported " << report.last_peer_stats.tags_sent
              << " tags received, live rate "
              << static_cast<double>(report.last_peer_stats.coincidence_rate_mcps) / 1000.0
              << " cps\n";
    return kOk;
}

int cmd_net_alice(const std::string& endpoint, const std::string& stream_path,
                  const std::string& mode, const entlink::AnalysisOptions& opt,
                  double timeout_s, double clock_s,
                  const std::optional<std::string>& out_dir) {
    entlink::TagStream alice = entlink::read_stream_file(stream_path);
    const EndpointParts ep = parse_endpoint(endpoint);
    entlink::net::TcpServer server(ep.port);
    entlink::net::ReceiverOptions ropt;
    ropt.analysis = opt;
    ropt.local_clock_s = clock_s;
    entlink::net::ReceiverSession session(std::move(alice), ropt);
    session.run([&] { return server.accept(timeout_s); });

    std::cout << "session " << entlink::net::to_string(session.phase()) << ": "
              << session.bob_received().size() << " tags in " << session.batches_received()
              << " batches, " << session.pairs().size() << " pairs matched online\n";
    for (const std::string& line : session.log()) std::cout << "  [" << line << "]\n";

    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        entlink::write_stream_file(session.bob_received(),
                                   std::filesystem::path(*out_dir) / "bob_received.etag");
    }
    return analyze_streams(session.alice_stream(), session.bob_received(), mode, opt,
                           out_dir);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"entlink: desk-scale free-space entanglement link simulator and analysis"};
    app.require_subcommand(1);

    // simulate
    auto* sim = app.add_subcommand("simulate", "generate a pair of time-tag streams");
    std::string sim_scenario, sim_out;
    std::optional<std::uint64_t> sim_seed;
    std::optional<double> sim_duration;
    sim->add_option("--scenario", sim_scenario, "scenario file")->required();
    sim->add_option("--out", sim_out, "output directory")->required();
    sim->add_option("--seed", sim_seed, "override the scenario seed");
    sim->add_option("--duration", sim_duration, "override the scenario duration [s]");

    // shared analysis flags
    struct AnalyzeFlags {
        std::optional<std::string> scenario;
        std::optional<double> window, search_span, coarse_bin, segment, gate_width, period;
        std::optional<std::string> alice_angles, bob_angles, qber_mode;
        std::optional<bool> gating;
        std::optional<std::uint64_t> security_param, qkd_seed;
        std::optional<double> qber_fraction, hist_span, hist_bin;

        entlink::AnalysisOptions resolve() const {
            entlink::AnalysisOptions opt = build_options(scenario);
            if (window) opt.window_s = *window;
            if (search_span) opt.search_span_s = *search_span;
            if (coarse_bin) opt.coarse_bin_s = *coarse_bin;
            if (segment) opt.segment_s = *segment;
            if (gating) opt.pulse_gating = *gating;
            if (gate_width) opt.gate_width_s = *gate_width;
            if (period) opt.pulse_period_s = *period;
            if (alice_angles) opt.alice_settings = parse_angles(*alice_angles);
            if (bob_angles) opt.bob_settings = parse_angles(*bob_angles);
            if (security_param) opt.security_param = *security_param;
            if (qkd_seed) opt.qkd_seed = *qkd_seed;
            if (qber_fraction) opt.qber_sample_fraction = *qber_fraction;
            if (qber_mode) {
                opt.qber_mode = *qber_mode == "sampled" ? entlink::QberMode::Kind::sampled
                                                        : entlink::QberMode::Kind::oracle;
            }
            if (hist_span) opt.histogram_span_s = *hist_span;
            if (hist_bin) opt.histogram_bin_s = *hist_bin;
            return opt;
        }
    };
    auto add_analysis_flags = [](CLI::App* cmd, AnalyzeFlags& f) {
        cmd->add_option("--scenario", f.scenario, "scenario file supplying analysis defaults");
        cmd->add_option("--window", f.window, "coincidence window [s]");
        cmd->add_option("--search-span", f.search_span, "offset search span [s]");
        cmd->add_option("--coarse-bin", f.coarse_bin, "coarse correlation bin [s]");
        cmd->add_option("--segment", f.segment, "drift-tracking segment [s]");
        cmd->add_option("--gate", f.gating, "pulse gating on/off");
        cmd->add_option("--gate-width", f.gate_width, "gate width [s]");
        cmd->add_option("--period", f.period, "pulse period [s]");
        cmd->add_option("--alice-angles", f.alice_angles, "Alice analyzer angles hv,diag");
        cmd->add_option("--bob-angles", f.bob_angles, "Bob analyzer angles hv,diag");
        cmd->add_option("--security-param", f.security_param, "privacy amplification margin");
        cmd->add_option("--qber-mode", f.qber_mode, "oracle|sampled");
        cmd->add_option("--qber-fraction", f.qber_fraction, "sampled QBER fraction");
        cmd->add_option("--qkd-seed", f.qkd_seed, "post-processing seed");
        cmd->add_option("--hist-span", f.hist_span, "histogram span [s]");
        cmd->add_option("--hist-bin", f.hist_bin, "histogram bin [s]");
    };

    // analyze
    auto* ana = app.add_subcommand("analyze", "synchronize and evaluate two recorded streams");
    std::string ana_alice, ana_bob, ana_mode = "bell";
    std::optional<std::string> ana_out;
    AnalyzeFlags ana_flags;
    ana->add_option("--alice", ana_alice, "Alice .etag stream")->required();
    ana->add_option("--bob", ana_bob, "Bob .etag stream")->required();
    ana->add_option("--mode", ana_mode, "bell|qkd|histogram");
    ana->add_option("--out", ana_out, "directory for CSV reports");
    add_analysis_flags(ana, ana_flags);

    // net
    auto* netcmd = app.add_subcommand("net", "two-node live session (Bob streams to Alice)");
    std::string net_role, net_endpoint, net_stream, net_mode = "bell";
    std::optional<std::string> net_out;
    double net_timeout = 10.0, net_clock = 0.0;
    std::size_t net_batch = 4096;
    AnalyzeFlags net_flags;
    netcmd->add_option("--role", net_role, "alice|bob")->required();
    netcmd->add_option("--endpoint", net_endpoint, "host:port")->required();
    netcmd->add_option("--stream", net_stream, "this party's .etag stream")->required();
    netcmd->add_option("--mode", net_mode, "final report mode (alice role)");
    netcmd->add_option("--out", net_out, "output directory");
    netcmd->add_option("--timeout", net_timeout, "connect/accept timeout [s]");
    netcmd->add_option("--clock", net_clock, "local clock sample for the start handshake [s]");
    netcmd->add_option("--batch-size", net_batch, "tags per TAG_BATCH");
    add_analysis_flags(netcmd, net_flags);

    CLI11_PARSE(app, argc, argv);

    try {
        if (sim->parsed()) {
            return cmd_simulate(sim_scenario, sim_out, sim_seed, sim_duration);
        }
        if (ana->parsed()) {
            return cmd_analyze(ana_alice, ana_bob, ana_mode, ana_flags.resolve(), ana_out);
        }
        if (netcmd->parsed()) {
            if (net_role == "bob") {
                return cmd_net_bob(net_endpoint, net_stream, net_timeout, net_clock, net_batch);
            }
            if (net_role == "alice") {
                return cmd_net_alice(net_endpoint, net_stream, net_mode, net_flags.resolve(),
                                     net_timeout, net_clock, net_out);
            }
            throw CLI::ValidationError("--role", "must be alice or bob");
        }
    } catch (const entlink::ScenarioError& e) {
        std::cerr << "scenario error: " << e.what() << "\n";
        return kSchema;
    } catch (const entlink::SyncError& e) {
        std::cerr << "sync error: " << e.what() << "\n";
        return kSyncLock;
    } catch (const entlink::KeyExhaustedError& e) {
        std::cerr << "key error: " << e.what() << "\n";
        return kKeyExhausted;
    } catch (const entlink::net::NetworkError& e) {
        std::cerr << "network error: " << e.what() << "\n";
        return kNetwork;
    } catch (const entlink::StreamFormatError& e) {
        std::cerr << "stream format error: " << e.what() << "\n";
        return kFileFormat;
    } catch (const CLI::Error& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    }
    return kOk;
}
