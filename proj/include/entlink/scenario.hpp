#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "entlink/analysis.hpp"
#include "entlink/linksim.hpp"

namespace entlink {

class ScenarioError : public std::runtime_error {
public:
    ScenarioError(const std::string& file, int line, const std::string& message)
        : std::runtime_error(file + ":" + std::to_string(line) + ": " + message),
          line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

// A fully described run: physics, clocks, duration, seed and the analysis
// defaults that belong to it. See the scenario format notes in the README.
struct Scenario {
    RunConfig run;
    AnalysisOptions analysis;
    double duration_s = 1.0;
    std::uint64_t seed = 1;
};

// Parses the key = value scenario format. All violations (unknown sections
// or keys, malformed values, out-of-range settings) throw ScenarioError with
// the offending line number.
Scenario parse_scenario(std::string_view text, const std::string& name);
Scenario load_scenario(const std::filesystem::path& path);

}  // namespace entlink
