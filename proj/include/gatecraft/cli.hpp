#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace gatecraft {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConstraint = 3;

/// Entry point of the `gatecraft` tool; returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// One evaluated sweep cell.
struct SweepPoint {
    double macs = 0.0;
    double metric = 0.0;  // higher is better
};

/// A point is on the frontier unless another point has no more MACs and no
/// lower metric, with at least one of the two strictly better.
std::vector<bool> pareto_flags(const std::vector<SweepPoint>& points);

/// Parses "name=v1,v2,..." into its name and values. Throws ConfigError.
std::pair<std::string, std::vector<double>> parse_grid_axis(const std::string& text);

}  // namespace gatecraft
