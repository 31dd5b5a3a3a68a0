#pragma once

#include "mdbdp/optimizer.hpp"
#include "mdbdp/problems.hpp"
#include "mdbdp/schemes.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mdbdp {

/// Training settings echoed into every report.
struct ConfigEcho {
    int iterations_per_step = 0;
    int final_step_iterations = 0;
    int batch_size = 0;
    double lr_initial = 0;
    double lr_final = 0;
    std::string lr_schedule = "exponential";
    std::vector<int> hidden;
    std::string activation = "tanh";
    std::string ds_terminal = "fit";

    friend bool operator==(const ConfigEcho&, const ConfigEcho&) = default;
};

/// Outcome of R independent runs of one (scheme, problem, d, N) experiment.
/// Non-converged runs are kept in `estimates` as empty entries and excluded
/// from mean/std. The standard deviation is the sample (n-1) one and is 0
/// for a single converged run.
struct ExperimentReport {
    std::string scheme;
    std::string problem;
    int dim = 0;
    int n_steps = 0;
    ConfigEcho config;
    std::vector<std::uint64_t> seeds;
    std::vector<std::optional<double>> estimates;
    std::optional<double> mean;
    std::optional<double> std_dev;
    bool single_run = false;
    std::optional<double> reference_y0;
    std::optional<double> relative_error_percent;
    double seconds = 0;

    bool all_diverged() const { return !mean.has_value(); }

    friend bool operator==(const ExperimentReport&, const ExperimentReport&) = default;
};

struct SummaryStats {
    double mean = 0;
    double std_dev = 0;
};

/// Mean and sample (n-1) standard deviation; std is 0 for one value.
SummaryStats summarize(const std::vector<double>& values);

/// Fills mean, std_dev, single_run and relative_error_percent from
/// `estimates` and `reference_y0`.
void aggregate(ExperimentReport& report);

struct ExperimentOptions {
    HiddenLayout layout;
    /// When non-empty, run r is persisted to <checkpoint_dir>/run_<r>.
    std::filesystem::path checkpoint_dir;
    SolverHooks<double> hooks;
    DivergenceGuard guard;
    std::function<void(int run, std::uint64_t seed, const std::optional<double>& estimate)> on_run_end;
};

/// Runs `runs` independent trainings with seeds base_seed + r and reports
/// evaluate(solution, 0, x0).u for each.
ExperimentReport run_experiment(Scheme scheme, const ProblemInstance<double>& problem, const TimeGrid<double>& grid,
                                const TrainConfig& train, int runs, std::uint64_t base_seed,
                                const ExperimentOptions& options);

enum class ReportFormat { json, csv };

ReportFormat parse_report_format(const std::string& name);

/// Column order of the CSV report.
inline constexpr const char* kCsvHeader = "scheme,problem,d,N,runs,mean,std,reference,rel_err_pct,seconds";

std::string report_to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const std::string& text);
std::string report_to_csv(const ExperimentReport& report);

/// The fields carried by a CSV report.
struct CsvSummary {
    std::string scheme;
    std::string problem;
    int dim = 0;
    int n_steps = 0;
    int runs = 0;
    std::optional<double> mean;
    std::optional<double> std_dev;
    std::optional<double> reference;
    std::optional<double> rel_err_pct;
    double seconds = 0;
};

CsvSummary csv_summary_from_text(const std::string& text);

void emit_report(const ExperimentReport& report, const std::filesystem::path& path, ReportFormat format);
ExperimentReport read_report_json(const std::filesystem::path& path);
CsvSummary read_report_csv(const std::filesystem::path& path);

} // namespace mdbdp
