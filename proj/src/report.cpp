#include "mdbdp/report.hpp"

#include "mdbdp/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace mdbdp {

SummaryStats summarize(const std::vector<double>& values) {
    if (values.empty()) throw std::invalid_argument("summarize: no values");
    SummaryStats s;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.std_dev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return s;
}

void aggregate(ExperimentReport& report) {
    std::vector<double> ok;
    for (const auto& e : report.estimates)
        if (e) ok.push_back(*e);
    report.mean.reset();
    report.std_dev.reset();
    report.relative_error_percent.reset();
    report.single_run = ok.size() == 1;
    if (ok.empty()) return;
    const auto s = summarize(ok);
    report.mean = s.mean;
    report.std_dev = s.std_dev;
    if (report.reference_y0 && *report.reference_y0 != 0.0)
        report.relative_error_percent = 100.0 * std::abs(s.mean - *report.reference_y0) / std::abs(*report.reference_y0);
}

ExperimentReport run_experiment(Scheme scheme, const ProblemInstance<double>& problem, const TimeGrid<double>& grid,
                                const TrainConfig& train, int runs, std::uint64_t base_seed,
                                const ExperimentOptions& options) {
    if (runs < 1) throw std::invalid_argument("run_experiment: runs must be >= 1");
    const auto start = std::chrono::steady_clock::now();

    ExperimentReport report;
    report.scheme = to_string(scheme);
    report.problem = problem.label;
    report.dim = problem.model.dim;
    report.n_steps = grid.n_steps();
    report.reference_y0 = problem.reference_y0;
    report.config.iterations_per_step = train.iterations_per_step;
    report.config.final_step_iterations = train.final_step_iterations;
    report.config.batch_size = train.batch_size;
    report.config.lr_initial = train.lr_initial;
    report.config.lr_final = train.lr_final;
    report.config.hidden = options.layout.hidden_sizes;
    report.config.activation = options.layout.activation.kind == ActivationKind::tanh ? "tanh" : "groupsort";
    report.config.ds_terminal = train.ds_terminal == TerminalMode::fit ? "fit" : "exact";

    for (int r = 0; r < runs; ++r) {
        TrainConfig cfg = train;
        cfg.seed = base_seed + static_cast<std::uint64_t>(r);
        report.seeds.push_back(cfg.seed);
        std::optional<double> estimate;
        try {
            const auto sol = solve(scheme, problem.model, problem.x0, grid, options.layout, cfg, options.hooks,
                                   options.guard);
            estimate = evaluate(sol, 0, problem.x0).u;
            if (!std::isfinite(*estimate)) estimate.reset();
            if (!options.checkpoint_dir.empty()) {
                SolutionManifest m{problem.label, cfg.seed, cfg, options.layout};
                save_solution(sol, m, options.checkpoint_dir / ("run_" + std::to_string(r)));
            }
        } catch (const DivergenceError&) {
            estimate.reset();
        }
        report.estimates.push_back(estimate);
        if (options.on_run_end) options.on_run_end(r, cfg.seed, estimate);
    }
    aggregate(report);
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

ReportFormat parse_report_format(const std::string& name) {
    if (name == "json") return ReportFormat::json;
    if (name == "csv") return ReportFormat::csv;
    throw std::invalid_argument("unknown report format '" + name + "' (expected json or csv)");
}

namespace {

nlohmann::json optional_number(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> read_optional(const nlohmann::json& j, const char* key) {
    const auto& v = j.at(key);
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
}

std::string format17(const std::optional<double>& v) {
    if (!v) return "";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return buf;
}

std::optional<double> parse_optional(const std::string& field) {
    if (field.empty()) return std::nullopt;
    return std::stod(field);
}

} // namespace

std::string report_to_json(const ExperimentReport& r) {
    nlohmann::json j;
    j["scheme"] = r.scheme;
    j["problem"] = r.problem;
    j["d"] = r.dim;
    j["N"] = r.n_steps;
    j["config"] = {{"iterations_per_step", r.config.iterations_per_step},
                   {"final_step_iterations", r.config.final_step_iterations},
                   {"batch_size", r.config.batch_size},
                   {"lr_initial", r.config.lr_initial},
                   {"lr_final", r.config.lr_final},
                   {"lr_schedule", r.config.lr_schedule},
                   {"hidden", r.config.hidden},
                   {"activation", r.config.activation},
                   {"ds_terminal", r.config.ds_terminal}};
    j["seeds"] = r.seeds;
    nlohmann::json est = nlohmann::json::array();
    for (const auto& e : r.estimates) est.push_back(e ? nlohmann::json(*e) : nlohmann::json("NC"));
    j["estimates"] = est;
    j["runs"] = r.estimates.size();
    j["mean"] = r.mean ? nlohmann::json(*r.mean) : nlohmann::json("NC");
    j["std"] = r.std_dev ? nlohmann::json(*r.std_dev) : nlohmann::json("NC");
    j["std_convention"] = "sample (n-1)";
    j["single_run"] = r.single_run;
    j["reference_y0"] = optional_number(r.reference_y0);
    j["relative_error_percent"] = optional_number(r.relative_error_percent);
    j["seconds"] = r.seconds;
    return j.dump(2);
}

ExperimentReport report_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    ExperimentReport r;
    r.scheme = j.at("scheme").get<std::string>();
    r.problem = j.at("problem").get<std::string>();
    r.dim = j.at("d").get<int>();
    r.n_steps = j.at("N").get<int>();
    const auto& c = j.at("config");
    r.config.iterations_per_step = c.at("iterations_per_step").get<int>();
    r.config.final_step_iterations = c.at("final_step_iterations").get<int>();
    r.config.batch_size = c.at("batch_size").get<int>();
    r.config.lr_initial = c.at("lr_initial").get<double>();
    r.config.lr_final = c.at("lr_final").get<double>();
    r.config.lr_schedule = c.at("lr_schedule").get<std::string>();
    r.config.hidden = c.at("hidden").get<std::vector<int>>();
    r.config.activation = c.at("activation").get<std::string>();
    r.config.ds_terminal = c.at("ds_terminal").get<std::string>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& e : j.at("estimates"))
        r.estimates.push_back(e.is_number() ? std::optional<double>(e.get<double>()) : std::nullopt);
    auto number_or_nc = [&](const char* key) -> std::optional<double> {
        const auto& v = j.at(key);
        return v.is_number() ? std::optional<double>(v.get<double>()) : std::nullopt;
    };
    r.mean = number_or_nc("mean");
    r.std_dev = number_or_nc("std");
    r.single_run = j.at("single_run").get<bool>();
    r.reference_y0 = read_optional(j, "reference_y0");
    r.relative_error_percent = read_optional(j, "relative_error_percent");
    r.seconds = j.at("seconds").get<double>();
    return r;
}

std::string report_to_csv(const ExperimentReport& r) {
    std::ostringstream os;
    os << kCsvHeader << '\n';
    os << r.scheme << ',' << r.problem << ',' << r.dim << ',' << r.n_steps << ',' << r.estimates.size() << ','
       << format17(r.mean) << ',' << format17(r.std_dev) << ',' << format17(r.reference_y0) << ','
       << format17(r.relative_error_percent) << ',' << format17(r.seconds) << '\n';
    return os.str();
}

CsvSummary csv_summary_from_text(const std::string& text) {
    std::istringstream is(text);
    std::string header, row;
    if (!std::getline(is, header) || header != kCsvHeader)
        throw std::runtime_error("csv report: unexpected header '" + header + "'");
    if (!std::getline(is, row)) throw std::runtime_error("csv report: missing data row");
    std::vector<std::string> f;
    std::string cell;
    std::istringstream rs(row);
    while (std::getline(rs, cell, ',')) f.push_back(cell);
    if (!row.empty() && row.back() == ',') f.emplace_back();
    if (f.size() != 10) throw std::runtime_error("csv report: expected 10 fields, got " + std::to_string(f.size()));
    CsvSummary s;
    s.scheme = f[0];
    s.problem = f[1];
    s.dim = std::stoi(f[2]);
    s.n_steps = std::stoi(f[3]);
    s.runs = std::stoi(f[4]);
    s.mean = parse_optional(f[5]);
    s.std_dev = parse_optional(f[6]);
    s.reference = parse_optional(f[7]);
    s.rel_err_pct = parse_optional(f[8]);
    s.seconds = std::stod(f[9]);
    return s;
}

void emit_report(const ExperimentReport& report, const std::filesystem::path& path, ReportFormat format) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("emit_report: cannot open " + path.string());
    os << (format == ReportFormat::json ? report_to_json(report) + "\n" : report_to_csv(report));
    if (!os) throw std::runtime_error("emit_report: write failed for " + path.string());
}

namespace {

std::string slurp(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

} // namespace

ExperimentReport read_report_json(const std::filesystem::path& path) { return report_from_json(slurp(path)); }

CsvSummary read_report_csv(const std::filesystem::path& path) { return csv_summary_from_text(slurp(path)); }

} // namespace mdbdp
