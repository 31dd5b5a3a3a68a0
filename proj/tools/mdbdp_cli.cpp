#include "mdbdp/problems.hpp"
#include "mdbdp/report.hpp"
#include "mdbdp/runtime.hpp"
#include "mdbdp/schemes.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

/// Parses "20,20" into layer widths. An empty string gives the d+10,d+10
/// default.
std::vector<int> parse_hidden(const std::string& spec, int d) {
    if (spec.empty()) return {d + 10, d + 10};
    std::vector<int> sizes;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const int v = std::stoi(item);
        if (v < 1) throw std::invalid_argument("--hidden: layer widths must be >= 1");
        sizes.push_back(v);
    }
    if (sizes.empty()) throw std::invalid_argument("--hidden: no layer widths given");
    return sizes;
}

/// Throttles progress lines on stderr to one per interval.
class ProgressLog {
public:
    explicit ProgressLog(double interval_seconds) : interval_(interval_seconds) {}

    bool due(bool force = false) {
        const auto now = std::chrono::steady_clock::now();
        if (!force && std::chrono::duration<double>(now - last_).count() < interval_) return false;
        last_ = now;
        return true;
    }

private:
    double interval_;
    std::chrono::steady_clock::time_point last_{};
};

} // namespace

int main(int argc, char** argv) {
    mdbdp::tune_allocator();
    CLI::App app{"Neural-network BSDE solvers for semilinear parabolic PDEs"};
    app.require_subcommand(1);

    auto* solve = app.add_subcommand("solve", "train one scheme on one problem over several seeds");
    std::string scheme_name = "mdbdp", problem_name = "bounded", hidden_spec, out_path, format_name = "json",
                checkpoint_dir, ds_terminal = "fit";
    int dim = 1, steps = 120, iters = 5000, final_iters = 20000, batch = 1000, runs = 10;
    std::uint64_t seed = 1;
    double lr_init = 1e-2, lr_final = 1e-4, log_interval = 2.0;
    bool quiet = false;

    solve->add_option("--scheme", scheme_name, "mdbdp | dbdp1 | dbdp2 | ds | dbsde")
        ->check(CLI::IsMember({"mdbdp", "dbdp1", "dbdp2", "ds", "dbsde"}))
        ->capture_default_str();
    solve->add_option("--problem", problem_name, "bounded | unbounded | heat")
        ->check(CLI::IsMember({"bounded", "unbounded", "heat"}))
        ->capture_default_str();
    solve->add_option("--dim", dim, "state dimension d")->check(CLI::PositiveNumber)->capture_default_str();
    solve->add_option("--steps", steps, "number of time steps N")->check(CLI::PositiveNumber)->capture_default_str();
    solve->add_option("--iters", iters, "SGD iterations per time step")->check(CLI::PositiveNumber)->capture_default_str();
    solve->add_option("--final-iters", final_iters, "iterations for the first (terminal) step")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    solve->add_option("--batch", batch, "mini-batch size K")->check(CLI::PositiveNumber)->capture_default_str();
    solve->add_option("--runs", runs, "independent runs")->check(CLI::PositiveNumber)->capture_default_str();
    solve->add_option("--seed", seed, "base seed; run r uses seed + r")->capture_default_str();
    solve->add_option("--lr-init", lr_init, "initial learning rate")->check(CLI::PositiveNumber)->capture_default_str();
    solve->add_option("--lr-final", lr_final, "final learning rate")->check(CLI::PositiveNumber)->capture_default_str();
    solve->add_option("--hidden", hidden_spec, "comma-separated hidden widths (default d+10,d+10)");
    solve->add_option("--ds-terminal", ds_terminal, "deep splitting terminal: fit | exact")
        ->check(CLI::IsMember({"fit", "exact"}))
        ->capture_default_str();
    solve->add_option("--out", out_path, "report file (stdout when omitted)");
    solve->add_option("--format", format_name, "json | csv")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();
    solve->add_option("--checkpoint-dir", checkpoint_dir, "persist each run's networks under this directory");
    solve->add_option("--log-interval", log_interval, "seconds between progress lines")->capture_default_str();
    solve->add_flag("--quiet", quiet, "no progress output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // usage errors share the invalid-configuration exit code; --help exits 0
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        const auto scheme = mdbdp::parse_scheme(scheme_name);
        const auto problem = mdbdp::make_problem<double>(problem_name, dim);
        const auto grid = mdbdp::TimeGrid<double>::uniform(problem.model.horizon, steps);
        const auto format = mdbdp::parse_report_format(format_name);

        mdbdp::TrainConfig train;
        train.iterations_per_step = iters;
        train.final_step_iterations = final_iters;
        train.batch_size = batch;
        train.lr_initial = lr_init;
        train.lr_final = lr_final;
        train.ds_terminal = ds_terminal == "fit" ? mdbdp::TerminalMode::fit : mdbdp::TerminalMode::exact;
        train.validate();

        mdbdp::ExperimentOptions options;
        options.layout = {parse_hidden(hidden_spec, dim), mdbdp::Activation::tanh()};
        options.checkpoint_dir = checkpoint_dir;

        ProgressLog log(log_interval);
        int current_run = 0;
        if (!quiet) {
            options.hooks.on_step_end = [&](int step, double loss, double y0) {
                if (log.due(step == 0))
                    std::fprintf(stderr, "[run %d] step %4d  loss %.6e  U(x0) %.6f\n", current_run, step, loss, y0);
            };
            options.hooks.on_iteration = [&](int step, long it, long total, double loss) {
                if (log.due())
                    std::fprintf(stderr, "[run %d] step %4d  iter %ld/%ld  loss %.6e\n", current_run, step, it, total,
                                 loss);
            };
            options.on_run_end = [&](int run, std::uint64_t s, const std::optional<double>& est) {
                if (est)
                    std::fprintf(stderr, "[run %d] seed %llu  Y0 %.6f\n", run, static_cast<unsigned long long>(s), *est);
                else
                    std::fprintf(stderr, "[run %d] seed %llu  NC\n", run, static_cast<unsigned long long>(s));
                current_run = run + 1;
            };
        }

        const auto report = mdbdp::run_experiment(scheme, problem, grid, train, runs, seed, options);
        if (out_path.empty()) {
            std::cout << (format == mdbdp::ReportFormat::json ? mdbdp::report_to_json(report) + "\n"
                                                              : mdbdp::report_to_csv(report));
        } else {
            mdbdp::emit_report(report, out_path, format);
        }
        if (report.all_diverged()) {
            std::fprintf(stderr, "no run converged (NC)\n");
            return 1;
        }
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "invalid configuration: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
