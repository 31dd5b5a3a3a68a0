#include "mdbdp/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace mdbdp {

namespace {

constexpr const char* kMagic = "mdbdp-network";
constexpr int kFormatVersion = 1;

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void expect_token(std::istream& is, const std::string& expected) {
    std::string tok;
    if (!(is >> tok) || tok != expected)
        throw std::runtime_error("load_network: expected '" + expected + "', found '" + tok + "'");
}

template <typename T>
T read_value(std::istream& is, const char* what) {
    T v{};
    if (!(is >> v)) throw std::runtime_error(std::string("load_network: could not read ") + what);
    return v;
}

double read_double(std::istream& is) {
    std::string tok;
    if (!(is >> tok)) throw std::runtime_error("load_network: truncated parameter data");
    try {
        std::size_t used = 0;
        const double v = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("load_network: bad number '" + tok + "'");
    }
}

std::string activation_name(const Activation& a) {
    return a.kind == ActivationKind::tanh ? "tanh" : "groupsort";
}

} // namespace

void save_network(const NetworkParams<double>& params, std::ostream& os) {
    params.check_shapes();
    const auto& arch = params.arch;
    os << kMagic << ' ' << kFormatVersion << '\n';
    os << "input_dim " << arch.input_dim << '\n';
    os << "output_dim " << arch.output_dim << '\n';
    os << "hidden " << arch.hidden_sizes.size();
    for (int h : arch.hidden_sizes) os << ' ' << h;
    os << '\n';
    os << "activation " << activation_name(arch.activation) << ' ' << arch.activation.group_size << '\n';
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& L = params.layers[l];
        os << "layer " << l << ' ' << L.weight.rows() << ' ' << L.weight.cols() << '\n';
        os << "weight\n";
        for (Eigen::Index r = 0; r < L.weight.rows(); ++r) {
            for (Eigen::Index c = 0; c < L.weight.cols(); ++c) os << (c ? " " : "") << format_double(L.weight(r, c));
            os << '\n';
        }
        os << "bias\n";
        for (Eigen::Index r = 0; r < L.bias.size(); ++r) os << (r ? " " : "") << format_double(L.bias(r));
        os << '\n';
    }
    os << "end\n";
}

NetworkParams<double> load_network(std::istream& is) {
    expect_token(is, kMagic);
    const int version = read_value<int>(is, "format version");
    if (version != kFormatVersion)
        throw std::runtime_error("load_network: unsupported format version " + std::to_string(version));

    NetworkArchitecture arch;
    expect_token(is, "input_dim");
    arch.input_dim = read_value<int>(is, "input_dim");
    expect_token(is, "output_dim");
    arch.output_dim = read_value<int>(is, "output_dim");
    expect_token(is, "hidden");
    const auto n_hidden = read_value<std::size_t>(is, "hidden layer count");
    arch.hidden_sizes.resize(n_hidden);
    for (auto& h : arch.hidden_sizes) h = read_value<int>(is, "hidden size");
    expect_token(is, "activation");
    const auto act = read_value<std::string>(is, "activation");
    const int group = read_value<int>(is, "group size");
    if (act == "tanh")
        arch.activation = Activation::tanh();
    else if (act == "groupsort")
        arch.activation = Activation::groupsort(group);
    else
        throw std::runtime_error("load_network: unknown activation '" + act + "'");
    arch.validate();

    NetworkParams<double> p;
    p.arch = arch;
    for (int l = 0; l < arch.n_layers(); ++l) {
        expect_token(is, "layer");
        const int idx = read_value<int>(is, "layer index");
        const int rows = read_value<int>(is, "rows");
        const int cols = read_value<int>(is, "cols");
        if (idx != l || rows != arch.fan_out(l) || cols != arch.fan_in(l))
            throw std::runtime_error("load_network: layer " + std::to_string(l) + " header does not match architecture");
        Layer<double> L{Matrix(rows, cols), Vector(rows)};
        expect_token(is, "weight");
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) L.weight(r, c) = read_double(is);
        expect_token(is, "bias");
        for (int r = 0; r < rows; ++r) L.bias(r) = read_double(is);
        p.layers.push_back(std::move(L));
    }
    expect_token(is, "end");
    return p;
}

void save_network(const NetworkParams<double>& params, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("save_network: cannot open " + path.string());
    save_network(params, os);
    if (!os) throw std::runtime_error("save_network: write failed for " + path.string());
}

NetworkParams<double> load_network(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_network: cannot open " + path.string());
    return load_network(is);
}

namespace {

std::string checkpoint_name(char role, std::size_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%c_%04zu.txt", role, step);
    return buf;
}

nlohmann::json layout_to_json(const HiddenLayout& layout) {
    return {{"hidden", layout.hidden_sizes},
            {"activation", activation_name(layout.activation)},
            {"group_size", layout.activation.group_size}};
}

HiddenLayout layout_from_json(const nlohmann::json& j) {
    HiddenLayout layout;
    layout.hidden_sizes = j.at("hidden").get<std::vector<int>>();
    const auto act = j.at("activation").get<std::string>();
    layout.activation = act == "tanh" ? Activation::tanh() : Activation::groupsort(j.at("group_size").get<int>());
    return layout;
}

} // namespace

void save_solution(const SchemeSolution<double>& sol, const SolutionManifest& manifest,
                   const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["scheme"] = to_string(sol.scheme);
    j["problem"] = manifest.problem;
    j["dim"] = sol.model.dim;
    j["grid"] = sol.grid.times();
    j["seed"] = manifest.seed;
    j["layout"] = layout_to_json(manifest.layout);
    j["config"] = {{"iterations_per_step", manifest.config.iterations_per_step},
                   {"final_step_iterations", manifest.config.final_step_iterations},
                   {"batch_size", manifest.config.batch_size},
                   {"lr_initial", manifest.config.lr_initial},
                   {"lr_final", manifest.config.lr_final},
                   {"ds_terminal", manifest.config.ds_terminal == TerminalMode::fit ? "fit" : "exact"}};
    auto write_list = [&](const auto& list, char role) {
        nlohmann::json files = nlohmann::json::array();
        for (std::size_t i = 0; i < list.size(); ++i) {
            if (!list[i]) {
                files.push_back(nullptr);
                continue;
            }
            const auto name = checkpoint_name(role, i);
            save_network(*list[i], dir / name);
            files.push_back(name);
        }
        return files;
    };
    j["u_nets"] = write_list(sol.u_nets, 'u');
    j["z_nets"] = write_list(sol.z_nets, 'z');

    std::ofstream os(dir / "manifest.json");
    if (!os) throw std::runtime_error("save_solution: cannot write manifest in " + dir.string());
    os << std::setw(2) << j << '\n';
}

SchemeSolution<double> load_solution(const std::filesystem::path& dir, const ModelSpec<double>& model,
                                     SolutionManifest* manifest) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw std::runtime_error("load_solution: no manifest.json in " + dir.string());
    const auto j = nlohmann::json::parse(is);
    if (j.at("dim").get<int>() != model.dim)
        throw std::invalid_argument("load_solution: model dimension does not match the stored solution");

    auto sol = make_empty_solution(parse_scheme(j.at("scheme").get<std::string>()), model,
                                   TimeGrid<double>(j.at("grid").get<std::vector<double>>()));
    auto read_list = [&](const nlohmann::json& files, auto& list) {
        if (files.size() != list.size())
            throw std::runtime_error("load_solution: network list length does not match the scheme convention");
        for (std::size_t i = 0; i < files.size(); ++i)
            if (!files[i].is_null()) list[i] = load_network(dir / files[i].get<std::string>());
    };
    read_list(j.at("u_nets"), sol.u_nets);
    read_list(j.at("z_nets"), sol.z_nets);

    if (manifest) {
        manifest->problem = j.at("problem").get<std::string>();
        manifest->seed = j.at("seed").get<std::uint64_t>();
        manifest->layout = layout_from_json(j.at("layout"));
        const auto& c = j.at("config");
        manifest->config.iterations_per_step = c.at("iterations_per_step").get<int>();
        manifest->config.final_step_iterations = c.at("final_step_iterations").get<int>();
        manifest->config.batch_size = c.at("batch_size").get<int>();
        manifest->config.lr_initial = c.at("lr_initial").get<double>();
        manifest->config.lr_final = c.at("lr_final").get<double>();
        manifest->config.ds_terminal = c.at("ds_terminal").get<std::string>() == "fit" ? TerminalMode::fit
                                                                                       : TerminalMode::exact;
        manifest->config.seed = manifest->seed;
    }
    return sol;
}

} // namespace mdbdp
