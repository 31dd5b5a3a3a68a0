#pragma once

#include "mdbdp/neuralnet.hpp"
#include "mdbdp/optimizer.hpp"
#include "mdbdp/schemes.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

namespace mdbdp {

/// Plain-text network checkpoint: an architecture header followed by every
/// layer's weight rows and bias, printed with 17 significant digits so that
/// save/load round-trips exactly.
void save_network(const NetworkParams<double>& params, std::ostream& os);
NetworkParams<double> load_network(std::istream& is);

void save_network(const NetworkParams<double>& params, const std::filesystem::path& path);
NetworkParams<double> load_network(const std::filesystem::path& path);

/// Metadata written next to a persisted solution.
struct SolutionManifest {
    std::string problem;
    std::uint64_t seed = 0;
    TrainConfig config;
    HiddenLayout layout;
};

/// Writes manifest.json plus one checkpoint per stored network
/// (u_0003.txt, z_0003.txt, ...) into `dir`.
void save_solution(const SchemeSolution<double>& sol, const SolutionManifest& manifest,
                   const std::filesystem::path& dir);

/// Reads a directory written by save_solution. The model closures cannot be
/// serialised, so the caller supplies the model the solution was trained on.
SchemeSolution<double> load_solution(const std::filesystem::path& dir, const ModelSpec<double>& model,
                                     SolutionManifest* manifest = nullptr);

} // namespace mdbdp
