#pragma once

// Run configuration: one JSON document (comments allowed) covering the plant,
// the simulation, both identification methods and the global seed.

#include "gfmid/dsr.hpp"
#include "gfmid/plant.hpp"
#include "gfmid/simulator.hpp"
#include "gfmid/sindy.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace gfmid {

/// Bad config text or value; the message starts with the offending key path.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    PlantParams plant;
    SimConfig simulation;
    sindy::LibrarySpec library;
    sindy::SolverConfig solver = sindy::StlsqConfig{};
    dsr::DsrConfig dsr;
    std::filesystem::path output_dir = "out";
    /// Every stochastic stage draws its seed from this one.
    std::uint64_t seed = 0;

    /// Whole-config check, run before any compute. Throws ConfigError.
    void validate() const;
};

/// Missing keys keep their defaults; unknown keys are rejected.
[[nodiscard]] RunConfig parse_config(std::string_view text);
[[nodiscard]] RunConfig load_config(const std::filesystem::path& path);

/// Fully resolved form; parse_config(dump) gives back the same config.
[[nodiscard]] nlohmann::json to_json(const RunConfig& cfg);

/// splitmix64 finalizer.
[[nodiscard]] std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// Seed of sub-stream `stream` under `parent`:
/// splitmix64(parent + stream * 0x9E3779B97F4A7C15).
[[nodiscard]] std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream) noexcept;

inline constexpr std::uint64_t kSimulationStream = 1;
inline constexpr std::uint64_t kDsrStream = 2;

[[nodiscard]] std::uint64_t simulation_seed(const RunConfig& cfg) noexcept;
/// Seed of the DSR run on measured state `target` (0..8).
[[nodiscard]] std::uint64_t dsr_seed(const RunConfig& cfg, std::size_t target) noexcept;

}  // namespace gfmid
