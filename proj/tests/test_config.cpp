#include <doctest.h>

#include "gfmid/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

using namespace gfmid;

namespace {

std::string error_of(const std::string& text) {
    try {
        (void)parse_config(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("shipped default config equals the built-in defaults") {
    const auto cfg = load_config(std::string(GFMID_SOURCE_DIR) + "/config/default.jsonc");
    auto expected = to_json(RunConfig{});
    CHECK(to_json(cfg) == expected);
    // ... and documents every key.
    std::ifstream in(std::string(GFMID_SOURCE_DIR) + "/config/default.jsonc");
    std::stringstream text;
    text << in.rdbuf();
    auto parsed = nlohmann::json::parse(text.str(), nullptr, true, true);
    CHECK(parsed == expected);
}

TEST_CASE("default schedule") {
    const RunConfig cfg;
    REQUIRE(cfg.simulation.schedule.size() == 3);
    CHECK(cfg.simulation.schedule[0].time == 0.5);
    CHECK(cfg.simulation.schedule[0].target == ReferenceTarget::p_ref);
    CHECK(cfg.simulation.schedule[0].value == 0.7);
    CHECK(cfg.simulation.schedule[1].time == 1.0);
    CHECK(cfg.simulation.schedule[1].target == ReferenceTarget::q_ref);
    CHECK(cfg.simulation.schedule[2].time == 1.5);
    CHECK(cfg.simulation.schedule[2].target == ReferenceTarget::v_ref);
}

TEST_CASE("overrides and round-trip") {
    const auto cfg = parse_config(R"({
        // comments are fine
        "seed": 42,
        "plant": {"network": {"X": 0.003}, "control": {"k_p": 0.03}},
        "simulation": {"t_end": 1.0, "noise_std": 0.01,
                       "events": [{"time": 0.25, "target": "q_ref", "value": 0.1}]},
        "sindy": {"solver": {"name": "lasso", "lambda": 0.01}},
        "dsr": {"epochs": 0, "operators": ["+", "*"], "const_opt": {"max_evals": 10}}
    })");
    CHECK(cfg.seed == 42);
    CHECK(cfg.plant.net.X == 0.003);
    CHECK(cfg.plant.net.l_g == NetworkParams{}.l_g);
    CHECK(cfg.plant.ctl.k_p == 0.03);
    CHECK(cfg.simulation.schedule.size() == 1);
    CHECK(cfg.simulation.schedule[0].target == ReferenceTarget::q_ref);
    REQUIRE(std::holds_alternative<sindy::LassoConfig>(cfg.solver));
    CHECK(std::get<sindy::LassoConfig>(cfg.solver).lambda == 0.01);
    CHECK_FALSE(std::get<sindy::LassoConfig>(cfg.solver).step.has_value());
    CHECK(cfg.dsr.epochs == 0);
    CHECK(cfg.dsr.operators == std::vector<dsr::Op>{dsr::Op::add, dsr::Op::mul});
    CHECK(cfg.dsr.const_opt.max_evals == 10);
    CHECK(cfg.dsr.const_opt.restarts == 3);

    const auto again = parse_config(to_json(cfg).dump());
    CHECK(to_json(again) == to_json(cfg));
}

TEST_CASE("errors name the key path") {
    CHECK(error_of(R"({"plant": {"network": {"Xx": 1}}})") ==
          "config: plant.network.Xx: unknown key");
    CHECK(error_of(R"({"bogus": 1})") == "config: bogus: unknown key");
    CHECK(error_of(R"({"dsr": {"const_opt": {"tries": 1}}})") ==
          "config: dsr.const_opt.tries: unknown key");
    CHECK(error_of(R"({"simulation": {"events": [{"time": 0.1, "target": "p_ref", "value": 1},
                                                  {"time": 0.2, "target": "p_ref", "value": 1, "x": 0}]}})") ==
          "config: simulation.events[1].x: unknown key");
    CHECK(error_of(R"({"dsr": {"epochs": "many"}})") == "config: dsr.epochs: expected an integer");
    CHECK(error_of(R"({"dsr": {"epochs": 2.5}})") == "config: dsr.epochs: expected an integer");
    CHECK(error_of(R"({"seed": -1})") == "config: seed: expected a non-negative integer");
    CHECK(error_of(R"({"plant": {"network": {"X": "big"}}})") ==
          "config: plant.network.X: expected a number");
    CHECK(error_of(R"({"plant": 3})") == "config: plant: expected an object");
    CHECK(error_of(R"({"dsr": {"operators": ["+", "exp"]}})").rfind("config: dsr.operators[1]: ", 0) ==
          0);
    CHECK(error_of(R"({"simulation": {"events": [{"time": 0.1, "target": "w_ref", "value": 1}]}})")
              .rfind("config: simulation.events[0].target: ", 0) == 0);
    CHECK(error_of(R"({"simulation": {"events": [{"time": 0.1, "value": 1}]}})") ==
          "config: simulation.events[0]: every event needs time, target and value");
    CHECK(error_of(R"({"sindy": {"solver": {"name": "sr3"}}})") ==
          "config: sindy.solver.name: expected stlsq or lasso");
    // Keys of the other solver are unknown here.
    CHECK(error_of(R"({"sindy": {"solver": {"name": "stlsq", "lambda": 1}}})") ==
          "config: sindy.solver.lambda: unknown key");
    CHECK(error_of("{").rfind("config: not valid JSON", 0) == 0);
}

TEST_CASE("whole-config validation") {
    // Last default event at 1.5 s.
    CHECK(error_of(R"({"simulation": {"t_end": 1.2}})") ==
          "config: simulation.events[2].time exceeds simulation.t_end");
    CHECK(error_of(R"({"dsr": {"epsilon": 0}})").find("dsr.epsilon") != std::string::npos);
    CHECK(error_of(R"({"dsr": {"operators": ["+", "+"]}})").find("twice") != std::string::npos);
    CHECK(error_of(R"({"plant": {"network": {"l_g": 0}}})").find("l_g") != std::string::npos);
    CHECK(error_of(R"({"sindy": {"solver": {"threshold": -1}}})").find("threshold") !=
          std::string::npos);
    CHECK(error_of(R"({"output_dir": ""})") == "config: output_dir: must not be empty");
    CHECK_THROWS_AS((void)load_config("/nonexistent/run.jsonc"), ConfigError);
}

TEST_CASE("seed derivation") {
    // Reference splitmix64 generator started from state 0.
    CHECK(splitmix64(0) == 0xE220A8397B1DCDAFULL);
    CHECK(splitmix64(0x9E3779B97F4A7C15ULL) == 0x6E789E6AA1B965F4ULL);
    CHECK(derive_seed(0, 1) == 0x6E789E6AA1B965F4ULL);

    RunConfig cfg;
    std::set<std::uint64_t> seeds{simulation_seed(cfg)};
    for (std::size_t k = 0; k < kMeasuredCount; ++k) seeds.insert(dsr_seed(cfg, k));
    CHECK(seeds.size() == 10);
    const auto before = dsr_seed(cfg, 3);
    CHECK(dsr_seed(cfg, 3) == before);
    cfg.seed = 1;
    CHECK(dsr_seed(cfg, 3) != before);
}
