#include "gfmid/config.hpp"

#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>

namespace gfmid {

namespace {

/// Walks one JSON object, remembering which keys were read so that the rest
/// can be reported as unknown.
class Section {
public:
    Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected an object");
    }

    [[nodiscard]] bool has(const std::string& key) const { return j_.contains(key); }

    [[nodiscard]] const nlohmann::json* find(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void get(const std::string& key, double& out) {
        if (const auto* v = find(key)) {
            if (!v->is_number()) fail(at(key), "expected a number");
            out = v->get<double>();
        }
    }

    void get(const std::string& key, int& out) {
        if (const auto* v = find(key)) {
            if (!v->is_number_integer()) fail(at(key), "expected an integer");
            const auto x = v->get<std::int64_t>();
            if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
                fail(at(key), "integer out of range");
            }
            out = static_cast<int>(x);
        }
    }

    void get(const std::string& key, std::uint64_t& out) {
        if (const auto* v = find(key)) {
            if (!v->is_number_unsigned()) fail(at(key), "expected a non-negative integer");
            out = v->get<std::uint64_t>();
        }
    }

    void get(const std::string& key, bool& out) {
        if (const auto* v = find(key)) {
            if (!v->is_boolean()) fail(at(key), "expected true or false");
            out = v->get<bool>();
        }
    }

    void get(const std::string& key, std::string& out) {
        if (const auto* v = find(key)) {
            if (!v->is_string()) fail(at(key), "expected a string");
            out = v->get<std::string>();
        }
    }

    [[nodiscard]] std::optional<Section> child(const std::string& key) {
        const auto* v = find(key);
        if (!v) return std::nullopt;
        return Section(*v, at(key));
    }

    /// Rejects keys that were never asked for.
    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) fail(at(key), "unknown key");
        }
    }

    [[nodiscard]] std::string at(const std::string& key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    [[nodiscard]] const std::string& path() const noexcept { return path_; }

    [[noreturn]] static void fail(const std::string& path, const std::string& what) {
        throw ConfigError("config: " + path + ": " + what);
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_network(Section s, NetworkParams& n) {
    s.get("R", n.R);
    s.get("X", n.X);
    s.get("r_g", n.r_g);
    s.get("l_g", n.l_g);
    s.get("r_f", n.r_f);
    s.get("l_f", n.l_f);
    s.get("c_f", n.c_f);
    s.get("v2_mag", n.v2_mag);
    s.get("theta2", n.theta2);
    s.get("omega_b", n.omega_b);
    s.get("omega_s", n.omega_s);
    s.finish();
}

void read_control(Section s, ControlParams& c) {
    s.get("omega_ref", c.omega_ref);
    s.get("k_p", c.k_p);
    s.get("k_q", c.k_q);
    s.get("omega_z", c.omega_z);
    s.get("omega_f", c.omega_f);
    s.get("k_p_v", c.k_p_v);
    s.get("k_i_v", c.k_i_v);
    s.get("k_ffi", c.k_ffi);
    s.get("k_p_c", c.k_p_c);
    s.get("k_i_c", c.k_i_c);
    s.get("k_ffv", c.k_ffv);
    s.get("k_ad", c.k_ad);
    s.get("omega_ad", c.omega_ad);
    s.get("r_v", c.r_v);
    s.get("l_v", c.l_v);
    s.get("v_ref_nominal", c.v_ref_nominal);
    s.get("p_ref_nominal", c.p_ref_nominal);
    s.get("q_ref_nominal", c.q_ref_nominal);
    s.finish();
}

void read_simulation(Section s, SimConfig& sim) {
    s.get("dt", sim.dt);
    s.get("t_end", sim.t_end);
    s.get("sample_stride", sim.sample_stride);
    s.get("noise_std", sim.noise_std);
    std::string source = sim.derivative_source == DerivativeSource::exact ? "exact"
                                                                          : "finite_difference";
    s.get("derivative_source", source);
    if (source == "exact") {
        sim.derivative_source = DerivativeSource::exact;
    } else if (source == "finite_difference") {
        sim.derivative_source = DerivativeSource::finite_difference;
    } else {
        Section::fail(s.at("derivative_source"), "expected exact or finite_difference");
    }
    if (const auto* events = s.find("events")) {
        if (!events->is_array()) Section::fail(s.at("events"), "expected an array");
        sim.schedule.clear();
        for (std::size_t k = 0; k < events->size(); ++k) {
            Section e((*events)[k], s.at("events") + "[" + std::to_string(k) + "]");
            DisturbanceEvent ev;
            std::string target;
            if (!e.has("time") || !e.has("target") || !e.has("value")) {
                Section::fail(e.path(), "every event needs time, target and value");
            }
            e.get("time", ev.time);
            e.get("target", target);
            e.get("value", ev.value);
            try {
                ev.target = parse_reference_target(target);
            } catch (const std::invalid_argument& err) {
                Section::fail(e.at("target"), err.what());
            }
            e.finish();
            sim.schedule.push_back(ev);
        }
    }
    s.finish();
}

void read_sindy(Section s, sindy::LibrarySpec& lib, sindy::SolverConfig& solver) {
    if (auto l = s.child("library")) {
        l->get("poly_degree", lib.poly_degree);
        l->get("include_trig", lib.include_trig);
        l->get("include_bias", lib.include_bias);
        std::string norm = lib.normalization == sindy::Normalization::none ? "none" : "max_abs";
        l->get("normalization", norm);
        if (norm == "none") {
            lib.normalization = sindy::Normalization::none;
        } else if (norm == "max_abs") {
            lib.normalization = sindy::Normalization::max_abs;
        } else {
            Section::fail(l->at("normalization"), "expected none or max_abs");
        }
        l->get("prune_dependent", lib.prune_dependent);
        l->get("dependence_tolerance", lib.dependence_tolerance);
        l->finish();
    }
    if (auto v = s.child("solver")) {
        std::string name = "stlsq";
        v->get("name", name);
        if (name == "stlsq") {
            sindy::StlsqConfig c;
            v->get("threshold", c.threshold);
            v->get("ridge", c.ridge);
            v->get("max_iter", c.max_iter);
            solver = c;
        } else if (name == "lasso") {
            sindy::LassoConfig c;
            v->get("lambda", c.lambda);
            if (const auto* step = v->find("step"); step && !step->is_null()) {
                if (!step->is_number()) Section::fail(v->at("step"), "expected a number or null");
                c.step = step->get<double>();
            }
            v->get("max_iter", c.max_iter);
            v->get("tol", c.tol);
            solver = c;
        } else {
            Section::fail(v->at("name"), "expected stlsq or lasso");
        }
        v->finish();
    }
    s.finish();
}

void read_dsr(Section s, dsr::DsrConfig& d) {
    s.get("batch_size", d.batch_size);
    s.get("epochs", d.epochs);
    s.get("epsilon", d.epsilon);
    s.get("learning_rate", d.learning_rate);
    s.get("entropy_weight", d.entropy_weight);
    s.get("hidden", d.hidden);
    s.get("max_length", d.max_length);
    s.get("max_constants", d.max_constants);
    if (auto c = s.child("const_opt")) {
        c->get("restarts", d.const_opt.restarts);
        c->get("max_evals", d.const_opt.max_evals);
        c->finish();
    }
    s.get("train_rows", d.train_rows);
    s.get("stop_reward", d.stop_reward);
    if (const auto* ops = s.find("operators")) {
        if (!ops->is_array()) Section::fail(s.at("operators"), "expected an array of strings");
        d.operators.clear();
        for (std::size_t k = 0; k < ops->size(); ++k) {
            const auto where = s.at("operators") + "[" + std::to_string(k) + "]";
            if (!(*ops)[k].is_string()) Section::fail(where, "expected a string");
            try {
                d.operators.push_back(dsr::parse_op((*ops)[k].get<std::string>()));
            } catch (const std::invalid_argument& err) {
                Section::fail(where, err.what());
            }
        }
    }
    s.finish();
}

}  // namespace

void RunConfig::validate() const {
    try {
        plant.validate();
        simulation.validate();
        library.validate();
        std::visit([](const auto& c) { c.validate(); }, solver);
        dsr.validate();
        std::set<dsr::Op> ops(dsr.operators.begin(), dsr.operators.end());
        if (ops.size() != dsr.operators.size()) {
            throw std::invalid_argument("dsr.operators lists an operator twice");
        }
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (output_dir.empty()) throw ConfigError("config: output_dir: must not be empty");
}

RunConfig parse_config(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text.begin(), text.end(), nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config: not valid JSON: ") + e.what());
    }
    RunConfig cfg;
    Section root(j, "");
    root.get("seed", cfg.seed);
    std::string out = cfg.output_dir.string();
    root.get("output_dir", out);
    cfg.output_dir = out;
    if (auto p = root.child("plant")) {
        if (auto n = p->child("network")) read_network(*n, cfg.plant.net);
        if (auto c = p->child("control")) read_control(*c, cfg.plant.ctl);
        p->finish();
    }
    if (auto s = root.child("simulation")) read_simulation(*s, cfg.simulation);
    if (auto s = root.child("sindy")) read_sindy(*s, cfg.library, cfg.solver);
    if (auto s = root.child("dsr")) read_dsr(*s, cfg.dsr);
    root.finish();
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    try {
        return parse_config(text.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

nlohmann::json to_json(const RunConfig& cfg) {
    const auto& n = cfg.plant.net;
    const auto& c = cfg.plant.ctl;
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : cfg.simulation.schedule) {
        events.push_back({{"time", e.time}, {"target", to_string(e.target)}, {"value", e.value}});
    }
    auto dsr_json = dsr::to_json(cfg.dsr);
    dsr_json.erase("seed");   // derived from the global seed
    return {
        {"seed", cfg.seed},
        {"output_dir", cfg.output_dir.string()},
        {"plant",
         {{"network",
           {{"R", n.R}, {"X", n.X}, {"r_g", n.r_g}, {"l_g", n.l_g}, {"r_f", n.r_f},
            {"l_f", n.l_f}, {"c_f", n.c_f}, {"v2_mag", n.v2_mag}, {"theta2", n.theta2},
            {"omega_b", n.omega_b}, {"omega_s", n.omega_s}}},
          {"control",
           {{"omega_ref", c.omega_ref}, {"k_p", c.k_p}, {"k_q", c.k_q}, {"omega_z", c.omega_z},
            {"omega_f", c.omega_f}, {"k_p_v", c.k_p_v}, {"k_i_v", c.k_i_v}, {"k_ffi", c.k_ffi},
            {"k_p_c", c.k_p_c}, {"k_i_c", c.k_i_c}, {"k_ffv", c.k_ffv}, {"k_ad", c.k_ad},
            {"omega_ad", c.omega_ad}, {"r_v", c.r_v}, {"l_v", c.l_v},
            {"v_ref_nominal", c.v_ref_nominal}, {"p_ref_nominal", c.p_ref_nominal},
            {"q_ref_nominal", c.q_ref_nominal}}}}},
        {"simulation",
         {{"dt", cfg.simulation.dt},
          {"t_end", cfg.simulation.t_end},
          {"sample_stride", cfg.simulation.sample_stride},
          {"noise_std", cfg.simulation.noise_std},
          {"derivative_source", cfg.simulation.derivative_source == DerivativeSource::exact
                                    ? "exact"
                                    : "finite_difference"},
          {"events", events}}},
        {"sindy", {{"library", sindy::to_json(cfg.library)}, {"solver", sindy::to_json(cfg.solver)}}},
        {"dsr", dsr_json}};
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream) noexcept {
    return splitmix64(parent + stream * 0x9E3779B97F4A7C15ULL);
}

std::uint64_t simulation_seed(const RunConfig& cfg) noexcept {
    return derive_seed(cfg.seed, kSimulationStream);
}

std::uint64_t dsr_seed(const RunConfig& cfg, std::size_t target) noexcept {
    return derive_seed(derive_seed(cfg.seed, kDsrStream), target + 1);
}

}  // namespace gfmid
