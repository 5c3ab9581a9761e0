// pallex: stage-oriented parallel execution for systemd devices, plus the
// boot simulation and energy tooling around it.

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "pallex/energy.hpp"
#include "pallex/graph.hpp"
#include "pallex/handoff.hpp"
#include "pallex/sim.hpp"
#include "pallex/unitgen.hpp"

namespace fs = std::filesystem;
using pallex::Error;
using pallex::micros_t;

namespace {

std::map<std::string, micros_t> load_ms_map(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw Error(std::string("cannot open ") + what + ": " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    nlohmann::json j = nlohmann::json::parse(buf.str(), nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw Error(std::string(what) + ": expected a JSON object of millisecond values");
    std::map<std::string, micros_t> out;
    for (const auto& [key, value] : j.items()) {
        if (!value.is_number()) throw Error(std::string(what) + ": non-numeric entry for " + key);
        out[key] = pallex::ms_to_us(value.get<double>());
    }
    return out;
}

pallex::sim::CoreCount parse_cores(const std::string& s) {
    if (s == "inf" || s == "unlimited") return pallex::sim::CoreCount::unlimited();
    try {
        std::size_t pos = 0;
        const int n = std::stoi(s, &pos);
        if (pos == s.size()) return pallex::sim::CoreCount::finite(n);
    } catch (const std::exception&) {
    }
    throw Error("cannot parse core count (expected a positive integer or \"inf\"): " + s);
}

std::vector<micros_t> parse_boundaries(const std::string& s) {
    std::vector<micros_t> out;
    std::istringstream in(s);
    std::string field;
    while (std::getline(in, field, ',')) {
        try {
            std::size_t pos = 0;
            out.push_back(std::stoll(field, &pos));
            if (pos != field.size()) throw std::invalid_argument(field);
        } catch (const std::exception&) {
            throw Error("cannot parse boundary timestamp: " + field);
        }
    }
    if (out.empty()) throw Error("no boundaries given");
    return out;
}

// Shared inputs of the simulate/blame/gantt subcommands.
struct SimArgs {
    std::string units_path;
    std::string manifest_path;
    std::string stage_profiles_path;
    std::string preset = "rpi3";
    std::string cores = "";
    double t_btl_ms = -1, t_knl_ms = -1, init_delay_ms = -1;
};

void add_sim_options(CLI::App* sub, SimArgs& args) {
    sub->add_option("--units", args.units_path, "unit profile JSON file");
    sub->add_option("--manifest", args.manifest_path, "application manifest JSON file");
    sub->add_option("--stage-profiles", args.stage_profiles_path,
                    "stage duration/demand JSON file (required with --manifest)");
    sub->add_option("--preset", args.preset, "boot phase preset: rpi3 or rpizw")
        ->check(CLI::IsMember({"rpi3", "rpizw"}));
    sub->add_option("--cores", args.cores, "core count, or \"inf\" (preset default otherwise)");
    sub->add_option("--t-btl-ms", args.t_btl_ms, "bootloader phase duration, ms");
    sub->add_option("--t-knl-ms", args.t_knl_ms, "kernel phase duration, ms");
    sub->add_option("--init-delay-ms", args.init_delay_ms,
                    "delay before stages may start, ms");
}

pallex::sim::Timeline run_simulation(const SimArgs& args) {
    using namespace pallex::sim;
    std::vector<UnitProfile> units;
    if (!args.units_path.empty()) units = load_unit_profiles(args.units_path);

    pallex::graph::AppManifest manifest;
    std::map<std::string, StageProfile> stage_profiles;
    if (!args.manifest_path.empty()) {
        manifest = pallex::graph::load_manifest(args.manifest_path);
        if (args.stage_profiles_path.empty())
            throw Error("--stage-profiles is required when a manifest is simulated");
        stage_profiles = load_stage_profiles(args.stage_profiles_path);
    }

    BootPhases phases = args.preset == "rpizw" ? rpizw_phases() : rpi3_phases();
    if (args.t_btl_ms >= 0) phases.t_btl = pallex::ms_to_us(args.t_btl_ms);
    if (args.t_knl_ms >= 0) phases.t_knl = pallex::ms_to_us(args.t_knl_ms);
    if (args.init_delay_ms >= 0) phases.systemd_init_delay = pallex::ms_to_us(args.init_delay_ms);

    CoreCount cores = args.preset == "rpizw" ? CoreCount::finite(1) : CoreCount::finite(4);
    if (!args.cores.empty()) cores = parse_cores(args.cores);

    return simulate_boot(units, manifest, stage_profiles, phases, cores);
}

void print_blame(const SimArgs& args) {
    std::vector<pallex::sim::UnitProfile> units;
    if (!args.units_path.empty()) units = pallex::sim::load_unit_profiles(args.units_path);
    const auto timeline = run_simulation(args);
    const auto blame = pallex::sim::blame_report(timeline, units);
    std::cout << "unit,blame_ms\n";
    for (const auto& [unit, us] : blame)
        std::cout << unit << ',' << pallex::format_ms(us) << '\n';
}

int run_wrapped_command(const std::vector<std::string>& command,
                        const std::vector<std::pair<std::string, std::string>>& extra_env,
                        std::vector<std::uint8_t>& captured_stdout) {
    int pipe_fds[2];
    if (::pipe(pipe_fds) != 0) throw Error(std::string("pipe: ") + std::strerror(errno));

    const pid_t pid = ::fork();
    if (pid < 0) throw Error(std::string("fork: ") + std::strerror(errno));
    if (pid == 0) {
        ::close(pipe_fds[0]);
        ::dup2(pipe_fds[1], STDOUT_FILENO);
        ::close(pipe_fds[1]);
        for (const auto& [key, value] : extra_env) ::setenv(key.c_str(), value.c_str(), 1);
        std::vector<char*> argv;
        for (const auto& arg : command) argv.push_back(const_cast<char*>(arg.c_str()));
        argv.push_back(nullptr);
        ::execvp(argv[0], argv.data());
        std::fprintf(stderr, "pallex run-stage: cannot execute %s: %s\n", argv[0],
                     std::strerror(errno));
        ::_exit(127);
    }

    ::close(pipe_fds[1]);
    std::uint8_t chunk[64 * 1024];
    for (;;) {
        const ssize_t n = ::read(pipe_fds[0], chunk, sizeof(chunk));
        if (n > 0) {
            captured_stdout.insert(captured_stdout.end(), chunk, chunk + n);
            continue;
        }
        if (n == 0) break;
        if (errno == EINTR) continue;
        ::close(pipe_fds[0]);
        throw Error(std::string("read from stage command: ") + std::strerror(errno));
    }
    ::close(pipe_fds[0]);

    int status = 0;
    if (::waitpid(pid, &status, 0) < 0) throw Error(std::string("waitpid: ") + std::strerror(errno));
    if (WIFSIGNALED(status)) throw Error("stage command killed by signal");
    return WEXITSTATUS(status);
}

void run_stage(const std::string& app_id, const std::string& stage_id,
               const std::string& manifest_path, fs::path runtime_dir, int retry_ms,
               int timeout_ms, const std::vector<std::string>& command) {
    using namespace pallex::handoff;
    if (command.empty()) throw Error("run-stage: no command given (use -- <command...>)");

    const auto manifest = pallex::graph::load_manifest(manifest_path);
    if (manifest.app_id != app_id)
        throw Error("manifest is for app " + manifest.app_id + ", not " + app_id);
    const auto* stage = manifest.find_stage(stage_id);
    if (!stage) throw Error("manifest has no stage: " + stage_id);
    {
        const auto report = pallex::graph::validate_manifest(manifest);
        if (!report.ok()) {
            std::string msg = "manifest validation failed:";
            for (const auto& v : report.violations) msg += "\n  " + v.message;
            throw Error(msg);
        }
    }

    const std::chrono::milliseconds retry{retry_ms};
    const std::chrono::milliseconds timeout{timeout_ms};

    std::vector<Endpoint> predecessors;
    for (const auto& dep : stage->stage_deps)  // set iteration = collection order
        predecessors.push_back({app_id, dep, runtime_dir});
    const auto collected = collect_handoff(predecessors, retry, timeout);

    // Payloads land in a per-invocation scratch directory; the wrapped
    // command finds them through PALLEX_INPUTS.
    fs::path scratch;
    std::string inputs_env;
    if (!collected.payloads.empty()) {
        std::error_code ec;
        fs::create_directories(runtime_dir / app_id, ec);
        std::string tmpl = (runtime_dir / app_id / (stage_id + ".in.XXXXXX")).string();
        std::vector<char> buf(tmpl.begin(), tmpl.end());
        buf.push_back('\0');
        if (!::mkdtemp(buf.data()))
            throw Error(std::string("mkdtemp: ") + std::strerror(errno));
        scratch = buf.data();
        for (const auto& ep : predecessors) {
            const auto& payload = collected.payloads.at(ep.stage_id);
            const fs::path file = scratch / ep.stage_id;
            std::ofstream out(file, std::ios::binary);
            out.write(reinterpret_cast<const char*>(payload.data()),
                      static_cast<std::streamsize>(payload.size()));
            if (!out) throw Error("cannot write input file: " + file.string());
            if (!inputs_env.empty()) inputs_env += ':';
            inputs_env += file.string();
        }
    }

    std::vector<std::uint8_t> payload;
    const int exit_code = run_wrapped_command(
        command,
        {{"PALLEX_INPUTS", inputs_env}, {kRuntimeDirEnv, runtime_dir.string()}}, payload);

    if (!scratch.empty()) {
        std::error_code ec;
        fs::remove_all(scratch, ec);
    }
    if (exit_code != 0)
        throw Error("stage command exited with code " + std::to_string(exit_code) +
                    "; no handoff was served");

    const auto successors = manifest.successors_of(stage_id);
    if (!successors.empty()) {
        Endpoint self{app_id, stage_id, runtime_dir};
        serve_handoff(self, payload, static_cast<int>(successors.size()), timeout);
        std::cerr << "pallex run-stage: delivered " << payload.size() << " bytes to "
                  << successors.size() << " successor(s)\n";
    } else {
        // Terminal stage: the payload is the application's result.
        std::fwrite(payload.data(), 1, payload.size(), stdout);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stage-level parallel execution, boot simulation, and energy analysis "
                 "for duty-cycled systemd devices"};
    app.require_subcommand(1);

    // validate
    std::string validate_manifest_path;
    auto* validate = app.add_subcommand("validate", "check a manifest for well-formedness");
    validate->add_option("manifest", validate_manifest_path, "manifest JSON file")->required();
    validate->callback([&] {
        const auto m = pallex::graph::load_manifest(validate_manifest_path);
        const auto report = pallex::graph::validate_manifest(m);
        if (report.ok()) {
            std::cout << "ok\n";
        } else {
            for (const auto& v : report.violations) std::cout << v.message << '\n';
            std::exit(1);
        }
    });

    // graph
    std::string graph_manifest_path, graph_durations_path, graph_unit_ready_path;
    auto* graph_cmd =
        app.add_subcommand("graph", "topological order, or start/finish analysis with durations");
    graph_cmd->add_option("manifest", graph_manifest_path, "manifest JSON file")->required();
    graph_cmd->add_option("--stage-durations", graph_durations_path,
                          "JSON object of per-stage durations, ms");
    graph_cmd->add_option("--unit-ready", graph_unit_ready_path,
                          "JSON object of unit readiness times, ms");
    graph_cmd->callback([&] {
        const auto m = pallex::graph::load_manifest(graph_manifest_path);
        if (graph_durations_path.empty()) {
            for (const auto& id : pallex::graph::topo_order(m)) std::cout << id << '\n';
            return;
        }
        const auto durations = load_ms_map(graph_durations_path, "stage durations");
        std::map<std::string, micros_t> unit_ready;
        if (!graph_unit_ready_path.empty())
            unit_ready = load_ms_map(graph_unit_ready_path, "unit ready times");
        const auto windows = pallex::graph::earliest_start(m, unit_ready, durations);
        std::cout << "stage,start_ms,finish_ms\n";
        for (const auto& id : pallex::graph::topo_order(m)) {
            const auto& w = windows.at(id);
            std::cout << id << ',' << pallex::format_ms(w.start) << ','
                      << pallex::format_ms(w.finish) << '\n';
        }
    });

    // gen-units
    std::string gen_manifest_path, gen_out_dir;
    std::string gen_runtime_dir = pallex::handoff::kDefaultRuntimeDir;
    auto* gen_units = app.add_subcommand("gen-units", "emit systemd unit files for every stage");
    gen_units->add_option("--manifest", gen_manifest_path, "manifest JSON file")->required();
    gen_units->add_option("--out-dir", gen_out_dir, "directory to write unit files into")
        ->required();
    gen_units->add_option("--runtime-dir", gen_runtime_dir,
                          "runtime directory baked into the unit files");
    gen_units->callback([&] {
        const auto m = pallex::graph::load_manifest(gen_manifest_path);
        const auto files = pallex::unitgen::emit_stage_units(m, gen_runtime_dir);
        fs::create_directories(gen_out_dir);
        for (const auto& [name, text] : files) {
            std::ofstream out(fs::path(gen_out_dir) / name, std::ios::binary);
            out << text;
            if (!out) throw Error("cannot write unit file: " + name);
            std::cout << name << '\n';
        }
    });

    // gen-config
    std::string cfg_profile, cfg_catalog_path;
    auto* gen_config =
        app.add_subcommand("gen-config", "emit systemctl commands for a unit configuration");
    gen_config->add_option("--profile", cfg_profile,
                           "EU, EU+MMS, EU+NET1, EU+NET2, EU+NET3, ALLU, or ALLU-NET3")
        ->required();
    gen_config->add_option("--catalog", cfg_catalog_path, "unit catalog JSON file")->required();
    gen_config->callback([&] {
        const auto catalog = pallex::unitgen::load_catalog(cfg_catalog_path);
        const auto name = pallex::unitgen::profile_from_string(cfg_profile);
        const auto profile = pallex::unitgen::resolve_profile(name, catalog);
        for (const auto& line : pallex::unitgen::emit_config_script(profile, catalog))
            std::cout << line << '\n';
    });

    // shutdown-cmd
    std::string sdn_mode;
    auto* shutdown_cmd = app.add_subcommand("shutdown-cmd", "print the shutdown command for a mode");
    shutdown_cmd->add_option("--mode", sdn_mode, "graceful, forced, or forced-forced")->required();
    shutdown_cmd->callback([&] {
        const auto cmd =
            pallex::unitgen::shutdown_command(pallex::unitgen::shutdown_mode_from_string(sdn_mode));
        std::cout << cmd.command_line << '\n';
        for (const auto& note : cmd.notes) std::cerr << note << '\n';
    });

    // simulate / blame / gantt
    SimArgs sim_args;
    bool simulate_blame = false;
    auto* simulate = app.add_subcommand("simulate", "simulate a duty cycle and print the Gantt CSV");
    add_sim_options(simulate, sim_args);
    simulate->add_flag("--blame", simulate_blame, "print the blame CSV instead of the Gantt CSV");
    simulate->callback([&] {
        if (simulate_blame)
            print_blame(sim_args);
        else
            std::cout << pallex::sim::export_gantt(run_simulation(sim_args));
    });

    SimArgs blame_args;
    auto* blame = app.add_subcommand("blame", "simulate and print per-unit blame durations");
    add_sim_options(blame, blame_args);
    blame->callback([&] { print_blame(blame_args); });

    SimArgs gantt_args;
    auto* gantt = app.add_subcommand("gantt", "simulate and print the Gantt CSV");
    add_sim_options(gantt, gantt_args);
    gantt->callback([&] { std::cout << pallex::sim::export_gantt(run_simulation(gantt_args)); });

    // energy
    std::string energy_trace_path;
    bool energy_quantize = false;
    double energy_from = -1, energy_to = -1;
    auto* energy_cmd = app.add_subcommand("energy", "integrate a power trace");
    energy_cmd->add_option("--trace", energy_trace_path, "power trace CSV file")->required();
    energy_cmd->add_option("--from", energy_from, "window start, us");
    energy_cmd->add_option("--to", energy_to, "window end, us");
    energy_cmd->add_flag("--empiot-quantize", energy_quantize,
                         "snap voltage/current columns to the shield's resolution");
    energy_cmd->callback([&] {
        const auto trace = pallex::energy::load_power_trace(energy_trace_path, energy_quantize);
        std::optional<pallex::energy::TimeWindow> window;
        if (energy_from >= 0 || energy_to >= 0) {
            if (energy_from < 0 || energy_to < 0)
                throw Error("--from and --to must be given together");
            window = pallex::energy::TimeWindow{static_cast<micros_t>(energy_from),
                                                static_cast<micros_t>(energy_to)};
        }
        std::printf("%.3f J\n", pallex::energy::integrate_power(trace, window));
    });

    // segment
    std::string segment_trace_path, segment_boundaries;
    bool segment_quantize = false;
    auto* segment = app.add_subcommand("segment", "split a power trace into per-phase energies");
    segment->add_option("--trace", segment_trace_path, "power trace CSV file")->required();
    segment->add_option("--boundaries", segment_boundaries,
                        "comma-separated boundary timestamps, us")
        ->required();
    segment->add_flag("--empiot-quantize", segment_quantize,
                      "snap voltage/current columns to the shield's resolution");
    segment->callback([&] {
        const auto trace = pallex::energy::load_power_trace(segment_trace_path, segment_quantize);
        const auto segments =
            pallex::energy::segment_phases(trace, parse_boundaries(segment_boundaries));
        std::cout << "segment,start_us,end_us,energy_j\n";
        for (std::size_t i = 0; i < segments.size(); ++i)
            std::printf("%zu,%lld,%lld,%.3f\n", i, static_cast<long long>(segments[i].begin),
                        static_cast<long long>(segments[i].end), segments[i].energy_j);
    });

    // lifetime
    double lt_mah = 0, lt_volt = 0, lt_total = -1;
    double lt_btl = 0, lt_knl = 0, lt_user = 0, lt_sdn = 0, lt_n = 1;
    auto* lifetime_cmd = app.add_subcommand("lifetime", "battery lifetime for a duty-cycled device");
    lifetime_cmd->add_option("--mah", lt_mah, "battery capacity, mAh")->required();
    lifetime_cmd->add_option("--volt", lt_volt, "battery voltage, V")->required();
    lifetime_cmd->add_option("--e", lt_total, "total per-cycle energy, J");
    lifetime_cmd->add_option("--e-btl", lt_btl, "bootloader phase energy, J");
    lifetime_cmd->add_option("--e-knl", lt_knl, "kernel phase energy, J");
    lifetime_cmd->add_option("--e-user", lt_user, "user application energy, J");
    lifetime_cmd->add_option("--e-sdn", lt_sdn, "shutdown phase energy, J");
    lifetime_cmd->add_option("--n", lt_n, "cycles per hour")->required();
    lifetime_cmd->callback([&] {
        pallex::energy::LifetimeParams params;
        params.capacity_mah = lt_mah;
        params.voltage_v = lt_volt;
        params.cycles_per_hour = lt_n;
        if (lt_total >= 0) {
            if (lt_btl || lt_knl || lt_user || lt_sdn)
                throw Error("--e and the per-phase energies are mutually exclusive");
            params.e_user_j = lt_total;
        } else {
            params.e_btl_j = lt_btl;
            params.e_knl_j = lt_knl;
            params.e_user_j = lt_user;
            params.e_sdn_j = lt_sdn;
        }
        std::printf("%.6f h\n", pallex::energy::lifetime(params));
    });

    // run-stage
    std::string rs_app, rs_stage, rs_manifest_path, rs_runtime_dir;
    int rs_retry_ms = static_cast<int>(pallex::handoff::kDefaultRetryInterval.count());
    int rs_timeout_ms = static_cast<int>(pallex::handoff::kDefaultTimeout.count());
    auto* run_stage_cmd = app.add_subcommand(
        "run-stage", "collect predecessor payloads, run a stage command, serve successors");
    run_stage_cmd->add_option("--app", rs_app, "application id")->required();
    run_stage_cmd->add_option("--stage", rs_stage, "stage id")->required();
    run_stage_cmd->add_option("--manifest", rs_manifest_path, "manifest JSON file")->required();
    run_stage_cmd->add_option("--runtime-dir", rs_runtime_dir,
                              "runtime directory (default: $PALLEX_RUNTIME_DIR or /run/pallex)");
    run_stage_cmd->add_option("--retry-ms", rs_retry_ms, "connect retry interval, ms");
    run_stage_cmd->add_option("--timeout-ms", rs_timeout_ms, "overall handoff timeout, ms");
    run_stage_cmd->allow_extras();
    run_stage_cmd->callback([&] {
        const fs::path runtime_dir = rs_runtime_dir.empty()
                                         ? pallex::handoff::runtime_dir_from_env()
                                         : fs::path(rs_runtime_dir);
        run_stage(rs_app, rs_stage, rs_manifest_path, runtime_dir, rs_retry_ms, rs_timeout_ms,
                  run_stage_cmd->remaining());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the diagnostic to stderr
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
