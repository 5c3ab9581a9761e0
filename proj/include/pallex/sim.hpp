#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "pallex/error.hpp"
#include "pallex/graph.hpp"
#include "pallex/time.hpp"

namespace pallex::sim {

// One init-system unit as the simulator sees it. ordered_after_deps=true
// models a correctly configured dependency tree (the activation request is
// issued once the deps are done); false models the misconfigured tree where
// the request fires at the start of userspace even though execution still
// has to wait, which is what inflates blame figures.
struct UnitProfile {
    std::string unit_name;
    micros_t duration = 0;
    std::set<std::string> unit_deps;
    double cpu_demand = 1.0;  // fraction of one core, in [0,1]
    bool ordered_after_deps = true;
};

// Unit profile file: JSON array of
// {"unit_name","duration_ms","unit_deps":[...],"cpu_demand","ordered_after_deps"}.
std::vector<UnitProfile> parse_unit_profiles(const std::string& json_text);
std::vector<UnitProfile> load_unit_profiles(const std::string& path);

struct BootPhases {
    micros_t t_btl = 0;
    micros_t t_knl = 0;
    micros_t systemd_init_delay = 0;  // earliest stage start after userspace begins
};

// Measured presets; override freely.
BootPhases rpi3_phases();   // 3650 ms, 2850 ms, 750 ms
BootPhases rpizw_phases();  // 3650 ms, 2850 ms, 1200 ms

struct CoreCount {
    bool is_unlimited = false;
    int count = 1;

    static CoreCount finite(int n);
    static CoreCount unlimited();
};

enum class EventKind { phase, unit, stage_compute, stage_blocked };
const char* to_string(EventKind k);

struct TimelineEvent {
    std::string task;
    EventKind kind = EventKind::phase;
    micros_t start = 0;
    micros_t end = 0;
    int demand_millis = 0;  // core demand in thousandths while the event runs
};

struct Timeline {
    std::vector<TimelineEvent> events;
    CoreCount cores;
    micros_t userspace_start = 0;  // t_btl + t_knl

    micros_t t_usi() const;   // userspace makespan
    micros_t total() const;   // power-on to last event end
};

struct StageProfile {
    micros_t duration = 0;
    double cpu_demand = 1.0;
};

// Stage profile file: JSON object {"<stage_id>": {"duration_ms", "cpu_demand"}}.
std::map<std::string, StageProfile> parse_stage_profiles(const std::string& json_text);
std::map<std::string, StageProfile> load_stage_profiles(const std::string& path);

// Deterministic discrete-event simulation of one duty cycle: fixed
// bootloader and kernel phases, then multi-core unit activation and stage
// scheduling. Admission is non-preemptive greedy at event instants, units
// before stages, lexicographic within each class; a task is admitted when
// the running demand plus its own stays within the core budget. Stages wait
// for their unit deps, their predecessors' compute events, and the
// systemd_init_delay; after computing they stay blocked until their last
// successor has started, mirroring the blocking sender of the handoff.
Timeline simulate_boot(const std::vector<UnitProfile>& units,
                       const graph::AppManifest& manifest,
                       const std::map<std::string, StageProfile>& stage_profiles,
                       const BootPhases& phases, CoreCount cores);

// Per-unit completion-minus-request durations as an activation profiler
// would report them. Always at least the execution duration.
std::map<std::string, micros_t> blame_report(const Timeline& t,
                                             const std::vector<UnitProfile>& units);

// CSV "task,kind,start_ms,end_ms", rows sorted by (start, task, kind).
std::string export_gantt(const Timeline& t);

}  // namespace pallex::sim
