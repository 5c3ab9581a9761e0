#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pallex/error.hpp"
#include "pallex/time.hpp"

namespace pallex::graph {

// One schedulable fragment of a user application. A stage may start only
// once every stage in stage_deps has completed and every init-system unit
// in unit_deps is active.
struct StageSpec {
    std::string id;
    std::string command;  // opaque executable string, launched by the init system
    std::set<std::string> stage_deps;
    std::set<std::string> unit_deps;
    std::optional<std::uint64_t> payload_hint;  // expected output size in bytes
};

struct AppManifest {
    std::string app_id;
    std::string target_platform;  // reporting only
    std::vector<StageSpec> stages;

    const StageSpec* find_stage(const std::string& id) const;

    // Stages that list `id` among their stage_deps, sorted by id.
    std::vector<std::string> successors_of(const std::string& id) const;
};

struct Violation {
    std::string message;
    std::vector<std::string> stages;  // offending stage ids, sorted
};

struct ValidationReport {
    std::vector<Violation> violations;
    bool ok() const { return violations.empty(); }
};

struct ValidationError : Error {
    using Error::Error;
};

// Checks id uniqueness, dependency closure, self-loops, and acyclicity.
// Violations are data, not failures; every cyclic cluster is reported,
// not just the first one found.
ValidationReport validate_manifest(const AppManifest& m);

// Dependency-respecting linearization; ties among equally-ready stages are
// broken lexicographically so the output is deterministic.
// Throws ValidationError when validate_manifest(m) is not ok.
std::vector<std::string> topo_order(const AppManifest& m);

struct StageWindow {
    micros_t start = 0;
    micros_t finish = 0;
};

// Earliest start/finish per stage assuming unlimited cores:
//   start(s)  = max(unit_ready over unit_deps, finish over stage_deps), empty max = 0
//   finish(s) = start(s) + duration(s)
// The maximum finish over all stages is the critical-path length.
// Throws on unknown keys, negative durations, or an invalid manifest.
std::map<std::string, StageWindow> earliest_start(
    const AppManifest& m,
    const std::map<std::string, micros_t>& unit_ready,
    const std::map<std::string, micros_t>& stage_durations);

// Manifest document I/O. Schema:
//   {"app_id": str, "target_platform": str,
//    "stages": [{"id": str, "command": str, "stage_deps": [str],
//                "unit_deps": [str], "payload_hint": int?}]}
AppManifest parse_manifest(const std::string& json_text);
AppManifest load_manifest(const std::string& path);

}  // namespace pallex::graph
