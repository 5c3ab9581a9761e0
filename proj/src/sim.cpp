#include "pallex/sim.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace pallex::sim {

namespace {

constexpr int kMillisPerCore = 1000;

int demand_to_millis(double cpu_demand, const std::string& who) {
    if (!(cpu_demand >= 0.0 && cpu_demand <= 1.0))
        throw Error("cpu_demand out of [0,1] for " + who);
    return static_cast<int>(std::llround(cpu_demand * kMillisPerCore));
}

struct Task {
    std::string name;
    micros_t duration = 0;
    int demand = 0;
    std::vector<int> unit_deps;   // indices into the unit task array
    std::vector<int> stage_deps;  // indices into the stage task array (stages only)
    bool started = false;
    bool completed = false;
    micros_t start = -1;
    micros_t end = -1;
};

}  // namespace

BootPhases rpi3_phases() { return {ms_to_us(3650), ms_to_us(2850), ms_to_us(750)}; }
BootPhases rpizw_phases() { return {ms_to_us(3650), ms_to_us(2850), ms_to_us(1200)}; }

CoreCount CoreCount::finite(int n) {
    if (n < 1) throw Error("core count must be at least 1");
    return {false, n};
}

CoreCount CoreCount::unlimited() { return {true, 0}; }

const char* to_string(EventKind k) {
    switch (k) {
        case EventKind::phase: return "phase";
        case EventKind::unit: return "unit";
        case EventKind::stage_compute: return "stage_compute";
        case EventKind::stage_blocked: return "stage_blocked";
    }
    return "?";
}

micros_t Timeline::t_usi() const {
    micros_t last = userspace_start;
    for (const auto& e : events)
        if (e.kind != EventKind::phase) last = std::max(last, e.end);
    return last - userspace_start;
}

micros_t Timeline::total() const { return userspace_start + t_usi(); }

std::vector<UnitProfile> parse_unit_profiles(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
    if (j.is_discarded() || !j.is_array()) throw Error("unit profiles: expected a JSON array");
    std::vector<UnitProfile> units;
    for (const auto& ju : j) {
        UnitProfile u;
        try {
            u.unit_name = ju.at("unit_name").get<std::string>();
            u.duration = ms_to_us(ju.at("duration_ms").get<double>());
            for (const auto& d : ju.value("unit_deps", nlohmann::json::array()))
                u.unit_deps.insert(d.get<std::string>());
            u.cpu_demand = ju.value("cpu_demand", 1.0);
            u.ordered_after_deps = ju.value("ordered_after_deps", true);
        } catch (const nlohmann::json::exception& e) {
            throw Error(std::string("unit profiles: ") + e.what());
        }
        if (u.duration < 0) throw Error("unit profiles: negative duration for " + u.unit_name);
        units.push_back(std::move(u));
    }
    return units;
}

std::vector<UnitProfile> load_unit_profiles(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open unit profiles: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_unit_profiles(buf.str());
}

std::map<std::string, StageProfile> parse_stage_profiles(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error("stage profiles: expected a JSON object");
    std::map<std::string, StageProfile> profiles;
    for (const auto& [id, jp] : j.items()) {
        StageProfile p;
        try {
            p.duration = ms_to_us(jp.at("duration_ms").get<double>());
            p.cpu_demand = jp.value("cpu_demand", 1.0);
        } catch (const nlohmann::json::exception& e) {
            throw Error(std::string("stage profiles: ") + e.what());
        }
        if (p.duration < 0) throw Error("stage profiles: negative duration for " + id);
        profiles[id] = p;
    }
    return profiles;
}

std::map<std::string, StageProfile> load_stage_profiles(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open stage profiles: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_stage_profiles(buf.str());
}

Timeline simulate_boot(const std::vector<UnitProfile>& units,
                       const graph::AppManifest& manifest,
                       const std::map<std::string, StageProfile>& stage_profiles,
                       const BootPhases& phases, CoreCount cores) {
    if (phases.t_btl < 0 || phases.t_knl < 0 || phases.systemd_init_delay < 0)
        throw Error("boot phase durations must be non-negative");
    if (!cores.is_unlimited && cores.count < 1) throw Error("core count must be at least 1");

    const auto report = graph::validate_manifest(manifest);
    if (!report.ok()) {
        std::string msg = "simulate_boot: manifest validation failed:";
        for (const auto& v : report.violations) msg += "\n  " + v.message;
        throw graph::ValidationError(msg);
    }

    // Unit tasks, sorted by name for deterministic admission order.
    std::vector<Task> unit_tasks;
    {
        std::map<std::string, const UnitProfile*> by_name;
        for (const auto& u : units) {
            if (!by_name.emplace(u.unit_name, &u).second)
                throw Error("duplicate unit profile: " + u.unit_name);
        }
        std::map<std::string, int> index;
        for (const auto& [name, _] : by_name) {
            index[name] = static_cast<int>(unit_tasks.size());
            unit_tasks.push_back({});
        }
        for (const auto& [name, profile] : by_name) {
            Task& t = unit_tasks[index[name]];
            t.name = name;
            if (profile->duration < 0) throw Error("negative duration for unit " + name);
            t.duration = profile->duration;
            t.demand = demand_to_millis(profile->cpu_demand, "unit " + name);
            for (const auto& dep : profile->unit_deps) {
                auto it = index.find(dep);
                if (it == index.end())
                    throw Error("unit " + name + " depends on unknown unit: " + dep);
                if (dep == name) throw Error("unit depends on itself: " + name);
                t.unit_deps.push_back(it->second);
            }
        }
        // Cycle check over unit deps.
        std::vector<int> indegree(unit_tasks.size(), 0);
        for (std::size_t i = 0; i < unit_tasks.size(); ++i)
            indegree[i] = static_cast<int>(unit_tasks[i].unit_deps.size());
        std::vector<std::vector<int>> dependents(unit_tasks.size());
        for (std::size_t i = 0; i < unit_tasks.size(); ++i)
            for (int dep : unit_tasks[i].unit_deps) dependents[dep].push_back(static_cast<int>(i));
        std::vector<int> queue;
        for (std::size_t i = 0; i < unit_tasks.size(); ++i)
            if (indegree[i] == 0) queue.push_back(static_cast<int>(i));
        std::size_t seen = 0;
        while (seen < queue.size()) {
            const int u = queue[seen++];
            for (int v : dependents[u])
                if (--indegree[v] == 0) queue.push_back(v);
        }
        if (seen != unit_tasks.size()) throw Error("unit dependency graph has a cycle");
    }
    std::map<std::string, int> unit_index;
    for (std::size_t i = 0; i < unit_tasks.size(); ++i)
        unit_index[unit_tasks[i].name] = static_cast<int>(i);

    // Stage tasks, also sorted by id.
    std::vector<Task> stage_tasks;
    std::map<std::string, int> stage_index;
    {
        std::vector<std::string> ids;
        for (const auto& s : manifest.stages) ids.push_back(s.id);
        std::sort(ids.begin(), ids.end());
        for (const auto& id : ids) {
            stage_index[id] = static_cast<int>(stage_tasks.size());
            stage_tasks.push_back({});
        }
        for (const auto& s : manifest.stages) {
            Task& t = stage_tasks[stage_index[s.id]];
            t.name = s.id;
            auto it = stage_profiles.find(s.id);
            if (it == stage_profiles.end()) throw Error("no profile for stage: " + s.id);
            if (it->second.duration < 0) throw Error("negative duration for stage " + s.id);
            t.duration = it->second.duration;
            t.demand = demand_to_millis(it->second.cpu_demand, "stage " + s.id);
            for (const auto& u : s.unit_deps) {
                auto uit = unit_index.find(u);
                if (uit == unit_index.end())
                    throw Error("stage " + s.id + " depends on unknown unit: " + u);
                t.unit_deps.push_back(uit->second);
            }
            for (const auto& d : s.stage_deps) t.stage_deps.push_back(stage_index[d]);
        }
    }

    const micros_t userspace = phases.t_btl + phases.t_knl;
    const micros_t stage_gate = userspace + phases.systemd_init_delay;
    const long budget = cores.is_unlimited ? 0 : static_cast<long>(cores.count) * kMillisPerCore;

    long load = 0;
    auto fits = [&](int demand) { return cores.is_unlimited || load + demand <= budget; };

    std::set<micros_t> horizon{userspace, stage_gate};
    std::vector<int> running_units, running_stages;

    auto release_at = [&](micros_t t) {
        auto sweep = [&](std::vector<int>& running, std::vector<Task>& tasks) {
            for (auto it = running.begin(); it != running.end();) {
                Task& task = tasks[*it];
                if (task.end == t) {
                    task.completed = true;
                    load -= task.demand;
                    it = running.erase(it);
                } else {
                    ++it;
                }
            }
        };
        sweep(running_units, unit_tasks);
        sweep(running_stages, stage_tasks);
    };

    auto deps_done = [](const std::vector<Task>& tasks, const std::vector<int>& deps) {
        return std::all_of(deps.begin(), deps.end(),
                           [&](int d) { return tasks[d].completed; });
    };

    while (!horizon.empty()) {
        const micros_t now = *horizon.begin();
        horizon.erase(horizon.begin());
        release_at(now);

        bool progress = true;
        while (progress) {
            progress = false;

            auto admit = [&](Task& task, std::vector<int>& running, int idx) {
                task.started = true;
                task.start = now;
                task.end = now + task.duration;
                if (task.duration == 0) {
                    task.completed = true;  // instant tasks never hold capacity
                } else {
                    load += task.demand;
                    running.push_back(idx);
                    horizon.insert(task.end);
                }
                progress = true;
            };

            if (now >= userspace) {
                for (std::size_t i = 0; i < unit_tasks.size(); ++i) {
                    Task& t = unit_tasks[i];
                    if (t.started || !deps_done(unit_tasks, t.unit_deps)) continue;
                    if (!fits(t.demand)) continue;
                    admit(t, running_units, static_cast<int>(i));
                }
            }
            if (now >= stage_gate) {
                for (std::size_t i = 0; i < stage_tasks.size(); ++i) {
                    Task& t = stage_tasks[i];
                    if (t.started || !deps_done(unit_tasks, t.unit_deps) ||
                        !deps_done(stage_tasks, t.stage_deps))
                        continue;
                    if (!fits(t.demand)) continue;
                    admit(t, running_stages, static_cast<int>(i));
                }
            }
        }
    }

    Timeline timeline;
    timeline.cores = cores;
    timeline.userspace_start = userspace;
    timeline.events.push_back({"bootloader", EventKind::phase, 0, phases.t_btl, kMillisPerCore});
    timeline.events.push_back(
        {"kernel", EventKind::phase, phases.t_btl, userspace, kMillisPerCore});
    for (const auto& t : unit_tasks)
        timeline.events.push_back({t.name, EventKind::unit, t.start, t.end, t.demand});
    for (std::size_t i = 0; i < stage_tasks.size(); ++i) {
        const Task& t = stage_tasks[i];
        timeline.events.push_back({t.name, EventKind::stage_compute, t.start, t.end, t.demand});
        // The sender stays alive until its last successor is up and has
        // collected the message.
        micros_t last_successor_start = t.end;
        bool has_successor = false;
        for (const auto& other : stage_tasks) {
            if (std::find(other.stage_deps.begin(), other.stage_deps.end(),
                          static_cast<int>(i)) != other.stage_deps.end()) {
                has_successor = true;
                last_successor_start = std::max(last_successor_start, other.start);
            }
        }
        if (has_successor)
            timeline.events.push_back(
                {t.name, EventKind::stage_blocked, t.end, last_successor_start, 0});
    }
    return timeline;
}

std::map<std::string, micros_t> blame_report(const Timeline& t,
                                             const std::vector<UnitProfile>& units) {
    std::map<std::string, micros_t> completion;
    for (const auto& e : t.events)
        if (e.kind == EventKind::unit) completion[e.task] = e.end;

    std::map<std::string, micros_t> blame;
    for (const auto& u : units) {
        auto it = completion.find(u.unit_name);
        if (it == completion.end())
            throw Error("blame_report: unit absent from timeline: " + u.unit_name);
        micros_t request = t.userspace_start;
        if (u.ordered_after_deps) {
            for (const auto& dep : u.unit_deps) {
                auto dit = completion.find(dep);
                if (dit == completion.end())
                    throw Error("blame_report: unit absent from timeline: " + dep);
                request = std::max(request, dit->second);
            }
        }
        blame[u.unit_name] = it->second - request;
    }
    return blame;
}

std::string export_gantt(const Timeline& t) {
    std::vector<const TimelineEvent*> rows;
    rows.reserve(t.events.size());
    for (const auto& e : t.events) rows.push_back(&e);
    std::sort(rows.begin(), rows.end(), [](const TimelineEvent* a, const TimelineEvent* b) {
        if (a->start != b->start) return a->start < b->start;
        if (a->task != b->task) return a->task < b->task;
        if (a->kind != b->kind) return static_cast<int>(a->kind) < static_cast<int>(b->kind);
        return a->end < b->end;
    });

    std::string csv = "task,kind,start_ms,end_ms\n";
    for (const TimelineEvent* e : rows) {
        csv += e->task;
        csv += ',';
        csv += to_string(e->kind);
        csv += ',';
        csv += format_ms(e->start);
        csv += ',';
        csv += format_ms(e->end);
        csv += '\n';
    }
    return csv;
}

}  // namespace pallex::sim
