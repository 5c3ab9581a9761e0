#include "pallex/graph.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace pallex::graph {

namespace {

std::string join(const std::vector<std::string>& items, const char* sep) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += sep;
        out += items[i];
    }
    return out;
}

// Strongly connected components via iterative Kosaraju. Self-edges are
// ignored here; they are reported separately as self-loop violations.
std::vector<std::vector<int>> cyclic_components(const std::vector<std::vector<int>>& adj) {
    const int n = static_cast<int>(adj.size());
    std::vector<std::vector<int>> radj(n);
    for (int u = 0; u < n; ++u)
        for (int v : adj[u]) radj[v].push_back(u);

    std::vector<int> order;
    order.reserve(n);
    std::vector<char> seen(n, 0);
    for (int s = 0; s < n; ++s) {
        if (seen[s]) continue;
        // Iterative post-order DFS.
        std::vector<std::pair<int, std::size_t>> stack{{s, 0}};
        seen[s] = 1;
        while (!stack.empty()) {
            auto& [u, next] = stack.back();
            if (next < adj[u].size()) {
                int v = adj[u][next++];
                if (!seen[v]) {
                    seen[v] = 1;
                    stack.emplace_back(v, 0);
                }
            } else {
                order.push_back(u);
                stack.pop_back();
            }
        }
    }

    std::vector<int> component(n, -1);
    int comp_count = 0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (component[*it] != -1) continue;
        const int c = comp_count++;
        std::vector<int> stack{*it};
        component[*it] = c;
        while (!stack.empty()) {
            int u = stack.back();
            stack.pop_back();
            for (int v : radj[u]) {
                if (component[v] == -1) {
                    component[v] = c;
                    stack.push_back(v);
                }
            }
        }
    }

    std::vector<std::vector<int>> groups(comp_count);
    for (int u = 0; u < n; ++u) groups[component[u]].push_back(u);
    std::vector<std::vector<int>> cyclic;
    for (auto& g : groups)
        if (g.size() > 1) cyclic.push_back(std::move(g));
    return cyclic;
}

}  // namespace

const StageSpec* AppManifest::find_stage(const std::string& id) const {
    for (const auto& s : stages)
        if (s.id == id) return &s;
    return nullptr;
}

std::vector<std::string> AppManifest::successors_of(const std::string& id) const {
    std::vector<std::string> out;
    for (const auto& s : stages)
        if (s.stage_deps.count(id)) out.push_back(s.id);
    std::sort(out.begin(), out.end());
    return out;
}

ValidationReport validate_manifest(const AppManifest& m) {
    ValidationReport report;
    auto add = [&](std::string message, std::vector<std::string> stages) {
        std::sort(stages.begin(), stages.end());
        report.violations.push_back({std::move(message), std::move(stages)});
    };

    std::map<std::string, int> index_of;
    for (std::size_t i = 0; i < m.stages.size(); ++i) {
        const auto& s = m.stages[i];
        if (s.id.empty()) {
            add("stage at index " + std::to_string(i) + " has an empty id", {});
            continue;
        }
        if (index_of.count(s.id))
            add("duplicate stage id: " + s.id, {s.id});
        else
            index_of.emplace(s.id, static_cast<int>(i));
    }

    for (const auto& s : m.stages) {
        if (s.id.empty()) continue;
        if (s.stage_deps.count(s.id)) add("stage depends on itself: " + s.id, {s.id});
        for (const auto& dep : s.stage_deps) {
            if (dep != s.id && !index_of.count(dep))
                add("stage " + s.id + " references unknown stage: " + dep, {s.id});
        }
    }

    // Cycle scan over the known-stage edges only; unknown references and
    // self-loops were already reported above.
    std::vector<std::string> ids;
    ids.reserve(index_of.size());
    for (const auto& [id, _] : index_of) ids.push_back(id);
    std::map<std::string, int> pos;
    for (std::size_t i = 0; i < ids.size(); ++i) pos[ids[i]] = static_cast<int>(i);

    std::vector<std::vector<int>> adj(ids.size());
    for (const auto& s : m.stages) {
        if (s.id.empty() || !pos.count(s.id)) continue;
        for (const auto& dep : s.stage_deps) {
            auto it = pos.find(dep);
            if (it != pos.end() && dep != s.id) adj[it->second].push_back(pos[s.id]);
        }
    }
    for (auto& nbrs : adj) std::sort(nbrs.begin(), nbrs.end());

    for (const auto& group : cyclic_components(adj)) {
        std::vector<std::string> members;
        members.reserve(group.size());
        for (int u : group) members.push_back(ids[u]);
        std::sort(members.begin(), members.end());
        add("dependency cycle among stages: " + join(members, ", "), members);
    }

    return report;
}

std::vector<std::string> topo_order(const AppManifest& m) {
    const auto report = validate_manifest(m);
    if (!report.ok()) {
        std::string msg = "manifest validation failed:";
        for (const auto& v : report.violations) msg += "\n  " + v.message;
        throw ValidationError(msg);
    }

    std::map<std::string, std::vector<std::string>> dependents;
    std::map<std::string, int> indegree;
    for (const auto& s : m.stages) indegree[s.id] = static_cast<int>(s.stage_deps.size());
    for (const auto& s : m.stages)
        for (const auto& dep : s.stage_deps) dependents[dep].push_back(s.id);

    // std::set gives the lexicographically smallest ready stage first.
    std::set<std::string> ready;
    for (const auto& [id, deg] : indegree)
        if (deg == 0) ready.insert(id);

    std::vector<std::string> order;
    order.reserve(m.stages.size());
    while (!ready.empty()) {
        const std::string id = *ready.begin();
        ready.erase(ready.begin());
        order.push_back(id);
        for (const auto& next : dependents[id])
            if (--indegree[next] == 0) ready.insert(next);
    }
    return order;
}

std::map<std::string, StageWindow> earliest_start(
    const AppManifest& m,
    const std::map<std::string, micros_t>& unit_ready,
    const std::map<std::string, micros_t>& stage_durations) {
    std::map<std::string, StageWindow> result;
    for (const auto& id : topo_order(m)) {
        const StageSpec* s = m.find_stage(id);
        micros_t start = 0;
        for (const auto& u : s->unit_deps) {
            auto it = unit_ready.find(u);
            if (it == unit_ready.end())
                throw Error("earliest_start: no unit_ready entry for unit: " + u);
            start = std::max(start, it->second);
        }
        for (const auto& dep : s->stage_deps) start = std::max(start, result.at(dep).finish);
        auto it = stage_durations.find(id);
        if (it == stage_durations.end())
            throw Error("earliest_start: no duration entry for stage: " + id);
        if (it->second < 0)
            throw Error("earliest_start: negative duration for stage: " + id);
        result[id] = {start, start + it->second};
    }
    return result;
}

namespace {

AppManifest manifest_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error("manifest: document must be a JSON object");
    AppManifest m;
    try {
        m.app_id = j.at("app_id").get<std::string>();
        m.target_platform = j.value("target_platform", std::string{});
        for (const auto& js : j.at("stages")) {
            StageSpec s;
            s.id = js.at("id").get<std::string>();
            s.command = js.at("command").get<std::string>();
            for (const auto& d : js.value("stage_deps", nlohmann::json::array()))
                s.stage_deps.insert(d.get<std::string>());
            for (const auto& d : js.value("unit_deps", nlohmann::json::array()))
                s.unit_deps.insert(d.get<std::string>());
            if (js.contains("payload_hint") && !js["payload_hint"].is_null())
                s.payload_hint = js["payload_hint"].get<std::uint64_t>();
            m.stages.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("manifest: ") + e.what());
    }
    return m;
}

}  // namespace

AppManifest parse_manifest(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
    if (j.is_discarded()) throw Error("manifest: invalid JSON");
    return manifest_from_json(j);
}

AppManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open manifest: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_manifest(buf.str());
}

}  // namespace pallex::graph
