#include "pallex/unitgen.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace pallex::unitgen {

namespace {

const std::set<std::string> kMmsUnits = {"dphys-swapfile.service"};
const std::set<std::string> kNet1Units = {"networking.service"};
const std::set<std::string> kNet2Units = {"networking.service", "sshd.service"};
const std::set<std::string> kNet3Units = {"bluetoothd.service", "hciuart.service"};

bool safe_id(const std::string& id) {
    if (id.empty()) return false;
    for (char c : id) {
        const bool ok = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') ||
                        (c >= '0' && c <= '9') || c == '_' || c == '-';
        if (!ok) return false;
    }
    return true;
}

}  // namespace

Category category_from_string(const std::string& s) {
    if (s == "EU") return Category::eu;
    if (s == "NRS") return Category::nrs;
    if (s == "MEMORY") return Category::memory;
    if (s == "IO") return Category::io;
    if (s == "MISC") return Category::misc;
    throw Error("unknown unit category: " + s);
}

DisableAction action_from_string(const std::string& s) {
    if (s == "keep") return DisableAction::keep;
    if (s == "disable") return DisableAction::disable;
    if (s == "mask") return DisableAction::mask;
    throw Error("unknown disable_action: " + s);
}

const char* to_string(Category c) {
    switch (c) {
        case Category::eu: return "EU";
        case Category::nrs: return "NRS";
        case Category::memory: return "MEMORY";
        case Category::io: return "IO";
        case Category::misc: return "MISC";
    }
    return "?";
}

const char* to_string(DisableAction a) {
    switch (a) {
        case DisableAction::keep: return "keep";
        case DisableAction::disable: return "disable";
        case DisableAction::mask: return "mask";
    }
    return "?";
}

Catalog parse_catalog(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
    if (j.is_discarded() || !j.is_array()) throw Error("catalog: expected a JSON array");
    Catalog catalog;
    std::set<std::string> seen;
    for (const auto& je : j) {
        UnitCatalogEntry e;
        try {
            e.unit_name = je.at("unit_name").get<std::string>();
            e.category = category_from_string(je.at("category").get<std::string>());
            e.disable_action = action_from_string(je.at("disable_action").get<std::string>());
            e.note = je.value("note", std::string{});
        } catch (const nlohmann::json::exception& ex) {
            throw Error(std::string("catalog: ") + ex.what());
        }
        if (e.unit_name.empty()) throw Error("catalog: empty unit_name");
        if (!seen.insert(e.unit_name).second)
            throw Error("catalog: duplicate unit: " + e.unit_name);
        if (e.category == Category::eu && e.disable_action != DisableAction::keep)
            throw Error("catalog: essential unit must keep disable_action \"keep\": " + e.unit_name);
        catalog.push_back(std::move(e));
    }
    return catalog;
}

Catalog load_catalog(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open catalog: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_catalog(buf.str());
}

ProfileName profile_from_string(const std::string& s) {
    if (s == "EU") return ProfileName::eu;
    if (s == "EU+MMS") return ProfileName::eu_mms;
    if (s == "EU+NET1") return ProfileName::eu_net1;
    if (s == "EU+NET2") return ProfileName::eu_net2;
    if (s == "EU+NET3") return ProfileName::eu_net3;
    if (s == "ALLU") return ProfileName::allu;
    if (s == "ALLU-NET3") return ProfileName::allu_minus_net3;
    throw Error("unknown profile: " + s);
}

const char* to_string(ProfileName p) {
    switch (p) {
        case ProfileName::eu: return "EU";
        case ProfileName::eu_mms: return "EU+MMS";
        case ProfileName::eu_net1: return "EU+NET1";
        case ProfileName::eu_net2: return "EU+NET2";
        case ProfileName::eu_net3: return "EU+NET3";
        case ProfileName::allu: return "ALLU";
        case ProfileName::allu_minus_net3: return "ALLU-NET3";
    }
    return "?";
}

ConfigProfile resolve_profile(ProfileName name, const Catalog& catalog) {
    std::set<std::string> all;
    std::set<std::string> essential;
    for (const auto& e : catalog) {
        all.insert(e.unit_name);
        if (e.category == Category::eu) essential.insert(e.unit_name);
    }

    auto require = [&](const std::set<std::string>& units) {
        for (const auto& u : units)
            if (!all.count(u))
                throw Error("profile " + std::string(to_string(name)) +
                            " references unknown unit: " + u);
    };

    ConfigProfile p;
    p.name = name;
    p.enabled = essential;
    switch (name) {
        case ProfileName::eu:
            break;
        case ProfileName::eu_mms:
            require(kMmsUnits);
            p.enabled.insert(kMmsUnits.begin(), kMmsUnits.end());
            break;
        case ProfileName::eu_net1:
            require(kNet1Units);
            p.enabled.insert(kNet1Units.begin(), kNet1Units.end());
            break;
        case ProfileName::eu_net2:
            require(kNet2Units);
            p.enabled.insert(kNet2Units.begin(), kNet2Units.end());
            break;
        case ProfileName::eu_net3:
            require(kNet3Units);
            p.enabled.insert(kNet3Units.begin(), kNet3Units.end());
            break;
        case ProfileName::allu:
            p.enabled = all;
            break;
        case ProfileName::allu_minus_net3:
            require(kNet3Units);
            p.enabled = all;
            for (const auto& u : kNet3Units) p.enabled.erase(u);
            break;
    }

    for (const auto& e : catalog)
        if (!p.enabled.count(e.unit_name) && e.disable_action == DisableAction::mask)
            p.masked.insert(e.unit_name);
    return p;
}

std::vector<std::string> emit_config_script(const ConfigProfile& p, const Catalog& catalog) {
    std::set<std::string> all;
    for (const auto& e : catalog) all.insert(e.unit_name);
    for (const auto& u : p.enabled)
        if (!all.count(u)) throw Error("profile references unknown unit: " + u);
    for (const auto& u : p.masked)
        if (!all.count(u)) throw Error("profile references unknown unit: " + u);

    std::vector<std::string> disables;
    std::vector<std::string> masks;
    for (const auto& e : catalog) {
        if (p.enabled.count(e.unit_name)) continue;
        if (p.masked.count(e.unit_name))
            masks.push_back("systemctl mask " + e.unit_name);
        else
            disables.push_back("systemctl disable " + e.unit_name);
    }
    std::sort(disables.begin(), disables.end());
    std::sort(masks.begin(), masks.end());
    disables.insert(disables.end(), masks.begin(), masks.end());
    return disables;
}

ShutdownMode shutdown_mode_from_string(const std::string& s) {
    if (s == "graceful") return ShutdownMode::graceful;
    if (s == "forced") return ShutdownMode::forced;
    if (s == "forced-forced" || s == "forced_forced") return ShutdownMode::forced_forced;
    throw Error("unknown shutdown mode: " + s);
}

ShutdownCommand shutdown_command(ShutdownMode mode) {
    switch (mode) {
        case ShutdownMode::graceful:
            return {"systemctl poweroff", {}};
        case ShutdownMode::forced:
            return {"systemctl halt --force", {}};
        case ShutdownMode::forced_forced:
            return {"systemctl halt --force --force",
                    {"warning: halts the processor without unmounting filesystems; may cause "
                     "data corruption on the storage card",
                     "before running: kill application processes, then run sync",
                     "before running: run fake-hwclock save manually",
                     "before running: run systemd-random-seed save manually"}};
    }
    throw Error("unknown shutdown mode");
}

std::map<std::string, std::string> emit_stage_units(const graph::AppManifest& m,
                                                    const std::string& runtime_dir) {
    const auto report = graph::validate_manifest(m);
    if (!report.ok()) {
        std::string msg = "emit_stage_units: manifest validation failed:";
        for (const auto& v : report.violations) msg += "\n  " + v.message;
        throw graph::ValidationError(msg);
    }
    if (!safe_id(m.app_id))
        throw Error("app id not usable in a unit name (allowed: [A-Za-z0-9_-]): " + m.app_id);

    std::map<std::string, std::string> files;
    for (const auto& s : m.stages) {
        if (!safe_id(s.id))
            throw Error("stage id not usable in a unit name (allowed: [A-Za-z0-9_-]): " + s.id);

        std::string deps;
        for (const auto& u : s.unit_deps) {  // std::set iterates sorted
            if (!deps.empty()) deps += ' ';
            deps += u;
        }

        std::string text;
        text += "[Unit]\n";
        text += "Description=Pallex stage " + s.id + " of " + m.app_id + "\n";
        if (!deps.empty()) {
            text += "Requires=" + deps + "\n";
            text += "After=" + deps + "\n";
        }
        text += "\n[Service]\n";
        text += "Type=simple\n";
        text += "Environment=PALLEX_RUNTIME_DIR=" + runtime_dir + "\n";
        text += "ExecStart=" + s.command + "\n";
        text += "\n[Install]\n";
        text += "WantedBy=multi-user.target\n";

        files.emplace("pallex-" + m.app_id + "-" + s.id + ".service", std::move(text));
    }
    return files;
}

}  // namespace pallex::unitgen
