#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "pallex/error.hpp"
#include "pallex/graph.hpp"

namespace pallex::unitgen {

enum class Category { eu, nrs, memory, io, misc };
enum class DisableAction { keep, disable, mask };

Category category_from_string(const std::string& s);
DisableAction action_from_string(const std::string& s);
const char* to_string(Category c);
const char* to_string(DisableAction a);

struct UnitCatalogEntry {
    std::string unit_name;
    Category category = Category::misc;
    DisableAction disable_action = DisableAction::disable;
    std::string note;
};
using Catalog = std::vector<UnitCatalogEntry>;

// Catalog file: JSON array of {"unit_name","category","disable_action","note"}.
// Essential units must carry disable_action "keep"; anything else is rejected.
Catalog parse_catalog(const std::string& json_text);
Catalog load_catalog(const std::string& path);

enum class ProfileName { eu, eu_mms, eu_net1, eu_net2, eu_net3, allu, allu_minus_net3 };

// Accepts "EU", "EU+MMS", "EU+NET1", "EU+NET2", "EU+NET3", "ALLU", "ALLU-NET3".
ProfileName profile_from_string(const std::string& s);
const char* to_string(ProfileName p);

struct ConfigProfile {
    ProfileName name = ProfileName::eu;
    std::set<std::string> enabled;  // unit names left enabled
    std::set<std::string> masked;   // unit names masked, disjoint from enabled
};

// Derives the enabled/masked sets of a named profile over a catalog. The
// essential units are always part of the enabled set. Throws when the
// profile needs a unit the catalog does not list.
ConfigProfile resolve_profile(ProfileName name, const Catalog& catalog);

// systemctl commands that disable or mask every catalog unit outside the
// profile's enabled set. Deterministic: disables sorted by unit name, then
// masks sorted by unit name. Enabled units produce no commands.
std::vector<std::string> emit_config_script(const ConfigProfile& p, const Catalog& catalog);

enum class ShutdownMode { graceful, forced, forced_forced };
ShutdownMode shutdown_mode_from_string(const std::string& s);

struct ShutdownCommand {
    std::string command_line;
    std::vector<std::string> notes;  // advisory text, may be empty
};
ShutdownCommand shutdown_command(ShutdownMode mode);

// One unit file per stage, keyed by file name
// "pallex-<app_id>-<stage_id>.service". Unit deps appear in Requires= and
// After= lines; stage deps are enforced at runtime by the socket rendezvous
// and never show up in the unit file. Throws when ids contain characters
// outside [A-Za-z0-9_-] or the manifest fails validation.
std::map<std::string, std::string> emit_stage_units(const graph::AppManifest& m,
                                                    const std::string& runtime_dir);

}  // namespace pallex::unitgen
