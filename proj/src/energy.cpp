#include "pallex/energy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace pallex::energy {

namespace {

constexpr double kEmpiotVoltageStepMv = 4.0;
constexpr double kEmpiotCurrentStepUa = 100.0;

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) fields.push_back(field);
    return fields;
}

double parse_double(const std::string& s, const char* what, std::size_t line_no) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error(std::string("trace line ") + std::to_string(line_no) + ": bad " + what +
                    " value: " + s);
    }
}

micros_t parse_timestamp(const std::string& s, std::size_t line_no) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error("trace line " + std::to_string(line_no) + ": bad timestamp: " + s);
    }
}

double quantize(double value, double step) { return std::round(value / step) * step; }

void append_sample(PowerTrace& trace, micros_t t, double power_mw, std::size_t line_no) {
    if (power_mw < 0)
        throw Error("trace line " + std::to_string(line_no) + ": negative power");
    if (!trace.samples.empty() && t <= trace.samples.back().t)
        throw Error("trace line " + std::to_string(line_no) +
                    ": timestamps must be strictly increasing");
    trace.samples.push_back({t, power_mw});
}

}  // namespace

PowerTrace parse_power_trace(const std::string& csv_text, bool empiot_quantize) {
    std::istringstream in(csv_text);
    std::string line;
    if (!std::getline(in, line)) throw Error("power trace: empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();

    bool vi_format = false;
    if (line == "timestamp_us,power_mw")
        vi_format = false;
    else if (line == "timestamp_us,voltage_mv,current_ua")
        vi_format = true;
    else
        throw Error("power trace: unrecognized header: " + line);

    PowerTrace trace;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() != (vi_format ? 3u : 2u))
            throw Error("power trace line " + std::to_string(line_no) + ": wrong column count");
        const micros_t t = parse_timestamp(fields[0], line_no);
        double power_mw;
        if (vi_format) {
            double v_mv = parse_double(fields[1], "voltage", line_no);
            double i_ua = parse_double(fields[2], "current", line_no);
            if (empiot_quantize) {
                v_mv = quantize(v_mv, kEmpiotVoltageStepMv);
                i_ua = quantize(i_ua, kEmpiotCurrentStepUa);
            }
            power_mw = v_mv * i_ua * 1e-6;  // mV * uA = nW; 1e-6 nW per mW
        } else {
            power_mw = parse_double(fields[1], "power", line_no);
        }
        append_sample(trace, t, power_mw, line_no);
    }
    return trace;
}

PowerTrace load_power_trace(const std::string& path, bool empiot_quantize) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open power trace: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_power_trace(buf.str(), empiot_quantize);
}

double integrate_power(const PowerTrace& t, std::optional<TimeWindow> window) {
    if (t.samples.empty()) throw Error("integrate_power: empty trace");
    const micros_t span_begin = t.samples.front().t;
    const micros_t span_end = t.samples.back().t;
    const micros_t w0 = window ? window->begin : span_begin;
    const micros_t w1 = window ? window->end : span_end;
    if (w1 < w0)
        throw Error("integrate_power: inverted window [" + std::to_string(w0) + ", " +
                    std::to_string(w1) + "]");
    if (w0 < span_begin || w1 > span_end)
        throw Error("integrate_power: window outside trace span");

    double acc = 0.0;  // sum of mW * us
    for (std::size_t i = 0; i + 1 < t.samples.size(); ++i) {
        const micros_t seg_begin = std::max(t.samples[i].t, w0);
        const micros_t seg_end = std::min(t.samples[i + 1].t, w1);
        if (seg_end > seg_begin)
            acc += t.samples[i].power_mw * static_cast<double>(seg_end - seg_begin);
        if (t.samples[i + 1].t >= w1) break;
    }
    return acc * 1e-9;  // mW*us -> J
}

std::vector<Segment> segment_phases(const PowerTrace& t, const std::vector<micros_t>& boundaries) {
    if (t.samples.empty()) throw Error("segment_phases: empty trace");
    const micros_t span_begin = t.samples.front().t;
    const micros_t span_end = t.samples.back().t;
    micros_t prev = span_begin;
    for (std::size_t i = 0; i < boundaries.size(); ++i) {
        if (boundaries[i] < span_begin || boundaries[i] > span_end)
            throw Error("segment_phases: boundary outside trace span: " +
                        std::to_string(boundaries[i]));
        if (i > 0 && boundaries[i] <= boundaries[i - 1])
            throw Error("segment_phases: boundaries must be strictly increasing");
    }

    std::vector<Segment> segments;
    for (std::size_t i = 0; i <= boundaries.size(); ++i) {
        const micros_t begin = prev;
        const micros_t end = i < boundaries.size() ? boundaries[i] : span_end;
        segments.push_back({begin, end, integrate_power(t, TimeWindow{begin, end})});
        prev = end;
    }
    return segments;
}

DigitalTrace parse_digital_trace(const std::string& csv_text, double sample_rate_hz) {
    std::istringstream in(csv_text);
    std::string line;
    if (!std::getline(in, line)) throw Error("digital trace: empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "timestamp_us,level")
        throw Error("digital trace: unrecognized header: " + line);

    DigitalTrace trace;
    trace.sample_rate_hz = sample_rate_hz;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() != 2)
            throw Error("digital trace line " + std::to_string(line_no) + ": wrong column count");
        const micros_t t = parse_timestamp(fields[0], line_no);
        if (fields[1] != "0" && fields[1] != "1")
            throw Error("digital trace line " + std::to_string(line_no) + ": level must be 0 or 1");
        if (!trace.samples.empty() && t <= trace.samples.back().t)
            throw Error("digital trace line " + std::to_string(line_no) +
                        ": timestamps must be strictly increasing");
        trace.samples.push_back({t, fields[1] == "1" ? 1 : 0});
    }
    return trace;
}

std::optional<micros_t> detect_marker(const DigitalTrace& d, const std::string& pattern,
                                      micros_t bit_period_us) {
    if (pattern.size() < 2) throw Error("detect_marker: pattern must be at least 2 bits");
    for (char c : pattern)
        if (c != '0' && c != '1') throw Error("detect_marker: pattern must be a bit string");
    if (bit_period_us <= 0) throw Error("detect_marker: bit period must be positive");
    if (d.sample_rate_hz > 0) {
        const double interval_us = 1e6 / d.sample_rate_hz;
        if (static_cast<double>(bit_period_us) < 2.0 * interval_us)
            throw Error("detect_marker: bit period must span at least two sample intervals");
    }

    const auto& s = d.samples;
    auto first_at_or_after = [&](micros_t t) {
        return std::lower_bound(s.begin(), s.end(), t,
                                [](const DigitalSample& a, micros_t v) { return a.t < v; });
    };

    for (std::size_t i = 0; i < s.size(); ++i) {
        const micros_t start = s[i].t;
        bool match = true;
        for (std::size_t bit = 0; bit < pattern.size() && match; ++bit) {
            const micros_t w0 = start + static_cast<micros_t>(bit) * bit_period_us;
            const micros_t w1 = w0 + bit_period_us;
            int ones = 0, zeros = 0;
            for (auto it = first_at_or_after(w0); it != s.end() && it->t < w1; ++it)
                (it->level ? ones : zeros)++;
            if (ones + zeros == 0) {
                match = false;  // window beyond the trace
                break;
            }
            const int want_one = pattern[bit] == '1';
            // Strict majority; a tie decodes as neither bit.
            if (want_one ? ones <= zeros : zeros <= ones) match = false;
        }
        if (match) return start;
    }
    return std::nullopt;
}

PowerTrace synthesize_power(const sim::Timeline& t, PowerModel model, double sample_rate_hz) {
    if (t.events.empty()) throw Error("synthesize_power: empty timeline");
    if (model.p_base_mw < 0 || model.p_core_mw < 0)
        throw Error("synthesize_power: power parameters must be non-negative");
    if (sample_rate_hz <= 0) throw Error("synthesize_power: sample rate must be positive");

    // Piecewise-constant total demand over event boundaries.
    std::map<micros_t, long> delta;
    for (const auto& e : t.events) {
        if (e.demand_millis == 0 || e.end <= e.start) continue;
        delta[e.start] += e.demand_millis;
        delta[e.end] -= e.demand_millis;
    }
    std::vector<std::pair<micros_t, long>> levels;  // (time, running demand from here)
    long running = 0;
    for (const auto& [time, change] : delta) {
        running += change;
        levels.emplace_back(time, running);
    }

    auto demand_at = [&](micros_t when) -> long {
        auto it = std::upper_bound(levels.begin(), levels.end(), when,
                                   [](micros_t v, const auto& lv) { return v < lv.first; });
        if (it == levels.begin()) return 0;
        return std::prev(it)->second;
    };

    const micros_t total = t.total();
    const double period_us = 1e6 / sample_rate_hz;
    PowerTrace trace;
    micros_t prev = -1;
    for (std::int64_t i = 0;; ++i) {
        micros_t when = static_cast<micros_t>(std::llround(static_cast<double>(i) * period_us));
        if (when >= total) break;
        if (when == prev) continue;  // sub-microsecond rates collapse to 1 MHz
        prev = when;
        const double power =
            model.p_base_mw + model.p_core_mw * static_cast<double>(demand_at(when)) / 1000.0;
        trace.samples.push_back({when, power});
    }
    if (trace.samples.empty() || trace.samples.back().t < total) {
        // The closing sample holds the last level; it carries no energy under
        // the left rule but keeps the trace span equal to the timeline total.
        const micros_t just_before = total > 0 ? total - 1 : 0;
        const double power = model.p_base_mw +
                             model.p_core_mw * static_cast<double>(demand_at(just_before)) / 1000.0;
        trace.samples.push_back({total, power});
    }
    return trace;
}

double battery_energy(const LifetimeParams& p) {
    if (p.capacity_mah < 0 || p.voltage_v < 0)
        throw Error("battery capacity and voltage must be non-negative");
    return 3600.0 * (p.capacity_mah / 1000.0) * p.voltage_v;
}

double lifetime(const LifetimeParams& p) {
    for (double e : {p.e_btl_j, p.e_knl_j, p.e_user_j, p.e_sdn_j})
        if (e < 0) throw Error("per-phase energies must be non-negative");
    const double per_cycle = p.e_btl_j + p.e_knl_j + p.e_user_j + p.e_sdn_j;
    if (!(per_cycle > 0)) throw Error("lifetime: per-cycle energy must be positive");
    if (p.cycles_per_hour < 1) throw Error("lifetime: cycles per hour must be at least 1");
    return battery_energy(p) / (per_cycle * p.cycles_per_hour);
}

}  // namespace pallex::energy
