#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pallex/error.hpp"
#include "pallex/sim.hpp"
#include "pallex/time.hpp"

namespace pallex::energy {

struct PowerSample {
    micros_t t = 0;
    double power_mw = 0.0;
};

// Timestamps strictly increasing, power non-negative. A sample's value holds
// until the next sample (left rule), which matches how the measurement
// hardware streams averaged readings.
struct PowerTrace {
    std::vector<PowerSample> samples;
};

// CSV with header "timestamp_us,power_mw" or
// "timestamp_us,voltage_mv,current_ua" (converted via P = V * I on load).
// empiot_quantize snaps voltage and current to the shield's 4 mV and 100 uA
// steps before conversion.
PowerTrace parse_power_trace(const std::string& csv_text, bool empiot_quantize = false);
PowerTrace load_power_trace(const std::string& path, bool empiot_quantize = false);

struct TimeWindow {
    micros_t begin = 0;
    micros_t end = 0;
};

// Left-Riemann energy in joules over the window (whole trace when omitted).
// The terminal sample is closed by the window end, or contributes nothing
// when it sits at the very end of the span.
double integrate_power(const PowerTrace& t, std::optional<TimeWindow> window = {});

struct Segment {
    micros_t begin = 0;
    micros_t end = 0;
    double energy_j = 0.0;
};

// Splits the trace span at the given boundaries (strictly increasing, inside
// the span) and integrates each piece. Segment energies sum to the whole.
std::vector<Segment> segment_phases(const PowerTrace& t, const std::vector<micros_t>& boundaries);

struct DigitalSample {
    micros_t t = 0;
    int level = 0;  // 0 or 1
};

struct DigitalTrace {
    std::vector<DigitalSample> samples;
    double sample_rate_hz = 0.0;
};

// CSV with header "timestamp_us,level".
DigitalTrace parse_digital_trace(const std::string& csv_text, double sample_rate_hz);

// Earliest timestamp at which majority-vote decoding of consecutive
// bit_period windows reproduces the pattern. A bare level transition that
// does not spell out the whole pattern never matches.
std::optional<micros_t> detect_marker(const DigitalTrace& d, const std::string& pattern,
                                      micros_t bit_period_us);

struct PowerModel {
    double p_base_mw = 0.0;
    double p_core_mw = 0.0;
};

// Uniformly sampled trace over a simulated timeline:
// P(t) = p_base + p_core * (total core demand running at t).
PowerTrace synthesize_power(const sim::Timeline& t, PowerModel model, double sample_rate_hz);

struct LifetimeParams {
    double capacity_mah = 0.0;
    double voltage_v = 0.0;
    double e_btl_j = 0.0;
    double e_knl_j = 0.0;
    double e_user_j = 0.0;
    double e_sdn_j = 0.0;
    double cycles_per_hour = 1.0;
};

// Battery energy in joules: 3600 * capacity(Ah) * voltage.
double battery_energy(const LifetimeParams& p);

// Hours until the battery is drained: E_bat / (per-cycle energy * cycles/h).
double lifetime(const LifetimeParams& p);

}  // namespace pallex::energy
