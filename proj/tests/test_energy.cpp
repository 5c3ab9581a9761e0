#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "pallex/energy.hpp"

using namespace pallex;
using namespace pallex::energy;

namespace {

PowerTrace constant_trace(double power_mw, micros_t span_us, micros_t step_us) {
    PowerTrace t;
    for (micros_t ts = 0; ts <= span_us; ts += step_us) t.samples.push_back({ts, power_mw});
    return t;
}

PowerTrace ramp_trace(double start_mw, double end_mw, micros_t span_us, micros_t step_us) {
    PowerTrace t;
    for (micros_t ts = 0; ts <= span_us; ts += step_us) {
        const double frac = static_cast<double>(ts) / static_cast<double>(span_us);
        t.samples.push_back({ts, start_mw + (end_mw - start_mw) * frac});
    }
    return t;
}

PowerTrace random_trace(std::mt19937& rng, int samples) {
    PowerTrace t;
    micros_t ts = 0;
    for (int i = 0; i < samples; ++i) {
        ts += std::uniform_int_distribution<int>(1, 2000)(rng);
        t.samples.push_back({ts, std::uniform_real_distribution<double>(0, 3000)(rng)});
    }
    return t;
}

DigitalTrace pattern_trace(const std::string& pattern, micros_t start_us, micros_t bit_period_us,
                           micros_t step_us, micros_t tail_us) {
    DigitalTrace d;
    d.sample_rate_hz = 1e6 / static_cast<double>(step_us);
    const micros_t end = start_us + static_cast<micros_t>(pattern.size()) * bit_period_us + tail_us;
    for (micros_t ts = 0; ts <= end; ts += step_us) {
        int level = 0;
        if (ts >= start_us) {
            const auto bit = (ts - start_us) / bit_period_us;
            if (bit < static_cast<micros_t>(pattern.size()))
                level = pattern[static_cast<std::size_t>(bit)] == '1' ? 1 : 0;
        }
        d.samples.push_back({ts, level});
    }
    return d;
}

}  // namespace

TEST_SUITE("energy") {

TEST_CASE("constant power integrates exactly") {
    const auto t = constant_trace(1000.0, 10'000'000, 1000);  // 1 W for 10 s at 1 ksps
    CHECK(integrate_power(t) == doctest::Approx(10.0).epsilon(1e-12));
}

TEST_CASE("mean bootloader power reproduces the published phase energy") {
    const auto t = constant_trace(693.85, 6'500'000, 1000);
    CHECK(integrate_power(t) == doctest::Approx(4.51).epsilon(0.005));
}

TEST_CASE("ramp converges to the closed-form integral") {
    const auto t = ramp_trace(0.0, 2000.0, 10'000'000, 1000);
    CHECK(integrate_power(t) == doctest::Approx(10.0).epsilon(0.001));
}

TEST_CASE("integration is linear in power") {
    std::mt19937 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        auto t = random_trace(rng, 200);
        const double alpha = std::uniform_real_distribution<double>(0, 4)(rng);
        auto scaled = t;
        for (auto& s : scaled.samples) s.power_mw *= alpha;
        CHECK(integrate_power(scaled) ==
              doctest::Approx(alpha * integrate_power(t)).epsilon(1e-9));
    }
}

TEST_CASE("windows are additive over adjacent spans") {
    std::mt19937 rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        const auto t = random_trace(rng, 200);
        const micros_t lo = t.samples.front().t;
        const micros_t hi = t.samples.back().t;
        const micros_t mid = std::uniform_int_distribution<micros_t>(lo, hi)(rng);
        const double left = integrate_power(t, TimeWindow{lo, mid});
        const double right = integrate_power(t, TimeWindow{mid, hi});
        CHECK(left + right == doctest::Approx(integrate_power(t)).epsilon(1e-9));
    }
}

TEST_CASE("window errors") {
    CHECK_THROWS_AS(integrate_power(PowerTrace{}), Error);
    const auto t = constant_trace(1.0, 1000, 100);
    CHECK_THROWS_AS(integrate_power(t, TimeWindow{500, 400}), Error);
    CHECK_THROWS_AS(integrate_power(t, TimeWindow{0, 2000}), Error);
    CHECK(integrate_power(t, TimeWindow{300, 300}) == 0.0);
}

TEST_CASE("segmenting a constant watt") {
    const auto t = constant_trace(1000.0, 10'000'000, 1000);
    const auto segments = segment_phases(t, {4'000'000});
    REQUIRE(segments.size() == 2);
    CHECK(segments[0].energy_j == doctest::Approx(4.0).epsilon(1e-9));
    CHECK(segments[1].energy_j == doctest::Approx(6.0).epsilon(1e-9));
}

TEST_CASE("two-level boot trace splits into the published phase energies") {
    // Mean bootloader+kernel power, then mean userspace power.
    PowerTrace t;
    for (micros_t ts = 0; ts <= 9'440'000; ts += 1000)
        t.samples.push_back({ts, ts < 6'500'000 ? 693.85 : 1962.6});
    const auto segments = segment_phases(t, {6'500'000});
    REQUIRE(segments.size() == 2);
    CHECK(segments[0].energy_j == doctest::Approx(4.51).epsilon(0.005));
    CHECK(segments[1].energy_j == doctest::Approx(5.77).epsilon(0.005));
    CHECK(segments[0].energy_j + segments[1].energy_j ==
          doctest::Approx(10.28).epsilon(0.005));
}

TEST_CASE("degenerate boundary yields a zero-width, zero-energy segment") {
    const auto t = constant_trace(1000.0, 1'000'000, 1000);
    const auto segments = segment_phases(t, {0});
    REQUIRE(segments.size() == 2);
    CHECK(segments[0].energy_j == 0.0);
}

TEST_CASE("segment energies sum to the whole for random boundaries") {
    std::mt19937 rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        const auto t = random_trace(rng, 300);
        const micros_t lo = t.samples.front().t;
        const micros_t hi = t.samples.back().t;
        std::set<micros_t> cuts;
        const int n = std::uniform_int_distribution<int>(1, 5)(rng);
        for (int i = 0; i < n; ++i)
            cuts.insert(std::uniform_int_distribution<micros_t>(lo, hi)(rng));
        const std::vector<micros_t> boundaries(cuts.begin(), cuts.end());
        double sum = 0;
        for (const auto& seg : segment_phases(t, boundaries)) sum += seg.energy_j;
        CHECK(sum == doctest::Approx(integrate_power(t)).epsilon(1e-9));
    }
}

TEST_CASE("segment boundary validation") {
    const auto t = constant_trace(1.0, 1000, 100);
    CHECK_THROWS_AS(segment_phases(t, {2000}), Error);
    CHECK_THROWS_AS(segment_phases(t, {500, 500}), Error);
    CHECK_THROWS_AS(segment_phases(t, {700, 300}), Error);
}

TEST_CASE("marker detection finds an embedded pattern at its start") {
    const auto d = pattern_trace("10101100", 2'000'000, 10'000, 1000, 100'000);
    const auto found = detect_marker(d, "10101100", 10'000);
    REQUIRE(found.has_value());
    CHECK(*found == 2'000'000);
}

TEST_CASE("a bare edge never matches a full pattern") {
    DigitalTrace d;
    d.sample_rate_hz = 1000.0;
    for (micros_t ts = 0; ts <= 1'000'000; ts += 1000)
        d.samples.push_back({ts, ts >= 500'000 ? 1 : 0});
    CHECK_FALSE(detect_marker(d, "10101100", 10'000).has_value());
}

TEST_CASE("empty trace never matches") {
    DigitalTrace d;
    d.sample_rate_hz = 1000.0;
    CHECK_FALSE(detect_marker(d, "10", 10'000).has_value());
}

TEST_CASE("marker detection validates its inputs") {
    DigitalTrace d;
    d.sample_rate_hz = 1000.0;
    d.samples.push_back({0, 0});
    CHECK_THROWS_AS(detect_marker(d, "1", 10'000), Error);
    CHECK_THROWS_AS(detect_marker(d, "10x", 10'000), Error);
    CHECK_THROWS_AS(detect_marker(d, "10", 1000), Error);  // under two sample intervals
}

TEST_CASE("traces with fewer transitions than the pattern never match") {
    std::mt19937 rng(13);
    const std::string pattern = "10101100";
    int pattern_transitions = 0;
    for (std::size_t i = 1; i < pattern.size(); ++i)
        if (pattern[i] != pattern[i - 1]) ++pattern_transitions;

    for (int trial = 0; trial < 50; ++trial) {
        DigitalTrace d;
        d.sample_rate_hz = 1000.0;
        int level = std::uniform_int_distribution<int>(0, 1)(rng);
        int transitions = 0;
        micros_t ts = 0;
        const int segments = std::uniform_int_distribution<int>(1, pattern_transitions)(rng);
        for (int seg = 0; seg < segments; ++seg) {
            const micros_t hold = std::uniform_int_distribution<int>(5, 60)(rng) * 1000;
            for (micros_t end = ts + hold; ts < end; ts += 1000) d.samples.push_back({ts, level});
            level ^= 1;
            ++transitions;
        }
        // The loop above emitted `segments` runs, so `segments - 1` transitions.
        if (transitions - 1 >= pattern_transitions) continue;
        CHECK_FALSE(detect_marker(d, pattern, 10'000).has_value());
    }
}

TEST_CASE("synthesized idle timeline is the base plus one core") {
    sim::Timeline t;
    t.userspace_start = 1'000'000;
    t.events.push_back({"bootloader", sim::EventKind::phase, 0, 500'000, 1000});
    t.events.push_back({"kernel", sim::EventKind::phase, 500'000, 1'000'000, 1000});
    const auto trace = synthesize_power(t, {0.0, 1000.0}, 1000.0);
    REQUIRE_FALSE(trace.samples.empty());
    for (const auto& s : trace.samples) {
        CAPTURE(s.t);
        CHECK(s.power_mw == doctest::Approx(1000.0));
    }
    CHECK(trace.samples.back().t == t.total());
    CHECK(integrate_power(trace) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("synthesized energy equals the event sum") {
    const std::vector<sim::UnitProfile> units{
        {"A", ms_to_us(800), {}, 1.0, true}, {"B", ms_to_us(10), {"A"}, 1.0, false}};
    const auto timeline =
        sim::simulate_boot(units, {}, {}, sim::rpi3_phases(), sim::CoreCount::finite(1));
    const PowerModel model{300.0, 1700.0};
    const auto trace = synthesize_power(timeline, model, 1000.0);

    double event_sum_j = model.p_base_mw * 1e-9 * static_cast<double>(timeline.total());
    for (const auto& e : timeline.events)
        event_sum_j += model.p_core_mw * (e.demand_millis / 1000.0) * 1e-9 *
                       static_cast<double>(e.end - e.start);

    const double tolerance = (model.p_base_mw + model.p_core_mw) * 1e-3 * 1e-3;  // one sample
    CHECK(std::abs(integrate_power(trace) - event_sum_j) <= tolerance);
}

TEST_CASE("doubling core power doubles the dynamic energy") {
    const std::vector<sim::UnitProfile> units{{"A", ms_to_us(100), {}, 1.0, true}};
    const auto timeline =
        sim::simulate_boot(units, {}, {}, sim::BootPhases{0, 0, 0}, sim::CoreCount::finite(1));
    const double base = 250.0;
    const auto one = synthesize_power(timeline, {base, 500.0}, 1000.0);
    const auto two = synthesize_power(timeline, {base, 1000.0}, 1000.0);
    const double total_s = static_cast<double>(timeline.total()) * 1e-6;
    const double dyn_one = integrate_power(one) - base * 1e-3 * total_s;
    const double dyn_two = integrate_power(two) - base * 1e-3 * total_s;
    CHECK(dyn_two == doctest::Approx(2.0 * dyn_one).epsilon(1e-9));
}

TEST_CASE("synthesize-then-integrate matches event sums on random timelines") {
    std::mt19937 rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<sim::UnitProfile> units;
        const int n = std::uniform_int_distribution<int>(1, 6)(rng);
        for (int i = 0; i < n; ++i) {
            sim::UnitProfile u;
            u.unit_name = "u" + std::to_string(i);
            u.duration = ms_to_us(std::uniform_int_distribution<int>(0, 30)(rng));
            u.cpu_demand = std::uniform_int_distribution<int>(1, 10)(rng) / 10.0;
            for (int j = 0; j < i; ++j)
                if (std::uniform_int_distribution<int>(0, 2)(rng) == 0)
                    u.unit_deps.insert("u" + std::to_string(j));
            units.push_back(std::move(u));
        }
        const auto timeline = sim::simulate_boot(units, {}, {}, sim::BootPhases{ms_to_us(5), ms_to_us(5), 0},
                                                 sim::CoreCount::finite(2));
        const PowerModel model{100.0, 900.0};
        const double rate = 1000.0;
        const auto trace = synthesize_power(timeline, model, rate);

        double event_sum_j = model.p_base_mw * 1e-9 * static_cast<double>(timeline.total());
        for (const auto& e : timeline.events)
            event_sum_j += model.p_core_mw * (e.demand_millis / 1000.0) * 1e-9 *
                           static_cast<double>(e.end - e.start);

        // Event boundaries may fall between samples; allow one sample
        // interval of the peak power per boundary.
        const double peak_mw = model.p_base_mw + 2.0 * model.p_core_mw;
        const double tolerance = (2.0 * n + 2) * peak_mw * 1e-3 / rate;
        CHECK(std::abs(integrate_power(trace) - event_sum_j) <= tolerance);
    }
}

TEST_CASE("battery energy and the published lifetime figure") {
    LifetimeParams p;
    p.capacity_mah = 2400;
    p.voltage_v = 5;
    CHECK(battery_energy(p) == 43200.0);

    p.e_user_j = 12.0;
    p.cycles_per_hour = 6;
    CHECK(lifetime(p) == doctest::Approx(600.0).epsilon(1e-12));

    p.e_user_j = 10.28;  // boot energy
    p.e_sdn_j = 0.70;    // forced-forced shutdown bound
    p.cycles_per_hour = 10;
    // 43200 / 109.8 reduces to 24000 / 61 exactly.
    CHECK(lifetime(p) == doctest::Approx(24000.0 / 61.0).epsilon(1e-12));
}

TEST_CASE("halving the per-cycle energy doubles the lifetime") {
    LifetimeParams p;
    p.capacity_mah = 1200;
    p.voltage_v = 3.7;
    p.e_btl_j = 2.0;
    p.e_knl_j = 1.5;
    p.e_user_j = 4.0;
    p.e_sdn_j = 0.5;
    p.cycles_per_hour = 4;
    auto halved = p;
    halved.e_btl_j /= 2;
    halved.e_knl_j /= 2;
    halved.e_user_j /= 2;
    halved.e_sdn_j /= 2;
    CHECK(lifetime(halved) == doctest::Approx(2.0 * lifetime(p)).epsilon(1e-12));
}

TEST_CASE("lifetime identity holds to high precision") {
    std::mt19937 rng(19);
    for (int trial = 0; trial < 100; ++trial) {
        LifetimeParams p;
        p.capacity_mah = std::uniform_real_distribution<double>(100, 10000)(rng);
        p.voltage_v = std::uniform_real_distribution<double>(1, 12)(rng);
        p.e_btl_j = std::uniform_real_distribution<double>(0, 10)(rng);
        p.e_knl_j = std::uniform_real_distribution<double>(0, 10)(rng);
        p.e_user_j = std::uniform_real_distribution<double>(0.1, 10)(rng);
        p.e_sdn_j = std::uniform_real_distribution<double>(0, 10)(rng);
        p.cycles_per_hour = std::uniform_real_distribution<double>(1, 60)(rng);
        const double per_cycle = p.e_btl_j + p.e_knl_j + p.e_user_j + p.e_sdn_j;
        const double product = lifetime(p) * per_cycle * p.cycles_per_hour;
        CHECK(std::abs(product - battery_energy(p)) <= 1e-12 * battery_energy(p));
    }
}

TEST_CASE("lifetime rejects undefined inputs") {
    LifetimeParams p;
    p.capacity_mah = 2400;
    p.voltage_v = 5;
    CHECK_THROWS_AS(lifetime(p), Error);  // zero per-cycle energy
    p.e_user_j = 1.0;
    p.cycles_per_hour = 0.5;
    CHECK_THROWS_AS(lifetime(p), Error);  // fewer than one cycle per hour
    p.cycles_per_hour = 1;
    p.e_sdn_j = -1;
    CHECK_THROWS_AS(lifetime(p), Error);
}

TEST_CASE("power trace CSV parsing, both column layouts") {
    const auto direct = parse_power_trace("timestamp_us,power_mw\n0,100\n1000,200\n");
    REQUIRE(direct.samples.size() == 2);
    CHECK(direct.samples[1].power_mw == 200.0);

    // 5000 mV * 200000 uA = 1 W.
    const auto vi = parse_power_trace("timestamp_us,voltage_mv,current_ua\n0,5000,200000\n");
    CHECK(vi.samples[0].power_mw == doctest::Approx(1000.0));

    // Quantization snaps 5001 mV to 5000 and 250 uA to 200.
    const auto q =
        parse_power_trace("timestamp_us,voltage_mv,current_ua\n0,5001,240\n", true);
    CHECK(q.samples[0].power_mw == doctest::Approx(5000.0 * 200.0 * 1e-6));

    CHECK_THROWS_AS(parse_power_trace("bogus\n"), Error);
    CHECK_THROWS_AS(parse_power_trace("timestamp_us,power_mw\n5,1\n5,1\n"), Error);
    CHECK_THROWS_AS(parse_power_trace("timestamp_us,power_mw\n5,-1\n"), Error);
}

TEST_CASE("digital trace CSV parsing") {
    const auto d = parse_digital_trace("timestamp_us,level\n0,0\n1000,1\n", 1000.0);
    REQUIRE(d.samples.size() == 2);
    CHECK(d.samples[1].level == 1);
    CHECK_THROWS_AS(parse_digital_trace("timestamp_us,level\n0,2\n", 1000.0), Error);
}

}  // TEST_SUITE
