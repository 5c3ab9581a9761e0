#include <doctest.h>

#include <chrono>
#include <cstring>
#include <filesystem>
#include <random>
#include <thread>

#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>
#include <zlib.h>

#include "pallex/handoff.hpp"

using namespace pallex;
using namespace pallex::handoff;
namespace fs = std::filesystem;
using namespace std::chrono_literals;

namespace {

std::vector<std::uint8_t> random_payload(std::mt19937& rng, std::size_t size) {
    std::vector<std::uint8_t> data(size);
    for (auto& b : data) b = static_cast<std::uint8_t>(rng());
    return data;
}

// Scratch runtime directory, removed on destruction.
struct TempRuntimeDir {
    fs::path path;
    TempRuntimeDir() {
        std::string tmpl = (fs::temp_directory_path() / "pallex-test-XXXXXX").string();
        std::vector<char> buf(tmpl.begin(), tmpl.end());
        buf.push_back('\0');
        REQUIRE(::mkdtemp(buf.data()) != nullptr);
        path = buf.data();
    }
    ~TempRuntimeDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

bool any_socket_left(const fs::path& dir) {
    if (!fs::exists(dir)) return false;
    for (const auto& entry : fs::recursive_directory_iterator(dir))
        if (entry.path().extension() == ".sock") return true;
    return false;
}

}  // namespace

TEST_SUITE("handoff") {

TEST_CASE("crc32 matches the zlib reference") {
    const std::string check = "123456789";
    std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(check.data()),
                                        check.size());
    CHECK(crc32_ieee(bytes) == 0xCBF43926u);

    std::mt19937 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const auto data = random_payload(rng, std::uniform_int_distribution<int>(0, 4096)(rng));
        const auto reference = ::crc32(0L, data.data(), static_cast<uInt>(data.size()));
        CHECK(crc32_ieee(data) == static_cast<std::uint32_t>(reference));
    }
}

TEST_CASE("codec round-trips a simple frame") {
    const Frame f{"cap", {'a', 'b', 'c'}};
    CHECK(decode_frame(encode_frame(f)) == f);
}

TEST_CASE("empty payload encodes a zero length field and decodes") {
    const Frame f{"solo", {}};
    const auto bytes = encode_frame(f);
    // magic(4) + version(1) + id_len(2) + id(4), then the payload length.
    const std::size_t off = 4 + 1 + 2 + 4;
    CHECK(bytes[off] == 0);
    CHECK(bytes[off + 1] == 0);
    CHECK(bytes[off + 2] == 0);
    CHECK(bytes[off + 3] == 0);
    CHECK(decode_frame(bytes) == f);
}

TEST_CASE("codec round-trips randomized payloads up to 1 MiB") {
    std::mt19937 rng(17);
    std::vector<std::size_t> sizes{0, 1, 2, 1u << 20};
    for (int i = 0; i < 40; ++i)
        sizes.push_back(std::uniform_int_distribution<std::size_t>(0, 1u << 16)(rng));
    for (const auto size : sizes) {
        Frame f{"producer-" + std::to_string(size), random_payload(rng, size)};
        CHECK(decode_frame(encode_frame(f)) == f);
    }
}

TEST_CASE("payload corruption is caught as a CRC mismatch") {
    std::mt19937 rng(29);
    const Frame f{"cap", random_payload(rng, 256)};
    auto bytes = encode_frame(f);
    const std::size_t payload_off = 4 + 1 + 2 + f.producer_id.size() + 4;
    for (int trial = 0; trial < 32; ++trial) {
        auto corrupted = bytes;
        const std::size_t victim =
            payload_off + std::uniform_int_distribution<std::size_t>(0, 255)(rng);
        corrupted[victim] ^= 0x01;
        try {
            decode_frame(corrupted);
            FAIL("corrupted frame decoded");
        } catch (const DecodeError& e) {
            CHECK(e.kind == DecodeErrorKind::crc_mismatch);
        }
    }
}

TEST_CASE("decode rejects bad magic, bad version, truncation") {
    const auto bytes = encode_frame({"cap", {'x', 'y'}});

    auto wrong_magic = bytes;
    wrong_magic[0] = 'Q';
    CHECK_THROWS_AS(decode_frame(wrong_magic), DecodeError);
    try {
        decode_frame(wrong_magic);
    } catch (const DecodeError& e) {
        CHECK(e.kind == DecodeErrorKind::bad_magic);
    }

    auto wrong_version = bytes;
    wrong_version[4] = 0x02;
    try {
        decode_frame(wrong_version);
    } catch (const DecodeError& e) {
        CHECK(e.kind == DecodeErrorKind::bad_version);
    }

    for (std::size_t len = 0; len < bytes.size(); ++len) {
        try {
            decode_frame(std::span(bytes.data(), len));
            FAIL("truncated frame decoded at length " << len);
        } catch (const DecodeError& e) {
            CAPTURE(len);
            CHECK(e.kind == DecodeErrorKind::truncated);
        }
    }

    auto trailing = bytes;
    trailing.push_back(0x00);
    CHECK_THROWS_AS(decode_frame(trailing), Error);
}

TEST_CASE("serve with zero successors returns immediately and creates nothing") {
    TempRuntimeDir dir;
    const Endpoint ep{"app", "a", dir.path};
    const auto report = serve_handoff(ep, {}, 0, 100ms);
    CHECK(report.deliveries.empty());
    CHECK_FALSE(fs::exists(ep.socket_path()));
}

TEST_CASE("collect with zero predecessors returns immediately") {
    const auto result = collect_handoff({}, 10ms, 100ms);
    CHECK(result.payloads.empty());
}

TEST_CASE("producer blocks until the consumer arrives") {
    TempRuntimeDir dir;
    const Endpoint ep{"app", "a", dir.path};
    std::mt19937 rng(5);
    const auto payload = random_payload(rng, 4096);

    std::thread consumer([&] {
        std::this_thread::sleep_for(50ms);
        const auto result = collect_handoff({ep}, 10ms, 5000ms);
        CHECK(result.payloads.at("a") == payload);
    });

    const auto start = std::chrono::steady_clock::now();
    const auto report = serve_handoff(ep, payload, 1, 5000ms);
    const auto elapsed = std::chrono::steady_clock::now() - start;
    consumer.join();

    REQUIRE(report.deliveries.size() == 1);
    CHECK(report.deliveries[0].bytes == payload.size());
    CHECK(elapsed >= 45ms);  // the producer really waited for the rendezvous
    CHECK_FALSE(any_socket_left(dir.path));
}

TEST_CASE("consumer retries until the producer appears") {
    TempRuntimeDir dir;
    const Endpoint ep{"app", "a", dir.path};
    std::mt19937 rng(6);
    const auto payload = random_payload(rng, 1024);

    std::thread producer([&] {
        std::this_thread::sleep_for(300ms);
        serve_handoff(ep, payload, 1, 5000ms);
    });

    const auto result = collect_handoff({ep}, 50ms, 5000ms);
    producer.join();

    CHECK(result.payloads.at("a") == payload);
    // ceil(300/50) + 1 attempts at most, per the retry arithmetic.
    CHECK(result.attempts.at("a") <= 7);
    CHECK(result.attempts.at("a") >= 2);
}

TEST_CASE("fan-out serves the same payload to every consumer") {
    TempRuntimeDir dir;
    const Endpoint ep{"app", "a", dir.path};
    std::mt19937 rng(8);
    const auto payload = random_payload(rng, 100000);

    std::vector<std::thread> consumers;
    std::vector<std::vector<std::uint8_t>> got(3);
    for (int i = 0; i < 3; ++i)
        consumers.emplace_back([&, i] {
            const auto result = collect_handoff({ep}, 10ms, 5000ms);
            got[i] = result.payloads.at("a");
        });

    const auto report = serve_handoff(ep, payload, 3, 5000ms);
    for (auto& c : consumers) c.join();

    CHECK(report.deliveries.size() == 3);
    for (const auto& g : got) CHECK(g == payload);
    CHECK_FALSE(any_socket_left(dir.path));
}

TEST_CASE("three-stage pipeline delivers intact payloads in-process") {
    TempRuntimeDir dir;
    const Endpoint a{"app", "a", dir.path};
    const Endpoint b{"app", "b", dir.path};
    std::mt19937 rng(9);
    const auto original = random_payload(rng, 50000);

    std::vector<std::uint8_t> final_payload;
    std::thread stage_a([&] { serve_handoff(a, original, 1, 5000ms); });
    std::thread stage_b([&] {
        auto in = collect_handoff({a}, 10ms, 5000ms);
        serve_handoff(b, in.payloads.at("a"), 1, 5000ms);
    });
    std::thread stage_c([&] {
        auto in = collect_handoff({b}, 10ms, 5000ms);
        final_payload = std::move(in.payloads.at("b"));
    });
    stage_a.join();
    stage_b.join();
    stage_c.join();

    CHECK(final_payload == original);
    CHECK_FALSE(any_socket_left(dir.path));
}

TEST_CASE("collect keyed by producer id over two predecessors") {
    TempRuntimeDir dir;
    const Endpoint pack{"app", "pack", dir.path};
    const Endpoint prep{"app", "prep", dir.path};
    std::thread t1([&] { serve_handoff(pack, std::vector<std::uint8_t>{1, 2}, 1, 5000ms); });
    std::thread t2([&] { serve_handoff(prep, std::vector<std::uint8_t>{3}, 1, 5000ms); });
    const auto result = collect_handoff({pack, prep}, 10ms, 5000ms);
    t1.join();
    t2.join();
    CHECK(result.payloads.size() == 2);
    CHECK(result.payloads.at("pack") == std::vector<std::uint8_t>{1, 2});
    CHECK(result.payloads.at("prep") == std::vector<std::uint8_t>{3});
}

TEST_CASE("occupied socket path raises AddressInUse") {
    TempRuntimeDir dir;
    const Endpoint ep{"app", "a", dir.path};
    fs::create_directories(ep.socket_path().parent_path());

    const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
    REQUIRE(fd >= 0);
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    const std::string path = ep.socket_path().string();
    std::memcpy(addr.sun_path, path.c_str(), path.size() + 1);
    REQUIRE(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);

    CHECK_THROWS_AS(serve_handoff(ep, {}, 1, 100ms), AddressInUse);
    ::close(fd);
}

TEST_CASE("serve timeout reports how many deliveries succeeded") {
    TempRuntimeDir dir;
    const Endpoint ep{"app", "a", dir.path};
    try {
        serve_handoff(ep, std::vector<std::uint8_t>{1}, 1, 80ms);
        FAIL("serve did not time out");
    } catch (const Timeout& t) {
        CHECK(t.completed == 0);
        CHECK(std::string(t.what()).find("0 of 1") != std::string::npos);
    }
    CHECK_FALSE(any_socket_left(dir.path));  // cleaned up on the error path too
}

TEST_CASE("collect timeout names the missing producers") {
    TempRuntimeDir dir;
    const Endpoint ghost1{"app", "ghost1", dir.path};
    const Endpoint ghost2{"app", "ghost2", dir.path};
    try {
        collect_handoff({ghost1, ghost2}, 10ms, 80ms);
        FAIL("collect did not time out");
    } catch (const Timeout& t) {
        CHECK(t.missing == std::vector<std::string>{"ghost1", "ghost2"});
    }
}

TEST_CASE("socket path derivation") {
    const Endpoint ep{"demo", "capture", "/run/pallex"};
    CHECK(ep.socket_path() == fs::path("/run/pallex/demo/capture.sock"));
}

}  // TEST_SUITE
