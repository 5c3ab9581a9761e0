#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pallex/error.hpp"

namespace pallex::handoff {

inline constexpr std::uint8_t kMagic[4] = {'P', 'L', 'X', 'M'};
inline constexpr std::uint8_t kVersion = 0x01;
inline constexpr std::chrono::milliseconds kDefaultRetryInterval{50};
inline constexpr std::chrono::milliseconds kDefaultTimeout{30'000};
inline constexpr const char* kRuntimeDirEnv = "PALLEX_RUNTIME_DIR";
inline constexpr const char* kDefaultRuntimeDir = "/run/pallex";

// IEEE CRC32 (reflected 0xEDB88320 polynomial), as used by zip and zlib.
std::uint32_t crc32_ieee(std::span<const std::uint8_t> data);

// One message as it travels over a stage socket:
//   magic "PLXM" | version 0x01 | producer id length (u16 BE) | producer id
//   | payload length (u32 BE) | payload | CRC32 of the payload (u32 BE)
struct Frame {
    std::string producer_id;
    std::vector<std::uint8_t> payload;
    bool operator==(const Frame&) const = default;
};

enum class DecodeErrorKind { bad_magic, bad_version, truncated, crc_mismatch };
const char* to_string(DecodeErrorKind k);

struct DecodeError : Error {
    DecodeErrorKind kind;
    DecodeError(DecodeErrorKind k, const std::string& what) : Error(what), kind(k) {}
};

std::vector<std::uint8_t> encode_frame(const Frame& f);

// Inverse of encode_frame over a complete buffer. Throws DecodeError with a
// distinct kind for wrong magic, unsupported version, short input, and
// payload corruption.
Frame decode_frame(std::span<const std::uint8_t> bytes);

// Addressing is purely filesystem based: each producer stage owns the
// socket "<runtime_dir>/<app_id>/<stage_id>.sock".
struct Endpoint {
    std::string app_id;
    std::string stage_id;
    std::filesystem::path runtime_dir;

    std::filesystem::path socket_path() const;
};

// PALLEX_RUNTIME_DIR from the environment, or /run/pallex.
std::filesystem::path runtime_dir_from_env();

struct AddressInUse : Error {
    using Error::Error;
};

struct Timeout : Error {
    int completed = 0;                 // deliveries that did succeed (producer side)
    std::vector<std::string> missing;  // producers never read (consumer side)
    Timeout(const std::string& what, int completed_count, std::vector<std::string> missing_ids)
        : Error(what), completed(completed_count), missing(std::move(missing_ids)) {}
};

struct Delivery {
    int connection = 0;        // order in which the consumer was served
    std::size_t bytes = 0;     // payload bytes confirmed received
};

struct DeliveryReport {
    std::vector<Delivery> deliveries;
};

// Producer side of the rendezvous. Creates the listening socket, then blocks
// until successor_count distinct consumer connections have each read the
// whole frame and closed. The socket file is removed before returning, on
// success and on error alike. successor_count 0 creates nothing and returns
// immediately. Throws AddressInUse when the path is occupied and Timeout
// (carrying the success count) when the deadline passes first.
DeliveryReport serve_handoff(const Endpoint& ep, std::span<const std::uint8_t> payload,
                             int successor_count,
                             std::chrono::milliseconds timeout = kDefaultTimeout);

struct CollectResult {
    std::map<std::string, std::vector<std::uint8_t>> payloads;  // producer id -> payload
    std::map<std::string, int> attempts;                        // connect attempts per producer
};

// Consumer side. Visits predecessors in list order; for each one, retries
// the connect every retry_interval until the producer's socket exists, then
// reads and validates one frame. The timeout bounds the total wall time; on
// expiry a Timeout names every producer still missing.
CollectResult collect_handoff(const std::vector<Endpoint>& predecessors,
                              std::chrono::milliseconds retry_interval = kDefaultRetryInterval,
                              std::chrono::milliseconds timeout = kDefaultTimeout);

}  // namespace pallex::handoff
