#include "pallex/handoff.hpp"

#include <algorithm>
#include <array>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <thread>

#include <fcntl.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

namespace pallex::handoff {

namespace {

using steady_clock = std::chrono::steady_clock;

constexpr std::array<std::uint32_t, 256> make_crc_table() {
    std::array<std::uint32_t, 256> table{};
    for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        table[i] = c;
    }
    return table;
}
constexpr auto kCrcTable = make_crc_table();

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

[[noreturn]] void throw_errno(const std::string& what) {
    throw Error(what + ": " + std::strerror(errno));
}

struct FdGuard {
    int fd = -1;
    explicit FdGuard(int f) : fd(f) {}
    ~FdGuard() {
        if (fd >= 0) ::close(fd);
    }
    FdGuard(const FdGuard&) = delete;
    FdGuard& operator=(const FdGuard&) = delete;
};

struct UnlinkGuard {
    std::filesystem::path path;
    ~UnlinkGuard() {
        std::error_code ec;
        std::filesystem::remove(path, ec);
    }
};

void set_nonblocking(int fd) {
    int flags = ::fcntl(fd, F_GETFL);
    if (flags < 0 || ::fcntl(fd, F_SETFL, flags | O_NONBLOCK) < 0)
        throw_errno("fcntl(O_NONBLOCK)");
}

int remaining_ms(steady_clock::time_point deadline) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - steady_clock::now());
    return static_cast<int>(std::clamp<std::int64_t>(left.count(), 0, 3'600'000));
}

// Returns true when the fd is ready, false when the deadline passed first.
bool wait_fd(int fd, short events, steady_clock::time_point deadline) {
    for (;;) {
        pollfd pfd{fd, events, 0};
        const int ms = remaining_ms(deadline);
        const int rc = ::poll(&pfd, 1, ms);
        if (rc > 0) return true;
        if (rc == 0) return false;
        if (errno != EINTR) throw_errno("poll");
    }
}

sockaddr_un make_address(const std::filesystem::path& path) {
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    const std::string s = path.native();
    if (s.size() >= sizeof(addr.sun_path))
        throw Error("socket path too long (" + std::to_string(s.size()) + " bytes): " + s);
    std::memcpy(addr.sun_path, s.c_str(), s.size() + 1);
    return addr;
}

enum class SendStatus { ok, peer_gone, timed_out };

SendStatus send_all(int fd, std::span<const std::uint8_t> bytes, steady_clock::time_point deadline) {
    std::size_t off = 0;
    while (off < bytes.size()) {
        const ssize_t n =
            ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
        if (n > 0) {
            off += static_cast<std::size_t>(n);
            continue;
        }
        if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
            if (!wait_fd(fd, POLLOUT, deadline)) return SendStatus::timed_out;
            continue;
        }
        if (n < 0 && errno == EINTR) continue;
        if (n < 0 && (errno == EPIPE || errno == ECONNRESET)) return SendStatus::peer_gone;
        throw_errno("send");
    }
    return SendStatus::ok;
}

enum class CloseStatus { closed, peer_gone, timed_out };

// After shutting down our write side, wait for the peer to finish reading and
// close. EOF is the confirmation that the consumer holds the whole frame.
CloseStatus await_peer_close(int fd, steady_clock::time_point deadline) {
    if (::shutdown(fd, SHUT_WR) != 0 && errno != ENOTCONN) return CloseStatus::peer_gone;
    std::uint8_t scratch[256];
    for (;;) {
        const ssize_t n = ::recv(fd, scratch, sizeof(scratch), 0);
        if (n == 0) return CloseStatus::closed;
        if (n > 0) continue;  // stray bytes from the peer are discarded
        if (errno == EAGAIN || errno == EWOULDBLOCK) {
            if (!wait_fd(fd, POLLIN, deadline)) return CloseStatus::timed_out;
            continue;
        }
        if (errno == EINTR) continue;
        if (errno == ECONNRESET) return CloseStatus::peer_gone;
        throw_errno("recv");
    }
}

}  // namespace

std::uint32_t crc32_ieee(std::span<const std::uint8_t> data) {
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::uint8_t b : data) c = kCrcTable[(c ^ b) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

const char* to_string(DecodeErrorKind k) {
    switch (k) {
        case DecodeErrorKind::bad_magic: return "BadMagic";
        case DecodeErrorKind::bad_version: return "BadVersion";
        case DecodeErrorKind::truncated: return "Truncated";
        case DecodeErrorKind::crc_mismatch: return "CrcMismatch";
    }
    return "?";
}

std::vector<std::uint8_t> encode_frame(const Frame& f) {
    if (f.producer_id.size() > 0xFFFF)
        throw Error("frame: producer id longer than 65535 bytes");
    if (f.payload.size() > 0xFFFFFFFFull)
        throw Error("frame: payload longer than 4 GiB");

    std::vector<std::uint8_t> out;
    out.reserve(15 + f.producer_id.size() + f.payload.size());
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    out.push_back(kVersion);
    put_u16(out, static_cast<std::uint16_t>(f.producer_id.size()));
    out.insert(out.end(), f.producer_id.begin(), f.producer_id.end());
    put_u32(out, static_cast<std::uint32_t>(f.payload.size()));
    out.insert(out.end(), f.payload.begin(), f.payload.end());
    put_u32(out, crc32_ieee(f.payload));
    return out;
}

Frame decode_frame(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
        if (bytes.size() - pos < n)
            throw DecodeError(DecodeErrorKind::truncated,
                              "frame truncated at byte " + std::to_string(bytes.size()));
    };

    need(4);
    if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.data()))
        throw DecodeError(DecodeErrorKind::bad_magic, "frame magic mismatch");
    pos += 4;

    need(1);
    const std::uint8_t version = bytes[pos++];
    if (version != kVersion)
        throw DecodeError(DecodeErrorKind::bad_version,
                          "unsupported frame version " + std::to_string(version));

    need(2);
    const std::size_t id_len = (std::size_t(bytes[pos]) << 8) | bytes[pos + 1];
    pos += 2;
    need(id_len);
    Frame f;
    f.producer_id.assign(reinterpret_cast<const char*>(bytes.data() + pos), id_len);
    pos += id_len;

    need(4);
    const std::size_t payload_len = get_u32(bytes.data() + pos);
    pos += 4;
    need(payload_len);
    f.payload.assign(bytes.data() + pos, bytes.data() + pos + payload_len);
    pos += payload_len;

    need(4);
    const std::uint32_t stated = get_u32(bytes.data() + pos);
    pos += 4;
    if (pos != bytes.size())
        throw Error("frame has " + std::to_string(bytes.size() - pos) + " trailing bytes");
    if (stated != crc32_ieee(f.payload))
        throw DecodeError(DecodeErrorKind::crc_mismatch, "frame payload CRC mismatch");
    return f;
}

std::filesystem::path Endpoint::socket_path() const {
    return runtime_dir / app_id / (stage_id + ".sock");
}

std::filesystem::path runtime_dir_from_env() {
    if (const char* dir = std::getenv(kRuntimeDirEnv); dir && *dir) return dir;
    return kDefaultRuntimeDir;
}

DeliveryReport serve_handoff(const Endpoint& ep, std::span<const std::uint8_t> payload,
                             int successor_count, std::chrono::milliseconds timeout) {
    if (successor_count < 0) throw Error("serve_handoff: negative successor count");
    DeliveryReport report;
    if (successor_count == 0) return report;

    const auto path = ep.socket_path();
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec)
        throw Error("serve_handoff: cannot create " + path.parent_path().string() + ": " +
                    ec.message());

    const auto bytes = encode_frame({ep.stage_id, {payload.begin(), payload.end()}});
    const auto addr = make_address(path);

    const int lfd = ::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (lfd < 0) throw_errno("socket");
    FdGuard listen_guard(lfd);
    if (::bind(lfd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0) {
        if (errno == EADDRINUSE)
            throw AddressInUse("socket path already occupied: " + path.string());
        throw_errno("bind " + path.string());
    }
    UnlinkGuard unlink_guard{path};
    if (::listen(lfd, std::max(successor_count, 8)) != 0) throw_errno("listen");
    set_nonblocking(lfd);

    const auto deadline = steady_clock::now() + timeout;
    int confirmed = 0;
    auto timed_out = [&]() -> Timeout {
        return Timeout("serve_handoff: timed out after " + std::to_string(timeout.count()) +
                           " ms with " + std::to_string(confirmed) + " of " +
                           std::to_string(successor_count) + " deliveries",
                       confirmed, {});
    };

    while (confirmed < successor_count) {
        if (!wait_fd(lfd, POLLIN, deadline)) throw timed_out();
        const int cfd = ::accept4(lfd, nullptr, nullptr, SOCK_CLOEXEC);
        if (cfd < 0) {
            if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR ||
                errno == ECONNABORTED)
                continue;
            throw_errno("accept");
        }
        FdGuard conn_guard(cfd);
        set_nonblocking(cfd);

        const SendStatus sent = send_all(cfd, bytes, deadline);
        if (sent == SendStatus::timed_out) throw timed_out();
        if (sent == SendStatus::peer_gone) continue;  // dropped consumer does not count

        const CloseStatus closed = await_peer_close(cfd, deadline);
        if (closed == CloseStatus::timed_out) throw timed_out();
        if (closed == CloseStatus::peer_gone) continue;

        report.deliveries.push_back({confirmed, payload.size()});
        ++confirmed;
    }
    return report;
}

namespace {

// Connects to a producer socket once. Returns the fd, or -1 when the
// producer is not there yet (worth retrying).
int try_connect(const sockaddr_un& addr, steady_clock::time_point deadline) {
    const int fd = ::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC | SOCK_NONBLOCK, 0);
    if (fd < 0) throw_errno("socket");
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) return fd;

    if (errno == EINPROGRESS) {
        if (!wait_fd(fd, POLLOUT, deadline)) {
            ::close(fd);
            return -1;
        }
        int err = 0;
        socklen_t len = sizeof(err);
        if (::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len) == 0 && err == 0) return fd;
        errno = err;
    }
    const int saved = errno;
    ::close(fd);
    if (saved == ENOENT || saved == ECONNREFUSED || saved == EAGAIN) return -1;
    errno = saved;
    throw_errno("connect");
}

std::vector<std::uint8_t> read_until_eof(int fd, steady_clock::time_point deadline,
                                         bool& hit_deadline) {
    std::vector<std::uint8_t> buf;
    std::uint8_t chunk[64 * 1024];
    for (;;) {
        const ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
        if (n > 0) {
            buf.insert(buf.end(), chunk, chunk + n);
            continue;
        }
        if (n == 0) return buf;
        if (errno == EAGAIN || errno == EWOULDBLOCK) {
            if (!wait_fd(fd, POLLIN, deadline)) {
                hit_deadline = true;
                return buf;
            }
            continue;
        }
        if (errno == EINTR) continue;
        throw_errno("recv");
    }
}

}  // namespace

CollectResult collect_handoff(const std::vector<Endpoint>& predecessors,
                              std::chrono::milliseconds retry_interval,
                              std::chrono::milliseconds timeout) {
    if (retry_interval.count() <= 0) throw Error("collect_handoff: retry interval must be positive");
    CollectResult result;
    const auto deadline = steady_clock::now() + timeout;

    auto missing_from = [&](std::size_t first) {
        std::vector<std::string> missing;
        for (std::size_t i = first; i < predecessors.size(); ++i)
            missing.push_back(predecessors[i].stage_id);
        return missing;
    };
    auto join = [](const std::vector<std::string>& ids) {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ", ";
            out += ids[i];
        }
        return out;
    };

    for (std::size_t i = 0; i < predecessors.size(); ++i) {
        const Endpoint& ep = predecessors[i];
        const auto addr = make_address(ep.socket_path());

        int fd = -1;
        int attempts = 0;
        for (;;) {
            ++attempts;
            fd = try_connect(addr, deadline);
            if (fd >= 0) break;
            if (steady_clock::now() >= deadline) {
                auto missing = missing_from(i);
                throw Timeout("collect_handoff: timed out waiting for producers: " + join(missing),
                              static_cast<int>(i), std::move(missing));
            }
            const auto nap = std::min<std::chrono::milliseconds>(
                retry_interval, std::chrono::milliseconds(remaining_ms(deadline)));
            std::this_thread::sleep_for(std::max(nap, std::chrono::milliseconds(1)));
        }
        FdGuard guard(fd);
        result.attempts[ep.stage_id] = attempts;

        bool hit_deadline = false;
        const auto bytes = read_until_eof(fd, deadline, hit_deadline);
        if (hit_deadline) {
            auto missing = missing_from(i);
            throw Timeout("collect_handoff: timed out reading from producer: " + ep.stage_id,
                          static_cast<int>(i), std::move(missing));
        }

        Frame frame;
        try {
            frame = decode_frame(bytes);
        } catch (const DecodeError& e) {
            throw DecodeError(e.kind, "frame from producer " + ep.stage_id + ": " + e.what());
        }
        if (frame.producer_id != ep.stage_id)
            throw Error("expected a frame from " + ep.stage_id + " but the producer id reads " +
                        frame.producer_id);
        result.payloads[frame.producer_id] = std::move(frame.payload);
    }
    return result;
}

}  // namespace pallex::handoff
