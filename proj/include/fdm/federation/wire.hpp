#pragma once

#include <cerrno>
#include <cstring>
#include <string>
#include <utility>

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include "fdm/bytes.hpp"

// Framed messages: "FDM1", u8 type, u32 LE payload length, payload.
namespace fdm::federation {

inline constexpr char kWireMagic[] = "FDM1";
inline constexpr std::size_t kFrameHeader = 9;
inline constexpr std::uint32_t kMaxFrame = 256u << 20;

enum class MsgType : std::uint8_t { push = 1, pull = 2, list = 3, ok = 129, err = 130, data = 131 };

class TransferError : public Error {
public:
    using Error::Error;
};

// Owns a socket descriptor.
class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Socket& operator=(Socket&& o) noexcept {
        if (this != &o) {
            close();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    ~Socket() { close(); }

    int fd() const { return fd_; }
    bool valid() const { return fd_ >= 0; }
    void close() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

private:
    int fd_ = -1;
};

inline void send_all(int fd, const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    while (n > 0) {
        const ssize_t k = ::send(fd, p, n, MSG_NOSIGNAL);
        if (k < 0 && errno == EINTR) continue;
        if (k <= 0) throw TransferError(std::string("send failed: ") + std::strerror(errno));
        p += k;
        n -= static_cast<std::size_t>(k);
    }
}

// Returns false on clean EOF before the first byte; throws on EOF mid-read.
inline bool recv_all(int fd, void* data, std::size_t n) {
    auto* p = static_cast<std::uint8_t*>(data);
    std::size_t got = 0;
    while (got < n) {
        const ssize_t k = ::recv(fd, p + got, n - got, 0);
        if (k < 0 && errno == EINTR) continue;
        if (k < 0) throw TransferError(std::string("recv failed: ") + std::strerror(errno));
        if (k == 0) {
            if (got == 0) return false;
            throw TransferError("connection closed after " + std::to_string(got) + " of " + std::to_string(n) + " bytes");
        }
        got += static_cast<std::size_t>(k);
    }
    return true;
}

inline Bytes frame_header(MsgType type, std::uint32_t len) {
    ByteWriter w;
    w.magic(kWireMagic);
    w.u8(static_cast<std::uint8_t>(type));
    w.u32(len);
    return w.take();
}

inline void write_frame(int fd, MsgType type, std::span<const std::uint8_t> payload) {
    if (payload.size() > kMaxFrame) throw TransferError("frame too large");
    Bytes h = frame_header(type, static_cast<std::uint32_t>(payload.size()));
    send_all(fd, h.data(), h.size());
    if (!payload.empty()) send_all(fd, payload.data(), payload.size());
}

struct Frame {
    MsgType type;
    Bytes payload;
};

// std::nullopt on clean EOF between frames.
inline std::optional<Frame> read_frame(int fd) {
    std::uint8_t h[kFrameHeader];
    if (!recv_all(fd, h, kFrameHeader)) return std::nullopt;
    ByteReader r(std::span<const std::uint8_t>(h, kFrameHeader));
    r.expect_magic(kWireMagic);
    const std::uint8_t type = r.u8();
    const std::uint32_t len = r.u32();
    if (len > kMaxFrame) throw TransferError("frame length " + std::to_string(len) + " exceeds limit");
    switch (type) {
    case 1: case 2: case 3: case 129: case 130: case 131: break;
    default: throw TransferError("unknown message type " + std::to_string(type));
    }
    Frame f{static_cast<MsgType>(type), Bytes(len)};
    if (len && !recv_all(fd, f.payload.data(), len)) throw TransferError("connection closed before payload");
    return f;
}

inline Bytes name_payload(const std::string& name, std::span<const std::uint8_t> rest = {}) {
    if (name.size() > UINT16_MAX) throw Error("artifact name too long");
    ByteWriter w;
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name.data(), name.size());
    w.bytes(rest);
    return w.take();
}

inline std::pair<std::string, std::span<const std::uint8_t>> split_name_payload(std::span<const std::uint8_t> p) {
    ByteReader r(p);
    const std::uint16_t n = r.u16();
    std::string name = r.string(n);
    return {std::move(name), p.subspan(r.offset())};
}

// "host:port"; an empty host means all interfaces when listening.
inline std::pair<std::string, std::string> split_address(const std::string& addr) {
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos) throw Error("address must be host:port, got \"" + addr + "\"");
    return {addr.substr(0, colon), addr.substr(colon + 1)};
}

inline Socket connect_to(const std::string& addr) {
    auto [host, port] = split_address(addr);
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (int rc = ::getaddrinfo(host.empty() ? "127.0.0.1" : host.c_str(), port.c_str(), &hints, &res); rc != 0) {
        throw TransferError("cannot resolve " + addr + ": " + ::gai_strerror(rc));
    }
    std::string last = "no addresses";
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
        Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
        if (!s.valid()) continue;
        if (::connect(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0) {
            ::freeaddrinfo(res);
            int one = 1;
            ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            return s;
        }
        last = std::strerror(errno);
    }
    ::freeaddrinfo(res);
    throw TransferError("cannot connect to " + addr + ": " + last);
}

} // namespace fdm::federation
