#pragma once

#include <atomic>
#include <cinttypes>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <regex>
#include <sstream>
#include <thread>

#include <arpa/inet.h>

#include "fdm/data/dataset_io.hpp"
#include "fdm/federation/artifact.hpp"
#include "fdm/federation/wire.hpp"

namespace fdm::federation {

namespace fs = std::filesystem;

struct IndexEntry {
    std::string metadata;
    std::size_t length = 0;
    std::uint32_t checksum = 0;
    std::uint64_t version = 0;

    friend bool operator==(const IndexEntry&, const IndexEntry&) = default;
};

struct RegistryIndex {
    std::map<std::string, IndexEntry> entries;
    std::uint64_t version = 0;

    friend bool operator==(const RegistryIndex&, const RegistryIndex&) = default;
};

inline bool valid_artifact_name(const std::string& n) {
    static const std::regex re("[A-Za-z0-9_][A-Za-z0-9_.+-]{0,127}");
    return std::regex_match(n, re);
}

inline void require_name(const std::string& n) {
    if (!valid_artifact_name(n)) throw Error("invalid artifact name \"" + n + "\" (letters, digits, '_', '.', '+', '-')");
}

// One line per entry: name, length, crc32 as 8 hex digits, version.
inline std::string format_listing(const RegistryIndex& idx) {
    std::string out;
    char buf[64];
    for (const auto& [name, e] : idx.entries) {
        std::snprintf(buf, sizeof buf, "\t%zu\t%08" PRIx32 "\t%" PRIu64 "\n", e.length, e.checksum, e.version);
        out += name + buf;
    }
    return out;
}

struct ListEntry {
    std::string name;
    std::size_t length = 0;
    std::uint32_t checksum = 0;
    std::uint64_t version = 0;
};

inline std::vector<ListEntry> parse_listing(const std::string& text) {
    std::vector<ListEntry> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream f(line);
        ListEntry e;
        std::string crc;
        if (!(f >> e.name >> e.length >> crc >> e.version)) throw Error("malformed listing line \"" + line + "\"");
        e.checksum = static_cast<std::uint32_t>(std::stoul(crc, nullptr, 16));
        out.push_back(e);
    }
    return out;
}

// Artifacts live in the store as "<name>.<version>.fdma". A commit writes a
// temporary file, renames it into place, then removes the older version.
class ArtifactStore {
public:
    explicit ArtifactStore(fs::path dir) : dir_(std::move(dir)) {
        fs::create_directories(dir_);
        rebuild();
    }

    const fs::path& dir() const { return dir_; }

    RegistryIndex index() const {
        std::lock_guard lk(index_mu_);
        return index_;
    }

    // Scans the store. Stray temporaries are removed; if a crash left two
    // versions of one name, the newer wins.
    void rebuild() {
        RegistryIndex idx;
        std::map<std::string, fs::path> files;
        std::vector<fs::path> paths;
        for (const auto& de : fs::directory_iterator(dir_)) paths.push_back(de.path());
        std::sort(paths.begin(), paths.end());
        for (const auto& path : paths) {
            const std::string fn = path.filename().string();
            if (fn.ends_with(".tmp")) {
                fs::remove(path);
                continue;
            }
            auto parsed = parse_file_name(fn);
            if (!parsed) continue;
            auto [name, version] = *parsed;
            Bytes b = data::read_file(path);
            ArtifactView v;
            try {
                v = parse_artifact(b);
            } catch (const Error&) {
                continue;
            }
            auto it = idx.entries.find(name);
            if (it != idx.entries.end()) {
                if (it->second.version > version) {
                    fs::remove(path);
                    continue;
                }
                fs::remove(files[name]);
            }
            IndexEntry e{v.metadata, b.size(), ArtifactBytes(std::move(b)).checksum(), version};
            idx.entries[name] = e;
            files[name] = path;
            idx.version = std::max(idx.version, version);
        }
        std::lock_guard lk(index_mu_);
        index_ = std::move(idx);
    }

    void commit(const std::string& name, const ArtifactBytes& art) {
        require_name(name);
        auto guard = lock_name(name);
        std::uint64_t version;
        std::optional<std::uint64_t> previous;
        {
            std::lock_guard lk(index_mu_);
            reserved_ = std::max(reserved_, index_.version) + 1;
            version = reserved_;
            if (auto it = index_.entries.find(name); it != index_.entries.end()) previous = it->second.version;
        }
        data::write_file(dir_ / file_name(name, version), art.bytes());
        ArtifactView v = parse_artifact(art.bytes());
        {
            std::lock_guard lk(index_mu_);
            index_.entries[name] = IndexEntry{v.metadata, art.size(), art.checksum(), version};
            index_.version = std::max(index_.version, version);
        }
        if (previous) fs::remove(dir_ / file_name(name, *previous));
    }

    ArtifactBytes read(const std::string& name) const {
        require_name(name);
        auto guard = lock_name(name);
        std::uint64_t version;
        {
            std::lock_guard lk(index_mu_);
            auto it = index_.entries.find(name);
            if (it == index_.entries.end()) throw NotFoundError("artifact \"" + name + "\" not found");
            version = it->second.version;
        }
        return ArtifactBytes(data::read_file(dir_ / file_name(name, version)));
    }

    static std::string file_name(const std::string& name, std::uint64_t version) {
        char buf[32];
        std::snprintf(buf, sizeof buf, ".%012" PRIu64 ".fdma", version);
        return name + buf;
    }

    static std::optional<std::pair<std::string, std::uint64_t>> parse_file_name(const std::string& fn) {
        static const std::regex re("(.+)\\.([0-9]{12})\\.fdma");
        std::smatch m;
        if (!std::regex_match(fn, m, re) || !valid_artifact_name(m[1])) return std::nullopt;
        return std::pair{m[1].str(), std::stoull(m[2].str())};
    }

private:
    std::unique_lock<std::mutex> lock_name(const std::string& name) const {
        std::shared_ptr<std::mutex> mu;
        {
            std::lock_guard lk(names_mu_);
            auto& slot = name_mu_[name];
            if (!slot) slot = std::make_shared<std::mutex>();
            mu = slot;
        }
        return std::unique_lock(*mu);
    }

    fs::path dir_;
    mutable std::mutex index_mu_;
    RegistryIndex index_;
    std::uint64_t reserved_ = 0;
    mutable std::mutex names_mu_;
    mutable std::map<std::string, std::shared_ptr<std::mutex>> name_mu_;
};

// TCP registry: one thread per connection, any number of request/response
// rounds per connection.
class RegistryServer {
public:
    RegistryServer(const fs::path& store_dir, const std::string& address) : store_(store_dir) {
        auto [host, port] = split_address(address);
        addrinfo hints{};
        hints.ai_family = AF_UNSPEC;
        hints.ai_socktype = SOCK_STREAM;
        hints.ai_flags = AI_PASSIVE;
        addrinfo* res = nullptr;
        if (int rc = ::getaddrinfo(host.empty() ? nullptr : host.c_str(), port.c_str(), &hints, &res); rc != 0) {
            throw Error("cannot resolve listen address " + address + ": " + ::gai_strerror(rc));
        }
        std::string last = "no addresses";
        for (addrinfo* ai = res; ai && !listener_.valid(); ai = ai->ai_next) {
            Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
            if (!s.valid()) continue;
            int one = 1;
            ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
            if (::bind(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(s.fd(), 64) == 0) {
                listener_ = std::move(s);
            } else {
                last = std::strerror(errno);
            }
        }
        ::freeaddrinfo(res);
        if (!listener_.valid()) throw Error("cannot listen on " + address + ": " + last);

        sockaddr_storage ss{};
        socklen_t len = sizeof ss;
        ::getsockname(listener_.fd(), reinterpret_cast<sockaddr*>(&ss), &len);
        char hostbuf[NI_MAXHOST], portbuf[NI_MAXSERV];
        ::getnameinfo(reinterpret_cast<sockaddr*>(&ss), len, hostbuf, sizeof hostbuf, portbuf, sizeof portbuf,
                      NI_NUMERICHOST | NI_NUMERICSERV);
        port_ = static_cast<std::uint16_t>(std::stoi(portbuf));
        address_ = (ss.ss_family == AF_INET6 ? "[" + std::string(hostbuf) + "]" : std::string(hostbuf)) + ":" + portbuf;
        if (host.empty() || host == "0.0.0.0") address_ = "127.0.0.1:" + std::string(portbuf);
        acceptor_ = std::thread([this] { accept_loop(); });
    }

    RegistryServer(const RegistryServer&) = delete;
    RegistryServer& operator=(const RegistryServer&) = delete;
    ~RegistryServer() { stop(); }

    // Address clients can connect to.
    const std::string& address() const { return address_; }
    std::uint16_t port() const { return port_; }
    RegistryIndex index() const { return store_.index(); }

    void stop() {
        if (stopping_.exchange(true)) return;
        ::shutdown(listener_.fd(), SHUT_RDWR);
        if (acceptor_.joinable()) acceptor_.join();
        std::list<Connection> conns;
        {
            std::lock_guard lk(conn_mu_);
            for (auto& c : conns_) ::shutdown(c.fd, SHUT_RDWR);
            conns.splice(conns.end(), conns_);
        }
        for (auto& c : conns) c.thread.join();
        listener_.close();
    }

private:
    struct Connection {
        int fd;
        std::thread thread;
        std::atomic<bool> done{false};
    };

    void accept_loop() {
        while (!stopping_) {
            int fd = ::accept(listener_.fd(), nullptr, nullptr);
            if (fd < 0) {
                if (errno == EINTR || errno == ECONNABORTED) continue;
                return;
            }
            std::lock_guard lk(conn_mu_);
            reap();
            if (stopping_) {
                ::close(fd);
                return;
            }
            auto& c = conns_.emplace_back();
            c.fd = fd;
            c.thread = std::thread([this, &c] {
                serve(c.fd);
                c.done = true;
            });
        }
    }

    void reap() {
        for (auto it = conns_.begin(); it != conns_.end();) {
            if (it->done) {
                it->thread.join();
                it = conns_.erase(it);
            } else {
                ++it;
            }
        }
    }

    static void reply_error(int fd, const std::string& msg) {
        write_frame(fd, MsgType::err, std::span(reinterpret_cast<const std::uint8_t*>(msg.data()), msg.size()));
    }

    void serve(int fd) {
        Socket sock(fd);
        try {
            while (auto f = read_frame(fd)) {
                handle(fd, *f);
            }
        } catch (const std::exception&) {
            // A broken or malformed connection is dropped without touching the store.
        }
    }

    void handle(int fd, const Frame& f) {
        try {
            switch (f.type) {
            case MsgType::push: {
                auto [name, body] = split_name_payload(f.payload);
                require_name(name);
                ArtifactBytes art(Bytes(body.begin(), body.end()));
                store_.commit(name, art);
                write_frame(fd, MsgType::ok, {});
                return;
            }
            case MsgType::pull: {
                auto [name, rest] = split_name_payload(f.payload);
                if (!rest.empty()) throw Error("pull request carries trailing bytes");
                ArtifactBytes art = store_.read(name);
                write_frame(fd, MsgType::data, art.bytes());
                return;
            }
            case MsgType::list: {
                const std::string text = format_listing(store_.index());
                write_frame(fd, MsgType::data, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
                return;
            }
            default:
                reply_error(fd, "unexpected message type " + std::to_string(static_cast<int>(f.type)));
            }
        } catch (const NotFoundError& e) {
            reply_error(fd, std::string("not found: ") + e.what());
        } catch (const TransferError&) {
            throw;
        } catch (const Error& e) {
            reply_error(fd, e.what());
        }
    }

    ArtifactStore store_;
    Socket listener_;
    std::string address_;
    std::uint16_t port_ = 0;
    std::thread acceptor_;
    std::atomic<bool> stopping_{false};
    std::mutex conn_mu_;
    std::list<Connection> conns_;
};

namespace detail {

inline Frame round_trip(const std::string& address, MsgType type, std::span<const std::uint8_t> payload) {
    Socket s = connect_to(address);
    write_frame(s.fd(), type, payload);
    auto f = read_frame(s.fd());
    if (!f) throw TransferError("registry closed the connection without a response");
    if (f->type == MsgType::err) {
        std::string msg(f->payload.begin(), f->payload.end());
        if (msg.rfind("not found: ", 0) == 0) throw NotFoundError(msg.substr(11));
        throw TransferError("registry error: " + msg);
    }
    return std::move(*f);
}

} // namespace detail

// Blocking client calls; each opens its own connection.
inline void push_artifact(const std::string& address, const std::string& name, const ArtifactBytes& art) {
    require_name(name);
    Frame f = detail::round_trip(address, MsgType::push, name_payload(name, art.bytes()));
    if (f.type != MsgType::ok) throw TransferError("unexpected response to push");
}

inline ArtifactBytes pull_artifact(const std::string& address, const std::string& name) {
    require_name(name);
    Frame f = detail::round_trip(address, MsgType::pull, name_payload(name));
    if (f.type != MsgType::data) throw TransferError("unexpected response to pull");
    try {
        return ArtifactBytes(std::move(f.payload));
    } catch (const FormatError& e) {
        throw TransferError(std::string("pulled artifact failed verification: ") + e.what());
    }
}

inline std::vector<ListEntry> list_artifacts(const std::string& address) {
    Frame f = detail::round_trip(address, MsgType::list, {});
    if (f.type != MsgType::data) throw TransferError("unexpected response to list");
    return parse_listing(std::string(f.payload.begin(), f.payload.end()));
}

// Cross-site channels. Both accept and return ArtifactBytes only.
class RegistryChannel {
public:
    explicit RegistryChannel(std::string address) : address_(std::move(address)) {}
    void push(const std::string& name, const ArtifactBytes& art) const { push_artifact(address_, name, art); }
    ArtifactBytes pull(const std::string& name) const { return pull_artifact(address_, name); }
    std::vector<ListEntry> list() const { return list_artifacts(address_); }
    const std::string& address() const { return address_; }

private:
    std::string address_;
};

// Shared directory standing in for the registry when no service is configured.
class FileDrop {
public:
    explicit FileDrop(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

    void push(const std::string& name, const ArtifactBytes& art) const {
        require_name(name);
        data::write_file(dir_ / (name + kArtifactExtension), art.bytes());
    }

    ArtifactBytes pull(const std::string& name) const {
        require_name(name);
        const fs::path p = dir_ / (name + kArtifactExtension);
        if (!fs::exists(p)) throw NotFoundError("artifact \"" + name + "\" not found in " + dir_.string());
        try {
            return ArtifactBytes(data::read_file(p));
        } catch (const FormatError& e) {
            throw TransferError(std::string("dropped artifact failed verification: ") + e.what());
        }
    }

    std::vector<ListEntry> list() const {
        std::vector<ListEntry> out;
        for (const auto& de : fs::directory_iterator(dir_)) {
            if (de.path().extension() != kArtifactExtension) continue;
            Bytes b = data::read_file(de.path());
            ListEntry e{de.path().stem().string(), b.size(), 0, 0};
            try {
                e.checksum = ArtifactBytes(std::move(b)).checksum();
            } catch (const Error&) {
                continue;
            }
            out.push_back(e);
        }
        std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
        return out;
    }

    const fs::path& dir() const { return dir_; }

private:
    fs::path dir_;
};

} // namespace fdm::federation
