#pragma once

// TCP transport: a poll()-driven coordinator server and a blocking client.

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "fedwrap/client_agent.hpp"
#include "fedwrap/coordinator.hpp"
#include "fedwrap/protocol.hpp"

namespace fedwrap {

/// "ip:port" or "host:port".
inline Endpoint parse_endpoint(const std::string& s) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos || colon == 0)
        throw ConfigError("address '" + s + "' is not of the form ip:port");
    Endpoint e;
    e.ip = s.substr(0, colon);
    const auto port = std::strtoul(s.c_str() + colon + 1, nullptr, 10);
    if (port > 65535 || s.size() == colon + 1)
        throw ConfigError("address '" + s + "' has an invalid port");
    e.port = static_cast<std::uint16_t>(port);
    return e;
}

inline std::string to_string(const Endpoint& e) { return e.ip + ":" + std::to_string(e.port); }

namespace detail {

class Fd {
public:
    Fd() = default;
    explicit Fd(int fd) : fd_(fd) {}
    Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Fd& operator=(Fd&& o) noexcept {
        if (this != &o) {
            reset();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;
    ~Fd() { reset(); }

    int get() const { return fd_; }
    explicit operator bool() const { return fd_ >= 0; }
    void reset() {
        if (fd_ >= 0)
            ::close(fd_);
        fd_ = -1;
    }

private:
    int fd_ = -1;
};

inline void set_nonblocking(int fd) { ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL, 0) | O_NONBLOCK); }

inline void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

inline addrinfo* resolve(const Endpoint& ep, bool passive) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = passive ? AI_PASSIVE : 0;
    addrinfo* res = nullptr;
    const auto port = std::to_string(ep.port);
    const int rc = ::getaddrinfo(ep.ip.empty() ? nullptr : ep.ip.c_str(), port.c_str(), &hints, &res);
    if (rc != 0)
        throw ConnectError("cannot resolve '" + to_string(ep) + "': " + ::gai_strerror(rc));
    return res;
}

inline std::string errno_text() { return std::strerror(errno); }

using steady = std::chrono::steady_clock;

inline double ms_since(steady::time_point t) {
    return std::chrono::duration<double, std::milli>(steady::now() - t).count();
}

} // namespace detail

struct ServeOptions {
    /// How long to wait for the full roster to register.
    std::uint64_t startup_timeout_ms = 30000;
    /// Set from a signal handler to stop the server; clients receive an Error.
    const std::atomic<bool>* stop = nullptr;
    /// Fault injection: drop every connection right after RoundStart(n) is flushed.
    std::size_t drop_connections_at_round = 0;
    std::size_t max_frame = kDefaultMaxFrame;
    Coordinator::RoundHook round_hook;
};

class Server {
public:
    Server(FederationPlan plan, std::string token, ServeOptions opt = {})
        : plan_(std::move(plan)), token_(std::move(token)), opt_(std::move(opt)) {
        plan_.validate();
    }

    /// Binds and listens; returns the bound port (useful with port 0).
    std::uint16_t bind(const Endpoint& ep) {
        addrinfo* ai = detail::resolve(ep, true);
        detail::Fd fd(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
        if (!fd) {
            ::freeaddrinfo(ai);
            throw TransportError("socket: " + detail::errno_text(), false);
        }
        int one = 1;
        ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        const int rc = ::bind(fd.get(), ai->ai_addr, ai->ai_addrlen);
        ::freeaddrinfo(ai);
        if (rc != 0)
            throw ConnectError("cannot bind " + to_string(ep) + ": " + detail::errno_text());
        if (::listen(fd.get(), 64) != 0)
            throw TransportError("listen: " + detail::errno_text(), false);
        detail::set_nonblocking(fd.get());
        sockaddr_in addr{};
        socklen_t len = sizeof(addr);
        ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&addr), &len);
        listen_ = std::move(fd);
        return ntohs(addr.sin_port);
    }

    /// Runs the federation to completion. Throws FederationError on startup failure or a
    /// failed federation, RoundTimeout when a round's barrier times out, Interrupted on stop.
    CoordinatorResult run() {
        if (!listen_)
            throw TransportError("server is not bound", false);
        const auto t0 = detail::steady::now();
        Coordinator coord(
            plan_, token_,
            [t0] { return detail::ms_since(t0); }, opt_.round_hook);

        auto phase_start = t0;
        ServerPhase last_phase = coord.phase();
        std::size_t last_round = 0;
        bool dropping = false;

        for (;;) {
            if (opt_.stop && opt_.stop->load()) {
                route(coord.fail("server interrupted"));
                flush_all(2000);
                throw Interrupted("server interrupted");
            }

            // Timeouts for the current phase.
            if (coord.phase() != last_phase || coord.round() != last_round) {
                last_phase = coord.phase();
                last_round = coord.round();
                phase_start = detail::steady::now();
            }
            const double budget = coord.phase() == ServerPhase::AwaitingRoster
                                      ? static_cast<double>(opt_.startup_timeout_ms)
                                      : static_cast<double>(plan_.timeout_ms);
            const double elapsed = detail::ms_since(phase_start);
            if (!coord.finished() && elapsed > budget)
                timeout(coord);

            if (coord.finished() && all_flushed()) {
                conns_.clear();
                auto res = coord.result();
                if (res.phase == ServerPhase::Failed)
                    throw FederationError(res.error);
                return res;
            }
            if (dropping && all_flushed()) {
                conns_.clear();
                throw TransportError("fault injection: dropped all connections at round " +
                                         std::to_string(opt_.drop_connections_at_round),
                                     false);
            }

            std::vector<pollfd> fds{{listen_.get(), POLLIN, 0}};
            std::vector<ConnId> ids;
            for (auto& [id, c] : conns_) {
                short ev = POLLIN;
                if (!c.out.empty())
                    ev |= POLLOUT;
                fds.push_back({c.fd.get(), ev, 0});
                ids.push_back(id);
            }
            const int wait = static_cast<int>(std::clamp(budget - elapsed, 1.0, 100.0));
            if (::poll(fds.data(), fds.size(), wait) < 0 && errno != EINTR)
                throw TransportError("poll: " + detail::errno_text(), false);

            if (fds[0].revents & POLLIN)
                accept_all();
            for (std::size_t i = 1; i < fds.size(); ++i) {
                auto it = conns_.find(ids[i - 1]);
                if (it == conns_.end())
                    continue;
                if (fds[i].revents & (POLLIN | POLLHUP | POLLERR))
                    read_from(coord, it->first);
                it = conns_.find(ids[i - 1]);
                if (it != conns_.end() && (fds[i].revents & POLLOUT))
                    write_to(coord, it->first);
            }
            reap_closed(coord);

            if (opt_.drop_connections_at_round && !dropping &&
                coord.phase() == ServerPhase::RoundOpen &&
                coord.round() == opt_.drop_connections_at_round)
                dropping = true;
        }
    }

private:
    struct Conn {
        detail::Fd fd;
        FrameReader reader;
        std::string out;
        bool close_after_flush = false;
        bool dead = false;
    };

    void accept_all() {
        for (;;) {
            const int fd = ::accept(listen_.get(), nullptr, nullptr);
            if (fd < 0)
                return;
            detail::set_nonblocking(fd);
            detail::set_nodelay(fd);
            Conn c{detail::Fd(fd), FrameReader(opt_.max_frame), {}, false, false};
            conns_.emplace(next_id_++, std::move(c));
        }
    }

    void route(const std::vector<Outgoing>& outs) {
        for (const auto& o : outs) {
            auto it = conns_.find(o.to);
            if (it == conns_.end() || it->second.dead)
                continue;
            it->second.out += encode(o.msg);
            if (o.close)
                it->second.close_after_flush = true;
        }
    }

    void read_from(Coordinator& coord, ConnId id) {
        auto& c = conns_.at(id);
        char buf[65536];
        for (;;) {
            const auto n = ::recv(c.fd.get(), buf, sizeof(buf), 0);
            if (n > 0) {
                c.reader.feed(std::string_view(buf, static_cast<std::size_t>(n)));
                continue;
            }
            if (n == 0 || (errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR))
                c.dead = true;
            break;
        }
        // Frames that arrived before a hang-up are still processed.
        while (!c.close_after_flush) {
            std::optional<Message> msg;
            try {
                msg = c.reader.next();
            } catch (const ProtocolError& e) {
                route(coord.on_frame_error(id, e.what()));
                c.close_after_flush = true; // the stream cannot be resynchronized
                break;
            }
            if (!msg)
                break;
            route(coord.on_message(id, *msg));
        }
    }

    void write_to(Coordinator&, ConnId id) {
        auto& c = conns_.at(id);
        while (!c.out.empty()) {
            const auto n = ::send(c.fd.get(), c.out.data(), c.out.size(), MSG_NOSIGNAL);
            if (n > 0) {
                c.out.erase(0, static_cast<std::size_t>(n));
                continue;
            }
            if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR))
                return;
            c.dead = true;
            return;
        }
    }

    void reap_closed(Coordinator& coord) {
        for (auto it = conns_.begin(); it != conns_.end();) {
            auto& c = it->second;
            if (c.dead || (c.close_after_flush && c.out.empty())) {
                const ConnId id = it->first;
                it = conns_.erase(it);
                route(coord.on_disconnect(id));
            } else {
                ++it;
            }
        }
    }

    bool all_flushed() const {
        for (const auto& [id, c] : conns_)
            if (!c.dead && !c.out.empty())
                return false;
        return true;
    }

    /// Best-effort blocking flush used on the way out.
    void flush_all(int budget_ms) {
        const auto t0 = detail::steady::now();
        while (!all_flushed() && detail::ms_since(t0) < budget_ms) {
            std::vector<pollfd> fds;
            std::vector<ConnId> ids;
            for (auto& [id, c] : conns_)
                if (!c.dead && !c.out.empty()) {
                    fds.push_back({c.fd.get(), POLLOUT, 0});
                    ids.push_back(id);
                }
            ::poll(fds.data(), fds.size(), 50);
            for (std::size_t i = 0; i < fds.size(); ++i)
                if (fds[i].revents & (POLLOUT | POLLERR | POLLHUP)) {
                    auto& c = conns_.at(ids[i]);
                    const auto n = ::send(c.fd.get(), c.out.data(), c.out.size(), MSG_NOSIGNAL);
                    if (n > 0)
                        c.out.erase(0, static_cast<std::size_t>(n));
                    else if (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR)
                        c.dead = true;
                }
        }
        conns_.clear();
    }

    [[noreturn]] void timeout(Coordinator& coord) {
        if (coord.phase() == ServerPhase::AwaitingRoster) {
            const auto msg = "startup failed: roster incomplete after " +
                             std::to_string(opt_.startup_timeout_ms) + " ms, missing: " +
                             join_ids(coord.missing_registrations());
            route(coord.fail(msg));
            flush_all(2000);
            throw FederationError(msg);
        }
        std::string msg;
        if (coord.phase() == ServerPhase::RoundOpen)
            msg = "round " + std::to_string(coord.round()) + " timed out waiting for: " +
                  join_ids(coord.missing_updates());
        else
            msg = "model exchange timed out waiting for: " + join_ids(coord.missing_acks());
        route(coord.fail(msg));
        flush_all(2000);
        throw RoundTimeout(msg);
    }

    FederationPlan plan_;
    std::string token_;
    ServeOptions opt_;
    detail::Fd listen_;
    std::map<ConnId, Conn> conns_;
    ConnId next_id_ = 1;
};

struct JoinOptions {
    std::uint64_t connect_timeout_ms = 10000;
    /// Longest silence tolerated from the server while waiting for the next message.
    std::uint64_t io_timeout_ms = 600000;
    std::size_t max_frame = kDefaultMaxFrame;
};

namespace detail {

inline Fd connect_with_retry(const Endpoint& ep, std::uint64_t timeout_ms) {
    const auto t0 = steady::now();
    std::string last = "timed out";
    for (;;) {
        addrinfo* ai = resolve(ep, false);
        Fd fd(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
        int rc = -1;
        if (fd) {
            set_nonblocking(fd.get());
            rc = ::connect(fd.get(), ai->ai_addr, ai->ai_addrlen);
            if (rc != 0 && errno == EINPROGRESS) {
                pollfd p{fd.get(), POLLOUT, 0};
                const double left = static_cast<double>(timeout_ms) - ms_since(t0);
                if (::poll(&p, 1, static_cast<int>(std::max(1.0, left))) == 1) {
                    int err = 0;
                    socklen_t len = sizeof(err);
                    ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
                    rc = err == 0 ? 0 : -1;
                    errno = err;
                } else {
                    errno = ETIMEDOUT;
                }
            }
        }
        ::freeaddrinfo(ai);
        if (rc == 0) {
            ::fcntl(fd.get(), F_SETFL, ::fcntl(fd.get(), F_GETFL, 0) & ~O_NONBLOCK);
            set_nodelay(fd.get());
            return fd;
        }
        last = errno_text();
        if (ms_since(t0) >= static_cast<double>(timeout_ms))
            throw ConnectError("cannot reach server at " + to_string(ep) + " within " +
                                 std::to_string(timeout_ms) + " ms: " + last);
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
}

inline void send_all(int fd, const std::string& bytes) {
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
        if (n < 0 && errno == EINTR)
            continue;
        if (n <= 0)
            throw TransportError("send failed: " + errno_text());
        off += static_cast<std::size_t>(n);
    }
}

inline std::string session_stage(const ClientAgent& a) {
    switch (a.phase()) {
    case ClientPhase::Unregistered: return "registration";
    case ClientPhase::Sharing: return "model exchange";
    default: return "round " + std::to_string(std::max<std::size_t>(a.round(), 1));
    }
}

} // namespace detail

/// Registers with the server, takes part in every round and returns the trained state.
/// Connection loss raises a retriable TransportError naming the round; server errors and
/// protocol violations raise FederationError / ProtocolError.
inline WrapperState join(const WrapperConfig& cfg, WrapperMode mode, const JoinOptions& opt = {}) {
    ClientAgent agent(cfg, mode);
    auto fd = detail::connect_with_retry(cfg.server_addr, opt.connect_timeout_ms);
    FrameReader reader(opt.max_frame);

    auto send = [&](const Message& m) {
        try {
            detail::send_all(fd.get(), encode(m));
        } catch (const TransportError&) {
            agent.abort();
            throw TransportError("connection lost during " + detail::session_stage(agent));
        }
    };
    auto report = [&](const std::string& what) {
        try {
            detail::send_all(fd.get(), encode(make_error(cfg.client_id, what, cfg.token)));
        } catch (...) {
        }
    };

    send(agent.hello());
    char buf[65536];
    while (!agent.finished()) {
        std::optional<Message> msg;
        try {
            msg = reader.next();
        } catch (const ProtocolError& e) {
            agent.abort();
            report(e.what());
            throw;
        }
        if (msg) {
            std::vector<Message> replies;
            try {
                replies = agent.on_message(*msg);
            } catch (const FederationError&) {
                throw;
            } catch (const Error& e) {
                report(e.what());
                throw;
            }
            for (const auto& r : replies)
                send(r);
            continue;
        }
        pollfd p{fd.get(), POLLIN, 0};
        const int rc = ::poll(&p, 1, static_cast<int>(std::min<std::uint64_t>(opt.io_timeout_ms, 1u << 30)));
        if (rc == 0) {
            agent.abort();
            throw TransportError("no message from the server for " + std::to_string(opt.io_timeout_ms) +
                                 " ms during " + detail::session_stage(agent));
        }
        if (rc < 0) {
            if (errno == EINTR)
                continue;
            agent.abort();
            throw TransportError("poll failed during " + detail::session_stage(agent));
        }
        const auto n = ::recv(fd.get(), buf, sizeof(buf), 0);
        if (n > 0) {
            reader.feed(std::string_view(buf, static_cast<std::size_t>(n)));
            continue;
        }
        if (n < 0 && errno == EINTR)
            continue;
        agent.abort();
        throw TransportError("connection lost during " + detail::session_stage(agent));
    }
    return agent.take_state();
}

} // namespace fedwrap
