#pragma once

// Server-side protocol state machine. Pure: it consumes (connection, message) events and
// returns the frames to send; sockets and the in-memory simulator both drive it.

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fedwrap/error.hpp"
#include "fedwrap/federation.hpp"
#include "fedwrap/model_io.hpp"
#include "fedwrap/protocol.hpp"
#include "fedwrap/rng.hpp"

namespace fedwrap {

using ConnId = std::uint64_t;

struct Outgoing {
    ConnId to = 0;
    Message msg;
    bool close = false; // close the connection once this frame is flushed
};

enum class ServerPhase { AwaitingRoster, RoundOpen, Sharing, Done, Failed };

inline std::string to_string(ServerPhase p) {
    switch (p) {
    case ServerPhase::AwaitingRoster: return "AwaitingRoster";
    case ServerPhase::RoundOpen: return "RoundOpen";
    case ServerPhase::Sharing: return "Sharing";
    case ServerPhase::Done: return "Done";
    case ServerPhase::Failed: return "Failed";
    }
    return "?";
}

struct CoordinatorResult {
    ServerPhase phase = ServerPhase::AwaitingRoster;
    std::optional<ModelSpec> translator;
    Params final_params;
    std::vector<RoundLogRow> log;
    std::string error;
};

/// Seed stream for the server's initial translator.
inline std::uint64_t translator_init_seed(const FederationPlan& plan) {
    return derive_seed(plan.hp.seed, 0x7472616e); // "tran"
}

class Coordinator {
public:
    /// Milliseconds of training time so far; used for the round log.
    using Clock = std::function<double()>;
    /// Called after each aggregation; the returned value is logged as test accuracy.
    using RoundHook = std::function<std::optional<double>(std::size_t round, const Params& global)>;

    /// A translator spec with in_dim = 0 is adopted from the first registering client;
    /// kind and hidden_dim must still match the plan.
    Coordinator(FederationPlan plan, std::string token, Clock clock = {}, RoundHook hook = {})
        : plan_(std::move(plan)), token_(std::move(token)), clock_(std::move(clock)),
          hook_(std::move(hook)) {
        plan_.validate();
        if (!clock_) {
            const auto t0 = std::chrono::steady_clock::now();
            clock_ = [t0] {
                return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
            };
        }
        if (plan_.mode == WrapperMode::Stacking && plan_.translator_spec.in_dim > 0) {
            plan_.translator_spec.validate();
            spec_ = plan_.translator_spec;
        }
    }

    ServerPhase phase() const { return phase_; }
    bool finished() const { return phase_ == ServerPhase::Done || phase_ == ServerPhase::Failed; }
    std::size_t round() const { return loop_ ? loop_->round() : 0; }
    const FederationPlan& plan() const { return plan_; }

    CoordinatorResult result() const {
        CoordinatorResult r;
        r.phase = phase_;
        r.translator = spec_;
        r.error = error_;
        if (loop_) {
            r.final_params = loop_->global();
            r.log = loop_->log();
        }
        return r;
    }

    std::vector<std::string> missing_registrations() const {
        std::vector<std::string> out;
        for (const auto& id : plan_.expected_clients)
            if (!by_id_.count(id))
                out.push_back(id);
        return out;
    }

    std::vector<std::string> missing_updates() const {
        return loop_ && phase_ == ServerPhase::RoundOpen ? loop_->missing() : std::vector<std::string>{};
    }

    std::vector<std::string> missing_acks() const {
        std::vector<std::string> out;
        for (const auto& id : plan_.expected_clients)
            if (!acked_.count(id))
                out.push_back(id);
        return out;
    }

    std::vector<Outgoing> on_message(ConnId conn, const Message& msg) {
        std::vector<Outgoing> out;
        if (finished()) {
            out.push_back({conn, make_error("server", "federation is over"), true});
            return out;
        }
        if (msg.token != token_) {
            out.push_back({conn, make_error("server", "bad token"), true});
            return out;
        }
        try {
            dispatch(conn, msg, out);
        } catch (const Error& e) {
            violation(conn, e.what(), out);
        } catch (const nlohmann::json::exception& e) {
            violation(conn, std::string("malformed payload: ") + e.what(), out);
        }
        return out;
    }

    /// A frame from `conn` could not be decoded.
    std::vector<Outgoing> on_frame_error(ConnId conn, const std::string& what) {
        std::vector<Outgoing> out;
        violation(conn, what, out);
        return out;
    }

    std::vector<Outgoing> on_disconnect(ConnId conn) {
        std::vector<Outgoing> out;
        auto it = by_conn_.find(conn);
        if (it == by_conn_.end())
            return out;
        const std::string id = it->second;
        by_conn_.erase(it);
        by_id_.erase(id);
        if (phase_ == ServerPhase::AwaitingRoster || finished())
            return out;
        fail("client '" + id + "' disconnected" + where(), out);
        return out;
    }

    /// Aborts the federation: every registered client gets an Error and is closed.
    std::vector<Outgoing> fail(const std::string& reason) {
        std::vector<Outgoing> out;
        if (!finished())
            fail(reason, out);
        return out;
    }

private:
    std::string where() const {
        if (phase_ == ServerPhase::RoundOpen && loop_)
            return " during round " + std::to_string(loop_->round());
        if (phase_ == ServerPhase::Sharing)
            return " during model exchange";
        return "";
    }

    void fail(const std::string& reason, std::vector<Outgoing>& out) {
        phase_ = ServerPhase::Failed;
        error_ = reason;
        for (const auto& [id, c] : by_id_)
            out.push_back({c, make_error("server", reason, token_), true});
    }

    void violation(ConnId conn, const std::string& what, std::vector<Outgoing>& out) {
        auto it = by_conn_.find(conn);
        if (it != by_conn_.end() && !finished()) {
            fail("protocol violation by client '" + it->second + "': " + what, out);
            return;
        }
        out.push_back({conn, make_error("server", what), true});
    }

    void broadcast(const Message& m, std::vector<Outgoing>& out, bool close = false) {
        for (const auto& [id, c] : by_id_)
            out.push_back({c, m, close});
    }

    const std::string& registered_id(ConnId conn, const Message& msg) const {
        auto it = by_conn_.find(conn);
        if (it == by_conn_.end())
            throw ProtocolError(to_string(msg.kind) + " from an unregistered connection");
        if (msg.sender != it->second)
            throw ProtocolError("sender '" + msg.sender + "' does not match registered id '" +
                                it->second + "'");
        return it->second;
    }

    void require_phase(ServerPhase p, const Message& msg) const {
        if (phase_ != p)
            throw ProtocolError("unexpected " + to_string(msg.kind) + " in server phase " +
                                to_string(phase_));
    }

    void dispatch(ConnId conn, const Message& msg, std::vector<Outgoing>& out) {
        switch (msg.kind) {
        case MsgKind::Register: return on_register(conn, msg, out);
        case MsgKind::Update: return on_update(conn, msg, out);
        case MsgKind::ModelShare: return on_share(conn, msg, out);
        case MsgKind::ModelShareAck: return on_ack(conn, msg, out);
        case MsgKind::Error: {
            const auto& id = registered_id(conn, msg);
            fail("client '" + id + "' reported: " + error_text(msg), out);
            return;
        }
        default:
            throw ProtocolError("clients may not send " + to_string(msg.kind));
        }
    }

    void on_register(ConnId conn, const Message& msg, std::vector<Outgoing>& out) {
        if (by_conn_.count(conn))
            throw ProtocolError("connection already registered");
        if (phase_ != ServerPhase::AwaitingRoster) {
            out.push_back({conn, make_error("server", "registration is closed"), true});
            return;
        }
        if (!plan_.expected_clients.count(msg.sender)) {
            out.push_back({conn, make_error("server", "unknown client id '" + msg.sender + "'"), true});
            return;
        }
        if (by_id_.count(msg.sender)) {
            out.push_back({conn, make_error("server", "duplicate id"), true});
            return;
        }
        const auto mode = msg.payload.at("mode").get<std::string>();
        if (mode != to_string(plan_.mode)) {
            out.push_back({conn, make_error("server", "federation runs in " + to_string(plan_.mode) +
                                                          " mode, client asked for " + mode),
                           true});
            return;
        }
        if (plan_.mode == WrapperMode::Stacking) {
            if (!msg.payload.contains("translator"))
                throw ProtocolError("stacking Register needs a translator spec");
            const auto spec = spec_from_json(msg.payload.at("translator"));
            spec.validate();
            if (!spec_) {
                if (spec.kind != plan_.translator_spec.kind ||
                    (spec.kind == ModelKind::Mlp3 && spec.hidden_dim != plan_.translator_spec.hidden_dim))
                    return reject_heterogeneous(conn, msg.sender, spec, plan_.translator_spec, out);
                spec_ = spec;
                plan_.translator_spec = spec;
            } else if (!(spec == *spec_)) {
                return reject_heterogeneous(conn, msg.sender, spec, *spec_, out);
            }
        }
        by_conn_[conn] = msg.sender;
        by_id_[msg.sender] = conn;
        if (by_id_.size() < plan_.expected_clients.size())
            return;

        const std::vector<std::string> roster(plan_.expected_clients.begin(), plan_.expected_clients.end());
        broadcast(make_register_ack(roster, plan_.rounds, token_), out);
        if (plan_.mode == WrapperMode::Stacking) {
            loop_.emplace(plan_, init_model(*spec_, translator_init_seed(plan_)).params);
            phase_ = ServerPhase::RoundOpen;
            broadcast(make_round_start(1, loop_->global(), token_), out);
        } else {
            loop_.emplace(plan_, Params{});
            phase_ = ServerPhase::Sharing;
        }
    }

    void reject_heterogeneous(ConnId conn, const std::string& id, const ModelSpec& got,
                              const ModelSpec& want, std::vector<Outgoing>& out) {
        const std::string why = "translator of client '" + id + "' is " + to_string(got.kind) + "(" +
                                std::to_string(got.in_dim) + "->" + std::to_string(got.n_classes) +
                                ", hidden " + std::to_string(got.hidden_dim) + "), federation uses " +
                                to_string(want.kind) + "(" + std::to_string(want.in_dim) + "->" +
                                std::to_string(want.n_classes) + ", hidden " +
                                std::to_string(want.hidden_dim) + "); translators must be homogeneous";
        out.push_back({conn, make_error("server", why, token_), true});
        fail(why, out);
    }

    void on_update(ConnId conn, const Message& msg, std::vector<Outgoing>& out) {
        const auto& id = registered_id(conn, msg);
        require_phase(ServerPhase::RoundOpen, msg);
        ClientUpdate u{id, msg.round, params_from_json(msg.payload.at("params")),
                       msg.payload.at("n_samples").get<std::size_t>(),
                       msg.payload.at("loss").get<double>()};
        if (u.n_samples == 0)
            throw ProtocolError("update with n_samples = 0");
        try {
            loop_->submit(std::move(u));
        } catch (const FederationError& e) {
            throw ProtocolError(e.what());
        }
        if (!loop_->complete())
            return;
        const std::size_t r = loop_->round();
        loop_->close(clock_());
        if (hook_)
            loop_->set_last_accuracy(hook_(r, loop_->global()));
        if (loop_->finished()) {
            phase_ = ServerPhase::Done;
            broadcast(make_done(r, loop_->global(), token_), out, true);
        } else {
            broadcast(make_round_start(loop_->round(), loop_->global(), token_), out);
        }
    }

    void on_share(ConnId conn, const Message& msg, std::vector<Outgoing>& out) {
        const auto& id = registered_id(conn, msg);
        require_phase(ServerPhase::Sharing, msg);
        if (!shared_.insert(id).second)
            throw ProtocolError("second ModelShare from '" + id + "'");
        for (const auto& [peer, c] : by_id_)
            if (peer != id)
                out.push_back({c, msg, false});
    }

    void on_ack(ConnId conn, const Message& msg, std::vector<Outgoing>& out) {
        const auto& id = registered_id(conn, msg);
        require_phase(ServerPhase::Sharing, msg);
        if (!acked_.insert(id).second)
            throw ProtocolError("second ModelShareAck from '" + id + "'");
        if (acked_.size() == plan_.expected_clients.size()) {
            phase_ = ServerPhase::Done;
            broadcast(make_done(0, std::nullopt, token_), out, true);
        }
    }

    FederationPlan plan_;
    std::string token_;
    Clock clock_;
    RoundHook hook_;
    ServerPhase phase_ = ServerPhase::AwaitingRoster;
    std::optional<ModelSpec> spec_;
    std::optional<RoundLoop> loop_;
    std::map<ConnId, std::string> by_conn_;
    std::map<std::string, ConnId> by_id_;
    std::set<std::string> shared_, acked_;
    std::string error_;
};

} // namespace fedwrap
