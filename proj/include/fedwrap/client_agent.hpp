#pragma once

// Client-side protocol state machine: consumes server messages, runs the local phases and
// produces replies. Transport-agnostic.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "fedwrap/error.hpp"
#include "fedwrap/protocol.hpp"
#include "fedwrap/wrapper.hpp"

namespace fedwrap {

enum class ClientPhase { Unregistered, Registered, InRound, Sharing, Finished, Failed };

inline std::string to_string(ClientPhase p) {
    switch (p) {
    case ClientPhase::Unregistered: return "Unregistered";
    case ClientPhase::Registered: return "Registered";
    case ClientPhase::InRound: return "InRound";
    case ClientPhase::Sharing: return "Sharing";
    case ClientPhase::Finished: return "Finished";
    case ClientPhase::Failed: return "Failed";
    }
    return "?";
}

class ClientAgent {
public:
    ClientAgent(WrapperConfig cfg, WrapperMode mode) : cfg_(std::move(cfg)) {
        cfg_.validate(mode);
        state_.mode = mode;
        if (mode == WrapperMode::Bagging && !cfg_.local_model.model)
            throw UnsupportedModelError("local model '" + cfg_.local_model.descriptor +
                                        "' cannot be serialized for the Bagging Wrapper");
    }

    const WrapperConfig& config() const { return cfg_; }
    ClientPhase phase() const { return phase_; }
    const WrapperState& state() const { return state_; }
    WrapperState take_state() { return std::move(state_); }
    const std::vector<std::string>& roster() const { return roster_; }
    bool finished() const { return phase_ == ClientPhase::Finished; }

    /// Current round, or the round being waited for once the previous update is sent.
    std::size_t round() const { return round_; }

    /// First message of the session.
    Message hello() {
        if (state_.mode == WrapperMode::Stacking && !state_.stacking)
            state_.stacking = make_stacking_state(cfg_);
        return make_register(cfg_.client_id, cfg_.token, to_string(state_.mode),
                             state_.mode == WrapperMode::Stacking
                                 ? std::optional<ModelSpec>(cfg_.translator)
                                 : std::nullopt);
    }

    /// Handles one server message. Throws FederationError when the server reports an error
    /// and ProtocolError on an illegal transition; either leaves the wrapper untrained.
    std::vector<Message> on_message(const Message& msg) {
        try {
            return dispatch(msg);
        } catch (...) {
            phase_ = ClientPhase::Failed;
            state_.phase = WrapperPhase::Untrained;
            throw;
        }
    }

    /// Marks the session as failed (e.g. the transport dropped).
    void abort() {
        if (phase_ != ClientPhase::Finished) {
            phase_ = ClientPhase::Failed;
            state_.phase = WrapperPhase::Untrained;
        }
    }

private:
    [[noreturn]] void illegal(const Message& msg) const {
        throw ProtocolError("unexpected " + to_string(msg.kind) + " (round " +
                            std::to_string(msg.round) + ") in client phase " + to_string(phase_));
    }

    std::vector<Message> dispatch(const Message& msg) {
        if (msg.kind == MsgKind::Error)
            throw FederationError("server error: " + error_text(msg));
        if (msg.token != cfg_.token)
            throw ProtocolError("message with a bad token from the server");
        if (phase_ == ClientPhase::Finished || phase_ == ClientPhase::Failed)
            illegal(msg);
        switch (msg.kind) {
        case MsgKind::RegisterAck: return on_ack(msg);
        case MsgKind::RoundStart: return on_round_start(msg);
        case MsgKind::ModelShare: return on_share(msg);
        case MsgKind::Done: return on_done(msg);
        default: illegal(msg);
        }
    }

    std::vector<Message> on_ack(const Message& msg) {
        if (phase_ != ClientPhase::Unregistered)
            illegal(msg);
        roster_ = msg.payload.at("roster").get<std::vector<std::string>>();
        if (std::find(roster_.begin(), roster_.end(), cfg_.client_id) == roster_.end())
            throw ProtocolError("roster does not include this client");
        state_.phase = WrapperPhase::Training;
        if (state_.mode == WrapperMode::Stacking) {
            phase_ = ClientPhase::Registered;
            round_ = 1;
            return {};
        }
        phase_ = ClientPhase::Sharing;
        std::vector<Message> out{make_model_share(cfg_.client_id, *cfg_.local_model.model, cfg_.token)};
        maybe_fit(out);
        return out;
    }

    std::vector<Message> on_round_start(const Message& msg) {
        if (state_.mode != WrapperMode::Stacking)
            illegal(msg);
        const bool first = phase_ == ClientPhase::Registered && msg.round == 1;
        const bool next = phase_ == ClientPhase::InRound && msg.round == round_ + 1;
        if (!first && !next)
            illegal(msg);
        round_ = msg.round;
        phase_ = ClientPhase::InRound;
        const auto global = params_from_json(msg.payload.at("params"));
        auto upd = stacking_train_round(*state_.stacking, cfg_, global, round_);
        return {make_update(cfg_.client_id, round_, upd.params, upd.n_samples, upd.loss, cfg_.token)};
    }

    std::vector<Message> on_share(const Message& msg) {
        if (phase_ != ClientPhase::Sharing || fitted_)
            illegal(msg);
        if (msg.sender == cfg_.client_id ||
            std::find(roster_.begin(), roster_.end(), msg.sender) == roster_.end())
            throw ProtocolError("ModelShare from '" + msg.sender + "', not a peer");
        if (peers_.count(msg.sender))
            throw ProtocolError("second ModelShare from '" + msg.sender + "'");
        peers_.emplace(msg.sender, model_from_share(msg));
        std::vector<Message> out;
        maybe_fit(out);
        return out;
    }

    void maybe_fit(std::vector<Message>& out) {
        if (peers_.size() + 1 < roster_.size())
            return;
        state_.bagging = bagging_fit(cfg_, peers_);
        fitted_ = true;
        out.push_back(make_model_share_ack(cfg_.client_id, cfg_.token));
    }

    std::vector<Message> on_done(const Message& msg) {
        if (state_.mode == WrapperMode::Stacking) {
            if (phase_ != ClientPhase::InRound || msg.round != round_)
                illegal(msg);
            if (!msg.payload.contains("params"))
                throw ProtocolError("stacking Done without final parameters");
            auto p = params_from_json(msg.payload.at("params"));
            if (!same_shapes(p, state_.stacking->translator.params))
                throw ProtocolError("final parameters do not match the translator");
            state_.stacking->translator.params = std::move(p);
        } else if (phase_ != ClientPhase::Sharing || !fitted_) {
            illegal(msg);
        }
        phase_ = ClientPhase::Finished;
        state_.phase = WrapperPhase::Ready;
        return {};
    }

    WrapperConfig cfg_;
    WrapperState state_;
    ClientPhase phase_ = ClientPhase::Unregistered;
    std::size_t round_ = 0;
    std::vector<std::string> roster_;
    std::map<std::string, Model> peers_;
    bool fitted_ = false;
};

} // namespace fedwrap
