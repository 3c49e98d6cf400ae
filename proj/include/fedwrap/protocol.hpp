#pragma once

// Wire protocol between coordinator and clients.
//
// Frame: u32 BE body length, then a UTF-8 JSON body
//   {"v":1, "kind":..., "round":n, "sender":..., "token":..., "payload":{...}}
//
// Payloads by kind:
//   Register       {"mode", "translator"?}       translator spec (stacking only)
//   RegisterAck    {"roster", "rounds"}
//   RoundStart     {"params"}                    global translator parameters
//   Update         {"params", "n_samples", "loss"}
//   ModelShare     {"model"}                     base64 of the model byte format
//   ModelShareAck  {}
//   Done           {"params"?}                   final global parameters (stacking)
//   Error          {"message"}
// "payload" may also carry a "cipher" string, reserved for encrypted updates.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fedwrap/encoding.hpp"
#include "fedwrap/error.hpp"
#include "fedwrap/model.hpp"
#include "fedwrap/model_io.hpp"

namespace fedwrap {

inline constexpr int kProtocolVersion = 1;
inline constexpr std::size_t kDefaultMaxFrame = 64u * 1024u * 1024u;

enum class MsgKind { Register, RegisterAck, RoundStart, Update, ModelShare, ModelShareAck, Done, Error };

inline std::string to_string(MsgKind k) {
    switch (k) {
    case MsgKind::Register: return "Register";
    case MsgKind::RegisterAck: return "RegisterAck";
    case MsgKind::RoundStart: return "RoundStart";
    case MsgKind::Update: return "Update";
    case MsgKind::ModelShare: return "ModelShare";
    case MsgKind::ModelShareAck: return "ModelShareAck";
    case MsgKind::Done: return "Done";
    case MsgKind::Error: return "Error";
    }
    return "?";
}

inline MsgKind msg_kind_from_string(const std::string& s) {
    for (auto k : {MsgKind::Register, MsgKind::RegisterAck, MsgKind::RoundStart, MsgKind::Update,
                   MsgKind::ModelShare, MsgKind::ModelShareAck, MsgKind::Done, MsgKind::Error})
        if (to_string(k) == s)
            return k;
    throw ProtocolError("unknown message kind '" + s + "'");
}

struct Message {
    MsgKind kind = MsgKind::Error;
    std::uint64_t round = 0;
    std::string sender;
    std::string token;
    nlohmann::json payload = nlohmann::json::object();

    friend bool operator==(const Message& a, const Message& b) {
        return a.kind == b.kind && a.round == b.round && a.sender == b.sender &&
               a.token == b.token && a.payload == b.payload;
    }
};

// ---------------------------------------------------------------------------------------
// Payload helpers

inline nlohmann::json params_to_json(const Params& p) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& b : p)
        arr.push_back({{"name", b.name}, {"shape", b.shape}, {"values", b.values}});
    return arr;
}

inline Params params_from_json(const nlohmann::json& j) {
    if (!j.is_array())
        throw ProtocolError("params must be an array of blocks");
    Params p;
    for (const auto& b : j) {
        if (!b.is_object() || !b.contains("name") || !b.contains("shape") || !b.contains("values"))
            throw ProtocolError("malformed parameter block");
        ParamBlock blk;
        try {
            blk.name = b.at("name").get<std::string>();
            blk.shape = b.at("shape").get<std::vector<std::size_t>>();
            blk.values = b.at("values").get<std::vector<double>>();
        } catch (const nlohmann::json::exception& e) {
            throw ProtocolError(std::string("malformed parameter block: ") + e.what());
        }
        std::size_t n = 1;
        for (auto d : blk.shape)
            n *= d;
        if (n != blk.values.size())
            throw ProtocolError("parameter block '" + blk.name + "' has " +
                                std::to_string(blk.values.size()) + " values for its shape");
        p.push_back(std::move(blk));
    }
    return p;
}

inline Message make_register(std::string sender, std::string token, const std::string& mode,
                             const std::optional<ModelSpec>& translator) {
    Message m{MsgKind::Register, 0, std::move(sender), std::move(token), {{"mode", mode}}};
    if (translator)
        m.payload["translator"] = spec_to_json(*translator);
    return m;
}

inline Message make_register_ack(const std::vector<std::string>& roster, std::size_t rounds,
                                 std::string token) {
    return {MsgKind::RegisterAck, 0, "server", std::move(token), {{"roster", roster}, {"rounds", rounds}}};
}

inline Message make_round_start(std::uint64_t round, const Params& p, std::string token) {
    return {MsgKind::RoundStart, round, "server", std::move(token), {{"params", params_to_json(p)}}};
}

inline Message make_update(std::string sender, std::uint64_t round, const Params& p,
                           std::size_t n_samples, double loss, std::string token) {
    return {MsgKind::Update, round, std::move(sender), std::move(token),
            {{"params", params_to_json(p)}, {"n_samples", n_samples}, {"loss", loss}}};
}

inline Message make_model_share(std::string sender, const Model& m, std::string token) {
    return {MsgKind::ModelShare, 0, std::move(sender), std::move(token),
            {{"model", encoding::base64_encode(serialize_model(m))}}};
}

inline Message make_model_share_ack(std::string sender, std::string token) {
    return {MsgKind::ModelShareAck, 0, std::move(sender), std::move(token), nlohmann::json::object()};
}

inline Message make_done(std::uint64_t round, const std::optional<Params>& p, std::string token) {
    Message m{MsgKind::Done, round, "server", std::move(token), nlohmann::json::object()};
    if (p)
        m.payload["params"] = params_to_json(*p);
    return m;
}

inline Message make_error(std::string sender, std::string message, std::string token = {}) {
    return {MsgKind::Error, 0, std::move(sender), std::move(token), {{"message", std::move(message)}}};
}

inline Model model_from_share(const Message& m) {
    try {
        return deserialize_model(encoding::base64_decode(m.payload.at("model").get<std::string>()));
    } catch (const DecodeError& e) {
        throw ProtocolError(std::string("ModelShare from '") + m.sender + "': " + e.what());
    }
}

inline std::string error_text(const Message& m) {
    return m.payload.value("message", std::string("unspecified error"));
}

// ---------------------------------------------------------------------------------------
// Framing

namespace detail {

inline void require_field(const Message& m, const char* field, bool (nlohmann::json::*is)() const noexcept) {
    if (!m.payload.contains(field) || !(m.payload.at(field).*is)())
        throw ProtocolError(to_string(m.kind) + " payload needs field '" + field + "'");
}

inline void validate_payload(const Message& m) {
    using J = nlohmann::json;
    switch (m.kind) {
    case MsgKind::Register:
        require_field(m, "mode", &J::is_string);
        if (m.payload.contains("translator") && !m.payload.at("translator").is_object())
            throw ProtocolError("Register translator must be an object");
        break;
    case MsgKind::RegisterAck:
        require_field(m, "roster", &J::is_array);
        require_field(m, "rounds", &J::is_number_unsigned);
        for (const auto& id : m.payload.at("roster"))
            if (!id.is_string())
                throw ProtocolError("roster entries must be strings");
        break;
    case MsgKind::RoundStart:
        require_field(m, "params", &J::is_array);
        break;
    case MsgKind::Update:
        require_field(m, "params", &J::is_array);
        require_field(m, "n_samples", &J::is_number_unsigned);
        require_field(m, "loss", &J::is_number);
        break;
    case MsgKind::ModelShare:
        require_field(m, "model", &J::is_string);
        break;
    case MsgKind::ModelShareAck:
        break;
    case MsgKind::Done:
        if (m.payload.contains("params") && !m.payload.at("params").is_array())
            throw ProtocolError("Done params must be an array");
        break;
    case MsgKind::Error:
        require_field(m, "message", &J::is_string);
        break;
    }
}

} // namespace detail

inline std::string encode_body(const Message& m) {
    nlohmann::json j{{"v", kProtocolVersion},
                     {"kind", to_string(m.kind)},
                     {"round", m.round},
                     {"sender", m.sender},
                     {"token", m.token},
                     {"payload", m.payload}};
    try {
        return j.dump();
    } catch (const nlohmann::json::type_error& e) {
        throw ProtocolError(std::string("message cannot be encoded: ") + e.what());
    }
}

inline std::string encode(const Message& m) {
    const auto body = encode_body(m);
    std::string out;
    out.reserve(body.size() + 4);
    encoding::put_u32_be(out, static_cast<std::uint32_t>(body.size()));
    out += body;
    return out;
}

inline Message decode_body(std::string_view body) {
    nlohmann::json j = nlohmann::json::parse(body.begin(), body.end(), nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw ProtocolError("frame body is not a JSON object");
    if (!j.contains("v") || !j["v"].is_number_integer() || j["v"].get<int>() != kProtocolVersion)
        throw ProtocolError("unsupported protocol version");
    for (const char* f : {"kind", "sender", "token"})
        if (!j.contains(f) || !j[f].is_string())
            throw ProtocolError(std::string("frame field '") + f + "' missing or not a string");
    if (!j.contains("round") || !j["round"].is_number_unsigned())
        throw ProtocolError("frame field 'round' missing or negative");
    if (!j.contains("payload") || !j["payload"].is_object())
        throw ProtocolError("frame field 'payload' missing or not an object");
    Message m;
    m.kind = msg_kind_from_string(j["kind"].get<std::string>());
    m.round = j["round"].get<std::uint64_t>();
    m.sender = j["sender"].get<std::string>();
    m.token = j["token"].get<std::string>();
    m.payload = std::move(j["payload"]);
    detail::validate_payload(m);
    return m;
}

/// Decodes exactly one complete frame.
inline Message decode(std::string_view frame, std::size_t max_body = kDefaultMaxFrame) {
    if (frame.size() < 4)
        throw ProtocolError("truncated frame header");
    const std::uint32_t len = encoding::get_u32_be(frame, 0);
    if (len > max_body)
        throw ProtocolError("frame body of " + std::to_string(len) + " bytes exceeds the limit");
    if (frame.size() - 4 < len)
        throw ProtocolError("truncated frame: declared " + std::to_string(len) + " bytes, got " +
                            std::to_string(frame.size() - 4));
    if (frame.size() - 4 > len)
        throw ProtocolError("trailing bytes after frame");
    return decode_body(frame.substr(4));
}

/// Reassembles frames from a byte stream; partial trailing bytes are held until complete.
class FrameReader {
public:
    explicit FrameReader(std::size_t max_body = kDefaultMaxFrame) : max_body_(max_body) {}

    void feed(std::string_view bytes) { buf_.append(bytes); }

    /// Next complete message, or nullopt if more bytes are needed. Throws ProtocolError on
    /// an oversized or malformed frame; the offending frame is consumed.
    std::optional<Message> next() {
        if (buf_.size() - pos_ < 4)
            return std::nullopt;
        const std::uint32_t len = encoding::get_u32_be(buf_, pos_);
        if (len > max_body_)
            throw ProtocolError("frame body of " + std::to_string(len) + " bytes exceeds the limit");
        if (buf_.size() - pos_ - 4 < len)
            return std::nullopt;
        const std::string body = buf_.substr(pos_ + 4, len);
        pos_ += 4 + len;
        compact();
        return decode_body(body);
    }

    std::size_t buffered() const { return buf_.size() - pos_; }

private:
    void compact() {
        if (pos_ > 4096 && pos_ * 2 > buf_.size()) {
            buf_.erase(0, pos_);
            pos_ = 0;
        }
    }

    std::size_t max_body_;
    std::string buf_;
    std::size_t pos_ = 0;
};

} // namespace fedwrap
