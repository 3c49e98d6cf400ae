#pragma once

// JSON config files for `serve` / `join`, and the saved wrapper state.
//
// Client config:
//   {"local_model": "model.fwm", "train_dataset": "client_0.csv", "translator": "MLP-16",
//    "client_id": "0", "clients": ["1", "2"],
//    "client_addr": {"ip": "127.0.0.1", "port": "0"},
//    "server_addr": {"ip": "127.0.0.1", "port": "7300"},
//    "feature_mode": "probs", "fusion_weight": 0.5, "threshold": 0.5,
//    "train_config": {"local_epochs": 10, "learning_rate": 0.05, "batch_size": 32,
//                     "l2": 0.0, "seed": 1, "rounds": 10},
//    "mode": "stacking", "token": "..."}
//
// Server config uses server_addr (bind address), clients (the full roster), translator,
// train_config.rounds/seed, mode, timeout_ms, startup_timeout_ms and token.
// Relative paths resolve against the config file's directory. FEDWRAP_ADDR and
// FEDWRAP_TOKEN fill in server_addr and token when the file omits them.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedwrap/csv.hpp"
#include "fedwrap/encoding.hpp"
#include "fedwrap/error.hpp"
#include "fedwrap/federation.hpp"
#include "fedwrap/model_io.hpp"
#include "fedwrap/net.hpp"
#include "fedwrap/wrapper.hpp"

namespace fedwrap {

using nlohmann::json;

/// Translator architecture before its input width is known.
struct TranslatorChoice {
    ModelKind kind = ModelKind::Mlp3;
    std::size_t hidden_dim = 16;

    ModelSpec sized(std::size_t in_dim, std::size_t n_classes) const {
        return {kind, in_dim, kind == ModelKind::Mlp3 ? hidden_dim : 0, n_classes};
    }
};

/// "LR", "MLP-16", or {"kind": "mlp3", "hidden_dim": 16}.
inline TranslatorChoice parse_translator(const json& j) {
    TranslatorChoice t;
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "LR" || s == "lr") {
            t.kind = ModelKind::LogisticRegression;
            t.hidden_dim = 0;
            return t;
        }
        if (s.rfind("MLP-", 0) == 0 || s.rfind("mlp-", 0) == 0) {
            const auto h = s.substr(4);
            if (h.empty() || h.find_first_not_of("0123456789") != std::string::npos || std::stoul(h) == 0)
                throw ConfigError("translator '" + s + "': hidden width must be a positive integer");
            t.hidden_dim = std::stoul(h);
            return t;
        }
        throw ConfigError("translator '" + s + "' is not LR or MLP-<hidden>");
    }
    if (j.is_object()) {
        t.kind = model_kind_from_string(j.value("kind", std::string("mlp3")));
        t.hidden_dim = t.kind == ModelKind::Mlp3 ? j.value("hidden_dim", std::size_t{16}) : 0;
        if (t.kind == ModelKind::Mlp3 && t.hidden_dim == 0)
            throw ConfigError("translator hidden_dim must be >= 1");
        return t;
    }
    throw ConfigError("translator must be a string or an object");
}

inline std::string to_string(const TranslatorChoice& t) {
    return t.kind == ModelKind::LogisticRegression ? "LR" : "MLP-" + std::to_string(t.hidden_dim);
}

/// {"ip": ..., "port": "7300" | 7300} or "ip:port".
inline Endpoint parse_endpoint_json(const json& j, const std::string& field) {
    if (j.is_string())
        return parse_endpoint(j.get<std::string>());
    if (!j.is_object())
        throw ConfigError(field + " must be an object {ip, port} or \"ip:port\"");
    Endpoint e;
    e.ip = j.value("ip", e.ip);
    if (j.contains("port")) {
        const auto& p = j.at("port");
        long v = -1;
        if (p.is_number_integer())
            v = p.get<long>();
        else if (p.is_string() && !p.get<std::string>().empty() &&
                 p.get<std::string>().find_first_not_of("0123456789") == std::string::npos)
            v = std::stol(p.get<std::string>());
        if (v < 0 || v > 65535)
            throw ConfigError(field + ".port must be an integer in [0, 65535]");
        e.port = static_cast<std::uint16_t>(v);
    }
    return e;
}

/// "probs", "hidden_padded:16" or {"hidden_padded": 16}.
inline FeatureMode parse_feature_mode(const json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "probs")
            return FeatureMode::probs();
        const std::string prefix = "hidden_padded:";
        if (s.rfind(prefix, 0) == 0) {
            const auto d = s.substr(prefix.size());
            if (!d.empty() && d.find_first_not_of("0123456789") == std::string::npos && std::stoul(d) > 0)
                return FeatureMode::hidden_padded(std::stoul(d));
        }
        throw ConfigError("feature_mode '" + s + "' is not probs or hidden_padded:<dim>");
    }
    if (j.is_object() && j.contains("hidden_padded") && j.at("hidden_padded").is_number_integer() &&
        j.at("hidden_padded").get<long long>() > 0)
        return FeatureMode::hidden_padded(j.at("hidden_padded").get<std::size_t>());
    throw ConfigError("feature_mode must be \"probs\" or {\"hidden_padded\": <dim>}");
}

inline json feature_mode_to_json(const FeatureMode& f) {
    if (f.kind == FeatureMode::Kind::Probs)
        return "probs";
    return {{"hidden_padded", f.dim}};
}

/// Reads the hyperparameter fields of train_config over `base`.
inline TrainHp parse_train_config(const json& j, TrainHp base = {}) {
    if (!j.is_object())
        throw ConfigError("train_config must be an object");
    try {
        base.learning_rate = j.value("learning_rate", j.value("lr", base.learning_rate));
        base.batch_size = j.value("batch_size", base.batch_size);
        base.local_epochs = j.value("local_epochs", base.local_epochs);
        base.l2 = j.value("l2", base.l2);
        base.seed = j.value("seed", base.seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train_config: ") + e.what());
    }
    base.validate();
    return base;
}

inline json parse_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f)
        throw ConfigError("cannot read config file " + path);
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
}

namespace detail {

inline std::string resolve_path(const std::string& p, const std::filesystem::path& base) {
    std::filesystem::path path(p);
    return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

inline std::string env_or(const char* name, const std::string& fallback) {
    const char* v = std::getenv(name);
    return v && *v ? std::string(v) : fallback;
}

template <class T>
T get_field(const json& j, const char* field) {
    if (!j.contains(field))
        throw ConfigError(std::string("config is missing field '") + field + "'");
    try {
        return j.at(field).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config field '") + field + "': " + e.what());
    }
}

inline Endpoint server_endpoint(const json& j) {
    if (j.contains("server_addr"))
        return parse_endpoint_json(j.at("server_addr"), "server_addr");
    const auto env = env_or("FEDWRAP_ADDR", "");
    if (env.empty())
        throw ConfigError("config has no server_addr and FEDWRAP_ADDR is unset");
    return parse_endpoint(env);
}

inline std::string token_of(const json& j) {
    if (j.contains("token"))
        return get_field<std::string>(j, "token");
    return env_or("FEDWRAP_TOKEN", "");
}

} // namespace detail

struct ClientConfig {
    WrapperConfig cfg;
    WrapperMode mode = WrapperMode::Stacking;
    TranslatorChoice translator;
    std::size_t rounds = 10;
};

inline ClientConfig client_config_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
    if (!j.is_object())
        throw ConfigError("client config must be a JSON object");
    ClientConfig c;
    auto& cfg = c.cfg;
    c.mode = wrapper_mode_from_string(j.value("mode", std::string("stacking")));

    const auto model_path = detail::resolve_path(detail::get_field<std::string>(j, "local_model"), base_dir);
    if (!std::filesystem::exists(model_path))
        throw ConfigError("local_model file " + model_path + " does not exist");
    cfg.local_model = LocalModelHandle::from_model(load_model(model_path));

    const auto data_path = detail::resolve_path(detail::get_field<std::string>(j, "train_dataset"), base_dir);
    if (!std::filesystem::exists(data_path))
        throw ConfigError("train_dataset file " + data_path + " does not exist");
    cfg.train_dataset = dataset_from_csv(read_file(data_path), cfg.local_model.n_classes, data_path);

    cfg.client_id = detail::get_field<std::string>(j, "client_id");
    cfg.clients = j.contains("clients") ? detail::get_field<std::vector<std::string>>(j, "clients")
                                        : std::vector<std::string>{};
    if (j.contains("client_addr"))
        cfg.client_addr = parse_endpoint_json(j.at("client_addr"), "client_addr");
    cfg.server_addr = detail::server_endpoint(j);
    if (j.contains("feature_mode"))
        cfg.feature_mode = parse_feature_mode(j.at("feature_mode"));
    cfg.fusion_weight = j.value("fusion_weight", cfg.fusion_weight);
    cfg.threshold = j.value("threshold", cfg.threshold);
    if (j.contains("infer_config"))
        cfg.threshold = j.at("infer_config").value("threshold", cfg.threshold);
    if (j.contains("train_config")) {
        cfg.train = parse_train_config(j.at("train_config"), cfg.train);
        c.rounds = j.at("train_config").value("rounds", c.rounds);
    }
    cfg.token = detail::token_of(j);

    c.translator = j.contains("translator") ? parse_translator(j.at("translator")) : TranslatorChoice{};
    cfg.translator = c.translator.sized(cfg.stack_in_dim(), cfg.local_model.n_classes);
    cfg.validate(c.mode);
    return c;
}

inline ClientConfig load_client_config(const std::string& path) {
    try {
        return client_config_from_json(parse_json_file(path),
                                       std::filesystem::path(path).parent_path());
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
}

struct ServerConfig {
    Endpoint bind;
    FederationPlan plan;
    std::string token;
    std::uint64_t startup_timeout_ms = 30000;
};

/// The translator's input width is left at 0; the coordinator adopts it from the first
/// registration and checks every later one against it.
inline ServerConfig server_config_from_json(const json& j) {
    if (!j.is_object())
        throw ConfigError("server config must be a JSON object");
    ServerConfig s;
    s.bind = detail::server_endpoint(j);
    s.token = detail::token_of(j);
    s.plan.mode = wrapper_mode_from_string(j.value("mode", std::string("stacking")));
    for (const auto& id : detail::get_field<std::vector<std::string>>(j, "clients"))
        if (!s.plan.expected_clients.insert(id).second)
            throw ConfigError("clients lists '" + id + "' twice");
    const auto t = j.contains("translator") ? parse_translator(j.at("translator")) : TranslatorChoice{};
    s.plan.translator_spec = t.sized(0, j.value("n_classes", std::size_t{2}));
    if (j.contains("train_config")) {
        s.plan.hp = parse_train_config(j.at("train_config"), s.plan.hp);
        s.plan.rounds = j.at("train_config").value("rounds", s.plan.rounds);
    }
    s.plan.timeout_ms = j.value("timeout_ms", s.plan.timeout_ms);
    s.startup_timeout_ms = j.value("startup_timeout_ms", s.startup_timeout_ms);
    if (s.plan.expected_clients.empty())
        throw ConfigError("clients must list at least one client id");
    if (s.plan.rounds == 0)
        throw ConfigError("train_config.rounds must be >= 1");
    return s;
}

inline ServerConfig load_server_config(const std::string& path) {
    try {
        return server_config_from_json(parse_json_file(path));
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------------------
// Wrapper state file

inline constexpr const char* kStateFormat = "fedwrap-wrapper-state";

/// Everything inference needs: the local model, the federated model(s) and the aggregator
/// settings. Training data is not stored.
inline json wrapper_state_to_json(const WrapperConfig& cfg, const WrapperState& state) {
    if (!state.ready())
        throw LifecycleError("only a trained wrapper can be saved");
    if (!cfg.local_model.model)
        throw UnsupportedModelError("local model '" + cfg.local_model.descriptor +
                                    "' cannot be serialized");
    json j{{"format", kStateFormat},
           {"version", 1},
           {"client_id", cfg.client_id},
           {"mode", to_string(state.mode)},
           {"feature_mode", feature_mode_to_json(cfg.feature_mode)},
           {"fusion_weight", cfg.fusion_weight},
           {"threshold", cfg.threshold},
           {"local_model", encoding::base64_encode(serialize_model(*cfg.local_model.model))}};
    if (state.mode == WrapperMode::Stacking) {
        j["stacking"] = {{"translator", encoding::base64_encode(serialize_model(state.stacking->translator))},
                         {"rounds_completed", state.stacking->rounds_completed}};
    } else {
        const auto& b = *state.bagging;
        json models = json::object();
        for (const auto& [id, m] : b.peer_models)
            models[id] = encoding::base64_encode(serialize_model(m));
        j["bagging"] = {{"order", b.order},
                        {"models", std::move(models)},
                        {"fusion",
                         {{"n_models", b.fusion.n_models},
                          {"n_classes", b.fusion.n_classes},
                          {"weight", b.fusion.weight},
                          {"bias", b.fusion.bias}}}};
    }
    return j;
}

struct LoadedWrapper {
    WrapperConfig cfg; // local model, client_id, feature_mode, fusion_weight, threshold
    WrapperState state;
};

/// Parses and checks a saved state; any inconsistency is a DecodeError.
inline LoadedWrapper wrapper_state_from_json(const json& j) {
    try {
        if (!j.is_object() || j.value("format", std::string()) != kStateFormat)
            throw DecodeError("not a wrapper state file");
        if (j.at("version").get<int>() != 1)
            throw DecodeError("unsupported wrapper state version");
        LoadedWrapper w;
        auto& cfg = w.cfg;
        cfg.client_id = j.at("client_id").get<std::string>();
        cfg.feature_mode = parse_feature_mode(j.at("feature_mode"));
        cfg.fusion_weight = j.at("fusion_weight").get<double>();
        cfg.threshold = j.at("threshold").get<double>();
        if (!(cfg.fusion_weight >= 0.0 && cfg.fusion_weight <= 1.0) ||
            !(cfg.threshold > 0.0 && cfg.threshold < 1.0))
            throw DecodeError("fusion_weight or threshold out of range");
        cfg.local_model = LocalModelHandle::from_model(
            deserialize_model(encoding::base64_decode(j.at("local_model").get<std::string>())));
        const std::size_t k = cfg.local_model.n_classes;

        auto& st = w.state;
        st.mode = wrapper_mode_from_string(j.at("mode").get<std::string>());
        if (st.mode == WrapperMode::Stacking) {
            const auto& s = j.at("stacking");
            StackingState ss;
            ss.translator = deserialize_model(encoding::base64_decode(s.at("translator").get<std::string>()));
            ss.rounds_completed = s.at("rounds_completed").get<std::size_t>();
            ss.stack_in_dim = cfg.stack_in_dim();
            if (cfg.feature_mode.kind == FeatureMode::Kind::HiddenPadded && !cfg.local_model.has_features())
                throw DecodeError("hidden_padded feature mode without a parametric local model");
            if (ss.translator.spec.in_dim != ss.stack_in_dim || ss.translator.spec.n_classes != k)
                throw DecodeError("translator shape does not match the local model and feature mode");
            cfg.translator = ss.translator.spec;
            st.stacking = std::move(ss);
        } else {
            const auto& b = j.at("bagging");
            std::map<std::string, Model> models;
            for (const auto& [id, blob] : b.at("models").items())
                models.emplace(id, deserialize_model(encoding::base64_decode(blob.get<std::string>())));
            BaggingState bs = bagging_init(cfg, std::move(models));
            if (b.at("order").get<std::vector<std::string>>() != bs.order)
                throw DecodeError("bagging member order does not match the stored models");
            const auto& f = b.at("fusion");
            FusionLayer fl{f.at("n_models").get<std::size_t>(), f.at("n_classes").get<std::size_t>(),
                           f.at("weight").get<std::vector<double>>(), f.at("bias").get<std::vector<double>>()};
            if (fl.n_models != bs.order.size() || fl.n_classes != k ||
                fl.weight.size() != k * fl.in_width() || fl.bias.size() != k)
                throw DecodeError("fusion layer shape does not match the member models");
            for (double v : fl.weight)
                if (!std::isfinite(v))
                    throw DecodeError("non-finite fusion weight");
            bs.fusion = std::move(fl);
            st.bagging = std::move(bs);
        }
        st.phase = WrapperPhase::Ready;
        return w;
    } catch (const json::exception& e) {
        throw DecodeError(std::string("wrapper state: ") + e.what());
    } catch (const FederationError& e) {
        throw DecodeError(std::string("wrapper state: ") + e.what());
    } catch (const ConfigError& e) {
        throw DecodeError(std::string("wrapper state: ") + e.what());
    }
}

inline void save_wrapper_state(const std::string& path, const WrapperConfig& cfg, const WrapperState& state) {
    write_file(path, wrapper_state_to_json(cfg, state).dump(1) + "\n");
}

inline LoadedWrapper load_wrapper_state(const std::string& path) {
    const auto text = read_file(path);
    const auto j = json::parse(text, nullptr, false);
    if (j.is_discarded())
        throw DecodeError(path + ": wrapper state is not valid JSON");
    return wrapper_state_from_json(j);
}

} // namespace fedwrap
