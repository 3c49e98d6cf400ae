#pragma once

// Model byte format:
//   "FWM1" | u16 BE version | u32 BE header length | JSON header | f64 LE values
// The header lists block names and shapes; values follow in header order.

#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include <json.hpp>

#include "fedwrap/encoding.hpp"
#include "fedwrap/error.hpp"
#include "fedwrap/model.hpp"

namespace fedwrap {

inline constexpr std::string_view kModelMagic = "FWM1";
inline constexpr std::uint16_t kModelFormatVersion = 1;

inline nlohmann::json spec_to_json(const ModelSpec& s) {
    return {{"kind", to_string(s.kind)},
            {"in_dim", s.in_dim},
            {"hidden_dim", s.hidden_dim},
            {"n_classes", s.n_classes}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.kind = model_kind_from_string(j.at("kind").get<std::string>());
    s.in_dim = j.at("in_dim").get<std::size_t>();
    s.hidden_dim = j.value("hidden_dim", std::size_t{0});
    s.n_classes = j.at("n_classes").get<std::size_t>();
    return s;
}

inline std::string serialize_model(const Model& m) {
    nlohmann::json names = nlohmann::json::array();
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& b : m.params) {
        names.push_back(b.name);
        shapes.push_back(b.shape);
    }
    nlohmann::json header = spec_to_json(m.spec);
    header["block_names"] = std::move(names);
    header["block_shapes"] = std::move(shapes);
    header["seed"] = m.rng_seed;
    const std::string h = header.dump();

    std::string out(kModelMagic);
    encoding::put_u16_be(out, kModelFormatVersion);
    encoding::put_u32_be(out, static_cast<std::uint32_t>(h.size()));
    out += h;
    for (const auto& b : m.params)
        for (double v : b.values)
            encoding::put_f64_le(out, v);
    return out;
}

inline Model deserialize_model(std::string_view bytes) {
    constexpr std::size_t fixed = 4 + 2 + 4;
    if (bytes.size() < fixed)
        throw DecodeError("model bytes truncated in preamble");
    if (bytes.substr(0, 4) != kModelMagic)
        throw DecodeError("model bytes: bad magic");
    const auto version = encoding::get_u16_be(bytes, 4);
    if (version != kModelFormatVersion)
        throw DecodeError("model bytes: unsupported format version " + std::to_string(version));
    const std::size_t hlen = encoding::get_u32_be(bytes, 6);
    if (bytes.size() < fixed + hlen)
        throw DecodeError("model bytes truncated in header");

    Model m;
    std::size_t expected_values = 0;
    try {
        const auto header = nlohmann::json::parse(bytes.substr(fixed, hlen));
        m.spec = spec_from_json(header);
        m.rng_seed = header.value("seed", std::uint64_t{0});
        const auto& names = header.at("block_names");
        const auto& shapes = header.at("block_shapes");
        if (names.size() != shapes.size())
            throw DecodeError("model header: block_names and block_shapes differ in length");
        for (std::size_t i = 0; i < names.size(); ++i) {
            ParamBlock b{names[i].get<std::string>(),
                         shapes[i].get<std::vector<std::size_t>>(), {}};
            expected_values += b.element_count();
            m.params.push_back(std::move(b));
        }
        m.spec.validate();
    } catch (const nlohmann::json::exception& e) {
        throw DecodeError(std::string("model header: ") + e.what());
    } catch (const ConfigError& e) {
        throw DecodeError(std::string("model header: ") + e.what());
    }

    const auto layout = zero_params(m.spec);
    bool shapes_ok = layout.size() == m.params.size();
    for (std::size_t i = 0; shapes_ok && i < layout.size(); ++i)
        shapes_ok = layout[i].same_shape(m.params[i]);
    if (!shapes_ok)
        throw DecodeError("model header: block shapes do not match the model spec");

    const std::size_t body = bytes.size() - fixed - hlen;
    if (body != expected_values * 8)
        throw DecodeError("model bytes: expected " + std::to_string(expected_values * 8) +
                          " value bytes, found " + std::to_string(body));
    std::size_t pos = fixed + hlen;
    for (auto& b : m.params) {
        b.values.resize(b.element_count());
        for (double& v : b.values) {
            v = encoding::get_f64_le(bytes, pos);
            pos += 8;
        }
    }
    return m;
}

inline void save_model(const Model& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw ConfigError("cannot write model file " + path);
    const auto bytes = serialize_model(m);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Model load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw ConfigError("cannot read model file " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_model(bytes);
}

} // namespace fedwrap
