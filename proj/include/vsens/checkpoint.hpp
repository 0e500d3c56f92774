#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vsens/model.hpp"
#include "vsens/series.hpp"

namespace vsens {

// Checkpoint container: 8-byte magic, u64 manifest length, JSON manifest
// (names, shapes, scalar width, model config, family metadata, norm stats),
// then raw little-endian tensor payloads in manifest order. Round-trips
// byte-exactly.
inline constexpr char checkpoint_magic[8] = {'V', 'S', 'N', 'S', 'C', 'K', 'P', '1'};

template <class T>
struct checkpoint_data {
    model_params<T> params;
    std::vector<std::string> names;
    std::vector<series_role> roles;
    norm_stats stats;
};

namespace detail {

template <class T>
constexpr const char* scalar_name() {
    if constexpr (sizeof(T) == 4)
        return "f32";
    else
        return "f64";
}

} // namespace detail

template <class T>
void save_checkpoint(const std::string& path, model_params<T>& params,
                     const std::vector<std::string>& names, const std::vector<series_role>& roles,
                     const norm_stats& stats) {
    nlohmann::ordered_json manifest;
    manifest["version"] = 1;
    manifest["scalar"] = detail::scalar_name<T>();
    manifest["config"] = {{"layers", params.cfg.layers},
                          {"heads", params.cfg.heads},
                          {"dim", params.cfg.dim},
                          {"hidden", params.cfg.hidden},
                          {"patch_len", params.cfg.patch_len},
                          {"dropout", params.cfg.dropout},
                          {"decoding", params.cfg.decoding == decoding_mode::nowcast ? "nowcast"
                                                                                     : "forecast"}};
    manifest["m"] = params.m;
    manifest["n"] = params.n;
    manifest["names"] = names;
    {
        std::vector<std::string> role_names;
        for (auto r : roles) role_names.push_back(r == series_role::input ? "input" : "virtual");
        manifest["roles"] = role_names;
    }
    manifest["norm_mean"] = stats.mean;
    manifest["norm_std"] = stats.stddev;
    auto tensors = nlohmann::ordered_json::array();
    for (auto& [name, t] : params.parameters())
        tensors.push_back({{"name", name}, {"shape", t->shape()}});
    manifest["tensors"] = std::move(tensors);

    const std::string mjson = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
    out.write(checkpoint_magic, sizeof(checkpoint_magic));
    const std::uint64_t len = mjson.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
    for (auto& [name, t] : params.parameters()) {
        (void)name;
        out.write(reinterpret_cast<const char*>(t->data()),
                  static_cast<std::streamsize>(t->numel() * sizeof(T)));
    }
    if (!out) throw std::runtime_error("save_checkpoint: failed writing '" + path + "'");
}

template <class T>
checkpoint_data<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, checkpoint_magic, sizeof(magic)) != 0)
        throw std::runtime_error("load_checkpoint: '" + path + "' is not a checkpoint");
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string mjson(len, '\0');
    in.read(mjson.data(), static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error("load_checkpoint: truncated manifest in '" + path + "'");

    const auto manifest = nlohmann::json::parse(mjson);
    if (manifest.at("version").get<int>() != 1)
        throw std::runtime_error("load_checkpoint: unsupported version");
    if (manifest.at("scalar").get<std::string>() != detail::scalar_name<T>())
        throw std::runtime_error("load_checkpoint: checkpoint stores " +
                                 manifest.at("scalar").get<std::string>() + ", requested " +
                                 detail::scalar_name<T>());

    model_config cfg;
    cfg.layers = manifest.at("config").at("layers").get<std::size_t>();
    cfg.heads = manifest.at("config").at("heads").get<std::size_t>();
    cfg.dim = manifest.at("config").at("dim").get<std::size_t>();
    cfg.hidden = manifest.at("config").at("hidden").get<std::size_t>();
    cfg.patch_len = manifest.at("config").at("patch_len").get<std::size_t>();
    cfg.dropout = manifest.at("config").at("dropout").get<double>();
    cfg.decoding = manifest.at("config").at("decoding").get<std::string>() == "nowcast"
                       ? decoding_mode::nowcast
                       : decoding_mode::forecast;

    checkpoint_data<T> data;
    rng dummy(0);
    data.params = model_params<T>::init(cfg, manifest.at("m").get<std::size_t>(),
                                        manifest.at("n").get<std::size_t>(), dummy);
    data.names = manifest.at("names").get<std::vector<std::string>>();
    for (const auto& r : manifest.at("roles"))
        data.roles.push_back(r.get<std::string>() == "input" ? series_role::input
                                                             : series_role::virtual_sensor);
    data.stats.mean = manifest.at("norm_mean").get<std::vector<double>>();
    data.stats.stddev = manifest.at("norm_std").get<std::vector<double>>();

    auto params_list = data.params.parameters();
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != params_list.size())
        throw std::runtime_error("load_checkpoint: manifest lists " + std::to_string(tensors.size()) +
                                 " tensors, model has " + std::to_string(params_list.size()));
    for (std::size_t i = 0; i < params_list.size(); ++i) {
        const auto& entry = tensors[i];
        if (entry.at("name").get<std::string>() != params_list[i].first)
            throw std::runtime_error("load_checkpoint: tensor order mismatch at '" +
                                     params_list[i].first + "'");
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        if (shape != params_list[i].second->shape())
            throw std::runtime_error("load_checkpoint: shape mismatch for '" + params_list[i].first +
                                     "'");
        in.read(reinterpret_cast<char*>(params_list[i].second->data()),
                static_cast<std::streamsize>(params_list[i].second->numel() * sizeof(T)));
        if (!in)
            throw std::runtime_error("load_checkpoint: truncated payload at '" +
                                     params_list[i].first + "'");
    }
    return data;
}

} // namespace vsens
