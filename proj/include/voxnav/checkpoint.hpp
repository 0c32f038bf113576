// Checkpoint files: "VOXNAVCK", u32 header length, JSON header, tensor blob.
// The header declares every network's geometry so that evaluation can
// rebuild the architecture without the training config.
#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "voxnav/nets.hpp"

namespace voxnav {

inline constexpr int kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'V', 'O', 'X', 'N', 'A', 'V', 'C', 'K'};

/// Trained networks for one agent. `agent` is gt_grid_policy or
/// snn_proxy_policy; the proxy is present only for the latter.
struct ModelBundle {
    std::string agent = "gt_grid_policy";
    std::optional<PolicyNet> policy;
    std::optional<PerceptionProxyNet> proxy;
    nlohmann::json config = nlohmann::json::object();

    std::uint32_t grid_size() const {
        if (policy) return policy->geometry().grid;
        if (proxy) return proxy->geometry().grid;
        return 0;
    }
};

namespace detail {

inline nlohmann::json tensor_list(const ParamSet& ps) {
    nlohmann::json list = nlohmann::json::array();
    for (auto& p : ps.params()) list.push_back({{"name", p.name}, {"kind", "param"}, {"shape", p.tensor.shape}});
    for (auto& b : ps.buffers()) list.push_back({{"name", b.name}, {"kind", "buffer"}, {"shape", b.tensor.shape}});
    return list;
}

/// Values, Adam m and v per parameter, then buffers, in declaration order.
inline void write_params(ByteWriter& w, const ParamSet& ps) {
    for (auto& p : ps.params()) {
        w.put_floats(p.tensor.values);
        w.put_floats(p.m);
        w.put_floats(p.v);
    }
    for (auto& b : ps.buffers()) w.put_floats(b.tensor.values);
}

inline void read_params(ByteReader& r, ParamSet& ps) {
    for (auto& p : ps.params()) {
        r.get_floats(p.tensor.values);
        r.get_floats(p.m);
        r.get_floats(p.v);
    }
    for (auto& b : ps.buffers()) r.get_floats(b.tensor.values);
}

/// The tensor list recorded in the file must match the rebuilt network.
inline void check_tensors(const nlohmann::json& recorded, const ParamSet& ps, const std::string& role) {
    if (recorded != tensor_list(ps))
        throw GeometryError("checkpoint " + role + " tensors do not match the declared geometry");
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const ModelBundle& b) {
    ByteWriter blob;
    nlohmann::json nets = nlohmann::json::array();
    if (b.policy) {
        nets.push_back({{"role", "policy"},
                        {"geometry", b.policy->geometry()},
                        {"step", b.policy->params().step},
                        {"tensors", detail::tensor_list(b.policy->params())}});
        detail::write_params(blob, b.policy->params());
    }
    if (b.proxy) {
        nets.push_back({{"role", "proxy"},
                        {"geometry", b.proxy->geometry()},
                        {"step", b.proxy->params().step},
                        {"tensors", detail::tensor_list(b.proxy->params())}});
        detail::write_params(blob, b.proxy->params());
    }
    const nlohmann::json header = {{"version", kCheckpointVersion},
                                   {"agent", b.agent},
                                   {"grid_size", b.grid_size()},
                                   {"networks", nets},
                                   {"config", b.config},
                                   {"blob_bytes", blob.bytes().size()},
                                   {"checksum", fnv1a(blob.bytes())}};
    const std::string text = header.dump();
    ByteWriter out;
    out.put_bytes({reinterpret_cast<const unsigned char*>(kCheckpointMagic), sizeof kCheckpointMagic});
    out.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
    out.put_bytes({reinterpret_cast<const unsigned char*>(text.data()), text.size()});
    out.put_bytes(blob.bytes());
    return out.take();
}

/// Parses a checkpoint. When `expected_grid` is set, a different grid size
/// in the header raises GeometryError.
inline ModelBundle decode_checkpoint(std::span<const unsigned char> bytes,
                                     std::optional<std::uint32_t> expected_grid = std::nullopt) {
    ByteReader r(bytes);
    const auto magic = r.get_bytes(sizeof kCheckpointMagic);
    if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic)) throw CorruptError("not a voxnav checkpoint");
    const auto len = r.get<std::uint32_t>();
    const auto text = r.get_bytes(len);
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(text.begin(), text.end());
    } catch (const nlohmann::json::exception& e) {
        throw CorruptError(std::string("checkpoint header: ") + e.what());
    }
    ModelBundle b;
    try {
        const int version = h.at("version").get<int>();
        if (version != kCheckpointVersion)
            throw VersionError("checkpoint version " + std::to_string(version) + " is not supported");
        const auto grid = h.at("grid_size").get<std::uint32_t>();
        if (expected_grid && *expected_grid != grid)
            throw GeometryError("checkpoint grid size " + std::to_string(grid) + " differs from expected " +
                                std::to_string(*expected_grid));
        const auto blob_bytes = h.at("blob_bytes").get<std::size_t>();
        if (r.remaining() != blob_bytes)
            throw CorruptError("checkpoint blob has " + std::to_string(r.remaining()) + " bytes, header says " +
                               std::to_string(blob_bytes));
        const auto blob = r.get_bytes(blob_bytes);
        if (fnv1a(blob) != h.at("checksum").get<std::uint64_t>()) throw CorruptError("checkpoint checksum mismatch");

        b.agent = h.at("agent").get<std::string>();
        b.config = h.at("config");
        ByteReader br(blob);
        for (const auto& n : h.at("networks")) {
            const auto role = n.at("role").get<std::string>();
            ParamSet* ps = nullptr;
            if (role == "policy") {
                b.policy.emplace(n.at("geometry").get<PolicyGeometry>());
                ps = &b.policy->params();
            } else if (role == "proxy") {
                b.proxy.emplace(n.at("geometry").get<ProxyGeometry>());
                ps = &b.proxy->params();
            } else {
                throw CorruptError("unknown network role '" + role + "'");
            }
            detail::check_tensors(n.at("tensors"), *ps, role);
            detail::read_params(br, *ps);
            ps->step = n.at("step").get<std::int64_t>();
        }
        if (br.remaining() != 0) throw CorruptError("checkpoint blob has trailing bytes");
        if (b.grid_size() != grid) throw GeometryError("checkpoint networks disagree with grid_size header");
    } catch (const nlohmann::json::exception& e) {
        throw CorruptError(std::string("checkpoint header: ") + e.what());
    }
    return b;
}

inline void save_checkpoint(const std::string& path, const ModelBundle& b) { write_file(path, encode_checkpoint(b)); }

inline ModelBundle load_checkpoint(const std::string& path, std::optional<std::uint32_t> expected_grid = std::nullopt) {
    if (!std::filesystem::exists(path)) throw DependencyError("no checkpoint at " + path);
    return decode_checkpoint(read_file(path), expected_grid);
}

}  // namespace voxnav
