// SPDX-License-Identifier: Apache-2.0
#pragma once

// Container layout (all integers little-endian):
//   bytes 0..3   magic "SKGC"
//   bytes 4..7   uint32 format version (1)
//   bytes 8..15  uint64 manifest length N
//   N bytes      UTF-8 JSON manifest; "blocks" lists {name, shape, offset, count}
//                with offset/count in float elements
//   rest         float32 little-endian payload, blocks back to back

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attention.hpp"
#include "errors.hpp"
#include "image.hpp"
#include "inversion.hpp"

namespace sketchguide {

inline constexpr char kContainerMagic[4] = {'S', 'K', 'G', 'C'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct Block {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

struct Container {
    nlohmann::json manifest = nlohmann::json::object();
    std::vector<Block> blocks;

    [[nodiscard]] const Block& block(const std::string& name) const {
        for (const auto& b : blocks)
            if (b.name == name) return b;
        throw lookup_error("container has no block '" + name + "'");
    }

    void add(std::string name, std::vector<int> shape, std::span<const double> values) {
        Block b{std::move(name), std::move(shape), {}};
        b.data.reserve(values.size());
        for (double v : values) b.data.push_back(static_cast<float>(v));
        blocks.push_back(std::move(b));
    }

    void add(std::string name, const Matrix& m) {
        // Row-major on disk.
        std::vector<double> flat;
        flat.reserve(static_cast<std::size_t>(m.size()));
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) flat.push_back(m(i, j));
        add(std::move(name), {static_cast<int>(m.rows()), static_cast<int>(m.cols())}, flat);
    }

    [[nodiscard]] Matrix matrix(const std::string& name) const {
        const Block& b = block(name);
        if (b.shape.size() != 2) throw shape_error("block '" + name + "' is not 2-D");
        Matrix m(b.shape[0], b.shape[1]);
        for (int i = 0; i < b.shape[0]; ++i)
            for (int j = 0; j < b.shape[1]; ++j) m(i, j) = b.data[static_cast<std::size_t>(i) * b.shape[1] + j];
        return m;
    }

    [[nodiscard]] Latent latent(const std::string& name) const {
        const Block& b = block(name);
        if (b.shape.size() != 3) throw shape_error("block '" + name + "' is not a latent");
        return Latent({b.shape[0], b.shape[1], b.shape[2]}, std::vector<double>(b.data.begin(), b.data.end()));
    }
};

namespace detail {

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class T>
T get_le(const std::uint8_t* p) {
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
    return v;
}

} // namespace detail

inline std::vector<std::uint8_t> serialize(const Container& c) {
    nlohmann::json manifest = c.manifest;
    manifest["format"] = "sketchguide-container";
    manifest["version"] = kContainerVersion;
    nlohmann::json blocks = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& b : c.blocks) {
        std::size_t expect = 1;
        for (int d : b.shape) expect *= static_cast<std::size_t>(d);
        if (expect != b.data.size()) throw shape_error("block '" + b.name + "' size does not match its shape");
        blocks.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", offset}, {"count", b.data.size()}});
        offset += b.data.size();
    }
    manifest["blocks"] = std::move(blocks);
    const std::string text = manifest.dump();

    std::vector<std::uint8_t> out(kContainerMagic, kContainerMagic + 4);
    detail::put_le<std::uint32_t>(out, kContainerVersion);
    detail::put_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + offset * 4);
    for (const auto& b : c.blocks)
        for (float f : b.data) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
    return out;
}

inline Container parse_container(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
        throw io_error("not a sketchguide container");
    }
    const auto version = detail::get_le<std::uint32_t>(bytes.data() + 4);
    if (version != kContainerVersion) throw io_error("unsupported container version " + std::to_string(version));
    const auto mlen = detail::get_le<std::uint64_t>(bytes.data() + 8);
    if (mlen > bytes.size() - 16) throw io_error("truncated container manifest");
    Container c;
    try {
        c.manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("bad container manifest: ") + e.what());
    }
    const std::uint8_t* payload = bytes.data() + 16 + mlen;
    const std::size_t payload_floats = (bytes.size() - 16 - mlen) / 4;
    for (const auto& jb : c.manifest.at("blocks")) {
        Block b;
        b.name = jb.at("name").get<std::string>();
        b.shape = jb.at("shape").get<std::vector<int>>();
        const auto off = jb.at("offset").get<std::uint64_t>();
        const auto count = jb.at("count").get<std::uint64_t>();
        if (off + count > payload_floats) throw io_error("container block '" + b.name + "' out of bounds");
        b.data.resize(count);
        for (std::uint64_t i = 0; i < count; ++i) {
            b.data[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(payload + 4 * (off + i)));
        }
        c.blocks.push_back(std::move(b));
    }
    return c;
}

inline void save_container(const std::filesystem::path& path, const Container& c) {
    write_file_bytes(path, serialize(c));
}

inline Container load_container(const std::filesystem::path& path) {
    return parse_container(read_file_bytes(path));
}

inline std::vector<int> shape_vector(const Shape& s) { return {s.channels, s.height, s.width}; }

// --- latent fixture -------------------------------------------------------

inline Container to_container(const Latent& z) {
    Container c;
    c.manifest["kind"] = "latent";
    c.manifest["shape"] = shape_vector(z.shape());
    c.add("latent", shape_vector(z.shape()), z.values());
    return c;
}

inline Latent latent_from_container(const Container& c) {
    if (c.manifest.value("kind", "") != "latent") throw io_error("container is not a latent");
    return c.latent("latent");
}

// --- trajectory -----------------------------------------------------------

inline Container to_container(const LatentTrajectory& traj) {
    traj.validate();
    Container c;
    std::vector<int> ts;
    for (const auto& e : traj.entries) ts.push_back(e.timestep);
    c.manifest["kind"] = "trajectory";
    c.manifest["timesteps"] = ts;
    c.manifest["prompt"] = traj.prompt;
    c.manifest["guidance_scale"] = traj.guidance_scale;
    c.manifest["shape"] = shape_vector(traj.clean().shape());
    for (const auto& e : traj.entries) {
        c.add("z@" + std::to_string(e.timestep), shape_vector(e.latent.shape()), e.latent.values());
    }
    return c;
}

inline LatentTrajectory trajectory_from_container(const Container& c) {
    if (c.manifest.value("kind", "") != "trajectory") throw io_error("container is not a trajectory");
    LatentTrajectory traj;
    traj.prompt = c.manifest.at("prompt").get<std::string>();
    traj.guidance_scale = c.manifest.at("guidance_scale").get<double>();
    for (int t : c.manifest.at("timesteps").get<std::vector<int>>()) {
        traj.entries.push_back({t, c.latent("z@" + std::to_string(t))});
    }
    traj.validate();
    return traj;
}

// --- attention stack ------------------------------------------------------

inline Container to_container(const TokenAttentionStack& stack) {
    Container c;
    c.manifest["kind"] = "attention_stack";
    c.manifest["class_word"] = stack.class_word;
    c.manifest["token_indices"] = {stack.tokens.begin, stack.tokens.end};
    c.manifest["layers"] = stack.layers;
    std::vector<int> ts;
    for (const auto& e : stack.entries) {
        ts.push_back(e.timestep);
        for (const auto& id : stack.layers) c.add(std::to_string(e.timestep) + "/" + id, e.maps.at(id));
    }
    c.manifest["timesteps"] = ts;
    return c;
}

inline TokenAttentionStack stack_from_container(const Container& c) {
    if (c.manifest.value("kind", "") != "attention_stack") throw io_error("container is not an attention stack");
    TokenAttentionStack s;
    s.class_word = c.manifest.at("class_word").get<std::string>();
    const auto tok = c.manifest.at("token_indices").get<std::vector<int>>();
    if (tok.size() != 2) throw io_error("bad token_indices");
    s.tokens = {tok[0], tok[1]};
    s.layers = c.manifest.at("layers").get<std::vector<std::string>>();
    for (int t : c.manifest.at("timesteps").get<std::vector<int>>()) {
        TokenAttentionStack::Entry e{t, {}};
        for (const auto& id : s.layers) e.maps.emplace(id, c.matrix(std::to_string(t) + "/" + id));
        s.entries.push_back(std::move(e));
    }
    s.validate();
    return s;
}

// Round trip through the on-disk representation (float32), so in-memory and
// cached copies are bit-identical.
template <class T>
T canonicalize(const T& value) {
    const Container c = parse_container(serialize(to_container(value)));
    if constexpr (std::is_same_v<T, LatentTrajectory>) return trajectory_from_container(c);
    else if constexpr (std::is_same_v<T, TokenAttentionStack>) return stack_from_container(c);
    else return latent_from_container(c);
}

} // namespace sketchguide
