#include "danp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace danp {

using nlohmann::json;

namespace {

template <typename U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& in, std::size_t offset) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
        v |= static_cast<U>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
    return v;
}

constexpr std::size_t kHeaderBytes = 8 + 4 + 8;

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    json index = json::array();
    std::uint64_t offset = 0;
    for (const auto& [key, tensor] : ckpt.params) {
        index.push_back({{"key", key}, {"shape", tensor.shape()}, {"offset", offset}});
        offset += tensor.numel() * 4;
    }
    json rng = json::array();
    for (auto w : ckpt.rng_state) rng.push_back(w);
    const json meta = {{"config", run_config_to_json(ckpt.config)},
                       {"params", index},
                       {"payload_bytes", offset},
                       {"rng_state", rng},
                       {"step", ckpt.step}};
    const std::string text = meta.dump();

    std::string out(kCheckpointMagic, 8);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, text.size());
    out += text;
    out.reserve(out.size() + offset);
    for (const auto& [key, tensor] : ckpt.params)
        for (float v : tensor.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw CheckpointError("not a DANP checkpoint (bad magic)");
    if (bytes.size() < kHeaderBytes) throw CheckpointError("truncated header at offset " + std::to_string(bytes.size()));
    const auto version = get_le<std::uint32_t>(bytes, 8);
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    const auto meta_len = get_le<std::uint64_t>(bytes, 12);
    if (meta_len > bytes.size() - kHeaderBytes)
        throw CheckpointError("truncated metadata: needs bytes up to offset " + std::to_string(kHeaderBytes + meta_len) +
                              ", file ends at offset " + std::to_string(bytes.size()));
    json meta;
    try {
        meta = json::parse(bytes.begin() + kHeaderBytes, bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderBytes + meta_len));
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("corrupt metadata: ") + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.config = run_config_from_json(meta.at("config"));
        ckpt.step = meta.at("step").get<std::uint64_t>();
        const auto& rng = meta.at("rng_state");
        if (!rng.is_array() || rng.size() != 4) throw CheckpointError("corrupt metadata: rng_state");
        for (std::size_t i = 0; i < 4; ++i) ckpt.rng_state[i] = rng[i].get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("corrupt metadata: ") + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("corrupt metadata config: ") + e.what());
    }

    const std::size_t base = kHeaderBytes + meta_len;
    const std::uint64_t payload = meta.at("payload_bytes").get<std::uint64_t>();
    for (const auto& entry : meta.at("params")) {
        const auto key = entry.at("key").get<std::string>();
        const auto shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        const std::size_t numel = shape_numel(shape);
        const std::size_t begin = base + offset, end = begin + numel * 4;
        if (end > bytes.size())
            throw CheckpointError("truncated payload: tensor '" + key + "' needs bytes [" + std::to_string(begin) + ", " +
                                  std::to_string(end) + ") but the file ends at offset " + std::to_string(bytes.size()));
        std::vector<float> data(numel);
        for (std::size_t i = 0; i < numel; ++i)
            data[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, begin + 4 * i));
        ckpt.params.insert(key, Tensor<float>(shape, std::move(data)));
    }
    if (base + payload != bytes.size())
        throw CheckpointError("payload size mismatch: expected the file to end at offset " +
                              std::to_string(base + payload) + ", found " + std::to_string(bytes.size()));
    return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    const std::string bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_checkpoint(buf.str());
}

}  // namespace danp
