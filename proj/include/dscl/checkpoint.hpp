#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "dscl/network.hpp"
#include "dscl/tensor.hpp"

namespace dscl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

/// Byte-buffer primitives shared by the checkpoint container and the
/// regularizer-state blob it can embed.
namespace bytes {

inline void put_u32(std::string& out, uint32_t v) {
    out.append(reinterpret_cast<const char*>(&v), 4);
}
inline void put_u64(std::string& out, uint64_t v) {
    out.append(reinterpret_cast<const char*>(&v), 8);
}
inline void put_f64(std::string& out, double v) {
    out.append(reinterpret_cast<const char*>(&v), 8);
}
inline void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.append(s);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    explicit Reader(const std::string& b) : buf(b) {}

    void need(size_t n) const {
        if (pos + n > buf.size()) throw FormatError("checkpoint data truncated");
    }
    uint32_t get_u32() {
        need(4);
        uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    uint64_t get_u64() {
        need(8);
        uint64_t v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
    double get_f64() {
        need(8);
        double v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
    std::string get_str() {
        const uint32_t n = get_u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    bool done() const { return pos == buf.size(); }
};

template <typename T>
void put_tensor(std::string& out, const std::string& name, const Tensor<T>& t) {
    put_str(out, name);
    put_u32(out, static_cast<uint32_t>(t.dims.size()));
    for (int64_t d : t.dims) put_u64(out, static_cast<uint64_t>(d));
    out.append(reinterpret_cast<const char*>(t.ptr()), t.values().size() * sizeof(T));
}

template <typename T>
std::pair<std::string, Tensor<T>> get_tensor(Reader& r) {
    std::string name = r.get_str();
    const uint32_t nd = r.get_u32();
    if (nd > 8) throw FormatError("checkpoint record '" + name + "' has implausible rank");
    Dims dims(nd);
    for (uint32_t i = 0; i < nd; ++i) dims[i] = static_cast<int64_t>(r.get_u64());
    const int64_t n = numel_of(dims);
    if (n < 0 || n > (int64_t(1) << 33))
        throw FormatError("checkpoint record '" + name + "' has implausible size");
    r.need(static_cast<size_t>(n) * sizeof(T));
    Tensor<T> t = Tensor<T>::zeros(dims);
    std::memcpy(t.ptr(), r.buf.data() + r.pos, static_cast<size_t>(n) * sizeof(T));
    r.pos += static_cast<size_t>(n) * sizeof(T);
    return {std::move(name), std::move(t)};
}

}  // namespace bytes

/// Sectioned checkpoint container: magic + version + precision tag, the named
/// tensor records (parameters and batch-norm running statistics alike), and an
/// optional opaque trailing section for optimizer-external method state.
/// Round trips are bit-exact.
template <typename T>
struct CheckpointData {
    std::map<std::string, Tensor<T>> records;
    std::string extra;  // empty or a serialized regularizer-state blob
};

namespace detail {

constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
constexpr uint32_t precision_bits() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 32 : 64;
}

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const CheckpointData<T>& ckpt) {
    std::string out;
    out.append("DSCL");
    bytes::put_u32(out, detail::kCheckpointVersion);
    bytes::put_u32(out, detail::precision_bits<T>());
    bytes::put_u64(out, ckpt.records.size());
    for (const auto& [name, t] : ckpt.records) bytes::put_tensor(out, name, t);
    bytes::put_u32(out, ckpt.extra.empty() ? 0u : 1u);
    if (!ckpt.extra.empty()) {
        bytes::put_u64(out, ckpt.extra.size());
        out.append(ckpt.extra);
    }
    return out;
}

template <typename T>
CheckpointData<T> deserialize_checkpoint(const std::string& buf) {
    if (buf.size() < 4 || buf.compare(0, 4, "DSCL") != 0)
        throw FormatError("not a checkpoint file (bad magic)");
    bytes::Reader r(buf);
    r.pos = 4;
    const uint32_t version = r.get_u32();
    if (version != detail::kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const uint32_t bits = r.get_u32();
    if (bits != detail::precision_bits<T>())
        throw FormatError("checkpoint precision is " + std::to_string(bits) +
                          "-bit, expected " + std::to_string(detail::precision_bits<T>()));
    const uint64_t n = r.get_u64();
    CheckpointData<T> ckpt;
    for (uint64_t i = 0; i < n; ++i) {
        auto [name, t] = bytes::get_tensor<T>(r);
        if (!ckpt.records.emplace(std::move(name), std::move(t)).second)
            throw FormatError("duplicate checkpoint record");
    }
    if (r.get_u32() == 1) {
        const uint64_t len = r.get_u64();
        r.need(len);
        ckpt.extra = buf.substr(r.pos, len);
        r.pos += len;
    }
    if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
    return ckpt;
}

template <typename T>
void save_checkpoint(const std::string& path, const CheckpointData<T>& ckpt) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + path + "' for writing");
    const std::string buf = serialize_checkpoint(ckpt);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw FormatError("short write to '" + path + "'");
}

template <typename T>
CheckpointData<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint<T>(buf);
}

/// Snapshot a network (parameters + running statistics) into checkpoint
/// records, optionally carrying a method-state blob.
template <typename T>
CheckpointData<T> checkpoint_of(const Network<T>& net, std::string extra = "") {
    CheckpointData<T> ckpt;
    for (const auto& [name, p] : net.params()) ckpt.records.emplace(name, p.clone());
    for (const auto& [name, b] : net.buffers()) ckpt.records.emplace(name, b.clone());
    ckpt.extra = std::move(extra);
    return ckpt;
}

/// Load checkpoint records into an already built network. Every network slot
/// must be present with matching dims, and every record must land somewhere.
template <typename T>
void load_into_network(const CheckpointData<T>& ckpt, Network<T>& net) {
    size_t consumed = 0;
    auto assign = [&](const std::string& name, Tensor<T>& dst) {
        auto it = ckpt.records.find(name);
        if (it == ckpt.records.end())
            throw StateError("checkpoint is missing record '" + name + "'");
        if (it->second.dims != dst.dims)
            throw StateError("checkpoint record '" + name + "' has dims " +
                             dims_str(it->second.dims) + ", network expects " +
                             dims_str(dst.dims));
        dst.values() = it->second.values();
        ++consumed;
    };
    for (auto& [name, p] : net.params()) assign(name, p);
    for (auto& [name, b] : net.buffers()) assign(name, b);
    if (consumed != ckpt.records.size())
        for (const auto& [name, t] : ckpt.records)
            if (net.params().find(name) == net.params().end() &&
                net.buffers().find(name) == net.buffers().end())
                throw StateError("checkpoint record '" + name +
                                 "' does not match any network slot");
}

}  // namespace dscl
