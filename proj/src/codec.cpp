#include "citypulse/codec.hpp"

#include "citypulse/error.hpp"

#include <zlib.h>

#include <limits>

namespace citypulse {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(std::string_view in, std::size_t pos) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    return v;
}

class IdentityCodec final : public Codec {
public:
    CodecId id() const noexcept override { return CodecId::None; }
    std::string compress(std::string_view raw) const override { return std::string(raw); }
    std::string decompress(std::string_view packed, std::size_t raw_size) const override {
        if (packed.size() != raw_size) throw Error("uncompressed batch body has wrong length");
        return std::string(packed);
    }
};

// zlib deflate at the fastest level; stands in for a Snappy-class block codec.
class DeflateCodec final : public Codec {
public:
    CodecId id() const noexcept override { return CodecId::BlockCompressed; }

    std::string compress(std::string_view raw) const override {
        uLongf bound = compressBound(static_cast<uLong>(raw.size()));
        std::string out(bound, '\0');
        const int rc = compress2(reinterpret_cast<Bytef*>(out.data()), &bound,
                                 reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()), 1);
        if (rc != Z_OK) throw Error("deflate failed with code " + std::to_string(rc));
        out.resize(bound);
        return out;
    }

    std::string decompress(std::string_view packed, std::size_t raw_size) const override {
        std::string out(raw_size, '\0');
        uLongf len = static_cast<uLongf>(raw_size);
        const int rc = uncompress(reinterpret_cast<Bytef*>(out.data()), &len,
                                  reinterpret_cast<const Bytef*>(packed.data()), static_cast<uLong>(packed.size()));
        if (rc != Z_OK || len != raw_size) throw Error("inflate failed with code " + std::to_string(rc));
        return out;
    }
};

} // namespace

std::string_view to_string(CodecId id) {
    switch (id) {
    case CodecId::None: return "none";
    case CodecId::BlockCompressed: return "block";
    }
    return "none";
}

CodecId codec_from_string(std::string_view s) {
    if (s == "none") return CodecId::None;
    if (s == "block") return CodecId::BlockCompressed;
    throw ConfigError("unknown codec '" + std::string(s) + "'");
}

const Codec& codec_for(CodecId id) {
    static const IdentityCodec identity;
    static const DeflateCodec deflate;
    switch (id) {
    case CodecId::None: return identity;
    case CodecId::BlockCompressed: return deflate;
    }
    throw Error("unknown codec id " + std::to_string(static_cast<int>(id)));
}

std::string encode_batch(std::span<const BatchEntry> entries, CodecId codec) {
    std::size_t raw_size = 0;
    for (const auto& e : entries) raw_size += 8 + e.key.size() + e.payload.size();
    if (raw_size > std::numeric_limits<std::uint32_t>::max() || entries.size() > std::numeric_limits<std::uint32_t>::max())
        throw RangeError("batch too large to encode");

    std::string body;
    body.reserve(raw_size);
    for (const auto& e : entries) {
        put_u32(body, static_cast<std::uint32_t>(e.key.size()));
        body += e.key;
        put_u32(body, static_cast<std::uint32_t>(e.payload.size()));
        body += e.payload;
    }

    std::string out;
    std::string packed = codec_for(codec).compress(body);
    out.reserve(kBatchHeaderSize + packed.size());
    out.push_back(static_cast<char>(codec));
    put_u32(out, static_cast<std::uint32_t>(entries.size()));
    put_u32(out, static_cast<std::uint32_t>(body.size()));
    out += packed;
    return out;
}

BatchHeader decode_batch_header(std::string_view bytes) {
    if (bytes.size() < kBatchHeaderSize) throw Error("batch shorter than its header");
    const auto id = static_cast<std::uint8_t>(bytes[0]);
    if (id > static_cast<std::uint8_t>(CodecId::BlockCompressed)) throw Error("unknown codec id in batch header");
    return {static_cast<CodecId>(id), get_u32(bytes, 1), get_u32(bytes, 5)};
}

std::vector<BatchEntry> decode_batch(std::string_view bytes) {
    const auto header = decode_batch_header(bytes);
    const std::string body = codec_for(header.codec).decompress(bytes.substr(kBatchHeaderSize), header.uncompressed_length);

    std::vector<BatchEntry> out;
    out.reserve(header.count);
    std::size_t pos = 0;
    auto take = [&](std::string& dst) {
        if (pos + 4 > body.size()) throw Error("truncated batch body");
        const std::uint32_t len = get_u32(body, pos);
        pos += 4;
        if (pos + len > body.size()) throw Error("truncated batch body");
        dst.assign(body, pos, len);
        pos += len;
    };
    for (std::uint32_t i = 0; i < header.count; ++i) {
        BatchEntry e;
        take(e.key);
        take(e.payload);
        out.push_back(std::move(e));
    }
    if (pos != body.size()) throw Error("trailing bytes in batch body");
    return out;
}

} // namespace citypulse
