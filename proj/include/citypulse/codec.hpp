#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace citypulse {

enum class CodecId : std::uint8_t { None = 0, BlockCompressed = 1 };

std::string_view to_string(CodecId id);
CodecId codec_from_string(std::string_view s);

// Lossless byte codec used for producer batch bodies.
class Codec {
public:
    virtual ~Codec() = default;
    virtual CodecId id() const noexcept = 0;
    virtual std::string compress(std::string_view raw) const = 0;
    virtual std::string decompress(std::string_view packed, std::size_t raw_size) const = 0;
};

const Codec& codec_for(CodecId id);

struct BatchEntry {
    std::string key;
    std::string payload;

    bool operator==(const BatchEntry&) const = default;
};

// Wire layout: [codec id: u8][message count: u32 LE][uncompressed length: u32 LE][body].
// The uncompressed body is, per entry, [key len: u32 LE][key][payload len: u32 LE][payload].
inline constexpr std::size_t kBatchHeaderSize = 9;

struct BatchHeader {
    CodecId codec;
    std::uint32_t count;
    std::uint32_t uncompressed_length;
};

std::string encode_batch(std::span<const BatchEntry> entries, CodecId codec);
BatchHeader decode_batch_header(std::string_view bytes);
std::vector<BatchEntry> decode_batch(std::string_view bytes);

} // namespace citypulse
