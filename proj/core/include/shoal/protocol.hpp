#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "shoal/error.hpp"

/*
    Shoal wire format (little-endian, fixed 32-byte base header):

    offset  size  field
    0       1     version (currently 1)
    1       1     class (0=short, 1=medium, 2=long)
    2       1     flags (bit0 fifo, bit1 get, bit2 async, bit3 reply,
                         bit4 strided, bit5 vectored; bits 6-7 reserved, zero)
    3       1     arg_count (0..8)
    4       2     src kernel id
    6       2     dst kernel id
    8       2     handler id
    10      2     reserved (zero)
    12      4     token
    16      4     payload_len (bytes; for get requests: requested byte count)
    20      8     dest_offset (zero unless long message or get request)
    28      4     reserved (zero; keeps the arg block 8-byte aligned)
    32      8*n   args (n = arg_count, 64-bit each)
    ...     12    strided descriptor, if the strided flag is set
                  (block_bytes u32, stride_bytes u32, block_count u32)
    ...     4+12k vectored descriptor, if the vectored flag is set
                  (entry_count u32, then k entries of offset u64 + len u32)
    ...     *     payload (payload_len bytes; absent for short messages and
                  get requests)

    Total encoded length never exceeds MAX_PACKET_BYTES. See docs/protocol.md
    for worked examples.
*/

namespace shoal {

using KernelId = std::uint16_t;
using NodeId = std::uint16_t;
using HandlerId = std::uint16_t;
using Token = std::uint32_t;

inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kBaseHeaderBytes = 32;
inline constexpr std::size_t kMaxPacketBytes = 9000;
inline constexpr std::size_t kMaxArgs = 8;
inline constexpr std::size_t kMaxVectoredEntries = 16;
inline constexpr std::size_t kWordBytes = 8;

// Handler 0 is the built-in reply counter; ids at or above
// kFirstInternalHandler are reserved for runtime control traffic.
inline constexpr HandlerId kReplyHandler = 0;
inline constexpr HandlerId kFirstInternalHandler = 0xFFF0;

enum class AmClass : std::uint8_t { Short = 0, Medium = 1, Long = 2 };

const char* to_string(AmClass cls);

struct AmFlags {
    bool fifo = false;        // payload supplied by the kernel, not gathered
    bool get = false;         // request for remote data; packet carries none
    bool async = false;       // suppress the automatic reply
    bool reply = false;       // this packet is itself a reply (short only)
    bool strided = false;     // long destination layout is strided
    bool vectored = false;    // long destination layout is vectored

    std::uint8_t to_byte() const noexcept;
    static AmFlags from_byte(std::uint8_t b);  // throws InvalidHeader on unknown bits

    bool operator==(const AmFlags&) const = default;
};

struct StridedSpec {
    std::uint32_t block_bytes = 0;
    std::uint32_t stride_bytes = 0;
    std::uint32_t block_count = 0;

    std::uint64_t total_bytes() const noexcept {
        return std::uint64_t{block_bytes} * block_count;
    }

    bool operator==(const StridedSpec&) const = default;
};

struct VectoredEntry {
    std::uint64_t offset = 0;
    std::uint32_t len = 0;

    bool operator==(const VectoredEntry&) const = default;
};

struct VectoredSpec {
    std::vector<VectoredEntry> entries;

    std::uint64_t total_bytes() const noexcept;

    bool operator==(const VectoredSpec&) const = default;
};

using LongLayout = std::variant<StridedSpec, VectoredSpec>;

struct AmHeader {
    std::uint8_t version = kProtocolVersion;
    AmClass cls = AmClass::Short;
    AmFlags flags;
    KernelId src = 0;
    KernelId dst = 0;
    HandlerId handler = kReplyHandler;
    Token token = 0;
    std::vector<std::uint64_t> args;   // at most kMaxArgs
    std::uint32_t payload_len = 0;
    std::uint64_t dest_offset = 0;     // zero unless long or get
    std::optional<LongLayout> layout;  // present iff strided or vectored flag

    bool operator==(const AmHeader&) const = default;
};

struct Packet {
    AmHeader header;
    std::vector<std::byte> payload;
    std::uint32_t size_words = 0;  // ceil(encoded length / 8)
};

// True when the encoded packet carries payload bytes after the descriptors
// (everything except short messages and get requests).
bool carries_payload(const AmHeader& header) noexcept;

// Throws InvalidHeader describing the first violated invariant. Checks the
// full flag lattice, arg and descriptor limits, and payload_len consistency.
void validate_header(const AmHeader& header);

std::size_t encoded_size(const AmHeader& header);

// ceil(encoded_size / 8); always matches the length encode_packet produces.
std::uint32_t packet_size_words(const AmHeader& header);

// Canonical little-endian encoding. `payload` must match header.payload_len
// (and be empty for short messages and get requests). Throws Oversize when
// the result would exceed kMaxPacketBytes, InvalidHeader on invariant
// violations, LengthMismatch when payload disagrees with the header.
std::vector<std::byte> encode_packet(const AmHeader& header, std::span<const std::byte> payload);

// Inverse of encode_packet. Throws Truncated / BadVersion / InvalidHeader /
// Oversize; accepts exactly one whole packet (no trailing bytes).
Packet decode_packet(std::span<const std::byte> bytes);

}  // namespace shoal
