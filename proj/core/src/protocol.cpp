#include "shoal/protocol.hpp"

#include <cstring>
#include <string>

namespace shoal {

namespace {

constexpr std::uint8_t kFlagFifo = 1u << 0;
constexpr std::uint8_t kFlagGet = 1u << 1;
constexpr std::uint8_t kFlagAsync = 1u << 2;
constexpr std::uint8_t kFlagReply = 1u << 3;
constexpr std::uint8_t kFlagStrided = 1u << 4;
constexpr std::uint8_t kFlagVectored = 1u << 5;
constexpr std::uint8_t kKnownFlagMask =
    kFlagFifo | kFlagGet | kFlagAsync | kFlagReply | kFlagStrided | kFlagVectored;

constexpr std::size_t kStridedSpecBytes = 12;

void put_u16(std::vector<std::byte>& out, std::uint16_t v) {
    out.push_back(std::byte(v & 0xFF));
    out.push_back(std::byte((v >> 8) & 0xFF));
}

void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(std::byte((v >> (8 * i)) & 0xFF));
}

void put_u64(std::vector<std::byte>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(std::byte((v >> (8 * i)) & 0xFF));
}

// Bounds-checked little-endian reader over the input span.
class Cursor {
  public:
    explicit Cursor(std::span<const std::byte> bytes) : bytes_(bytes) {}

    std::size_t remaining() const { return bytes_.size() - pos_; }
    std::size_t consumed() const { return pos_; }

    std::uint8_t u8() {
        need(1);
        return std::uint8_t(bytes_[pos_++]);
    }

    std::uint16_t u16() {
        need(2);
        std::uint16_t v = std::uint16_t(bytes_[pos_]) | std::uint16_t(bytes_[pos_ + 1]) << 8;
        pos_ += 2;
        return v;
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }

    std::span<const std::byte> take(std::size_t n) {
        need(n);
        auto view = bytes_.subspan(pos_, n);
        pos_ += n;
        return view;
    }

  private:
    void need(std::size_t n) const {
        if (remaining() < n) {
            throw ShoalError(ErrorCode::Truncated, "declared lengths exceed available bytes");
        }
    }

    std::span<const std::byte> bytes_;
    std::size_t pos_ = 0;
};

std::size_t layout_bytes(const AmHeader& h) {
    if (!h.layout) return 0;
    if (std::holds_alternative<StridedSpec>(*h.layout)) return kStridedSpecBytes;
    return 4 + 12 * std::get<VectoredSpec>(*h.layout).entries.size();
}

[[noreturn]] void invalid(const std::string& why) {
    throw ShoalError(ErrorCode::InvalidHeader, why);
}

}  // namespace

const char* to_string(AmClass cls) {
    switch (cls) {
        case AmClass::Short: return "short";
        case AmClass::Medium: return "medium";
        case AmClass::Long: return "long";
    }
    return "?";
}

std::uint64_t VectoredSpec::total_bytes() const noexcept {
    std::uint64_t sum = 0;
    for (const auto& e : entries) sum += e.len;
    return sum;
}

std::uint8_t AmFlags::to_byte() const noexcept {
    std::uint8_t b = 0;
    if (fifo) b |= kFlagFifo;
    if (get) b |= kFlagGet;
    if (async) b |= kFlagAsync;
    if (reply) b |= kFlagReply;
    if (strided) b |= kFlagStrided;
    if (vectored) b |= kFlagVectored;
    return b;
}

AmFlags AmFlags::from_byte(std::uint8_t b) {
    if (b & ~kKnownFlagMask) invalid("unknown flag bits set");
    AmFlags f;
    f.fifo = b & kFlagFifo;
    f.get = b & kFlagGet;
    f.async = b & kFlagAsync;
    f.reply = b & kFlagReply;
    f.strided = b & kFlagStrided;
    f.vectored = b & kFlagVectored;
    return f;
}

bool carries_payload(const AmHeader& h) noexcept {
    return h.cls != AmClass::Short && !h.flags.get;
}

void validate_header(const AmHeader& h) {
    if (h.version != kProtocolVersion) invalid("unsupported version");
    if (h.cls != AmClass::Short && h.cls != AmClass::Medium && h.cls != AmClass::Long) {
        invalid("unknown message class");
    }
    if (h.args.size() > kMaxArgs) invalid("more than 8 handler args");

    const AmFlags& f = h.flags;
    const bool has_payload_class = h.cls != AmClass::Short;

    if (f.fifo && !has_payload_class) invalid("fifo flag on a short message");
    if (f.get && !has_payload_class) invalid("get flag on a short message");
    if (f.get && f.fifo) invalid("get and fifo are mutually exclusive");
    if ((f.strided || f.vectored) && h.cls != AmClass::Long) {
        invalid("strided/vectored flag on a non-long message");
    }
    if (f.strided && f.vectored) invalid("strided and vectored are mutually exclusive");
    if ((f.strided || f.vectored) && f.get) invalid("get requests are contiguous");
    if (f.reply) {
        if (h.cls != AmClass::Short) invalid("reply flag on a non-short message");
        if (!f.async) invalid("replies must be asynchronous");
    }

    if (h.cls == AmClass::Short && h.payload_len != 0) invalid("short message with payload");
    if (!f.get && h.cls != AmClass::Long && h.dest_offset != 0) {
        invalid("dest_offset set on a message that does not address memory");
    }

    if (f.strided) {
        if (!h.layout || !std::holds_alternative<StridedSpec>(*h.layout)) {
            invalid("strided flag without a strided descriptor");
        }
        const auto& s = std::get<StridedSpec>(*h.layout);
        if (s.block_count < 1) invalid("strided block_count < 1");
        if (s.stride_bytes < s.block_bytes) invalid("strided blocks overlap");
        if (s.total_bytes() != h.payload_len) invalid("strided total != payload_len");
    } else if (f.vectored) {
        if (!h.layout || !std::holds_alternative<VectoredSpec>(*h.layout)) {
            invalid("vectored flag without a vectored descriptor");
        }
        const auto& v = std::get<VectoredSpec>(*h.layout);
        if (v.entries.empty() || v.entries.size() > kMaxVectoredEntries) {
            invalid("vectored entry count out of range");
        }
        if (v.total_bytes() != h.payload_len) invalid("vectored total != payload_len");
    } else if (h.layout) {
        invalid("layout descriptor without a strided/vectored flag");
    }
}

std::size_t encoded_size(const AmHeader& h) {
    std::size_t n = kBaseHeaderBytes + kWordBytes * h.args.size() + layout_bytes(h);
    if (carries_payload(h)) n += h.payload_len;
    return n;
}

std::uint32_t packet_size_words(const AmHeader& h) {
    validate_header(h);
    return std::uint32_t((encoded_size(h) + kWordBytes - 1) / kWordBytes);
}

std::vector<std::byte> encode_packet(const AmHeader& h, std::span<const std::byte> payload) {
    validate_header(h);

    const std::size_t expected = carries_payload(h) ? h.payload_len : 0;
    if (payload.size() != expected) {
        throw ShoalError(ErrorCode::LengthMismatch,
                         "payload is " + std::to_string(payload.size()) + " bytes, header declares " +
                             std::to_string(expected));
    }

    const std::size_t total = encoded_size(h);
    if (total > kMaxPacketBytes) {
        throw ShoalError(ErrorCode::Oversize, "encoded packet is " + std::to_string(total) +
                                                  " bytes, limit is " + std::to_string(kMaxPacketBytes));
    }

    std::vector<std::byte> out;
    out.reserve(total);
    out.push_back(std::byte{h.version});
    out.push_back(std::byte(static_cast<std::uint8_t>(h.cls)));
    out.push_back(std::byte(h.flags.to_byte()));
    out.push_back(std::byte(std::uint8_t(h.args.size())));
    put_u16(out, h.src);
    put_u16(out, h.dst);
    put_u16(out, h.handler);
    put_u16(out, 0);  // reserved
    put_u32(out, h.token);
    put_u32(out, h.payload_len);
    put_u64(out, h.dest_offset);
    put_u32(out, 0);  // alignment pad
    for (std::uint64_t a : h.args) put_u64(out, a);
    if (h.flags.strided) {
        const auto& s = std::get<StridedSpec>(*h.layout);
        put_u32(out, s.block_bytes);
        put_u32(out, s.stride_bytes);
        put_u32(out, s.block_count);
    } else if (h.flags.vectored) {
        const auto& v = std::get<VectoredSpec>(*h.layout);
        put_u32(out, std::uint32_t(v.entries.size()));
        for (const auto& e : v.entries) {
            put_u64(out, e.offset);
            put_u32(out, e.len);
        }
    }
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

Packet decode_packet(std::span<const std::byte> bytes) {
    if (bytes.size() < kBaseHeaderBytes) {
        throw ShoalError(ErrorCode::Truncated, "input shorter than the 32-byte base header");
    }
    if (bytes.size() > kMaxPacketBytes) {
        throw ShoalError(ErrorCode::Oversize, "input exceeds the 9000-byte packet limit");
    }

    Cursor cur(bytes);
    AmHeader h;
    h.version = cur.u8();
    if (h.version != kProtocolVersion) {
        throw ShoalError(ErrorCode::BadVersion,
                         "version " + std::to_string(h.version) + ", expected " +
                             std::to_string(kProtocolVersion));
    }
    const std::uint8_t cls_byte = cur.u8();
    if (cls_byte > std::uint8_t(AmClass::Long)) invalid("unknown message class");
    h.cls = AmClass(cls_byte);
    h.flags = AmFlags::from_byte(cur.u8());
    const std::uint8_t arg_count = cur.u8();
    if (arg_count > kMaxArgs) invalid("more than 8 handler args");
    h.src = cur.u16();
    h.dst = cur.u16();
    h.handler = cur.u16();
    cur.u16();  // reserved
    h.token = cur.u32();
    h.payload_len = cur.u32();
    h.dest_offset = cur.u64();
    cur.u32();  // alignment pad

    h.args.reserve(arg_count);
    for (std::uint8_t i = 0; i < arg_count; ++i) h.args.push_back(cur.u64());

    if (h.flags.strided) {
        StridedSpec s;
        s.block_bytes = cur.u32();
        s.stride_bytes = cur.u32();
        s.block_count = cur.u32();
        h.layout = s;
    } else if (h.flags.vectored) {
        const std::uint32_t count = cur.u32();
        if (count < 1 || count > kMaxVectoredEntries) invalid("vectored entry count out of range");
        VectoredSpec v;
        v.entries.reserve(count);
        for (std::uint32_t i = 0; i < count; ++i) {
            VectoredEntry e;
            e.offset = cur.u64();
            e.len = cur.u32();
            v.entries.push_back(e);
        }
        h.layout = v;
    }

    Packet pkt;
    if (carries_payload(h)) {
        auto view = cur.take(h.payload_len);
        pkt.payload.assign(view.begin(), view.end());
    }
    if (cur.remaining() != 0) invalid("trailing bytes after the packet");

    validate_header(h);
    pkt.header = std::move(h);
    pkt.size_words = std::uint32_t((cur.consumed() + kWordBytes - 1) / kWordBytes);
    return pkt;
}

const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidHeader: return "INVALID_HEADER";
        case ErrorCode::Oversize: return "OVERSIZE";
        case ErrorCode::Truncated: return "TRUNCATED";
        case ErrorCode::BadVersion: return "BAD_VERSION";
        case ErrorCode::OutOfBounds: return "OUT_OF_BOUNDS";
        case ErrorCode::LengthMismatch: return "LENGTH_MISMATCH";
        case ErrorCode::ParseError: return "PARSE_ERROR";
        case ErrorCode::ValidationError: return "VALIDATION_ERROR";
        case ErrorCode::ConfigInvalid: return "CONFIG_INVALID";
        case ErrorCode::BindFailure: return "BIND_FAILURE";
        case ErrorCode::PeerUnreachable: return "PEER_UNREACHABLE";
        case ErrorCode::UdpFragmentLimit: return "UDP_FRAGMENT_LIMIT";
        case ErrorCode::DuplicateKernel: return "DUPLICATE_KERNEL";
        case ErrorCode::NotLocal: return "NOT_LOCAL";
        case ErrorCode::ReservedId: return "RESERVED_ID";
        case ErrorCode::DuplicateHandler: return "DUPLICATE_HANDLER";
        case ErrorCode::UnknownHandler: return "UNKNOWN_HANDLER";
        case ErrorCode::Timeout: return "TIMEOUT";
        case ErrorCode::Shutdown: return "SHUTDOWN";
        case ErrorCode::HandlerRestriction: return "HANDLER_RESTRICTION";
        case ErrorCode::HaloTooLarge: return "HALO_TOO_LARGE";
        case ErrorCode::IoError: return "IO_ERROR";
    }
    return "UNKNOWN";
}

}  // namespace shoal
