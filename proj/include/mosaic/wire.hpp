#pragma once

// Frame layout (all integers and floats little-endian):
//
//   "MSC1" | version 0x01 | msg_type u8 | payload_length u32 | payload
//
// msg_type: 0x01 TEQ, 0x02 QR, 0x03 MR, 0x04 MTR, 0x05 ERR.
//
// Payloads. An endpoint is  host_len u16, host bytes, port u16.  An embedding
// is  rows u32, cols u32, rows*cols f32 row-major.
//
//   TEQ  sender u32, event u32, reply endpoint, embedding, r_bar f32
//   QR   responder u32, event u32, mask_id u64, embedding, r_bar f32
//   MR   sender u32, event u32, reply endpoint, mask_id u64
//   MTR  sender u32, event u32, mask_id u64, layer_count u32,
//        per layer: rows u32, cols u32, rows*cols f32 row-major
//   ERR  sender u32, event u32, mask_id u64, code u32, msg_len u16, msg bytes
//
// `event` is the requester's communication-event counter; replies echo it so
// answers to a closed event can be told apart and dropped.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mosaic/error.hpp"

namespace mosaic::wire {

static_assert(std::endian::native == std::endian::little, "wire code assumes a little-endian host");

inline constexpr char kMagic[4] = {'M', 'S', 'C', '1'};
inline constexpr std::uint8_t kVersion = 0x01;
inline constexpr std::size_t kHeaderSize = 10;
inline constexpr std::uint32_t kMaxPayload = 256u << 20;

enum class MsgType : std::uint8_t { kTeq = 0x01, kQr = 0x02, kMr = 0x03, kMtr = 0x04, kErr = 0x05 };

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;
  bool operator==(const Endpoint&) const = default;
};

struct Embedding {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> values;  // row-major
  bool operator==(const Embedding&) const = default;
};

struct Teq {
  std::uint32_t sender = 0;
  std::uint32_t event = 0;
  Endpoint reply;
  Embedding embedding;
  float r_bar = 0.0f;
  bool operator==(const Teq&) const = default;
};

struct Qr {
  std::uint32_t responder = 0;
  std::uint32_t event = 0;
  std::uint64_t mask_id = 0;
  Embedding embedding;
  float r_bar = 0.0f;
  bool operator==(const Qr&) const = default;
};

struct Mr {
  std::uint32_t sender = 0;
  std::uint32_t event = 0;
  Endpoint reply;
  std::uint64_t mask_id = 0;
  bool operator==(const Mr&) const = default;
};

struct Layer {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> values;  // row-major
  bool operator==(const Layer&) const = default;
};

struct Mtr {
  std::uint32_t sender = 0;
  std::uint32_t event = 0;
  std::uint64_t mask_id = 0;
  std::vector<Layer> layers;
  bool operator==(const Mtr&) const = default;
};

enum class ErrCode : std::uint32_t { kUnknownMask = 1, kNotReady = 2 };

struct Err {
  std::uint32_t sender = 0;
  std::uint32_t event = 0;
  std::uint64_t mask_id = 0;
  std::uint32_t code = 0;
  std::string message;
  bool operator==(const Err&) const = default;
};

using Message = std::variant<Teq, Qr, Mr, Mtr, Err>;

inline MsgType type_of(const Message& m) {
  return static_cast<MsgType>(m.index() + 1);
}

inline const char* type_name(MsgType t) {
  switch (t) {
    case MsgType::kTeq: return "TEQ";
    case MsgType::kQr: return "QR";
    case MsgType::kMr: return "MR";
    case MsgType::kMtr: return "MTR";
    case MsgType::kErr: return "ERR";
  }
  return "?";
}

namespace detail {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
  }
  void put_floats(const std::vector<float>& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
    out.insert(out.end(), p, p + v.size() * sizeof(float));
  }
  void put_string(std::string_view s) {
    if (s.size() > 0xFFFF) throw InvalidArgument("string too long for wire");
    put(static_cast<std::uint16_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
  void put(const Endpoint& e) {
    put_string(e.host);
    put(e.port);
  }
  void put(const Embedding& e) {
    if (static_cast<std::uint64_t>(e.rows) * e.cols != e.values.size()) {
      throw InvalidArgument("embedding value count != rows * cols");
    }
    put(e.rows);
    put(e.cols);
    put_floats(e.values);
  }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size, std::size_t base) : p_(data), n_(size), base_(base) {}

  template <typename T>
  T get() {
    need(sizeof(T), "field");
    T v;
    std::memcpy(&v, p_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::vector<float> get_floats(std::uint64_t count) {
    if (count > (n_ - pos_) / sizeof(float)) fail("float array runs past payload end");
    std::vector<float> v(static_cast<std::size_t>(count));
    std::memcpy(v.data(), p_ + pos_, v.size() * sizeof(float));
    pos_ += v.size() * sizeof(float);
    return v;
  }
  std::string get_string() {
    const auto len = get<std::uint16_t>();
    need(len, "string");
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }
  Endpoint get_endpoint() {
    Endpoint e;
    e.host = get_string();
    e.port = get<std::uint16_t>();
    return e;
  }
  Embedding get_embedding() {
    Embedding e;
    e.rows = get<std::uint32_t>();
    e.cols = get<std::uint32_t>();
    e.values = get_floats(static_cast<std::uint64_t>(e.rows) * e.cols);
    return e;
  }
  void finish() {
    if (pos_ != n_) fail("trailing bytes after payload");
  }
  [[noreturn]] void fail(const std::string& what) const { throw FramingError(what, base_ + pos_); }

 private:
  void need(std::size_t k, const char* what) {
    if (k > n_ - pos_) fail(std::string("truncated ") + what);
  }

  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

inline void encode_payload(Writer& w, const Teq& m) {
  w.put(m.sender);
  w.put(m.event);
  w.put(m.reply);
  w.put(m.embedding);
  w.put(m.r_bar);
}
inline void encode_payload(Writer& w, const Qr& m) {
  w.put(m.responder);
  w.put(m.event);
  w.put(m.mask_id);
  w.put(m.embedding);
  w.put(m.r_bar);
}
inline void encode_payload(Writer& w, const Mr& m) {
  w.put(m.sender);
  w.put(m.event);
  w.put(m.reply);
  w.put(m.mask_id);
}
inline void encode_payload(Writer& w, const Mtr& m) {
  w.put(m.sender);
  w.put(m.event);
  w.put(m.mask_id);
  w.put(static_cast<std::uint32_t>(m.layers.size()));
  for (const auto& l : m.layers) {
    if (static_cast<std::uint64_t>(l.rows) * l.cols != l.values.size()) {
      throw InvalidArgument("layer value count != rows * cols");
    }
    w.put(l.rows);
    w.put(l.cols);
    w.put_floats(l.values);
  }
}
inline void encode_payload(Writer& w, const Err& m) {
  w.put(m.sender);
  w.put(m.event);
  w.put(m.mask_id);
  w.put(m.code);
  w.put_string(m.message);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Message& m) {
  detail::Writer w;
  w.out.reserve(64);
  w.out.insert(w.out.end(), kMagic, kMagic + 4);
  w.put(kVersion);
  w.put(static_cast<std::uint8_t>(type_of(m)));
  w.put(std::uint32_t{0});
  std::visit([&](const auto& msg) { detail::encode_payload(w, msg); }, m);
  const std::size_t payload = w.out.size() - kHeaderSize;
  if (payload > kMaxPayload) throw InvalidArgument("message exceeds maximum payload size");
  const auto len = static_cast<std::uint32_t>(payload);
  std::memcpy(w.out.data() + 6, &len, sizeof(len));
  return w.out;
}

struct Header {
  MsgType type;
  std::uint32_t payload_length;
};

/// Validates the fixed 10-byte header.
inline Header decode_header(const std::uint8_t* data, std::size_t size) {
  for (std::size_t i = 0; i < 4; ++i) {
    if (i >= size) throw FramingError("truncated magic", size);
    if (data[i] != static_cast<std::uint8_t>(kMagic[i])) throw FramingError("bad magic", i);
  }
  if (size < 5) throw FramingError("truncated header", size);
  if (data[4] != kVersion) throw FramingError("unsupported version " + std::to_string(data[4]), 4);
  if (size < 6) throw FramingError("truncated header", size);
  const std::uint8_t t = data[5];
  if (t < 0x01 || t > 0x05) throw UnknownMessageType(t, 5);
  if (size < kHeaderSize) throw FramingError("truncated header", size);
  std::uint32_t len;
  std::memcpy(&len, data + 6, sizeof(len));
  if (len > kMaxPayload) throw FramingError("payload length " + std::to_string(len) + " exceeds limit", 6);
  return Header{static_cast<MsgType>(t), len};
}

inline Message decode(const std::uint8_t* data, std::size_t size) {
  const Header h = decode_header(data, size);
  if (size - kHeaderSize < h.payload_length) {
    throw FramingError("payload_length " + std::to_string(h.payload_length) + " exceeds available bytes", size);
  }
  if (size - kHeaderSize > h.payload_length) throw FramingError("bytes after frame end", kHeaderSize + h.payload_length);
  detail::Reader r(data + kHeaderSize, h.payload_length, kHeaderSize);
  switch (h.type) {
    case MsgType::kTeq: {
      Teq m;
      m.sender = r.get<std::uint32_t>();
      m.event = r.get<std::uint32_t>();
      m.reply = r.get_endpoint();
      m.embedding = r.get_embedding();
      m.r_bar = r.get<float>();
      r.finish();
      return m;
    }
    case MsgType::kQr: {
      Qr m;
      m.responder = r.get<std::uint32_t>();
      m.event = r.get<std::uint32_t>();
      m.mask_id = r.get<std::uint64_t>();
      m.embedding = r.get_embedding();
      m.r_bar = r.get<float>();
      r.finish();
      return m;
    }
    case MsgType::kMr: {
      Mr m;
      m.sender = r.get<std::uint32_t>();
      m.event = r.get<std::uint32_t>();
      m.reply = r.get_endpoint();
      m.mask_id = r.get<std::uint64_t>();
      r.finish();
      return m;
    }
    case MsgType::kMtr: {
      Mtr m;
      m.sender = r.get<std::uint32_t>();
      m.event = r.get<std::uint32_t>();
      m.mask_id = r.get<std::uint64_t>();
      const auto count = r.get<std::uint32_t>();
      for (std::uint32_t i = 0; i < count; ++i) {
        Layer l;
        l.rows = r.get<std::uint32_t>();
        l.cols = r.get<std::uint32_t>();
        l.values = r.get_floats(static_cast<std::uint64_t>(l.rows) * l.cols);
        m.layers.push_back(std::move(l));
      }
      r.finish();
      return m;
    }
    case MsgType::kErr: {
      Err m;
      m.sender = r.get<std::uint32_t>();
      m.event = r.get<std::uint32_t>();
      m.mask_id = r.get<std::uint64_t>();
      m.code = r.get<std::uint32_t>();
      m.message = r.get_string();
      r.finish();
      return m;
    }
  }
  throw UnknownMessageType(static_cast<unsigned>(h.type), 5);
}

inline Message decode(const std::vector<std::uint8_t>& bytes) { return decode(bytes.data(), bytes.size()); }

}  // namespace mosaic::wire
