#pragma once

// Peer protocol over TCP: one framed request per connection, replies sent to
// the requester's advertised listener.
//
// A CommNode owns the listener and the accept loop (one thread per accepted
// connection, so two agents shipping large MTRs to each other cannot
// deadlock), a registry with the agent's latest (embedding, r_bar, mask)
// snapshot, and the pending-response sets of the communication event that is
// currently open. Anything addressed to a closed event is dropped.

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "mosaic/embedding.hpp"
#include "mosaic/masked_net.hpp"
#include "mosaic/wire.hpp"

namespace mosaic {

struct PeerAddress {
  AgentId id = 0;
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

struct ProtocolConfig {
  int qr_wait_ms = 1000;  // both windows close early once every reply is in
  int mtr_wait_ms = 3000;
  int connect_timeout_ms = 500;
  int io_timeout_ms = 5000;
  double theta = 0.5;
  bool server_side_selection = false;
};

struct SelectionFlags {
  bool criterion1 = true;  // cosine similarity above theta
  bool criterion2 = true;  // peer performance above own
};

inline std::uint64_t make_mask_id(AgentId agent, std::uint32_t epoch) {
  return (static_cast<std::uint64_t>(agent) << 32) | epoch;
}

// --- conversions ------------------------------------------------------------

inline wire::Embedding to_wire(const Eigen::MatrixXd& v) {
  wire::Embedding e;
  e.rows = static_cast<std::uint32_t>(v.rows());
  e.cols = static_cast<std::uint32_t>(v.cols());
  e.values.reserve(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (Eigen::Index j = 0; j < v.cols(); ++j) e.values.push_back(static_cast<float>(v(i, j)));
  return e;
}

inline Eigen::MatrixXd from_wire(const wire::Embedding& e) {
  Eigen::MatrixXd v(e.rows, e.cols);
  std::size_t k = 0;
  for (std::uint32_t i = 0; i < e.rows; ++i)
    for (std::uint32_t j = 0; j < e.cols; ++j) v(i, j) = static_cast<double>(e.values[k++]);
  return v;
}

inline wire::Mtr to_wire(const MaskScores<float>& m, AgentId sender, std::uint32_t event, std::uint64_t mask_id) {
  wire::Mtr out;
  out.sender = sender;
  out.event = event;
  out.mask_id = mask_id;
  for (const auto& s : m.layers) {
    wire::Layer l;
    l.rows = static_cast<std::uint32_t>(s.rows());
    l.cols = static_cast<std::uint32_t>(s.cols());
    l.values.reserve(static_cast<std::size_t>(s.size()));
    for (Eigen::Index i = 0; i < s.rows(); ++i)
      for (Eigen::Index j = 0; j < s.cols(); ++j) l.values.push_back(s(i, j));
    out.layers.push_back(std::move(l));
  }
  return out;
}

/// nullopt when the layer shapes do not match `arch`.
inline std::optional<MaskScores<float>> from_wire(const wire::Mtr& m, const Architecture& arch) {
  if (m.layers.size() != arch.layer_count()) return std::nullopt;
  MaskScores<float> out;
  out.owner = m.sender;
  out.mask_id = m.mask_id;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    const auto [rows, cols] = arch.weight_shape(i);
    if (static_cast<int>(l.rows) != rows || static_cast<int>(l.cols) != cols) return std::nullopt;
    Matrix<float> s(rows, cols);
    std::size_t k = 0;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) s(r, c) = l.values[k++];
    out.layers.push_back(std::move(s));
  }
  if (!out.all_finite()) return std::nullopt;
  return out;
}

// --- selection ----------------------------------------------------------------

/// Keeps response j iff cos(v_i, v_j) > theta and r_j > r_i (both strict), in
/// input order. Own responses and zero-norm or mis-shaped embeddings are
/// skipped. r_bar is compared at wire (f32) precision.
inline std::vector<wire::Qr> select_peers(const std::vector<wire::Qr>& responses, const Eigen::MatrixXd& own,
                                          double own_r_bar, double theta, AgentId self,
                                          SelectionFlags flags = {}) {
  std::vector<wire::Qr> out;
  const double own_r = static_cast<double>(static_cast<float>(own_r_bar));
  for (const auto& q : responses) {
    if (q.responder == self) continue;
    if (q.embedding.rows != own.rows() || q.embedding.cols != own.cols()) continue;
    double cos = 0.0;
    try {
      cos = cosine_similarity(from_wire(q.embedding).reshaped(), own.reshaped());
    } catch (const Error&) {
      continue;
    }
    if (flags.criterion1 && !(cos > theta)) continue;
    if (flags.criterion2 && !(static_cast<double>(q.r_bar) > own_r)) continue;
    out.push_back(q);
  }
  return out;
}

// --- sockets ------------------------------------------------------------------

namespace net {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    reset();
    fd_ = std::exchange(o.fd_, -1);
    return *this;
  }
  ~Fd() { reset(); }
  int get() const { return fd_; }
  explicit operator bool() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline void set_timeouts(int fd, int ms) {
  timeval tv{ms / 1000, (ms % 1000) * 1000};
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
}

inline Fd connect_to(const std::string& host, std::uint16_t port, int timeout_ms) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res) return Fd{};
  std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, ::freeaddrinfo);
  Fd fd(::socket(res->ai_family, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) return Fd{};
  const int flags = ::fcntl(fd.get(), F_GETFL, 0);
  ::fcntl(fd.get(), F_SETFL, flags | O_NONBLOCK);
  if (::connect(fd.get(), res->ai_addr, res->ai_addrlen) != 0) {
    if (errno != EINPROGRESS) return Fd{};
    pollfd p{fd.get(), POLLOUT, 0};
    if (::poll(&p, 1, timeout_ms) != 1) return Fd{};
    int err = 0;
    socklen_t len = sizeof(err);
    ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) return Fd{};
  }
  ::fcntl(fd.get(), F_SETFL, flags);
  const int one = 1;
  ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return fd;
}

inline bool write_all(int fd, const std::uint8_t* data, std::size_t n) {
  while (n > 0) {
    const ssize_t k = ::send(fd, data, n, MSG_NOSIGNAL);
    if (k < 0 && errno == EINTR) continue;
    if (k <= 0) return false;
    data += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

/// Reads up to n bytes; returns how many arrived before EOF, timeout or error.
inline std::size_t read_some(int fd, std::uint8_t* data, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t k = ::recv(fd, data + got, n - got, 0);
    if (k < 0 && errno == EINTR) continue;
    if (k <= 0) break;
    got += static_cast<std::size_t>(k);
  }
  return got;
}

/// One frame from a connected socket; empty if the peer closed without sending
/// anything (a liveness probe). Throws FramingError on malformed or truncated input.
inline std::vector<std::uint8_t> read_frame(int fd) {
  std::vector<std::uint8_t> buf(wire::kHeaderSize);
  const std::size_t got = read_some(fd, buf.data(), buf.size());
  if (got == 0) return {};
  const wire::Header h = wire::decode_header(buf.data(), got);
  buf.resize(wire::kHeaderSize + h.payload_length);
  const std::size_t body = read_some(fd, buf.data() + wire::kHeaderSize, h.payload_length);
  if (body < h.payload_length) {
    throw FramingError("payload_length " + std::to_string(h.payload_length) + " but connection ended",
                       wire::kHeaderSize + body);
  }
  return buf;
}

/// Connects, writes one frame and closes. Returns false if the peer is unreachable.
inline bool send_frame(const std::string& host, std::uint16_t port, const std::vector<std::uint8_t>& frame,
                       int connect_timeout_ms, int io_timeout_ms) {
  Fd fd = connect_to(host, port, connect_timeout_ms);
  if (!fd) return false;
  set_timeouts(fd.get(), io_timeout_ms);
  if (!write_all(fd.get(), frame.data(), frame.size())) return false;
  ::shutdown(fd.get(), SHUT_WR);
  // Wait for the receiver to finish reading, so the frame is not lost to a reset.
  std::uint8_t sink;
  read_some(fd.get(), &sink, 1);
  return true;
}

/// True once something accepts connections at host:port.
inline bool probe(const std::string& host, std::uint16_t port, int connect_timeout_ms) {
  return static_cast<bool>(connect_to(host, port, connect_timeout_ms));
}

/// Bound, listening IPv4 socket; port 0 picks an ephemeral port.
inline Fd listen_on(const std::string& host, std::uint16_t port, std::uint16_t& bound_port) {
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) throw Error("socket() failed: " + std::string(std::strerror(errno)));
  const int one = 1;
  ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) throw InvalidArgument("bad listen host " + host);
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    throw Error("bind " + host + ":" + std::to_string(port) + " failed: " + std::strerror(errno));
  }
  if (::listen(fd.get(), 128) != 0) throw Error("listen failed: " + std::string(std::strerror(errno)));
  socklen_t len = sizeof(addr);
  ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&addr), &len);
  bound_port = ntohs(addr.sin_port);
  return fd;
}

}  // namespace net

// --- node -----------------------------------------------------------------------

/// What the server answers with: the agent's latest published state.
struct RegistrySnapshot {
  Eigen::MatrixXd embedding;
  int embedding_version = 0;
  double r_bar = 0.0;
  std::uint64_t mask_id = 0;
  std::shared_ptr<const MaskScores<float>> mask;
};

struct TrafficCounters {
  std::atomic<std::uint64_t> bytes_in{0};
  std::atomic<std::uint64_t> bytes_out{0};
  std::atomic<std::uint64_t> frames_in{0};
  std::atomic<std::uint64_t> malformed{0};
  std::atomic<std::uint64_t> late_dropped{0};
  std::atomic<std::uint64_t> qr_sent{0};
  std::atomic<std::uint64_t> mtr_sent{0};
  std::atomic<std::uint64_t> err_sent{0};
};

struct ReceivedMask {
  wire::Mtr mtr;
  std::size_t bytes = 0;
};

class CommNode {
 public:
  CommNode(AgentId id, std::string host, std::uint16_t port, std::vector<PeerAddress> peers, ProtocolConfig cfg = {})
      : id_(id), host_(std::move(host)), port_(port), peers_(std::move(peers)), cfg_(cfg) {}

  ~CommNode() { stop(); }
  CommNode(const CommNode&) = delete;
  CommNode& operator=(const CommNode&) = delete;

  void start() {
    if (running_) return;
    listener_ = net::listen_on(host_, port_, port_);
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listener_.get(), SHUT_RDWR);
    if (accept_thread_.joinable()) accept_thread_.join();
    listener_.reset();
    std::unique_lock lk(handlers_mu_);
    handlers_cv_.wait(lk, [&] { return active_handlers_ == 0; });
  }

  AgentId id() const { return id_; }
  std::uint16_t port() const { return port_; }
  wire::Endpoint endpoint() const { return wire::Endpoint{host_, port_}; }
  const std::vector<PeerAddress>& peers() const { return peers_; }
  const ProtocolConfig& config() const { return cfg_; }
  const TrafficCounters& counters() const { return counters_; }

  void publish(RegistrySnapshot snap) {
    std::lock_guard lk(registry_mu_);
    registry_ = std::move(snap);
  }

  RegistrySnapshot snapshot() const {
    std::lock_guard lk(registry_mu_);
    return registry_;
  }

  // -- client side; one communication event at a time --

  /// Opens event `event`: later QRs/MTRs for any other event are dropped.
  void open_event(std::uint32_t event) {
    std::lock_guard lk(mu_);
    open_event_ = event;
    responses_.clear();
    requested_.clear();
    arrived_.clear();
    refused_ = 0;
    event_bytes_in_ = 0;
  }

  void close_event() {
    std::lock_guard lk(mu_);
    open_event_ = 0;
    requested_.clear();
  }

  /// Best-effort TEQ fan-out to every known peer except self. Returns the
  /// number of successful sends.
  int broadcast_teq(std::uint32_t event, const Eigen::MatrixXd& embedding, double r_bar,
                    std::uint64_t* bytes_out = nullptr) {
    wire::Teq teq{id_, event, endpoint(), to_wire(embedding), static_cast<float>(r_bar)};
    const auto frame = wire::encode(teq);
    int sent = 0;
    for (const auto& p : peers_) {
      if (p.id == id_) continue;
      if (send(p, frame)) {
        ++sent;
        if (bytes_out) *bytes_out += frame.size();
      } else {
        spdlog::info("agent {}: peer {} at {}:{} unreachable for TEQ", id_, p.id, p.host, p.port);
      }
    }
    return sent;
  }

  /// Waits until `expected` QRs for the open event arrived or the window closes.
  std::vector<wire::Qr> collect_responses(int expected, int wait_ms) {
    std::unique_lock lk(mu_);
    cv_.wait_for(lk, std::chrono::milliseconds(wait_ms),
                 [&] { return static_cast<int>(responses_.size()) >= expected; });
    return responses_;
  }

  /// Sends one MR per selected response and collects MTRs for the open event
  /// within the window. Duplicates (same mask_id) are kept once. Returns what
  /// arrived, in selection order.
  std::vector<ReceivedMask> request_masks(std::uint32_t event, const std::vector<wire::Qr>& selected, int wait_ms,
                                          std::uint64_t* bytes_out = nullptr) {
    if (selected.empty()) return {};
    int sent = 0;
    std::vector<std::uint64_t> order;
    for (const auto& q : selected) {
      const PeerAddress* p = find_peer(q.responder);
      if (!p) continue;
      {
        std::lock_guard lk(mu_);
        if (!requested_.insert(q.mask_id).second) continue;
      }
      const auto frame = wire::encode(wire::Mr{id_, event, endpoint(), q.mask_id});
      if (send(*p, frame)) {
        ++sent;
        order.push_back(q.mask_id);
        if (bytes_out) *bytes_out += frame.size();
      } else {
        std::lock_guard lk(mu_);
        requested_.erase(q.mask_id);
      }
    }
    std::unique_lock lk(mu_);
    const bool all = cv_.wait_for(lk, std::chrono::milliseconds(wait_ms), [&] {
      return static_cast<int>(arrived_.size()) + refused_ >= sent;
    });
    if (!all) {
      spdlog::info("agent {}: event {} got {} of {} masks before the window closed", id_, event, arrived_.size(),
                   sent);
    }
    std::vector<ReceivedMask> out;
    for (std::uint64_t id : order) {
      auto it = arrived_.find(id);
      if (it != arrived_.end()) out.push_back(std::move(it->second));
    }
    arrived_.clear();
    return out;
  }

  std::uint64_t event_bytes_in() const {
    std::lock_guard lk(mu_);
    return event_bytes_in_;
  }

 private:
  const PeerAddress* find_peer(AgentId id) const {
    for (const auto& p : peers_)
      if (p.id == id) return &p;
    return nullptr;
  }

  bool send(const PeerAddress& p, const std::vector<std::uint8_t>& frame) {
    return send_to(p.host, p.port, frame);
  }

  bool send_to(const std::string& host, std::uint16_t port, const std::vector<std::uint8_t>& frame) {
    const bool ok = net::send_frame(host, port, frame, cfg_.connect_timeout_ms, cfg_.io_timeout_ms);
    if (ok) counters_.bytes_out += frame.size();
    return ok;
  }

  void accept_loop() {
    while (running_) {
      pollfd p{listener_.get(), POLLIN, 0};
      const int r = ::poll(&p, 1, 100);
      if (r <= 0) continue;
      if (!(p.revents & POLLIN)) {
        if (!running_) break;
        continue;
      }
      net::Fd conn(::accept4(listener_.get(), nullptr, nullptr, SOCK_CLOEXEC));
      if (!conn) continue;
      {
        std::lock_guard lk(handlers_mu_);
        ++active_handlers_;
      }
      std::thread([this, c = std::move(conn)]() mutable {
        handle_connection(std::move(c));
        std::lock_guard lk(handlers_mu_);
        if (--active_handlers_ == 0) handlers_cv_.notify_all();
      }).detach();
    }
  }

  void handle_connection(net::Fd conn) {
    net::set_timeouts(conn.get(), cfg_.io_timeout_ms);
    wire::Message msg;
    std::size_t size = 0;
    try {
      const auto frame = net::read_frame(conn.get());
      if (frame.empty()) return;
      size = frame.size();
      msg = wire::decode(frame);
    } catch (const FramingError& e) {
      ++counters_.malformed;
      spdlog::debug("agent {}: dropped malformed frame: {}", id_, e.what());
      return;
    }
    conn.reset();  // one request per connection; replies go to the advertised listener
    counters_.bytes_in += size;
    ++counters_.frames_in;
    std::visit([&](auto& m) { on_message(m, size); }, msg);
  }

  void on_message(const wire::Teq& teq, std::size_t) {
    const RegistrySnapshot snap = snapshot();
    if (snap.embedding_version < 1 || teq.sender == id_) return;
    if (cfg_.server_side_selection) {
      // The requester would select us iff our own numbers pass its criteria.
      wire::Qr self{id_, teq.event, snap.mask_id, to_wire(snap.embedding), static_cast<float>(snap.r_bar)};
      if (select_peers({self}, from_wire(teq.embedding), teq.r_bar, cfg_.theta, teq.sender).empty()) return;
    }
    const auto frame =
        wire::encode(wire::Qr{id_, teq.event, snap.mask_id, to_wire(snap.embedding), static_cast<float>(snap.r_bar)});
    if (send_to(teq.reply.host, teq.reply.port, frame)) ++counters_.qr_sent;
  }

  void on_message(wire::Qr& qr, std::size_t size) {
    std::lock_guard lk(mu_);
    if (qr.event != open_event_ || open_event_ == 0) {
      ++counters_.late_dropped;
      return;
    }
    for (const auto& r : responses_)
      if (r.responder == qr.responder) return;
    event_bytes_in_ += size;
    responses_.push_back(std::move(qr));
    cv_.notify_all();
  }

  void on_message(const wire::Mr& mr, std::size_t) {
    const RegistrySnapshot snap = snapshot();
    std::vector<std::uint8_t> frame;
    bool is_mtr = false;
    // mask_id names a lineage (agent, epoch). Consolidation folds every older
    // epoch into the current scores, so a request that raced with a swap is
    // answered with the current lineage under the id it asked for.
    const bool ours = (mr.mask_id >> 32) == id_ && (mr.mask_id >> 32) == (snap.mask_id >> 32);
    const bool known = ours && static_cast<std::uint32_t>(mr.mask_id) <= static_cast<std::uint32_t>(snap.mask_id);
    if (snap.mask && known) {
      frame = wire::encode(to_wire(*snap.mask, id_, mr.event, mr.mask_id));
      is_mtr = true;
    } else {
      frame = wire::encode(wire::Err{id_, mr.event, mr.mask_id, static_cast<std::uint32_t>(wire::ErrCode::kUnknownMask),
                                     "unknown mask_id"});
    }
    if (send_to(mr.reply.host, mr.reply.port, frame)) {
      if (is_mtr) {
        ++counters_.mtr_sent;
      } else {
        ++counters_.err_sent;
      }
    }
  }

  void on_message(wire::Mtr& mtr, std::size_t size) {
    std::lock_guard lk(mu_);
    if (mtr.event != open_event_ || open_event_ == 0 || !requested_.count(mtr.mask_id)) {
      ++counters_.late_dropped;
      spdlog::info("agent {}: dropped late or unrequested mask {:#x} for event {}", id_, mtr.mask_id, mtr.event);
      return;
    }
    if (arrived_.count(mtr.mask_id)) return;
    event_bytes_in_ += size;
    const auto id = mtr.mask_id;
    arrived_.emplace(id, ReceivedMask{std::move(mtr), size});
    cv_.notify_all();
  }

  void on_message(const wire::Err& err, std::size_t) {
    spdlog::info("agent {}: peer {} refused mask {:#x}: {}", id_, err.sender, err.mask_id, err.message);
    std::lock_guard lk(mu_);
    if (err.event == open_event_ && requested_.count(err.mask_id)) {
      ++refused_;
      cv_.notify_all();
    }
  }

  AgentId id_;
  std::string host_;
  std::uint16_t port_;
  std::vector<PeerAddress> peers_;
  ProtocolConfig cfg_;

  net::Fd listener_;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  std::mutex handlers_mu_;
  std::condition_variable handlers_cv_;
  int active_handlers_ = 0;

  mutable std::mutex registry_mu_;
  RegistrySnapshot registry_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::uint32_t open_event_ = 0;
  std::vector<wire::Qr> responses_;
  std::set<std::uint64_t> requested_;
  std::map<std::uint64_t, ReceivedMask> arrived_;
  int refused_ = 0;
  std::uint64_t event_bytes_in_ = 0;

  TrafficCounters counters_;
};

}  // namespace mosaic
