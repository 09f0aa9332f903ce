#include <gtest/gtest.h>

#include <thread>

#include "mosaic/peer.hpp"
#include "mosaic/wire.hpp"
#include "support/messages.hpp"

using namespace mosaic;
using namespace std::chrono_literals;

namespace {

wire::Qr response(AgentId id, const Eigen::MatrixXd& v, float r_bar) {
  return wire::Qr{id, 1, make_mask_id(id, 0), to_wire(v), r_bar};
}

// Unit vector at angle acos(c) from e0 in the (e0, e1) plane.
Eigen::MatrixXd at_cosine(double c) {
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(2, 2);
  v(0, 0) = c;
  v(1, 0) = std::sqrt(1.0 - c * c);
  return v;
}

Eigen::MatrixXd e0() {
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(2, 2);
  v(0, 0) = 1.0;
  return v;
}

std::uint16_t dead_port() {
  std::uint16_t port = 0;
  net::listen_on("127.0.0.1", 0, port);  // closed again on return
  return port;
}

struct Collective {
  std::vector<std::unique_ptr<CommNode>> nodes;

  explicit Collective(int n, ProtocolConfig cfg = {}) {
    std::vector<std::uint16_t> ports;
    for (int i = 0; i < n; ++i) {
      nodes.push_back(std::make_unique<CommNode>(i, "127.0.0.1", 0, std::vector<PeerAddress>{}, cfg));
    }
    // Bind first to learn the ports, then rebuild with full peer lists.
    for (auto& nd : nodes) {
      nd->start();
      ports.push_back(nd->port());
    }
    std::vector<PeerAddress> all;
    for (int i = 0; i < n; ++i) all.push_back(PeerAddress{static_cast<AgentId>(i), "127.0.0.1", ports[i]});
    for (int i = 0; i < n; ++i) {
      nodes[i]->stop();
      nodes[i] = std::make_unique<CommNode>(i, "127.0.0.1", ports[i], all, cfg);
      nodes[i]->start();
    }
  }

  void publish(int i, const Eigen::MatrixXd& v, double r_bar, std::shared_ptr<const MaskScores<float>> mask = {}) {
    RegistrySnapshot s;
    s.embedding = v;
    s.embedding_version = 1;
    s.r_bar = r_bar;
    s.mask_id = make_mask_id(static_cast<AgentId>(i), 0);
    s.mask = std::move(mask);
    nodes[i]->publish(std::move(s));
  }
};

// Server-side counters tick after the reply is flushed, which can trail the client.
template <class F>
bool eventually(F pred) {
  for (int i = 0; i < 200; ++i) {
    if (pred()) return true;
    std::this_thread::sleep_for(5ms);
  }
  return pred();
}

Architecture tiny_arch() { return Architecture{3, {4}, 2}; }

}  // namespace

// --- codec ---------------------------------------------------------------------

TEST(WireTest, TeqRoundTripWithEmbeddingShape) {
  Rng rng(1);
  wire::Teq teq;
  teq.sender = 3;
  teq.event = 17;
  teq.reply = {"127.0.0.1", 40001};
  teq.embedding.rows = 50;
  teq.embedding.cols = 67;
  for (int i = 0; i < 50 * 67; ++i) teq.embedding.values.push_back(static_cast<float>(rng.uniform(-1, 1)));
  teq.r_bar = 0.625f;
  const auto bytes = wire::encode(teq);
  EXPECT_EQ(bytes.size(), 10u + 4 + 4 + (2 + 9 + 2) + 8 + 50 * 67 * 4 + 4);
  EXPECT_EQ(std::get<wire::Teq>(wire::decode(bytes)), teq);
}

TEST(WireTest, HeaderLayout) {
  const auto bytes = wire::encode(wire::Mr{0x01020304, 5, {"h", 7}, 0x1122334455667788ULL});
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MSC1");
  EXPECT_EQ(bytes[4], 0x01);
  EXPECT_EQ(bytes[5], 0x03);
  const std::uint32_t len = bytes[6] | bytes[7] << 8 | bytes[8] << 16 | static_cast<std::uint32_t>(bytes[9]) << 24;
  EXPECT_EQ(len, bytes.size() - 10);
  // sender id, little-endian
  EXPECT_EQ(bytes[10], 0x04);
  EXPECT_EQ(bytes[13], 0x01);
}

TEST(WireTest, PropertyRoundTripAllTypes) {
  Rng rng(2025);
  int per_type[5] = {};
  for (int i = 0; i < 1500; ++i) {
    const auto m = testmsg::random_message(rng);
    ++per_type[m.index()];
    const auto bytes = wire::encode(m);
    const auto back = wire::decode(bytes);
    ASSERT_EQ(back, m) << "message " << i << " type " << wire::type_name(wire::type_of(m));
    EXPECT_EQ(wire::encode(back), bytes);
  }
  for (int t = 0; t < 5; ++t) EXPECT_GT(per_type[t], 200);
}

TEST(WireTest, TruncatedFrameIsFramingError) {
  Rng rng(3);
  const auto bytes = wire::encode(testmsg::random_teq(rng));
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{9}, std::size_t{10}, bytes.size() - 1}) {
    try {
      wire::decode(bytes.data(), cut);
      FAIL() << "accepted truncated frame of " << cut << " bytes";
    } catch (const FramingError& e) {
      EXPECT_LE(e.offset(), cut);
    }
  }
}

TEST(WireTest, ErrorsNameTheOffset) {
  Rng rng(4);
  auto bytes = wire::encode(testmsg::random_qr(rng));
  auto bad = bytes;
  bad[1] = 'X';
  try {
    wire::decode(bad);
    FAIL();
  } catch (const FramingError& e) {
    EXPECT_EQ(e.offset(), 1u);
  }
  bad = bytes;
  bad[4] = 0x02;
  try {
    wire::decode(bad);
    FAIL();
  } catch (const FramingError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  bad = bytes;
  bad[5] = 0x09;
  EXPECT_THROW(wire::decode(bad), UnknownMessageType);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(wire::decode(bad), FramingError);
}

TEST(WireTest, InconsistentInnerLengthsAreRejected) {
  // A layer claiming more floats than the payload holds.
  wire::Mtr m{1, 1, 7, {wire::Layer{2, 2, {1, 2, 3, 4}}}};
  auto bytes = wire::encode(m);
  bytes[10 + 4 + 4 + 8 + 4] = 3;  // rows 2 -> 3
  EXPECT_THROW(wire::decode(bytes), FramingError);
}

TEST(WireTest, FuzzedFramesNeverEscapeAsOtherErrors) {
  Rng rng(5);
  for (int i = 0; i < 3000; ++i) {
    auto bytes = wire::encode(testmsg::random_message(rng));
    const int flips = 1 + static_cast<int>(rng.index(4));
    for (int f = 0; f < flips; ++f) bytes[rng.index(bytes.size())] = static_cast<std::uint8_t>(rng.index(256));
    if (rng.uniform() < 0.3) bytes.resize(rng.index(bytes.size() + 1));
    try {
      wire::decode(bytes);
    } catch (const FramingError&) {
    }
  }
}

// --- selection -------------------------------------------------------------------

TEST(SelectPeersTest, BoundaryTable) {
  const float eps = 1e-3f;
  const float own = 0.4f;
  // (1,1,0,0) vs (1,0,1,0) has cosine exactly 1/2 even after the f32 wire cast.
  Eigen::MatrixXd half_own(2, 2), half_peer(2, 2);
  half_own << 1, 0, 1, 0;
  half_peer << 1, 1, 0, 0;
  for (double c : {0.49, 0.5, 0.51}) {
    for (float dr : {-eps, 0.0f, eps}) {
      const Eigen::MatrixXd mine = c == 0.5 ? half_own : e0();
      const auto peer = c == 0.5 ? half_peer : at_cosine(c);
      const auto sel = select_peers({response(1, peer, own + dr)}, mine, own, 0.5, 0);
      const bool expect = c > 0.5 && dr > 0.0f;
      EXPECT_EQ(sel.size(), expect ? 1u : 0u) << "cos " << c << " dr " << dr;
    }
  }
}

TEST(SelectPeersTest, ExactHalfCosineIsRejected) {
  // (1,1,0,0) vs (1,0,1,0): cosine exactly 1/2.
  Eigen::MatrixXd a(2, 2), b(2, 2);
  a << 1, 0, 1, 0;
  b << 1, 1, 0, 0;
  EXPECT_EQ(cosine_similarity(a.reshaped(), b.reshaped()), 0.5);
  EXPECT_TRUE(select_peers({response(1, b, 0.9f)}, a, 0.1, 0.5, 0).empty());
}

TEST(SelectPeersTest, Examples) {
  EXPECT_EQ(select_peers({response(1, at_cosine(0.6), 0.8f)}, e0(), 0.2, 0.5, 0).size(), 1u);
  EXPECT_TRUE(select_peers({response(1, at_cosine(0.9), 0.3f)}, e0(), 0.3, 0.5, 0).empty());
}

TEST(SelectPeersTest, ExcludesSelfAndZeroNorm) {
  std::vector<wire::Qr> rs{response(0, e0(), 1.0f), response(2, Eigen::MatrixXd::Zero(2, 2), 1.0f),
                           response(3, e0(), 1.0f)};
  const auto sel = select_peers(rs, e0(), 0.0, 0.5, 0);
  ASSERT_EQ(sel.size(), 1u);
  EXPECT_EQ(sel[0].responder, 3u);
}

TEST(SelectPeersTest, SubsetOrderStableAndMonotoneInTheta) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<wire::Qr> rs;
    for (int j = 1; j <= 7; ++j) {
      rs.push_back(response(j, at_cosine(rng.uniform(-1, 1)), static_cast<float>(rng.uniform())));
    }
    const double own_r = rng.uniform();
    std::vector<AgentId> prev;
    bool first = true;
    for (double theta = -0.9; theta < 0.95; theta += 0.1) {
      const auto sel = select_peers(rs, e0(), own_r, theta, 0);
      std::vector<AgentId> ids;
      for (const auto& q : sel) ids.push_back(q.responder);
      EXPECT_TRUE(std::is_sorted(ids.begin(), ids.end()));
      if (!first) {
        for (AgentId id : ids) EXPECT_NE(std::find(prev.begin(), prev.end(), id), prev.end());
      }
      prev = ids;
      first = false;
    }
  }
}

TEST(SelectPeersTest, AblationFlags) {
  std::vector<wire::Qr> rs{response(1, at_cosine(-0.8), 0.0f), response(2, at_cosine(0.9), 0.0f)};
  EXPECT_EQ(select_peers(rs, e0(), 0.5, 0.5, 0, {false, false}).size(), 2u);
  EXPECT_EQ(select_peers(rs, e0(), 0.5, 0.5, 0, {true, false}).size(), 1u);
  EXPECT_EQ(select_peers(rs, e0(), 0.5, 0.5, 0, {false, true}).size(), 0u);
}

TEST(MaskWireTest, RoundTripAndShapeCheck) {
  const auto arch = tiny_arch();
  const auto m = MaskScores<float>::random(arch, 3, 1.0);
  const auto back = from_wire(to_wire(m, 4, 2, make_mask_id(4, 9)), arch);
  ASSERT_TRUE(back.has_value());
  for (std::size_t i = 0; i < m.layers.size(); ++i) EXPECT_EQ(back->layers[i], m.layers[i]);
  EXPECT_EQ(back->mask_id, (std::uint64_t{4} << 32) | 9);
  EXPECT_FALSE(from_wire(to_wire(m, 4, 2, 1), Architecture{3, {5}, 2}).has_value());
}

// --- loopback ----------------------------------------------------------------------

TEST(CommNodeTest, BroadcastCounts) {
  CommNode lonely(0, "127.0.0.1", 0, {});
  lonely.start();
  EXPECT_EQ(lonely.broadcast_teq(1, e0(), 0.0), 0);

  Collective c(3);
  std::vector<PeerAddress> peers{{1, "127.0.0.1", c.nodes[1]->port()},
                                 {2, "127.0.0.1", c.nodes[2]->port()},
                                 {3, "127.0.0.1", dead_port()}};
  CommNode client(9, "127.0.0.1", 0, peers);
  client.start();
  EXPECT_EQ(client.broadcast_teq(1, e0(), 0.0), 2);
}

TEST(CommNodeTest, FullCollectiveOfEight) {
  Collective c(8);
  for (int i = 0; i < 8; ++i) c.publish(i, at_cosine(0.1 * i), 0.1 * i);
  for (int i = 0; i < 8; ++i) {
    auto& nd = *c.nodes[i];
    nd.open_event(1);
    EXPECT_EQ(nd.broadcast_teq(1, e0(), 0.0), 7);
    const auto rs = nd.collect_responses(7, 2000);
    EXPECT_EQ(rs.size(), 7u);
    for (const auto& q : rs) EXPECT_NE(q.responder, static_cast<AgentId>(i));
    nd.close_event();
  }
}

TEST(CommNodeTest, ConcurrentTeqsEachGetOneIntactQr) {
  Collective c(8);
  Rng rng(11);
  Eigen::MatrixXd v(50, 67);
  for (auto& x : v.reshaped()) x = rng.uniform(-1, 1);
  c.publish(0, v, 0.75);
  const auto expected = to_wire(v);

  std::vector<std::thread> ts;
  std::vector<std::vector<wire::Qr>> got(8);
  for (int i = 1; i < 8; ++i) {
    ts.emplace_back([&, i] {
      auto& nd = *c.nodes[i];
      nd.open_event(5);
      // Only node 0 has published, so exactly one QR can arrive.
      nd.broadcast_teq(5, e0(), 0.0);
      got[i] = nd.collect_responses(1, 3000);
      std::this_thread::sleep_for(100ms);
      got[i] = nd.collect_responses(99, 0);
      nd.close_event();
    });
  }
  for (auto& t : ts) t.join();
  for (int i = 1; i < 8; ++i) {
    ASSERT_EQ(got[i].size(), 1u) << "node " << i;
    EXPECT_EQ(got[i][0].responder, 0u);
    EXPECT_EQ(got[i][0].embedding, expected);
    EXPECT_EQ(got[i][0].r_bar, 0.75f);
  }
  EXPECT_TRUE(eventually([&] { return c.nodes[0]->counters().qr_sent.load() == 7u; }));
}

TEST(CommNodeTest, MaskRequestRoundTrip) {
  Collective c(3);
  const auto arch = tiny_arch();
  auto m1 = std::make_shared<const MaskScores<float>>(MaskScores<float>::random(arch, 1, 1.0));
  auto m2 = std::make_shared<const MaskScores<float>>(MaskScores<float>::random(arch, 2, 1.0));
  c.publish(1, e0(), 0.9, m1);
  c.publish(2, e0(), 0.8, m2);
  c.publish(0, e0(), 0.1);

  auto& me = *c.nodes[0];
  me.open_event(3);
  me.broadcast_teq(3, e0(), 0.1);
  auto rs = me.collect_responses(2, 2000);
  ASSERT_EQ(rs.size(), 2u);
  const auto sel = select_peers(rs, e0(), 0.1, 0.5, 0);
  ASSERT_EQ(sel.size(), 2u);
  // Duplicate selection entries produce one MR and one mask.
  auto dup = sel;
  dup.push_back(sel[0]);
  const auto masks = me.request_masks(3, dup, 2000);
  me.close_event();
  ASSERT_EQ(masks.size(), 2u);
  for (const auto& rm : masks) {
    const auto scores = from_wire(rm.mtr, arch);
    ASSERT_TRUE(scores.has_value());
    const auto& want = rm.mtr.sender == 1 ? *m1 : *m2;
    for (std::size_t i = 0; i < want.layers.size(); ++i) EXPECT_EQ(scores->layers[i], want.layers[i]);
  }
  EXPECT_TRUE(eventually(
      [&] { return c.nodes[1]->counters().mtr_sent.load() + c.nodes[2]->counters().mtr_sent.load() == 2u; }));
}

TEST(CommNodeTest, EmptySelectionMovesNoMasks) {
  Collective c(3);
  const auto arch = tiny_arch();
  for (int i = 1; i < 3; ++i) {
    c.publish(i, e0(), 0.2, std::make_shared<const MaskScores<float>>(MaskScores<float>::random(arch, i)));
  }
  auto& me = *c.nodes[0];
  me.open_event(1);
  std::uint64_t out = 0;
  me.broadcast_teq(1, e0(), 0.5, &out);
  const auto rs = me.collect_responses(2, 2000);
  ASSERT_EQ(rs.size(), 2u);
  const auto sel = select_peers(rs, e0(), 0.5, 0.5, 0);  // nobody outperforms 0.5
  EXPECT_TRUE(sel.empty());
  EXPECT_TRUE(me.request_masks(1, sel, 100, &out).empty());
  me.close_event();

  const auto teq_bytes = wire::encode(wire::Teq{0, 1, me.endpoint(), to_wire(e0()), 0.5f}).size();
  EXPECT_EQ(out, 2 * teq_bytes);
  EXPECT_EQ(me.counters().bytes_out.load(), 2 * teq_bytes);
  std::this_thread::sleep_for(50ms);
  for (int i = 1; i < 3; ++i) {
    EXPECT_EQ(c.nodes[i]->counters().mtr_sent.load(), 0u);
    EXPECT_EQ(c.nodes[i]->counters().qr_sent.load(), 1u);
  }
}

TEST(CommNodeTest, OneOfTwoPeersTimesOut) {
  Collective c(2);
  const auto arch = tiny_arch();
  c.publish(1, e0(), 0.9, std::make_shared<const MaskScores<float>>(MaskScores<float>::random(arch, 1)));
  // Peer 7 is listed but nothing listens there.
  std::vector<PeerAddress> peers{{1, "127.0.0.1", c.nodes[1]->port()}, {7, "127.0.0.1", dead_port()}};
  CommNode me(0, "127.0.0.1", 0, peers);
  me.start();
  me.open_event(1);
  std::vector<wire::Qr> sel{response(1, e0(), 0.9f), response(7, e0(), 0.9f)};
  const auto masks = me.request_masks(1, sel, 300);
  EXPECT_EQ(masks.size(), 1u);
  EXPECT_TRUE(me.request_masks(1, {}, 300).empty());
}

TEST(CommNodeTest, UnknownMaskIdGetsErrorAndServerStaysAlive) {
  Collective c(2);
  c.publish(1, e0(), 0.9);
  auto& me = *c.nodes[0];
  me.open_event(2);
  wire::Qr bogus = response(1, e0(), 0.9f);
  bogus.mask_id = 0xDEAD;
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_TRUE(me.request_masks(2, {bogus}, 3000).empty());
  // The ERR reply ends the wait early.
  EXPECT_LT(std::chrono::steady_clock::now() - t0, 2500ms);
  EXPECT_TRUE(eventually([&] { return c.nodes[1]->counters().err_sent.load() == 1u; }));
  me.broadcast_teq(2, e0(), 0.0);
  EXPECT_EQ(me.collect_responses(1, 2000).size(), 1u);
  me.close_event();
}

TEST(CommNodeTest, RequestForOlderEpochGetsCurrentLineage) {
  Collective c(2);
  const auto arch = tiny_arch();
  auto m = std::make_shared<MaskScores<float>>(MaskScores<float>::random(arch, 1, 1.0));
  RegistrySnapshot s;
  s.embedding = e0();
  s.embedding_version = 1;
  s.r_bar = 0.9;
  s.mask_id = make_mask_id(1, 3);
  s.mask = m;
  c.nodes[1]->publish(s);

  auto& me = *c.nodes[0];
  me.open_event(1);
  auto older = response(1, e0(), 0.9f);
  older.mask_id = make_mask_id(1, 2);
  auto future = response(1, e0(), 0.9f);
  future.mask_id = make_mask_id(1, 4);
  const auto got = me.request_masks(1, {older, future}, 2000);
  me.close_event();
  ASSERT_EQ(got.size(), 1u);
  EXPECT_EQ(got[0].mtr.mask_id, make_mask_id(1, 2));
  EXPECT_EQ(from_wire(got[0].mtr, arch)->layers[0], m->layers[0]);
  EXPECT_TRUE(eventually([&] { return c.nodes[1]->counters().err_sent.load() == 1u; }));
}

TEST(CommNodeTest, LateMasksAreDropped) {
  Collective c(2);
  const auto arch = tiny_arch();
  const auto m = MaskScores<float>::random(arch, 1);
  const auto frame = wire::encode(to_wire(m, 1, 4, make_mask_id(1, 0)));
  c.nodes[0]->open_event(5);
  ASSERT_TRUE(net::send_frame("127.0.0.1", c.nodes[0]->port(), frame, 500, 2000));
  std::this_thread::sleep_for(100ms);
  EXPECT_EQ(c.nodes[0]->counters().late_dropped.load(), 1u);
  c.nodes[0]->close_event();
}

TEST(CommNodeTest, SurvivesMalformedFrames) {
  Collective c(2);
  c.publish(1, e0(), 0.3);
  const auto port = c.nodes[1]->port();
  Rng rng(99);
  for (int i = 0; i < 60; ++i) {
    std::vector<std::uint8_t> junk;
    switch (i % 4) {
      case 0:  // random bytes
        junk.resize(rng.index(64));
        for (auto& b : junk) b = static_cast<std::uint8_t>(rng.index(256));
        break;
      case 1: {  // valid header promising more payload than is sent
        junk = wire::encode(testmsg::random_teq(rng));
        junk.resize(junk.size() / 2);
        break;
      }
      case 2: {  // bit-flipped valid frame
        junk = wire::encode(testmsg::random_message(rng));
        junk[rng.index(junk.size())] ^= 0xFF;
        break;
      }
      default: {  // unknown type
        junk = wire::encode(testmsg::random_qr(rng));
        junk[5] = 0x09;
      }
    }
    net::send_frame("127.0.0.1", port, junk, 500, 2000);
  }
  EXPECT_GT(c.nodes[1]->counters().malformed.load(), 30u);
  auto& me = *c.nodes[0];
  me.open_event(1);
  me.broadcast_teq(1, e0(), 0.0);
  EXPECT_EQ(me.collect_responses(1, 2000).size(), 1u);
  me.close_event();
}

TEST(CommNodeTest, ServerSideSelectionFiltersReplies) {
  ProtocolConfig cfg;
  cfg.server_side_selection = true;
  Collective c(3, cfg);
  c.publish(1, at_cosine(0.9), 0.8);  // similar and better: answers
  c.publish(2, at_cosine(0.1), 0.8);  // dissimilar: stays silent
  auto& me = *c.nodes[0];
  me.open_event(1);
  me.broadcast_teq(1, e0(), 0.2);
  const auto rs = me.collect_responses(2, 400);
  me.close_event();
  ASSERT_EQ(rs.size(), 1u);
  EXPECT_EQ(rs[0].responder, 1u);
}

TEST(CommNodeTest, NoReplyBeforeFirstEmbedding) {
  Collective c(2);
  auto& me = *c.nodes[0];
  me.open_event(1);
  EXPECT_EQ(me.broadcast_teq(1, e0(), 0.0), 1);
  EXPECT_TRUE(me.collect_responses(1, 200).empty());
  me.close_event();
}
