#include <gtest/gtest.h>

#include <chrono>
#include <sstream>
#include <thread>

#include "splitvae/transport.hpp"

using namespace splitvae;
using namespace std::chrono_literals;

namespace {

Tensor tagged(int rank, std::size_t rows, std::size_t cols) {
  Tensor t = Tensor::matrix(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rank * 1000.0 + static_cast<double>(i);
  return t;
}

// Walk the bus through the two phases that precede a scatter.
void advance_to_scatter(InProcessBus& bus, std::size_t edges) {
  std::vector<std::pair<RankId, Tensor>> c;
  for (std::size_t r = 1; r <= edges; ++r) c.emplace_back(RankId{int(r)}, Tensor::matrix(1, 1));
  gather(bus, Phase::enc_fp_gather, std::move(c));
}

}  // namespace

TEST(Gather, SingleEdgeIsIdentity) {
  InProcessBus bus(1);
  const Tensor t = tagged(1, 3, 2);
  const auto got = gather(bus, Phase::enc_fp_gather, {{RankId{1}, t}});
  ASSERT_EQ(got.size(), 1u);
  EXPECT_EQ(got[0], t);
}

TEST(Gather, OrderedByRankRegardlessOfArrival) {
  InProcessBus bus(3);
  const auto got = gather(bus, Phase::enc_fp_gather,
                          {{RankId{3}, tagged(3, 1, 1)},
                           {RankId{1}, tagged(1, 1, 1)},
                           {RankId{2}, tagged(2, 1, 1)}});
  ASSERT_EQ(got.size(), 3u);
  for (int r = 0; r < 3; ++r) EXPECT_EQ(got[r], tagged(r + 1, 1, 1));
}

TEST(Gather, ThreadedArrivalOrderDoesNotMatter) {
  for (int trial = 0; trial < 10; ++trial) {
    InProcessBus bus(4);
    std::vector<std::thread> ts;
    for (int r = 4; r >= 1; --r) {
      ts.emplace_back([&, r] {
        std::this_thread::sleep_for(std::chrono::microseconds((r * 37 + trial * 11) % 200));
        bus.send_to_root(RankId{r}, Phase::enc_fp_gather, tagged(r, 2, 2));
      });
    }
    const auto got = bus.gather_at_root(Phase::enc_fp_gather);
    for (auto& t : ts) t.join();
    for (int r = 0; r < 4; ++r) EXPECT_EQ(got[r], tagged(r + 1, 2, 2));
  }
}

TEST(Gather, LedgerCreditsBytes) {
  InProcessBus bus(2);
  gather(bus, Phase::enc_fp_gather, {{RankId{1}, tagged(1, 10, 4)}, {RankId{2}, tagged(2, 10, 4)}});
  EXPECT_EQ(bus.ledger().total_bytes(), 640u);
  EXPECT_EQ(bus.ledger().phase_bytes(0, Phase::enc_fp_gather), 640u);
}

TEST(Gather, DuplicateRankIsProtocolError) {
  InProcessBus bus(2);
  bus.send_to_root(RankId{1}, Phase::enc_fp_gather, Tensor::matrix(1, 1));
  EXPECT_THROW(bus.send_to_root(RankId{1}, Phase::enc_fp_gather, Tensor::matrix(1, 1)),
               ProtocolError);
}

TEST(Gather, MissingRankTimesOutNamingIt) {
  InProcessBus bus(3, 100ms);
  bus.send_to_root(RankId{1}, Phase::enc_fp_gather, Tensor::matrix(1, 1));
  bus.send_to_root(RankId{3}, Phase::enc_fp_gather, Tensor::matrix(1, 1));
  try {
    bus.gather_at_root(Phase::enc_fp_gather);
    FAIL() << "expected a timeout";
  } catch (const TimeoutError& e) {
    EXPECT_NE(std::string(e.what()).find("rank(s) 2"), std::string::npos) << e.what();
  }
  EXPECT_TRUE(bus.aborted());
}

TEST(Gather, UnknownRankRejected) {
  InProcessBus bus(2);
  EXPECT_THROW(bus.send_to_root(RankId{0}, Phase::enc_fp_gather, Tensor::matrix(1, 1)),
               ProtocolError);
  EXPECT_THROW(bus.send_to_root(RankId{3}, Phase::enc_fp_gather, Tensor::matrix(1, 1)),
               ProtocolError);
}

TEST(Scatter, RoundTripIsIdentity) {
  InProcessBus bus(3);
  advance_to_scatter(bus, 3);
  const std::vector<Tensor> parts{tagged(1, 2, 4), tagged(2, 2, 7), tagged(3, 2, 9)};
  const auto received = scatter(bus, Phase::dec_fp_scatter, parts);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(received[i], parts[i]);
  std::vector<std::pair<RankId, Tensor>> back;
  for (int i = 0; i < 3; ++i) back.emplace_back(RankId{i + 1}, received[i]);
  const auto regathered = gather(bus, Phase::dec_bp_gather, back);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(regathered[i], parts[i]);
}

TEST(Scatter, HeterogeneousWidthsFollowDimsMap) {
  const std::vector<std::size_t> dims{4, 7, 9};
  InProcessBus bus(3);
  advance_to_scatter(bus, 3);
  const auto parts = tensor_split(tagged(0, 5, 20), dims);
  const auto received = scatter(bus, Phase::dec_fp_scatter, parts);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(received[i].cols(), dims[i]);
}

TEST(Scatter, SingleEdgePassThrough) {
  InProcessBus bus(1);
  advance_to_scatter(bus, 1);
  const Tensor t = tagged(5, 3, 3);
  EXPECT_EQ(scatter(bus, Phase::dec_fp_scatter, {t})[0], t);
}

TEST(Scatter, LengthMismatchIsProtocolError) {
  InProcessBus bus(2);
  advance_to_scatter(bus, 2);
  EXPECT_THROW(bus.scatter_from_root(Phase::dec_fp_scatter, {Tensor::matrix(1, 1)}),
               ProtocolError);
}

TEST(Phases, OutOfOrderCallsRejected) {
  InProcessBus bus(1);
  EXPECT_THROW(bus.scatter_from_root(Phase::dec_fp_scatter, {Tensor::matrix(1, 1)}),
               ProtocolError);
  EXPECT_THROW(bus.send_to_root(RankId{1}, Phase::dec_bp_gather, Tensor::matrix(1, 1)),
               ProtocolError);
  EXPECT_THROW(bus.gather_at_root(Phase::dec_bp_gather), ProtocolError);
  advance_to_scatter(bus, 1);
  EXPECT_THROW(bus.scatter_from_root(Phase::enc_bp_scatter, {Tensor::matrix(1, 1)}),
               ProtocolError);
}

TEST(Phases, FullCycleReturnsToStart) {
  InProcessBus bus(2);
  for (int batch = 0; batch < 3; ++batch) {
    EXPECT_EQ(bus.current_phase(), Phase::enc_fp_gather);
    advance_to_scatter(bus, 2);
    EXPECT_EQ(bus.current_phase(), Phase::dec_fp_scatter);
    scatter(bus, Phase::dec_fp_scatter, {Tensor::matrix(1, 1), Tensor::matrix(1, 1)});
    gather(bus, Phase::dec_bp_gather,
           {{RankId{1}, Tensor::matrix(1, 1)}, {RankId{2}, Tensor::matrix(1, 1)}});
    scatter(bus, Phase::enc_bp_scatter, {Tensor::matrix(1, 1), Tensor::matrix(1, 1)});
  }
  EXPECT_EQ(bus.ledger().total_bytes(), 3u * 4u * 2u * 8u);
}

TEST(Abort, WakesBlockedReceiver) {
  InProcessBus bus(1, 10s);
  std::thread t([&] {
    std::this_thread::sleep_for(20ms);
    bus.abort("edge failed");
  });
  const auto start = std::chrono::steady_clock::now();
  EXPECT_THROW(bus.receive_from_root(RankId{1}, Phase::dec_fp_scatter), ProtocolError);
  t.join();
  EXPECT_LT(std::chrono::steady_clock::now() - start, 5s);
  EXPECT_THROW(bus.send_to_root(RankId{1}, Phase::enc_fp_gather, Tensor::matrix(1, 1)),
               ProtocolError);
}

TEST(Observer, SeesEveryEnvelopeWithExactSize) {
  InProcessBus bus(2);
  std::size_t seen = 0, bytes = 0;
  bus.set_observer([&](const Envelope& e) {
    ++seen;
    bytes += e.byte_size;
    EXPECT_EQ(e.byte_size, 8 * e.payload.size());
  });
  gather(bus, Phase::enc_fp_gather, {{RankId{1}, tagged(1, 3, 2)}, {RankId{2}, tagged(2, 3, 5)}});
  EXPECT_EQ(seen, 2u);
  EXPECT_EQ(bytes, bus.ledger().total_bytes());
}

TEST(Concat, Cases) {
  const Tensor a = tagged(1, 2, 3);
  EXPECT_EQ(tensor_concat({a}), a);
  EXPECT_EQ(tensor_concat({Tensor::from_rows({{1}}), Tensor::from_rows({{2}})}),
            Tensor::from_rows({{1, 2}}));
  EXPECT_THROW(tensor_concat({Tensor::matrix(2, 1), Tensor::matrix(3, 1)}), DimensionError);
}

TEST(Split, InverseOfConcat) {
  const std::vector<Tensor> parts{tagged(1, 4, 4), tagged(2, 4, 7), tagged(3, 4, 9)};
  const auto back = tensor_split(tensor_concat(parts), {4, 7, 9});
  for (int i = 0; i < 3; ++i) EXPECT_EQ(back[i], parts[i]);
  EXPECT_EQ(tensor_split(parts[0], {4})[0], parts[0]);
  EXPECT_THROW(tensor_split(parts[0], {2, 3}), DimensionError);
}

TEST(LedgerReport, TwoEdgeHandExample) {
  // N=2, d=24 each, embed 4, one batch of 10 rows.
  PayloadLedger ledger;
  for (Phase p : kPhaseOrder) ledger.credit(0, p, 2 * 10 * 4 * 8);
  ledger.set_raw_baseline(2 * 10 * 24 * 8);
  const LedgerReport r = ledger_report(ledger);
  EXPECT_EQ(r.epoch_bytes, 2560u);
  EXPECT_EQ(r.raw_bytes, 3840u);
  EXPECT_DOUBLE_EQ(r.reduction_factor, 1.5);
}

TEST(LedgerReport, EmbedEqualToSiloWidthGivesFactorBelowOne) {
  PayloadLedger ledger;
  for (Phase p : kPhaseOrder) ledger.credit(0, p, 2 * 10 * 24 * 8);
  ledger.set_raw_baseline(2 * 10 * 24 * 8);
  EXPECT_DOUBLE_EQ(ledger_report(ledger).reduction_factor, 0.25);
}

TEST(LedgerReport, EighthWidthGivesFactorTwo) {
  PayloadLedger ledger;
  for (Phase p : kPhaseOrder) ledger.credit(0, p, 2 * 10 * 3 * 8);
  ledger.set_raw_baseline(3840);
  EXPECT_DOUBLE_EQ(ledger_report(ledger).reduction_factor, 2.0);
}

TEST(LedgerReport, EmptyLedgerIsError) {
  EXPECT_THROW(ledger_report(PayloadLedger{}), StateError);
}

TEST(Ledger, CsvHeaderAndCumulativeColumn) {
  PayloadLedger ledger;
  ledger.credit(0, Phase::enc_fp_gather, 10);
  ledger.credit(0, Phase::dec_fp_scatter, 5);
  ledger.credit(1, Phase::enc_fp_gather, 10);
  std::ostringstream os;
  ledger.write_csv(os);
  EXPECT_EQ(os.str(),
            "epoch,phase,bytes,cumulative_bytes\n"
            "0,enc_fp_gather,10,10\n"
            "0,dec_fp_scatter,5,15\n"
            "1,enc_fp_gather,10,25\n");
  EXPECT_EQ(ledger.epoch_bytes(0), 15u);
  EXPECT_EQ(ledger.epoch_count(), 2u);
}
