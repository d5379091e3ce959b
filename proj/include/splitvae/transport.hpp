#pragma once

#include <array>
#include <chrono>
#include <compare>
#include <condition_variable>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "splitvae/tensor.hpp"

namespace splitvae {

/// Process rank. Rank 0 is the server (collective root); ranks 1..N are edges.
struct RankId {
  int value = 0;
  constexpr auto operator<=>(const RankId&) const = default;
  constexpr bool is_root() const noexcept { return value == 0; }
};

inline constexpr RankId kRootRank{0};

enum class Phase : int { enc_fp_gather = 0, dec_fp_scatter = 1, dec_bp_gather = 2, enc_bp_scatter = 3 };

inline constexpr std::array<Phase, 4> kPhaseOrder{Phase::enc_fp_gather, Phase::dec_fp_scatter,
                                                  Phase::dec_bp_gather, Phase::enc_bp_scatter};

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::enc_fp_gather: return "enc_fp_gather";
    case Phase::dec_fp_scatter: return "dec_fp_scatter";
    case Phase::dec_bp_gather: return "dec_bp_gather";
    case Phase::enc_bp_scatter: return "enc_bp_scatter";
  }
  return "?";
}

inline bool is_gather(Phase p) { return p == Phase::enc_fp_gather || p == Phase::dec_bp_gather; }

inline Phase next_phase(Phase p) {
  return kPhaseOrder[(static_cast<std::size_t>(p) + 1) % kPhaseOrder.size()];
}

inline std::size_t payload_bytes(const Tensor& t) { return sizeof(double) * t.size(); }

struct Envelope {
  RankId source;
  RankId dest;
  Phase phase;
  Tensor payload;
  std::size_t byte_size = 0;
};

/// Cumulative transmitted bytes, bucketed by (epoch, phase).
class PayloadLedger {
 public:
  struct Row {
    std::size_t epoch;
    Phase phase;
    std::size_t bytes;
    std::size_t cumulative_bytes;
  };

  void credit(std::size_t epoch, Phase phase, std::size_t bytes) {
    buckets_[{epoch, static_cast<int>(phase)}] += bytes;
    total_ += bytes;
  }

  std::size_t total_bytes() const noexcept { return total_; }

  std::size_t epoch_bytes(std::size_t epoch) const {
    std::size_t s = 0;
    for (const auto& [key, bytes] : buckets_)
      if (key.first == epoch) s += bytes;
    return s;
  }

  std::size_t phase_bytes(std::size_t epoch, Phase phase) const {
    auto it = buckets_.find({epoch, static_cast<int>(phase)});
    return it == buckets_.end() ? 0 : it->second;
  }

  std::size_t epoch_count() const {
    std::size_t n = 0;
    for (const auto& [key, bytes] : buckets_) n = std::max(n, key.first + 1);
    return n;
  }

  void set_raw_baseline(std::size_t bytes) noexcept { raw_bytes_ = bytes; }
  std::size_t raw_baseline() const noexcept { return raw_bytes_; }

  std::vector<Row> rows() const {
    std::vector<Row> out;
    std::size_t cumulative = 0;
    for (const auto& [key, bytes] : buckets_) {
      cumulative += bytes;
      out.push_back({key.first, static_cast<Phase>(key.second), bytes, cumulative});
    }
    return out;
  }

  /// CSV with header epoch,phase,bytes,cumulative_bytes.
  void write_csv(std::ostream& os) const {
    os << "epoch,phase,bytes,cumulative_bytes\n";
    for (const auto& r : rows())
      os << r.epoch << ',' << to_string(r.phase) << ',' << r.bytes << ',' << r.cumulative_bytes
         << '\n';
  }

 private:
  std::map<std::pair<std::size_t, int>, std::size_t> buckets_;
  std::size_t total_ = 0;
  std::size_t raw_bytes_ = 0;
};

struct LedgerReport {
  std::array<std::size_t, 4> phase_bytes{};  // one epoch, indexed by Phase
  std::size_t epoch_bytes = 0;
  std::size_t total_bytes = 0;
  std::size_t epochs = 0;
  std::size_t raw_bytes = 0;
  double reduction_factor = 0.0;
};

/// Summarizes the first recorded epoch (every epoch moves the same bytes)
/// and the run total. The reduction factor compares the raw dataset size
/// against one epoch of protocol traffic.
inline LedgerReport ledger_report(const PayloadLedger& ledger) {
  LedgerReport r;
  r.epochs = ledger.epoch_count();
  if (r.epochs == 0 || ledger.total_bytes() == 0) {
    throw StateError("ledger report: no transmitted bytes recorded");
  }
  for (Phase p : kPhaseOrder) r.phase_bytes[static_cast<std::size_t>(p)] = ledger.phase_bytes(0, p);
  r.epoch_bytes = ledger.epoch_bytes(0);
  r.total_bytes = ledger.total_bytes();
  r.raw_bytes = ledger.raw_baseline();
  r.reduction_factor = static_cast<double>(r.raw_bytes) / static_cast<double>(r.epoch_bytes);
  return r;
}

// ---------------------------------------------------------------------------
// Cut-point tensor primitives
// ---------------------------------------------------------------------------

/// Column-wise concatenation in list order.
inline Tensor tensor_concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("tensor_concat of an empty list");
  const std::size_t b = parts.front().rows();
  std::size_t width = 0;
  for (const auto& p : parts) {
    if (p.rows() != b) {
      throw DimensionError(detail::concat("tensor_concat: batch ", p.rows(), " vs ", b));
    }
    width += p.cols();
  }
  Tensor out = Tensor::matrix(b, width);
  for (std::size_t r = 0; r < b; ++r) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      for (std::size_t c = 0; c < p.cols(); ++c) out(r, offset + c) = p(r, c);
      offset += p.cols();
    }
  }
  return out;
}

/// Contiguous column blocks of the given widths.
inline std::vector<Tensor> tensor_split(const Tensor& whole, const std::vector<std::size_t>& dims) {
  std::size_t sum = 0;
  for (auto d : dims) sum += d;
  if (sum != whole.cols()) {
    throw DimensionError(detail::concat("tensor_split: dims sum to ", sum, " but tensor has ",
                                        whole.cols(), " columns"));
  }
  std::vector<Tensor> out;
  out.reserve(dims.size());
  std::size_t offset = 0;
  for (auto d : dims) {
    out.push_back(whole.col_block(offset, d));
    offset += d;
  }
  return out;
}

// ---------------------------------------------------------------------------
// In-process collective bus
// ---------------------------------------------------------------------------

/// Rendezvous transport for one root and N edge ranks living in the same
/// process. Collectives follow the fixed per-batch phase cycle
///   enc_fp_gather -> dec_fp_scatter -> dec_bp_gather -> enc_bp_scatter
/// and any call for a phase other than the current one is a protocol error.
/// Bytes are credited to the ledger on the root side.
class InProcessBus {
 public:
  using Clock = std::chrono::steady_clock;
  using Observer = std::function<void(const Envelope&)>;

  explicit InProcessBus(std::size_t num_edges,
                        std::chrono::milliseconds timeout = std::chrono::seconds(30))
      : num_edges_(num_edges), timeout_(timeout), inbox_(num_edges), outbox_(num_edges) {
    if (num_edges == 0) throw ConfigError("transport needs at least one edge rank");
  }

  InProcessBus(const InProcessBus&) = delete;
  InProcessBus& operator=(const InProcessBus&) = delete;

  std::size_t num_edges() const noexcept { return num_edges_; }

  Phase current_phase() const {
    std::lock_guard lock(mu_);
    return phase_;
  }

  void set_epoch(std::size_t epoch) {
    std::lock_guard lock(mu_);
    epoch_ = epoch;
  }

  void set_observer(Observer obs) {
    std::lock_guard lock(mu_);
    observer_ = std::move(obs);
  }

  PayloadLedger& ledger() noexcept { return ledger_; }
  const PayloadLedger& ledger() const noexcept { return ledger_; }

  /// Edge contribution to the current gather phase.
  void send_to_root(RankId source, Phase phase, Tensor payload) {
    std::lock_guard lock(mu_);
    throw_if_aborted();
    check_edge(source);
    if (!is_gather(phase) || phase != phase_) {
      throw ProtocolError(detail::concat("rank ", source.value, " sent ", to_string(phase),
                                         " while the bus expects ", to_string(phase_)));
    }
    auto& slot = inbox_[static_cast<std::size_t>(source.value - 1)];
    if (slot) {
      throw ProtocolError(detail::concat("duplicate ", to_string(phase), " contribution from rank ",
                                         source.value));
    }
    Envelope env{source, kRootRank, phase, std::move(payload), 0};
    env.byte_size = payload_bytes(env.payload);
    if (observer_) observer_(env);
    slot = std::move(env);
    cv_.notify_all();
  }

  /// Root side of a gather. Blocks until every edge contributed, then
  /// returns payloads in ascending rank order.
  std::vector<Tensor> gather_at_root(Phase phase) {
    std::unique_lock lock(mu_);
    throw_if_aborted();
    if (!is_gather(phase) || phase != phase_) {
      throw ProtocolError(detail::concat("root called gather ", to_string(phase),
                                         " while the bus expects ", to_string(phase_)));
    }
    const auto deadline = Clock::now() + timeout_;
    auto all_arrived = [&] {
      for (const auto& s : inbox_)
        if (!s) return false;
      return true;
    };
    while (!aborted_ && !all_arrived()) {
      if (cv_.wait_until(lock, deadline) == std::cv_status::timeout && !all_arrived()) {
        std::string missing;
        for (std::size_t i = 0; i < inbox_.size(); ++i)
          if (!inbox_[i]) missing += (missing.empty() ? "" : ", ") + std::to_string(i + 1);
        const std::string msg = detail::concat("gather ", to_string(phase),
                                               " timed out waiting for rank(s) ", missing);
        abort_locked(msg);
        throw TimeoutError(msg);
      }
    }
    throw_if_aborted();
    std::vector<Tensor> out;
    out.reserve(num_edges_);
    for (auto& slot : inbox_) {
      ledger_.credit(epoch_, phase, slot->byte_size);
      out.push_back(std::move(slot->payload));
      slot.reset();
    }
    phase_ = next_phase(phase_);
    cv_.notify_all();
    return out;
  }

  /// Root side of a scatter; parts[i] goes to rank i + 1. Non-blocking.
  void scatter_from_root(Phase phase, std::vector<Tensor> parts) {
    std::lock_guard lock(mu_);
    throw_if_aborted();
    if (is_gather(phase) || phase != phase_) {
      throw ProtocolError(detail::concat("root called scatter ", to_string(phase),
                                         " while the bus expects ", to_string(phase_)));
    }
    if (parts.size() != num_edges_) {
      throw ProtocolError(detail::concat("scatter ", to_string(phase), " has ", parts.size(),
                                         " parts for ", num_edges_, " edge ranks"));
    }
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (outbox_[i]) {
        throw ProtocolError(detail::concat("rank ", i + 1, " has not collected its previous ",
                                           to_string(outbox_[i]->phase), " part"));
      }
      Envelope env{kRootRank, RankId{static_cast<int>(i + 1)}, phase, std::move(parts[i]), 0};
      env.byte_size = payload_bytes(env.payload);
      if (observer_) observer_(env);
      ledger_.credit(epoch_, phase, env.byte_size);
      outbox_[i] = std::move(env);
    }
    phase_ = next_phase(phase_);
    cv_.notify_all();
  }

  /// Edge side of a scatter. Blocks until the root posted this rank's part.
  Tensor receive_from_root(RankId dest, Phase phase) {
    std::unique_lock lock(mu_);
    throw_if_aborted();
    check_edge(dest);
    if (is_gather(phase)) {
      throw ProtocolError(detail::concat("rank ", dest.value, " tried to receive gather phase ",
                                         to_string(phase)));
    }
    auto& slot = outbox_[static_cast<std::size_t>(dest.value - 1)];
    const auto deadline = Clock::now() + timeout_;
    while (!aborted_ && !slot) {
      if (cv_.wait_until(lock, deadline) == std::cv_status::timeout && !slot) {
        const std::string msg = detail::concat("rank ", dest.value, " timed out waiting for ",
                                               to_string(phase), " from root");
        abort_locked(msg);
        throw TimeoutError(msg);
      }
    }
    throw_if_aborted();
    if (slot->phase != phase) {
      throw ProtocolError(detail::concat("rank ", dest.value, " expected ", to_string(phase),
                                         " but root sent ", to_string(slot->phase)));
    }
    Tensor out = std::move(slot->payload);
    slot.reset();
    return out;
  }

  /// Fails every pending and future call with `reason`.
  void abort(const std::string& reason) {
    std::lock_guard lock(mu_);
    abort_locked(reason);
  }

  bool aborted() const {
    std::lock_guard lock(mu_);
    return aborted_;
  }

 private:
  void check_edge(RankId r) const {
    if (r.value < 1 || static_cast<std::size_t>(r.value) > num_edges_) {
      throw ProtocolError(detail::concat("rank ", r.value, " is not an edge rank in [1, ",
                                         num_edges_, "]"));
    }
  }

  void throw_if_aborted() const {
    if (aborted_) throw ProtocolError("transport aborted: " + abort_reason_);
  }

  void abort_locked(const std::string& reason) {
    if (!aborted_) {
      aborted_ = true;
      abort_reason_ = reason;
    }
    cv_.notify_all();
  }

  const std::size_t num_edges_;
  const std::chrono::milliseconds timeout_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  Phase phase_ = Phase::enc_fp_gather;
  std::size_t epoch_ = 0;
  std::vector<std::optional<Envelope>> inbox_;   // edge -> root, by rank - 1
  std::vector<std::optional<Envelope>> outbox_;  // root -> edge, by rank - 1
  PayloadLedger ledger_;
  Observer observer_;
  bool aborted_ = false;
  std::string abort_reason_;
};

/// One complete gather issued from a single thread: each (rank, payload)
/// pair is posted in the given order, then collected at the root.
inline std::vector<Tensor> gather(InProcessBus& bus, Phase phase,
                                  std::vector<std::pair<RankId, Tensor>> contributions) {
  for (auto& [rank, payload] : contributions) bus.send_to_root(rank, phase, std::move(payload));
  return bus.gather_at_root(phase);
}

/// One complete scatter issued from a single thread; returns what each edge
/// received, indexed by rank - 1.
inline std::vector<Tensor> scatter(InProcessBus& bus, Phase phase, std::vector<Tensor> parts) {
  bus.scatter_from_root(phase, std::move(parts));
  std::vector<Tensor> received;
  for (std::size_t i = 0; i < bus.num_edges(); ++i)
    received.push_back(bus.receive_from_root(RankId{static_cast<int>(i + 1)}, phase));
  return received;
}

}  // namespace splitvae
