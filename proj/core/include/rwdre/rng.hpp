#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

namespace rwdre {

// Counter-based generator: Philox4x32 with 10 rounds. A block is a pure
// function of (counter, key), so replicas and purposes get independent
// streams by construction and reproduce across machines and thread counts.
struct Philox4x32 {
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  static Counter block(Counter ctr, Key key) {
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
      const Counter next = {
          static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0],
          static_cast<std::uint32_t>(p1),
          static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1],
          static_cast<std::uint32_t>(p0),
      };
      ctr = next;
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }
};

// Stream naming scheme: key carries the experiment seed; counter words 2 and 3
// carry (stream id, purpose tag), words 0 and 1 the block index. Distinct
// (seed, stream, purpose) triples therefore never share a block.
enum class StreamPurpose : std::uint32_t {
  clocks = 1,       // walker proposal clocks and acceptance uniforms
  environment = 2,  // environment updates
  init = 3,         // initial configurations
  aux = 4,          // everything else (batching, shuffles)
};

class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id, StreamPurpose purpose)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
        base_{0u, 0u, static_cast<std::uint32_t>(stream_id),
              static_cast<std::uint32_t>(stream_id >> 32) ^
                  (static_cast<std::uint32_t>(purpose) << 24)} {}

  std::uint64_t bits64() {
    if (avail_ == 0) refill();
    --avail_;
    return buf_[avail_];
  }

  // Uniform on [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(bits64() >> 11) * 0x1.0p-53; }

  double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

  bool bernoulli(double p) { return uniform() < p; }

  // Unbiased uniform integer in [0, n) (multiply-shift with rejection).
  std::uint64_t below(std::uint64_t n) {
    std::uint64_t x = bits64();
    unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
    auto lo = static_cast<std::uint64_t>(m);
    if (lo < n) {
      const std::uint64_t threshold = -n % n;
      while (lo < threshold) {
        x = bits64();
        m = static_cast<unsigned __int128>(x) * n;
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  static constexpr std::string_view algorithm_id() { return "philox4x32-10"; }

 private:
  void refill() {
    Philox4x32::Counter ctr = base_;
    ctr[0] = static_cast<std::uint32_t>(block_);
    ctr[1] = static_cast<std::uint32_t>(block_ >> 32);
    ++block_;
    const auto out = Philox4x32::block(ctr, key_);
    buf_[1] = (std::uint64_t{out[1]} << 32) | out[0];
    buf_[0] = (std::uint64_t{out[3]} << 32) | out[2];
    avail_ = 2;
  }

  Philox4x32::Key key_;
  Philox4x32::Counter base_;
  std::uint64_t block_ = 0;
  std::array<std::uint64_t, 2> buf_{};
  int avail_ = 0;
};

// Canonical replica-stream derivation used by every estimator and the runner.
inline RngStream stream(std::uint64_t seed, std::uint64_t replica_id, StreamPurpose purpose) {
  return RngStream(seed, replica_id, purpose);
}

}  // namespace rwdre
