#pragma once

#include <cstdint>

namespace knnattn {

// Counter-based splittable generator. Output i of a stream is a pure integer
// function of (key, i), so the same seed gives a bit-identical stream on any
// platform, and substreams derived with split() are independent of how much
// of the parent stream was consumed.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed);

    // Independent substream; deterministic in (this stream's key, id).
    RngStream split(std::uint64_t id) const;

    std::uint64_t next_u64();
    // uniform in [0, 1), 53-bit mantissa
    double next_unit();
    // standard normal via the polar method
    double next_normal();
    // uniform integer in [0, bound) without modulo bias
    std::uint64_t next_below(std::uint64_t bound);

private:
    RngStream(std::uint64_t key, int);  // internal: key already mixed

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace knnattn
