#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace duet {

/// Runs fn(i) for i in [0,n). Work is split into contiguous index ranges,
/// one per thread; every fn(i) must be independent of the others and write
/// only to its own slot, so results are identical for any thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  unsigned threads = 0);

/// FNV-1a 64-bit over a byte range, hex-encoded.
std::uint64_t fnv1a64(const void* bytes, std::size_t len);
std::string fnv1a64_hex(const void* bytes, std::size_t len);

/// Global knob for parallel_for's default thread count (0 = hardware).
void set_default_threads(unsigned n);
unsigned default_threads();

}  // namespace duet
