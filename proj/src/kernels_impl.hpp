#pragma once

#include "knnattn/kernels.hpp"

// Variant tables defined by the per-ISA translation units. Only the dispatch
// code includes this header.

namespace knnattn::kernels::detail {

extern const Ops scalar_ops;

#if defined(KNNATTN_HAVE_AVX2)
extern const Ops avx2_ops;
#endif

#if defined(KNNATTN_HAVE_NEON)
extern const Ops neon_ops;
#endif

}  // namespace knnattn::kernels::detail
