#pragma once

// Tiny gradients and moments drift into the subnormal range during training,
// where x86 arithmetic is two orders of magnitude slower. This guard flushes
// them to zero for the lifetime of the object and restores the old mode.

#if defined(__SSE__) || defined(_M_X64)
#include <pmmintrin.h>
#include <xmmintrin.h>
#define STYLEBRUSH_HAS_MXCSR 1
#endif

namespace stylebrush {

class FlushDenormals {
public:
    FlushDenormals() {
#ifdef STYLEBRUSH_HAS_MXCSR
        saved_ = _mm_getcsr();
        _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
        _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
    }
    ~FlushDenormals() {
#ifdef STYLEBRUSH_HAS_MXCSR
        _mm_setcsr(saved_);
#endif
    }
    FlushDenormals(const FlushDenormals&) = delete;
    FlushDenormals& operator=(const FlushDenormals&) = delete;

private:
    unsigned saved_ = 0;
};

}  // namespace stylebrush
