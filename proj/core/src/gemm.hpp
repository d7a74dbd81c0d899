#pragma once

#include <cstddef>

namespace caps::detail {

// Row-major SGEMM: C[m,n] (+)= op(A) * op(B). op(A) is [m,k]; when trans_a the
// buffer holds A as [k,m]. Same for B ([k,n], or [n,k] when trans_b).
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const float* a,
          const float* b, float* c, bool accumulate);

}  // namespace caps::detail
