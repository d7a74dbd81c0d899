#include "gemm.hpp"

#include <Eigen/Core>

namespace caps::detail {

namespace {
using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;

template <typename Lhs, typename Rhs>
void assign(Map& c, const Lhs& lhs, const Rhs& rhs, bool accumulate) {
  if (accumulate) {
    c.noalias() += lhs * rhs;
  } else {
    c.noalias() = lhs * rhs;
  }
}
}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const float* a,
          const float* b, float* c, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  Map out(c, M, N);
  if (k == 0) {
    if (!accumulate) out.setZero();
    return;
  }
  if (!trans_a && !trans_b) {
    assign(out, ConstMap(a, M, K), ConstMap(b, K, N), accumulate);
  } else if (trans_a && !trans_b) {
    assign(out, ConstMap(a, K, M).transpose(), ConstMap(b, K, N), accumulate);
  } else if (!trans_a && trans_b) {
    assign(out, ConstMap(a, M, K), ConstMap(b, N, K).transpose(), accumulate);
  } else {
    assign(out, ConstMap(a, K, M).transpose(), ConstMap(b, N, K).transpose(), accumulate);
  }
}

}  // namespace caps::detail
