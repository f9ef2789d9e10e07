#include "genci/metrics.hpp"

#include "genci/ctrhead.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace genci {

Real auc(const std::vector<Real>& scores, const std::vector<Real>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: size mismatch");
  const std::size_t n = scores.size();
  std::size_t pos = 0;
  for (Real y : labels) pos += y > 0.5 ? 1 : 0;
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw std::invalid_argument("auc: single-class input");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average ranks within tie groups keep the pairwise tie credit exact.
  Real pos_rank_sum = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const Real avg_rank = (static_cast<Real>(i + 1) + static_cast<Real>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] > 0.5) pos_rank_sum += avg_rank;
    }
    i = j;
  }
  const Real p = static_cast<Real>(pos);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<Real>(neg));
}

Real logloss(const std::vector<Real>& scores, const std::vector<Real>& labels) {
  return bce_loss(scores, labels);
}

Real rela_impr(Real measure_auc, Real base_auc) {
  if (!(base_auc > 0.5)) throw std::invalid_argument("rela_impr: base AUC must exceed 0.5");
  return ((measure_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0;
}

}  // namespace genci
