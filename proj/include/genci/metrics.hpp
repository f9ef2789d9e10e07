#pragma once

#include "genci/types.hpp"

#include <vector>

namespace genci {

// Probability that a random positive outranks a random negative, ties 0.5.
// Rank-sum formulation; throws on single-class input.
Real auc(const std::vector<Real>& scores, const std::vector<Real>& labels);

// Identical to ctrhead::bce_loss; re-exported under the metric name.
Real logloss(const std::vector<Real>& scores, const std::vector<Real>& labels);

// ((measure - 0.5) / (base - 0.5) - 1) * 100; requires base > 0.5.
Real rela_impr(Real measure_auc, Real base_auc);

}  // namespace genci
