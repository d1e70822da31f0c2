#ifndef MPCMFRL_TYPES_HPP_
#define MPCMFRL_TYPES_HPP_

#include <Eigen/Dense>

namespace mpcmfrl {

using Vec = Eigen::VectorXd;
// Batches are row-major in meaning: one sample per row.
using Mat = Eigen::MatrixXd;

inline bool AllFinite(const Vec& v) { return v.allFinite(); }
inline bool AllFinite(const Mat& m) { return m.allFinite(); }

}  // namespace mpcmfrl

#endif  // MPCMFRL_TYPES_HPP_
