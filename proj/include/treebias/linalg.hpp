#pragma once

#include <Eigen/Dense>

namespace treebias {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

}  // namespace treebias
