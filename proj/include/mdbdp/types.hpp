#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace mdbdp {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vector = Vec<double>;
using RowVector = RowVec<double>;
using Matrix = Mat<double>;

/// Raised when a training loop stops making progress (loss non-finite or
/// above the blow-up threshold for too many consecutive iterations).
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(int step, long iteration, const std::string& what)
        : std::runtime_error(what), step_(step), iteration_(iteration) {}

    int step() const noexcept { return step_; }
    long iteration() const noexcept { return iteration_; }

private:
    int step_;
    long iteration_;
};

} // namespace mdbdp
