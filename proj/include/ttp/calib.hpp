#pragma once

#include <array>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace ttp::calib {

class CalibError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class RankDeficient : public CalibError {
public:
    using CalibError::CalibError;
};

// x_sim = alpha_x x_hw + x_trans, z_sim = alpha_z z_hw + z_trans.
struct PlanarTransform {
    double alpha_x = 1.0;
    double alpha_z = 1.0;
    double x_trans = 0.0;
    double z_trans = 0.0;

    // [[alpha_x, 0, x_trans], [0, alpha_z, z_trans], [0, 0, 1]]
    Eigen::Matrix3d matrix() const;
    static PlanarTransform from_matrix(const Eigen::Matrix3d& a);
};

struct Pair {
    std::array<double, 2> hw;   // (x, z)
    std::array<double, 2> sim;  // (x, z)
};

struct Fit {
    PlanarTransform transform;
    double residual = 0.0;  // sum of squared errors
    double rms = 0.0;
    double condition = 0.0;  // of the normal matrix
};

// Least squares over the stacked system via the normal equations and a
// full-pivot LU. Throws CalibError for fewer than 2 pairs and RankDeficient
// when the normal matrix has rank < 4 at threshold 1e-12.
Fit fit(const std::vector<Pair>& pairs);
PlanarTransform fit_transform(const std::vector<Pair>& pairs);

// Work area name -> simulation height.
using HeightTable = std::map<std::string, double>;

// (x, z) through the transform; y from the table. Throws CalibError on an
// unknown area.
std::array<double, 3> apply_transform(const PlanarTransform& t, const std::array<double, 3>& xyz_hw,
                                      const HeightTable& heights, const std::string& area);

// Whitespace-separated "x_hw z_hw x_sim z_sim" per line; '#' starts a
// comment.
std::vector<Pair> parse_pairs(std::string_view text);
std::vector<Pair> read_pairs(const std::string& path);

// "area = height" lines.
HeightTable parse_heights(std::string_view text);

}  // namespace ttp::calib
