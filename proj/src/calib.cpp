#include "ttp/calib.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "ttp/config.hpp"

namespace ttp::calib {

Eigen::Matrix3d PlanarTransform::matrix() const {
    Eigen::Matrix3d a;
    a << alpha_x, 0.0, x_trans, 0.0, alpha_z, z_trans, 0.0, 0.0, 1.0;
    return a;
}

PlanarTransform PlanarTransform::from_matrix(const Eigen::Matrix3d& a) {
    if (a(0, 1) != 0.0 || a(1, 0) != 0.0 || a(2, 0) != 0.0 || a(2, 1) != 0.0 || a(2, 2) != 1.0) {
        throw CalibError("transform matrix does not have the scale + translation pattern");
    }
    if (a(0, 0) == 0.0 || a(1, 1) == 0.0) {
        throw CalibError("transform has a zero scale");
    }
    return {a(0, 0), a(1, 1), a(0, 2), a(1, 2)};
}

Fit fit(const std::vector<Pair>& pairs) {
    if (pairs.size() < 2) {
        throw CalibError("calibration needs at least 2 pairs, got " + std::to_string(pairs.size()));
    }
    // Unknowns a = [alpha_x, alpha_z, x_trans, z_trans]; two rows per pair.
    const auto rows = static_cast<Eigen::Index>(2 * pairs.size());
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(rows, 4);
    Eigen::VectorXd y(rows);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(2 * i);
        z(r, 0) = pairs[i].hw[0];
        z(r, 2) = 1.0;
        y(r) = pairs[i].sim[0];
        z(r + 1, 1) = pairs[i].hw[1];
        z(r + 1, 3) = 1.0;
        y(r + 1) = pairs[i].sim[1];
    }
    const Eigen::Matrix4d normal = z.transpose() * z;
    Eigen::FullPivLU<Eigen::Matrix4d> lu(normal);
    lu.setThreshold(1e-12);
    if (lu.rank() < 4) {
        throw RankDeficient("calibration pairs do not determine both axes (rank " + std::to_string(lu.rank()) + ")");
    }
    const Eigen::Vector4d a = lu.solve(z.transpose() * y);
    Fit out;
    out.transform = {a(0), a(1), a(2), a(3)};
    if (out.transform.alpha_x == 0.0 || out.transform.alpha_z == 0.0) {
        throw RankDeficient("fitted scale is zero");
    }
    out.residual = (z * a - y).squaredNorm();
    out.rms = std::sqrt(out.residual / static_cast<double>(rows));
    const Eigen::Vector4d sv = Eigen::JacobiSVD<Eigen::Matrix4d>(normal).singularValues();
    out.condition = sv(0) / sv(3);
    return out;
}

PlanarTransform fit_transform(const std::vector<Pair>& pairs) { return fit(pairs).transform; }

std::array<double, 3> apply_transform(const PlanarTransform& t, const std::array<double, 3>& xyz_hw,
                                      const HeightTable& heights, const std::string& area) {
    const auto it = heights.find(area);
    if (it == heights.end()) {
        throw CalibError("unknown work area '" + area + "'");
    }
    const Eigen::Vector3d out = t.matrix() * Eigen::Vector3d(xyz_hw[0], xyz_hw[2], 1.0);
    return {out(0), it->second, out(1)};
}

std::vector<Pair> parse_pairs(std::string_view text) {
    std::vector<Pair> pairs;
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        std::istringstream fields(line);
        std::vector<double> v;
        std::string field;
        while (fields >> field) {
            try {
                std::size_t used = 0;
                v.push_back(std::stod(field, &used));
                if (used != field.size()) {
                    throw std::invalid_argument(field);
                }
            } catch (const std::exception&) {
                throw CalibError("line " + std::to_string(line_no) + ": bad number '" + field + "'");
            }
        }
        if (v.empty()) {
            continue;
        }
        if (v.size() != 4) {
            throw CalibError("line " + std::to_string(line_no) + ": expected 4 columns, got " +
                             std::to_string(v.size()));
        }
        pairs.push_back({{v[0], v[1]}, {v[2], v[3]}});
    }
    return pairs;
}

std::vector<Pair> read_pairs(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::ios_base::failure("cannot open " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_pairs(buf.str());
}

HeightTable parse_heights(std::string_view text) {
    HeightTable table;
    const auto kv = KeyValueConfig::parse(text);
    for (const auto& [area, _] : kv.values()) {
        table[area] = kv.get_double(area, 0.0);
    }
    return table;
}

}  // namespace ttp::calib
