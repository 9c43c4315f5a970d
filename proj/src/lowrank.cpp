#include "speclift/lowrank.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Eigenvalues>

namespace speclift {

Eigen::MatrixXd TruncatedSVD::reconstruct() const {
    return u * s.asDiagonal() * v.transpose();
}

CasoratiMatrix build_casorati(const std::vector<Frame>& priors, Channel channel) {
    if (priors.empty()) throw DegenerateInputError("build_casorati: no prior frames");
    const Size size = priors.front().size();
    CasoratiMatrix c;
    c.channel = channel;
    c.size = size;
    c.data.resize(static_cast<Eigen::Index>(size.area()), static_cast<Eigen::Index>(priors.size()));
    for (std::size_t z = 0; z < priors.size(); ++z) {
        require_same_size(size, priors[z].size(), "build_casorati");
        const auto& plane = priors[z].plane(channel);
        c.data.col(static_cast<Eigen::Index>(z)) =
            Eigen::Map<const Eigen::VectorXd>(plane.data(), static_cast<Eigen::Index>(plane.size()));
    }
    return c;
}

std::vector<double> unflatten_column(const CasoratiMatrix& c, int z) {
    const auto col = c.data.col(z);
    return std::vector<double>(col.data(), col.data() + col.size());
}

TruncatedSVD truncated_svd(const Eigen::MatrixXd& c, int r) {
    const auto n = c.rows();
    const auto z = c.cols();
    const auto k = std::min(n, z);
    if (r < 1 || r > k) {
        throw DegenerateInputError("truncated_svd: rank " + std::to_string(r) + " outside [1, " +
                                   std::to_string(k) + "]");
    }
    const Eigen::MatrixXd gram = c.transpose() * c;
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    if (eig.info() != Eigen::Success) throw Error("truncated_svd: eigensolver failed");

    // Eigen returns ascending eigenvalues; reverse to descending.
    TruncatedSVD out;
    out.spectrum.resize(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        out.spectrum(i) = std::sqrt(std::max(0.0, eig.eigenvalues()(z - 1 - i)));
    }
    out.s = out.spectrum.head(r);
    out.v.resize(z, r);
    for (Eigen::Index i = 0; i < r; ++i) out.v.col(i) = eig.eigenvectors().col(z - 1 - i);

    // U = C V S^-1 for numerically nonzero singular values; complete the
    // rest with orthonormal directions so U keeps orthonormal columns.
    // Squaring in the Gram matrix leaves values below sqrt(eps) * s0
    // indistinguishable from zero, so those are reported as zero.
    out.u.resize(n, r);
    const double floor = out.spectrum(0) * 1e-7;
    for (Eigen::Index i = 0; i < k; ++i) {
        if (out.spectrum(i) <= floor) out.spectrum(i) = 0.0;
    }
    out.s = out.spectrum.head(r);
    Eigen::Index canonical = 0;
    for (Eigen::Index i = 0; i < r; ++i) {
        Eigen::VectorXd col;
        if (out.s(i) > floor && out.s(i) > 0.0) {
            col = c * out.v.col(i) / out.s(i);
        } else {
            out.s(i) = out.spectrum(i);
            for (;; ++canonical) {
                col = Eigen::VectorXd::Unit(n, canonical % n);
                for (Eigen::Index j = 0; j < i; ++j) col -= out.u.col(j).dot(col) * out.u.col(j);
                if (col.norm() > 1e-3) {
                    ++canonical;
                    break;
                }
            }
        }
        // One re-orthogonalisation pass against earlier columns.
        for (Eigen::Index j = 0; j < i; ++j) col -= out.u.col(j).dot(col) * out.u.col(j);
        out.u.col(i) = col.normalized();
    }
    return out;
}

TruncatedSVD truncated_svd(const CasoratiMatrix& c, int r) {
    return truncated_svd(c.data, r);
}

int select_rank(const Eigen::VectorXd& singular_values, double energy) {
    if (singular_values.size() == 0) throw DegenerateInputError("select_rank: empty spectrum");
    double total = 0.0;
    for (Eigen::Index i = 0; i < singular_values.size(); ++i) total += singular_values(i) * singular_values(i);
    if (total <= 0.0) return 1;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < singular_values.size(); ++i) {
        acc += singular_values(i) * singular_values(i);
        if (acc >= energy * total) return static_cast<int>(i + 1);
    }
    return static_cast<int>(singular_values.size());
}

LowRankResult lowrank_frames(const std::vector<Frame>& priors, const RankSpec& spec) {
    if (priors.empty()) throw DegenerateInputError("lowrank_frames: no prior frames");
    const Size size = priors.front().size();
    std::vector<std::array<std::vector<double>, 3>> planes(priors.size());
    LowRankResult out;
    for (int ch = 0; ch < 3; ++ch) {
        const CasoratiMatrix c = build_casorati(priors, static_cast<Channel>(ch));
        const int k = static_cast<int>(std::min(c.data.rows(), c.data.cols()));
        int r = 0;
        TruncatedSVD svd;
        if (spec.rank) {
            r = std::min(*spec.rank, k);
            svd = truncated_svd(c, r);
        } else {
            svd = truncated_svd(c, k);
            r = select_rank(svd.spectrum, spec.energy);
            svd.u.conservativeResize(Eigen::NoChange, r);
            svd.v.conservativeResize(Eigen::NoChange, r);
            svd.s.conservativeResize(r);
        }
        out.ranks[static_cast<std::size_t>(ch)] = r;
        out.spectra[static_cast<std::size_t>(ch)] = svd.spectrum;
        const Eigen::MatrixXd rec = svd.reconstruct();
        for (std::size_t z = 0; z < priors.size(); ++z) {
            auto& p = planes[z][static_cast<std::size_t>(ch)];
            p.resize(size.area());
            const auto col = rec.col(static_cast<Eigen::Index>(z));
            for (std::size_t i = 0; i < p.size(); ++i) {
                p[i] = std::clamp(col(static_cast<Eigen::Index>(i)), 0.0, 1.0);
            }
        }
    }
    out.frames.reserve(priors.size());
    for (auto& p : planes) out.frames.emplace_back(size.width, size.height, std::move(p));
    return out;
}

}  // namespace speclift
