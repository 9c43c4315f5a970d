// Low-rank temporal prior: Casorati matrix of prior frames per channel,
// truncated SVD, and reconstruction of a rank-r prior sequence.

#pragma once

#include <array>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "speclift/video_model.hpp"

namespace speclift {

// N x Z matrix whose column z is the row-major flattening of one channel of
// prior frame z.
struct CasoratiMatrix {
    Eigen::MatrixXd data;
    Channel channel = Channel::R;
    Size size;
};

struct TruncatedSVD {
    Eigen::MatrixXd u;  // N x r, orthonormal columns
    Eigen::VectorXd s;  // r values, nonincreasing
    Eigen::MatrixXd v;  // Z x r, orthonormal columns
    // Full spectrum of the input (min(N, Z) values, nonincreasing).
    Eigen::VectorXd spectrum;

    [[nodiscard]] int rank() const { return static_cast<int>(s.size()); }
    [[nodiscard]] Eigen::MatrixXd reconstruct() const;
};

CasoratiMatrix build_casorati(const std::vector<Frame>& priors, Channel channel);
// Column z of the matrix as a plane of the original size.
std::vector<double> unflatten_column(const CasoratiMatrix& c, int z);

// Top-r singular triplets. Computed from the eigendecomposition of the
// Z x Z Gram matrix, which is the tractable shape when N >> Z.
TruncatedSVD truncated_svd(const CasoratiMatrix& c, int r);
TruncatedSVD truncated_svd(const Eigen::MatrixXd& c, int r);

// Smallest r whose leading squared singular values reach `energy` of the
// total. Always >= 1.
int select_rank(const Eigen::VectorXd& singular_values, double energy);

struct RankSpec {
    std::optional<int> rank;  // explicit r, else energy selection
    double energy = 0.95;
};

struct LowRankResult {
    std::vector<Frame> frames;
    std::array<int, 3> ranks{};                    // rank used per channel
    std::array<Eigen::VectorXd, 3> spectra;        // singular values per channel
};

// Per-channel rank-r reconstruction of the priors; outputs clamped to [0, 1].
LowRankResult lowrank_frames(const std::vector<Frame>& priors, const RankSpec& spec);

}  // namespace speclift
