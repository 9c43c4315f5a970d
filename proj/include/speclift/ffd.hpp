// Free-form deformation registration.
//
// The warp is a cubic B-spline lattice of control-point displacements. The
// objective is
//
//     E = D + gamma * R + delta * T
//
// with D a Tukey-biweight data term on mean-intensity images, R the sum over
// pixels of the squared displacement gradient, and T a penalty on
// Jacobian determinants that stray outside [1 - zeta, 1 + zeta]. It is
// minimised coarse-to-fine with Levenberg-Marquardt; whenever a step would
// push min |J| below the regrid tolerance the current warp is frozen into a
// snapshot, the moving image is resampled, and optimisation restarts from
// the identity.
//
// Coordinates: x is the column, y the row, both in full-resolution pixels.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "speclift/frame_io.hpp"
#include "speclift/video_model.hpp"

namespace speclift {

struct RegistrationError : Error {
    using Error::Error;
};

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

// Uniform cubic B-spline basis at u in [0, 1); throws outside the range.
std::array<double, 4> bspline_weights(double u);
// d/du of the four basis functions.
std::array<double, 4> bspline_derivatives(double u);

// Lattice of control points covering the image with one extra cell of
// border. Control point (ix, iy) rests at ((ix - 1) * spacing, (iy - 1) * spacing).
class FFDLattice {
  public:
    FFDLattice() = default;
    FFDLattice(Size image, double spacing, int level = 0);

    [[nodiscard]] int nx() const { return nx_; }
    [[nodiscard]] int ny() const { return ny_; }
    [[nodiscard]] int count() const { return nx_ * ny_; }
    [[nodiscard]] double spacing() const { return spacing_; }
    [[nodiscard]] int level() const { return level_; }
    [[nodiscard]] Size image_size() const { return image_; }

    [[nodiscard]] Vec2 rest_position(int ix, int iy) const {
        return {(ix - 1) * spacing_, (iy - 1) * spacing_};
    }
    [[nodiscard]] Vec2 position(int ix, int iy) const;
    void set_position(int ix, int iy, Vec2 p);

    [[nodiscard]] Vec2 displacement(int ix, int iy) const { return disp_[flat(ix, iy)]; }
    void set_displacement(int ix, int iy, Vec2 d) { disp_[flat(ix, iy)] = d; }

    // Parameters interleaved as (dx0, dy0, dx1, dy1, ...) in row-major
    // control-point order.
    [[nodiscard]] Eigen::VectorXd parameters() const;
    void set_parameters(const Eigen::VectorXd& p);

    [[nodiscard]] bool is_identity() const;
    void reset();

    // Exact dyadic B-spline subdivision onto a lattice of half the spacing.
    [[nodiscard]] FFDLattice refined() const;

    [[nodiscard]] int flat(int ix, int iy) const { return iy * nx_ + ix; }

  private:
    Size image_;
    double spacing_ = 1.0;
    int level_ = 0;
    int nx_ = 0;
    int ny_ = 0;
    std::vector<Vec2> disp_;
};

// phi(p): tensor-product interpolation of the 4 x 4 supporting control points.
Vec2 deform(const FFDLattice& lattice, Vec2 p);
// Analytic determinant of d phi / d p.
double jacobian_det(const FFDLattice& lattice, Vec2 p);

// Tukey biweight and its derivative.
double tukey_rho(double x, double c);
double tukey_psi(double x, double c);

// Dense per-pixel mapped positions.
struct DeformationField {
    Size size;
    std::vector<Vec2> map;  // row-major, map[i] = phi(pixel i)

    static DeformationField identity(Size size);
    static DeformationField from_lattice(const FFDLattice& lattice);

    [[nodiscard]] Vec2 operator()(int row, int col) const {
        return map[static_cast<std::size_t>(row) * static_cast<std::size_t>(size.width) +
                   static_cast<std::size_t>(col)];
    }
    // Bilinear interpolation of the displacement at an arbitrary point,
    // replicating the border outside the grid; returns the mapped position.
    [[nodiscard]] Vec2 sample(Vec2 p) const;
};

// (outer o inner)(x) = outer(inner(x)), outer resampled bilinearly.
DeformationField compose(const DeformationField& outer, const DeformationField& inner);

// Central-difference determinant of a dense field (one-sided at borders).
ScalarField jacobian_field(const DeformationField& field);

// Pixels whose mapped position falls outside [0, W-1] x [0, H-1].
SpecularMask out_of_domain(const DeformationField& field);

// Bilinear resampling at phi(x); out-of-domain samples clamp to the border.
Frame warp_image(const Frame& image, const DeformationField& field);
ScalarField warp_scalar(const ScalarField& image, const DeformationField& field);

struct RegistrationParams {
    double gamma = 0.01;
    double delta = 1.0;
    double tukey_c = 0.2;
    double zeta = 0.5;
    double xi = 0.01;
    double regrid_tol = 0.1;
    int max_regrids = 20;
    int levels = 3;
    int max_iterations = 50;
    double tolerance = 1e-5;
    int finest_spacing = 8;

    static RegistrationParams from_config(const PipelineConfig& config);
};

struct EnergyBreakdown {
    double data = 0.0;
    double smoothness = 0.0;
    double topology = 0.0;
    double total = 0.0;
};

// Energy at full resolution with `lattice` applied to the moving image.
EnergyBreakdown energy(const ScalarField& moving, const ScalarField& fixed, const FFDLattice& lattice,
                       const RegistrationParams& params);
EnergyBreakdown energy(const Frame& moving, const Frame& fixed, const FFDLattice& lattice,
                       const RegistrationParams& params);

// Analytic gradient of each energy term with respect to lattice.parameters()
// (unweighted: the smoothness and topology parts exclude gamma and delta).
struct EnergyGradient {
    Eigen::VectorXd data;
    Eigen::VectorXd smoothness;
    Eigen::VectorXd topology;
};
EnergyGradient energy_gradient(const ScalarField& moving, const ScalarField& fixed,
                               const FFDLattice& lattice, const RegistrationParams& params);

struct TraceEntry {
    int level = 0;
    int iteration = 0;
    double lambda = 0.0;
    bool accepted = false;
    bool regrid = false;
    EnergyBreakdown energy;
};

// Regridding state: the current moving image, the active lattice and the
// frozen snapshots (tab_phi).
struct RegridState {
    ScalarField moving;
    FFDLattice lattice;
    std::vector<FFDLattice> snapshots;
};

// Freezes the active lattice: the moving image is resampled through it, the
// lattice is appended to the snapshots and reset to the identity.
RegridState regrid(RegridState state);

// snapshot[0] o snapshot[1] o ... o snapshot[n-1] o current. Each snapshot
// is evaluated at the mapped points through its spline; outside the image
// the border displacement is replicated.
DeformationField compose_snapshots(const std::vector<FFDLattice>& snapshots, const FFDLattice& current);

struct RegistrationResult {
    DeformationField field;  // maps fixed-frame pixels into the moving frame
    Frame warped;            // moving resampled through field
    std::vector<TraceEntry> trace;
    std::vector<FFDLattice> snapshots;
    FFDLattice lattice;  // active lattice after the last level
    int iterations = 0;
    int regrid_count = 0;
    int levels_used = 0;
    bool converged = false;
    double min_jacobian = 0.0;
};

// Registers `moving` onto `fixed`: on return, warped(x) ~= fixed(x).
RegistrationResult lm_register(const Frame& moving, const Frame& fixed, const RegistrationParams& params);
RegistrationResult lm_register(const ScalarField& moving, const ScalarField& fixed,
                               const RegistrationParams& params);

nlohmann::json trace_to_json(const std::vector<TraceEntry>& trace);

// Debug dump: 16-byte header ("FFD1", int32 H, int32 W, int32 planes = 2)
// followed by the x plane then the y plane of mapped positions, float32 LE.
void save_field(const DeformationField& field, const std::filesystem::path& path);
DeformationField load_field(const std::filesystem::path& path);

}  // namespace speclift
