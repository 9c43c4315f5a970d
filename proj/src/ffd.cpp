#include "speclift/ffd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

namespace speclift {

// ---------------------------------------------------------------------------
// Basis

namespace {

inline std::array<double, 4> basis(double u) {
    const double u2 = u * u;
    const double u3 = u2 * u;
    const double v = 1.0 - u;
    return {v * v * v / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0, (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
            u3 / 6.0};
}

inline std::array<double, 4> basis_derivative(double u) {
    const double u2 = u * u;
    const double v = 1.0 - u;
    return {-0.5 * v * v, 1.5 * u2 - 2.0 * u, -1.5 * u2 + u + 0.5, 0.5 * u2};
}

void require_unit_interval(double u) {
    if (!(u >= 0.0 && u < 1.0)) {
        throw DegenerateInputError("B-spline parameter outside [0,1): " + std::to_string(u));
    }
}

}  // namespace

std::array<double, 4> bspline_weights(double u) {
    require_unit_interval(u);
    return basis(u);
}

std::array<double, 4> bspline_derivatives(double u) {
    require_unit_interval(u);
    return basis_derivative(u);
}

// ---------------------------------------------------------------------------
// Lattice

namespace {

int control_count(int pixels, double spacing) {
    return static_cast<int>(std::floor((pixels - 1) / spacing)) + 4;
}

// Cell index and local parameter of coordinate `x` on an axis with `n`
// control points; the cell is clamped so the 4-point support stays valid.
inline void locate(double x, double spacing, int n, int& cell, double& u) {
    const double t = x / spacing;
    cell = std::clamp(static_cast<int>(std::floor(t)), 0, n - 4);
    u = t - cell;
}

}  // namespace

FFDLattice::FFDLattice(Size image, double spacing, int level)
    : image_(image), spacing_(spacing), level_(level) {
    if (image.width < 1 || image.height < 1) throw DegenerateInputError("lattice over empty image");
    if (!(spacing > 0.0)) throw DegenerateInputError("lattice spacing must be positive");
    nx_ = control_count(image.width, spacing);
    ny_ = control_count(image.height, spacing);
    disp_.assign(static_cast<std::size_t>(nx_ * ny_), Vec2{});
}

Vec2 FFDLattice::position(int ix, int iy) const {
    const Vec2 r = rest_position(ix, iy);
    const Vec2 d = displacement(ix, iy);
    return {r.x + d.x, r.y + d.y};
}

void FFDLattice::set_position(int ix, int iy, Vec2 p) {
    const Vec2 r = rest_position(ix, iy);
    set_displacement(ix, iy, {p.x - r.x, p.y - r.y});
}

Eigen::VectorXd FFDLattice::parameters() const {
    Eigen::VectorXd p(2 * count());
    for (int k = 0; k < count(); ++k) {
        p(2 * k) = disp_[static_cast<std::size_t>(k)].x;
        p(2 * k + 1) = disp_[static_cast<std::size_t>(k)].y;
    }
    return p;
}

void FFDLattice::set_parameters(const Eigen::VectorXd& p) {
    if (p.size() != 2 * count()) throw DimensionMismatchError("lattice parameter vector has wrong length");
    for (int k = 0; k < count(); ++k) disp_[static_cast<std::size_t>(k)] = {p(2 * k), p(2 * k + 1)};
}

bool FFDLattice::is_identity() const {
    return std::all_of(disp_.begin(), disp_.end(), [](Vec2 d) { return d.x == 0.0 && d.y == 0.0; });
}

void FFDLattice::reset() { std::fill(disp_.begin(), disp_.end(), Vec2{}); }

FFDLattice FFDLattice::refined() const {
    FFDLattice out(image_, spacing_ / 2.0, level_ + 1);
    // Coarse index a sits at fine index 2a - 1. Odd fine indices take the
    // (1, 6, 1) / 8 vertex rule, even ones the (1, 1) / 2 edge rule.
    auto coarse_weights = [](int fine, int& a0, std::array<double, 3>& w) {
        if (fine % 2 == 1) {
            a0 = (fine + 1) / 2 - 1;
            w = {1.0 / 8.0, 6.0 / 8.0, 1.0 / 8.0};
        } else {
            a0 = fine / 2;
            w = {0.5, 0.5, 0.0};
        }
    };
    for (int fy = 0; fy < out.ny_; ++fy) {
        int ay = 0;
        std::array<double, 3> wy{};
        coarse_weights(fy, ay, wy);
        for (int fx = 0; fx < out.nx_; ++fx) {
            int ax = 0;
            std::array<double, 3> wx{};
            coarse_weights(fx, ax, wx);
            Vec2 acc;
            for (int j = 0; j < 3; ++j) {
                if (wy[static_cast<std::size_t>(j)] == 0.0) continue;
                const int cy = std::clamp(ay + j, 0, ny_ - 1);
                for (int i = 0; i < 3; ++i) {
                    if (wx[static_cast<std::size_t>(i)] == 0.0) continue;
                    const int cx = std::clamp(ax + i, 0, nx_ - 1);
                    const double w = wy[static_cast<std::size_t>(j)] * wx[static_cast<std::size_t>(i)];
                    const Vec2 d = displacement(cx, cy);
                    acc.x += w * d.x;
                    acc.y += w * d.y;
                }
            }
            out.set_displacement(fx, fy, acc);
        }
    }
    return out;
}

Vec2 deform(const FFDLattice& lattice, Vec2 p) {
    int cx = 0;
    int cy = 0;
    double ux = 0.0;
    double uy = 0.0;
    locate(p.x, lattice.spacing(), lattice.nx(), cx, ux);
    locate(p.y, lattice.spacing(), lattice.ny(), cy, uy);
    const auto bx = basis(ux);
    const auto by = basis(uy);
    Vec2 d;
    for (int j = 0; j < 4; ++j) {
        for (int i = 0; i < 4; ++i) {
            const double w = by[static_cast<std::size_t>(j)] * bx[static_cast<std::size_t>(i)];
            const Vec2 c = lattice.displacement(cx + i, cy + j);
            d.x += w * c.x;
            d.y += w * c.y;
        }
    }
    return {p.x + d.x, p.y + d.y};
}

double jacobian_det(const FFDLattice& lattice, Vec2 p) {
    int cx = 0;
    int cy = 0;
    double ux = 0.0;
    double uy = 0.0;
    const double s = lattice.spacing();
    locate(p.x, s, lattice.nx(), cx, ux);
    locate(p.y, s, lattice.ny(), cy, uy);
    const auto bx = basis(ux);
    const auto by = basis(uy);
    const auto dbx = basis_derivative(ux);
    const auto dby = basis_derivative(uy);
    double a = 0.0;  // d ux / dx
    double b = 0.0;  // d ux / dy
    double c = 0.0;  // d uy / dx
    double e = 0.0;  // d uy / dy
    for (int j = 0; j < 4; ++j) {
        for (int i = 0; i < 4; ++i) {
            const double wdx = by[static_cast<std::size_t>(j)] * dbx[static_cast<std::size_t>(i)] / s;
            const double wdy = dby[static_cast<std::size_t>(j)] * bx[static_cast<std::size_t>(i)] / s;
            const Vec2 d = lattice.displacement(cx + i, cy + j);
            a += wdx * d.x;
            b += wdy * d.x;
            c += wdx * d.y;
            e += wdy * d.y;
        }
    }
    return (1.0 + a) * (1.0 + e) - b * c;
}

// ---------------------------------------------------------------------------
// Tukey

double tukey_rho(double x, double c) {
    const double c2 = c * c / 6.0;
    if (std::abs(x) > c) return c2;
    const double t = 1.0 - (x / c) * (x / c);
    return c2 * (1.0 - t * t * t);
}

double tukey_psi(double x, double c) {
    if (std::abs(x) > c) return 0.0;
    const double t = 1.0 - (x / c) * (x / c);
    return x * t * t;
}

// ---------------------------------------------------------------------------
// Dense fields

DeformationField DeformationField::identity(Size size) {
    DeformationField f;
    f.size = size;
    f.map.resize(size.area());
    for (int r = 0; r < size.height; ++r) {
        for (int c = 0; c < size.width; ++c) {
            f.map[static_cast<std::size_t>(r * size.width + c)] = {static_cast<double>(c), static_cast<double>(r)};
        }
    }
    return f;
}

DeformationField DeformationField::from_lattice(const FFDLattice& lattice) {
    const Size size = lattice.image_size();
    DeformationField f;
    f.size = size;
    f.map.resize(size.area());
    for (int r = 0; r < size.height; ++r) {
        for (int c = 0; c < size.width; ++c) {
            f.map[static_cast<std::size_t>(r * size.width + c)] =
                deform(lattice, {static_cast<double>(c), static_cast<double>(r)});
        }
    }
    return f;
}

namespace {

// Bilinear sample of a row-major plane with border replication. Optionally
// returns the partial derivatives of the interpolant (zero where clamped).
inline double bilinear(const double* img, int w, int h, double x, double y, double* gx = nullptr,
                       double* gy = nullptr) {
    bool clamped_x = false;
    bool clamped_y = false;
    if (x < 0.0) {
        x = 0.0;
        clamped_x = true;
    } else if (x > w - 1) {
        x = w - 1;
        clamped_x = true;
    }
    if (y < 0.0) {
        y = 0.0;
        clamped_y = true;
    } else if (y > h - 1) {
        y = h - 1;
        clamped_y = true;
    }
    int x0 = static_cast<int>(x);
    int y0 = static_cast<int>(y);
    if (x0 >= w - 1) x0 = std::max(0, w - 2);
    if (y0 >= h - 1) y0 = std::max(0, h - 2);
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    const double i00 = img[y0 * w + x0];
    const double i01 = img[y0 * w + x1];
    const double i10 = img[y1 * w + x0];
    const double i11 = img[y1 * w + x1];
    const double top = i00 + fx * (i01 - i00);
    const double bot = i10 + fx * (i11 - i10);
    if (gx) *gx = clamped_x ? 0.0 : (1.0 - fy) * (i01 - i00) + fy * (i11 - i10);
    if (gy) *gy = clamped_y ? 0.0 : bot - top;
    return top + fy * (bot - top);
}

}  // namespace

Vec2 DeformationField::sample(Vec2 p) const {
    // Interpolate the displacement component-wise; inlined bilinear to
    // avoid materialising displacement planes.
    const int w = size.width;
    const int h = size.height;
    double x = std::clamp(p.x, 0.0, static_cast<double>(w - 1));
    double y = std::clamp(p.y, 0.0, static_cast<double>(h - 1));
    int x0 = static_cast<int>(x);
    int y0 = static_cast<int>(y);
    if (x0 >= w - 1) x0 = std::max(0, w - 2);
    if (y0 >= h - 1) y0 = std::max(0, h - 2);
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    auto disp = [&](int r, int c) {
        const Vec2 m = map[static_cast<std::size_t>(r * w + c)];
        return Vec2{m.x - c, m.y - r};
    };
    const Vec2 d00 = disp(y0, x0);
    const Vec2 d01 = disp(y0, x1);
    const Vec2 d10 = disp(y1, x0);
    const Vec2 d11 = disp(y1, x1);
    const double dx = (1 - fy) * ((1 - fx) * d00.x + fx * d01.x) + fy * ((1 - fx) * d10.x + fx * d11.x);
    const double dy = (1 - fy) * ((1 - fx) * d00.y + fx * d01.y) + fy * ((1 - fx) * d10.y + fx * d11.y);
    return {p.x + dx, p.y + dy};
}

DeformationField compose(const DeformationField& outer, const DeformationField& inner) {
    require_same_size(outer.size, inner.size, "compose");
    DeformationField out;
    out.size = inner.size;
    out.map.resize(inner.map.size());
    for (std::size_t i = 0; i < inner.map.size(); ++i) out.map[i] = outer.sample(inner.map[i]);
    return out;
}

ScalarField jacobian_field(const DeformationField& field) {
    const int w = field.size.width;
    const int h = field.size.height;
    if (w < 2 || h < 2) throw DegenerateInputError("jacobian_field needs at least 2x2");
    ScalarField out(w, h);
    for (int r = 0; r < h; ++r) {
        const int r0 = r == 0 ? 0 : r - 1;
        const int r1 = r == h - 1 ? h - 1 : r + 1;
        for (int c = 0; c < w; ++c) {
            const int c0 = c == 0 ? 0 : c - 1;
            const int c1 = c == w - 1 ? w - 1 : c + 1;
            const Vec2 px0 = field(r, c0);
            const Vec2 px1 = field(r, c1);
            const Vec2 py0 = field(r0, c);
            const Vec2 py1 = field(r1, c);
            const double sx = c1 - c0;
            const double sy = r1 - r0;
            const double a = (px1.x - px0.x) / sx;
            const double cc = (px1.y - px0.y) / sx;
            const double b = (py1.x - py0.x) / sy;
            const double e = (py1.y - py0.y) / sy;
            out(r, c) = a * e - b * cc;
        }
    }
    return out;
}

SpecularMask out_of_domain(const DeformationField& field) {
    SpecularMask m(field.size.width, field.size.height);
    constexpr double eps = 1e-6;
    const double xmax = field.size.width - 1 + eps;
    const double ymax = field.size.height - 1 + eps;
    for (std::size_t i = 0; i < field.map.size(); ++i) {
        const Vec2 p = field.map[i];
        m.set(i, p.x < -eps || p.y < -eps || p.x > xmax || p.y > ymax);
    }
    return m;
}

ScalarField warp_scalar(const ScalarField& image, const DeformationField& field) {
    require_same_size(image.size(), field.size, "warp_scalar");
    ScalarField out(image.width(), image.height());
    const double* src = image.values().data();
    for (std::size_t i = 0; i < field.map.size(); ++i) {
        out.values()[i] = bilinear(src, image.width(), image.height(), field.map[i].x, field.map[i].y);
    }
    return out;
}

Frame warp_image(const Frame& image, const DeformationField& field) {
    require_same_size(image.size(), field.size, "warp_image");
    std::array<std::vector<double>, 3> planes;
    for (int c = 0; c < 3; ++c) {
        auto& p = planes[static_cast<std::size_t>(c)];
        p.resize(field.map.size());
        const double* src = image.plane(c).data();
        for (std::size_t i = 0; i < field.map.size(); ++i) {
            p[i] = std::clamp(bilinear(src, image.width(), image.height(), field.map[i].x, field.map[i].y), 0.0, 1.0);
        }
    }
    return Frame(image.width(), image.height(), std::move(planes));
}

// ---------------------------------------------------------------------------
// Parameters

RegistrationParams RegistrationParams::from_config(const PipelineConfig& c) {
    RegistrationParams p;
    p.gamma = c.gamma;
    p.delta = c.delta;
    p.tukey_c = c.tukey_c;
    p.zeta = c.zeta;
    p.xi = c.xi;
    p.regrid_tol = c.regrid_tol;
    p.max_regrids = c.max_regrids;
    p.levels = c.lm_levels;
    p.max_iterations = c.lm_max_iterations;
    p.tolerance = c.lm_tolerance;
    p.finest_spacing = c.lattice_spacing;
    return p;
}

// ---------------------------------------------------------------------------
// Per-level problem

namespace {

ScalarField downsample2(const ScalarField& in) {
    const int w = (in.width() + 1) / 2;
    const int h = (in.height() + 1) / 2;
    ScalarField out(w, h);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            double acc = 0.0;
            int n = 0;
            for (int dr = 0; dr < 2; ++dr) {
                for (int dc = 0; dc < 2; ++dc) {
                    const int rr = 2 * r + dr;
                    const int cc = 2 * c + dc;
                    if (rr < in.height() && cc < in.width()) {
                        acc += in(rr, cc);
                        ++n;
                    }
                }
            }
            out(r, c) = acc / n;
        }
    }
    return out;
}

// Samples of one axis at one pyramid level: full-resolution coordinate,
// supporting cell and basis values (derivatives per full-resolution pixel).
struct AxisSamples {
    std::vector<int> cell;
    std::vector<std::array<double, 4>> w;
    std::vector<std::array<double, 4>> dw;
    // Runs of consecutive samples sharing a cell: [begin, end) per run.
    std::vector<std::pair<int, int>> runs;
};

AxisSamples make_axis(int samples, int factor, double spacing, int controls) {
    AxisSamples a;
    a.cell.resize(static_cast<std::size_t>(samples));
    a.w.resize(static_cast<std::size_t>(samples));
    a.dw.resize(static_cast<std::size_t>(samples));
    const double offset = (factor - 1) / 2.0;
    for (int p = 0; p < samples; ++p) {
        const double x = factor * p + offset;
        int cell = 0;
        double u = 0.0;
        locate(x, spacing, controls, cell, u);
        a.cell[static_cast<std::size_t>(p)] = cell;
        a.w[static_cast<std::size_t>(p)] = basis(u);
        auto d = basis_derivative(u);
        for (double& v : d) v /= spacing;
        a.dw[static_cast<std::size_t>(p)] = d;
    }
    int begin = 0;
    for (int p = 1; p <= samples; ++p) {
        if (p == samples || a.cell[static_cast<std::size_t>(p)] != a.cell[static_cast<std::size_t>(begin)]) {
            a.runs.emplace_back(begin, p);
            begin = p;
        }
    }
    return a;
}

constexpr int kLocal = 16;

struct LocalBlock {
    // Interleaved local ordering: index 2k is x of local control point k,
    // 2k + 1 its y. Only the upper triangle is accumulated.
    double h[2 * kLocal][2 * kLocal];
    double g[2 * kLocal];
    void clear() { std::memset(this, 0, sizeof(*this)); }
};

class LevelProblem {
  public:
    LevelProblem(ScalarField moving, const ScalarField& fixed, int factor, const FFDLattice& lattice,
                 const RegistrationParams& params)
        : moving_(std::move(moving)),
          fixed_(fixed),
          factor_(factor),
          nx_(lattice.nx()),
          ny_(lattice.ny()),
          params_(params) {
        require_same_size(moving_.size(), fixed_.size(), "registration level");
        cols_ = make_axis(fixed_.width(), factor, lattice.spacing(), nx_);
        rows_ = make_axis(fixed_.height(), factor, lattice.spacing(), ny_);
        build_pattern();
    }

    [[nodiscard]] int parameter_count() const { return 2 * nx_ * ny_; }
    [[nodiscard]] const ScalarField& moving() const { return moving_; }

    struct Eval {
        EnergyBreakdown energy;
        double min_jacobian = std::numeric_limits<double>::infinity();
    };

    [[nodiscard]] Eval evaluate(const Eigen::VectorXd& d) const {
        Eval out;
        const double c = params_.tukey_c;
        for (const auto& [r0, r1] : rows_.runs) {
            const int cy = rows_.cell[static_cast<std::size_t>(r0)];
            for (const auto& [c0, c1] : cols_.runs) {
                const int cx = cols_.cell[static_cast<std::size_t>(c0)];
                double dxl[kLocal];
                double dyl[kLocal];
                gather(d, cx, cy, dxl, dyl);
                for (int r = r0; r < r1; ++r) {
                    for (int col = c0; col < c1; ++col) {
                        const Sample s = sample(r, col, dxl, dyl);
                        const double res = residual(r, col, s, nullptr, nullptr);
                        out.energy.data += tukey_rho(res, c);
                        out.energy.smoothness += s.a * s.a + s.b * s.b + s.c * s.c + s.e * s.e;
                        const double jac = (1.0 + s.a) * (1.0 + s.e) - s.b * s.c;
                        out.min_jacobian = std::min(out.min_jacobian, jac);
                        if (std::abs(jac - 1.0) >= params_.zeta) {
                            out.energy.topology += std::exp(-jac) + params_.xi * std::abs(jac);
                        }
                    }
                }
            }
        }
        out.energy.total =
            out.energy.data + params_.gamma * out.energy.smoothness + params_.delta * out.energy.topology;
        return out;
    }

    // Gradient of each term, and optionally the damped-ready Gauss-Newton
    // Hessian of the weighted total (values laid out per pattern()).
    void linearize(const Eigen::VectorXd& d, Eigen::VectorXd* g_data, Eigen::VectorXd* g_smooth,
                   Eigen::VectorXd* g_topo, std::vector<double>* hessian) const {
        const double c = params_.tukey_c;
        const double inv_f = 1.0 / factor_;
        const std::size_t n = static_cast<std::size_t>(parameter_count());
        for (auto* g : {g_data, g_smooth, g_topo}) {
            if (g) g->setZero(static_cast<Eigen::Index>(n));
        }
        if (hessian) hessian->assign(static_cast<std::size_t>(matrix_.nonZeros()), 0.0);

        LocalBlock hd;  // data + weighted regularisers (Hessian)
        double gd[2 * kLocal];
        double gs[2 * kLocal];
        double gt[2 * kLocal];
        for (const auto& [r0, r1] : rows_.runs) {
            const int cy = rows_.cell[static_cast<std::size_t>(r0)];
            for (const auto& [c0, c1] : cols_.runs) {
                const int cx = cols_.cell[static_cast<std::size_t>(c0)];
                double dxl[kLocal];
                double dyl[kLocal];
                gather(d, cx, cy, dxl, dyl);
                if (hessian) hd.clear();
                std::fill(std::begin(gd), std::end(gd), 0.0);
                std::fill(std::begin(gs), std::end(gs), 0.0);
                std::fill(std::begin(gt), std::end(gt), 0.0);
                // Stiffness of the smoothness term over this cell: sum of
                // wdx wdx^T + wdy wdy^T, shared by the x and y components.
                double stiff[kLocal][kLocal] = {};

                for (int r = r0; r < r1; ++r) {
                    const auto& by = rows_.w[static_cast<std::size_t>(r)];
                    const auto& dby = rows_.dw[static_cast<std::size_t>(r)];
                    for (int col = c0; col < c1; ++col) {
                        const auto& bx = cols_.w[static_cast<std::size_t>(col)];
                        const auto& dbx = cols_.dw[static_cast<std::size_t>(col)];
                        double w[kLocal];
                        double wdx[kLocal];
                        double wdy[kLocal];
                        for (int j = 0; j < 4; ++j) {
                            for (int i = 0; i < 4; ++i) {
                                const int k = 4 * j + i;
                                w[k] = by[static_cast<std::size_t>(j)] * bx[static_cast<std::size_t>(i)];
                                wdx[k] = by[static_cast<std::size_t>(j)] * dbx[static_cast<std::size_t>(i)];
                                wdy[k] = dby[static_cast<std::size_t>(j)] * bx[static_cast<std::size_t>(i)];
                            }
                        }
                        const Sample s = sample(r, col, dxl, dyl);
                        double mgx = 0.0;
                        double mgy = 0.0;
                        const double res = residual(r, col, s, &mgx, &mgy);
                        mgx *= inv_f;
                        mgy *= inv_f;

                        // Data term.
                        const double psi = tukey_psi(res, c);
                        if (psi != 0.0) {
                            for (int k = 0; k < kLocal; ++k) {
                                gd[2 * k] += psi * mgx * w[k];
                                gd[2 * k + 1] += psi * mgy * w[k];
                            }
                        }
                        if (hessian && std::abs(res) < c) {
                            const double t = 1.0 - (res / c) * (res / c);
                            const double wt = t * t;
                            const double hxx = wt * mgx * mgx;
                            const double hxy = wt * mgx * mgy;
                            const double hyy = wt * mgy * mgy;
                            for (int k = 0; k < kLocal; ++k) {
                                for (int l = k; l < kLocal; ++l) {
                                    const double ww = w[k] * w[l];
                                    hd.h[2 * k][2 * l] += hxx * ww;
                                    hd.h[2 * k][2 * l + 1] += hxy * ww;
                                    hd.h[2 * k + 1][2 * l + 1] += hyy * ww;
                                    if (l != k) hd.h[2 * k + 1][2 * l] += hxy * ww;
                                }
                            }
                        }

                        // Smoothness: d/dp of (a^2 + b^2 + c^2 + e^2).
                        for (int k = 0; k < kLocal; ++k) {
                            gs[2 * k] += 2.0 * (s.a * wdx[k] + s.b * wdy[k]);
                            gs[2 * k + 1] += 2.0 * (s.c * wdx[k] + s.e * wdy[k]);
                        }
                        if (hessian) {
                            for (int k = 0; k < kLocal; ++k) {
                                for (int l = k; l < kLocal; ++l) stiff[k][l] += wdx[k] * wdx[l] + wdy[k] * wdy[l];
                            }
                        }

                        // Topology.
                        const double jac = (1.0 + s.a) * (1.0 + s.e) - s.b * s.c;
                        if (std::abs(jac - 1.0) >= params_.zeta) {
                            const double ej = std::exp(-jac);
                            const double dh = -ej + params_.xi * (jac > 0.0 ? 1.0 : (jac < 0.0 ? -1.0 : 0.0));
                            double gj[2 * kLocal];
                            for (int k = 0; k < kLocal; ++k) {
                                gj[2 * k] = (1.0 + s.e) * wdx[k] - s.c * wdy[k];
                                gj[2 * k + 1] = (1.0 + s.a) * wdy[k] - s.b * wdx[k];
                            }
                            for (int q = 0; q < 2 * kLocal; ++q) gt[q] += dh * gj[q];
                            if (hessian) {
                                const double wt = params_.delta * ej;
                                for (int p = 0; p < 2 * kLocal; ++p) {
                                    for (int q = p; q < 2 * kLocal; ++q) hd.h[p][q] += wt * gj[p] * gj[q];
                                }
                            }
                        }
                    }
                }
                if (hessian) {
                    const double sw = 2.0 * params_.gamma;
                    for (int k = 0; k < kLocal; ++k) {
                        for (int l = k; l < kLocal; ++l) {
                            hd.h[2 * k][2 * l] += sw * stiff[k][l];
                            hd.h[2 * k + 1][2 * l + 1] += sw * stiff[k][l];
                        }
                    }
                }
                scatter(cx, cy, gd, gs, gt, g_data, g_smooth, g_topo, hessian ? &hd : nullptr, hessian);
            }
        }
    }

    // Regrid at this level: resample the moving image through `d`.
    void resample_moving(const Eigen::VectorXd& d) {
        ScalarField next(moving_.width(), moving_.height());
        for (const auto& [r0, r1] : rows_.runs) {
            const int cy = rows_.cell[static_cast<std::size_t>(r0)];
            for (const auto& [c0, c1] : cols_.runs) {
                const int cx = cols_.cell[static_cast<std::size_t>(c0)];
                double dxl[kLocal];
                double dyl[kLocal];
                gather(d, cx, cy, dxl, dyl);
                for (int r = r0; r < r1; ++r) {
                    for (int col = c0; col < c1; ++col) {
                        const Sample s = sample(r, col, dxl, dyl);
                        next(r, col) = bilinear(moving_.values().data(), moving_.width(), moving_.height(), s.qx, s.qy);
                    }
                }
            }
        }
        moving_ = std::move(next);
    }

    [[nodiscard]] const Eigen::SparseMatrix<double>& pattern() const { return matrix_; }
    [[nodiscard]] const std::vector<int>& diagonal_positions() const { return diag_pos_; }

  private:
    struct Sample {
        double qx, qy;      // level-pixel coordinates in the moving image
        double a, b, c, e;  // displacement derivatives (ux_x, ux_y, uy_x, uy_y)
    };

    void gather(const Eigen::VectorXd& d, int cx, int cy, double* dxl, double* dyl) const {
        for (int j = 0; j < 4; ++j) {
            for (int i = 0; i < 4; ++i) {
                const int k = (cy + j) * nx_ + cx + i;
                dxl[4 * j + i] = d(2 * k);
                dyl[4 * j + i] = d(2 * k + 1);
            }
        }
    }

    [[nodiscard]] Sample sample(int r, int col, const double* dxl, const double* dyl) const {
        const auto& by = rows_.w[static_cast<std::size_t>(r)];
        const auto& dby = rows_.dw[static_cast<std::size_t>(r)];
        const auto& bx = cols_.w[static_cast<std::size_t>(col)];
        const auto& dbx = cols_.dw[static_cast<std::size_t>(col)];
        double ux = 0.0, uy = 0.0, a = 0.0, b = 0.0, c = 0.0, e = 0.0;
        for (int j = 0; j < 4; ++j) {
            double rx = 0.0, ry = 0.0, rdx = 0.0, rdy = 0.0;
            for (int i = 0; i < 4; ++i) {
                const double vx = dxl[4 * j + i];
                const double vy = dyl[4 * j + i];
                rx += bx[static_cast<std::size_t>(i)] * vx;
                ry += bx[static_cast<std::size_t>(i)] * vy;
                rdx += dbx[static_cast<std::size_t>(i)] * vx;
                rdy += dbx[static_cast<std::size_t>(i)] * vy;
            }
            const double wy = by[static_cast<std::size_t>(j)];
            const double dwy = dby[static_cast<std::size_t>(j)];
            ux += wy * rx;
            uy += wy * ry;
            a += wy * rdx;
            c += wy * rdy;
            b += dwy * rx;
            e += dwy * ry;
        }
        // Displacements are in full-resolution pixels; convert to this level.
        const double inv_f = 1.0 / factor_;
        return {col + ux * inv_f, r + uy * inv_f, a, b, c, e};
    }

    double residual(int r, int col, const Sample& s, double* gx, double* gy) const {
        const double m = bilinear(moving_.values().data(), moving_.width(), moving_.height(), s.qx, s.qy, gx, gy);
        return m - fixed_(r, col);
    }

    void build_pattern() {
        const int ncp = nx_ * ny_;
        std::vector<Eigen::Triplet<double>> trips;
        trips.reserve(static_cast<std::size_t>(ncp) * 49 * 4);
        for (int iy = 0; iy < ny_; ++iy) {
            for (int ix = 0; ix < nx_; ++ix) {
                const int k = iy * nx_ + ix;
                for (int jy = std::max(0, iy - 3); jy <= std::min(ny_ - 1, iy + 3); ++jy) {
                    for (int jx = std::max(0, ix - 3); jx <= std::min(nx_ - 1, ix + 3); ++jx) {
                        const int l = jy * nx_ + jx;
                        for (int a = 0; a < 2; ++a) {
                            for (int b = 0; b < 2; ++b) trips.emplace_back(2 * k + a, 2 * l + b, 0.0);
                        }
                    }
                }
            }
        }
        matrix_.resize(2 * ncp, 2 * ncp);
        matrix_.setFromTriplets(trips.begin(), trips.end());
        matrix_.makeCompressed();
        diag_pos_.resize(static_cast<std::size_t>(2 * ncp));
        for (int i = 0; i < 2 * ncp; ++i) diag_pos_[static_cast<std::size_t>(i)] = position(i, i);
    }

    // Index into valuePtr() of entry (row, col); the pattern guarantees it exists.
    [[nodiscard]] int position(int row, int col) const {
        const int* outer = matrix_.outerIndexPtr();
        const int* inner = matrix_.innerIndexPtr();
        const int* it = std::lower_bound(inner + outer[col], inner + outer[col + 1], row);
        return static_cast<int>(it - inner);
    }

    void scatter(int cx, int cy, const double* gd, const double* gs, const double* gt, Eigen::VectorXd* g_data,
                 Eigen::VectorXd* g_smooth, Eigen::VectorXd* g_topo, const LocalBlock* hd,
                 std::vector<double>* hessian) const {
        int gidx[2 * kLocal];
        for (int j = 0; j < 4; ++j) {
            for (int i = 0; i < 4; ++i) {
                const int k = 4 * j + i;
                const int global = (cy + j) * nx_ + cx + i;
                gidx[2 * k] = 2 * global;
                gidx[2 * k + 1] = 2 * global + 1;
            }
        }
        for (int p = 0; p < 2 * kLocal; ++p) {
            if (g_data) (*g_data)(gidx[p]) += gd[p];
            if (g_smooth) (*g_smooth)(gidx[p]) += gs[p];
            if (g_topo) (*g_topo)(gidx[p]) += gt[p];
        }
        if (!hd || !hessian) return;
        // Column-major local position table, cached per cell.
        const std::size_t cell = static_cast<std::size_t>(cy * (nx_ - 3) + cx);
        if (cell_pos_.empty()) cell_pos_.resize(static_cast<std::size_t>((nx_ - 3) * (ny_ - 3)));
        auto& pos = cell_pos_[cell];
        if (pos.empty()) {
            pos.resize(static_cast<std::size_t>(4 * kLocal * kLocal));
            for (int p = 0; p < 2 * kLocal; ++p) {
                for (int q = 0; q < 2 * kLocal; ++q) {
                    pos[static_cast<std::size_t>(p * 2 * kLocal + q)] = position(gidx[p], gidx[q]);
                }
            }
        }
        double* values = hessian->data();
        for (int p = 0; p < 2 * kLocal; ++p) {
            for (int q = p; q < 2 * kLocal; ++q) {
                const double v = hd->h[p][q];
                if (v == 0.0) continue;
                values[pos[static_cast<std::size_t>(p * 2 * kLocal + q)]] += v;
                if (q != p) values[pos[static_cast<std::size_t>(q * 2 * kLocal + p)]] += v;
            }
        }
    }

    ScalarField moving_;
    ScalarField fixed_;
    int factor_;
    int nx_;
    int ny_;
    RegistrationParams params_;
    AxisSamples cols_;
    AxisSamples rows_;
    Eigen::SparseMatrix<double> matrix_;
    std::vector<int> diag_pos_;
    mutable std::vector<std::vector<int>> cell_pos_;
};

int effective_levels(Size size, int requested) {
    int levels = std::max(1, requested);
    while (levels > 1 && std::min(size.width, size.height) / (1 << (levels - 1)) < 16) --levels;
    return levels;
}

}  // namespace

EnergyBreakdown energy(const ScalarField& moving, const ScalarField& fixed, const FFDLattice& lattice,
                       const RegistrationParams& params) {
    require_same_size(moving.size(), fixed.size(), "energy");
    require_same_size(lattice.image_size(), fixed.size(), "energy lattice");
    const LevelProblem problem(moving, fixed, 1, lattice, params);
    return problem.evaluate(lattice.parameters()).energy;
}

EnergyBreakdown energy(const Frame& moving, const Frame& fixed, const FFDLattice& lattice,
                       const RegistrationParams& params) {
    require_same_size(moving.size(), fixed.size(), "energy");
    return energy(mean_intensity(moving), mean_intensity(fixed), lattice, params);
}

EnergyGradient energy_gradient(const ScalarField& moving, const ScalarField& fixed, const FFDLattice& lattice,
                               const RegistrationParams& params) {
    require_same_size(moving.size(), fixed.size(), "energy_gradient");
    require_same_size(lattice.image_size(), fixed.size(), "energy_gradient lattice");
    const LevelProblem problem(moving, fixed, 1, lattice, params);
    EnergyGradient g;
    problem.linearize(lattice.parameters(), &g.data, &g.smoothness, &g.topology, nullptr);
    return g;
}

// ---------------------------------------------------------------------------
// Regridding and composition

RegridState regrid(RegridState state) {
    require_same_size(state.moving.size(), state.lattice.image_size(), "regrid");
    state.moving = warp_scalar(state.moving, DeformationField::from_lattice(state.lattice));
    state.snapshots.push_back(state.lattice);
    state.lattice.reset();
    return state;
}

DeformationField compose_snapshots(const std::vector<FFDLattice>& snapshots, const FFDLattice& current) {
    DeformationField out = DeformationField::from_lattice(current);
    const double xmax = out.size.width - 1;
    const double ymax = out.size.height - 1;
    // Each snapshot is evaluated through its own spline rather than a
    // bilinear resampling of its dense field: the latter drifts by several
    // hundredths of a pixel where the warp is strongly compressed. Points
    // that left the domain take the displacement of the nearest border
    // point, as DeformationField::sample does.
    for (auto it = snapshots.rbegin(); it != snapshots.rend(); ++it) {
        require_same_size(it->image_size(), out.size, "compose_snapshots");
        for (Vec2& p : out.map) {
            const Vec2 q{std::clamp(p.x, 0.0, xmax), std::clamp(p.y, 0.0, ymax)};
            const Vec2 m = deform(*it, q);
            p = {p.x + (m.x - q.x), p.y + (m.y - q.y)};
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt

RegistrationResult lm_register(const ScalarField& moving, const ScalarField& fixed,
                               const RegistrationParams& params) {
    require_same_size(moving.size(), fixed.size(), "lm_register");
    if (moving.width() < 4 || moving.height() < 4) {
        throw DegenerateInputError("lm_register needs at least 4x4 images");
    }
    const Size size = fixed.size();
    const int levels = effective_levels(size, params.levels);

    std::vector<ScalarField> fixed_pyr{fixed};
    std::vector<ScalarField> moving_pyr{moving};
    for (int l = 1; l < levels; ++l) {
        fixed_pyr.push_back(downsample2(fixed_pyr.back()));
        moving_pyr.push_back(downsample2(moving_pyr.back()));
    }

    RegistrationResult result;
    result.levels_used = levels;
    result.converged = true;
    FFDLattice lattice(size, static_cast<double>(params.finest_spacing) * (1 << (levels - 1)), 0);

    for (int level = 0; level < levels; ++level) {
        const int depth = levels - 1 - level;
        const int factor = 1 << depth;
        if (level > 0) lattice = lattice.refined();

        ScalarField level_moving;
        if (result.snapshots.empty()) {
            level_moving = moving_pyr[static_cast<std::size_t>(depth)];
        } else {
            // Earlier regrids: rebuild this level from the moving image
            // resampled through the frozen snapshots.
            const DeformationField frozen = compose_snapshots(result.snapshots, FFDLattice(size, lattice.spacing()));
            level_moving = warp_scalar(moving, frozen);
            for (int l = 0; l < depth; ++l) level_moving = downsample2(level_moving);
        }
        LevelProblem problem(std::move(level_moving), fixed_pyr[static_cast<std::size_t>(depth)], factor, lattice,
                             params);

        Eigen::VectorXd d = lattice.parameters();
        auto current = problem.evaluate(d);
        result.trace.push_back({level, 0, 0.0, true, false, current.energy});

        Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
        Eigen::SparseMatrix<double> h = problem.pattern();
        solver.analyzePattern(h);

        double lambda = 1e-3;
        bool relinearize = true;
        bool level_converged = false;
        Eigen::VectorXd grad_data, grad_smooth, grad_topo, grad;
        std::vector<double> hvals;
        for (int it = 1; it <= params.max_iterations; ++it) {
            if (relinearize) {
                problem.linearize(d, &grad_data, &grad_smooth, &grad_topo, &hvals);
                grad = grad_data + params.gamma * grad_smooth + params.delta * grad_topo;
                relinearize = false;
            }
            double max_diag = 0.0;
            for (int p : problem.diagonal_positions()) max_diag = std::max(max_diag, hvals[static_cast<std::size_t>(p)]);
            const double eps = 1e-9 * max_diag + 1e-12;
            std::copy(hvals.begin(), hvals.end(), h.valuePtr());
            for (int p : problem.diagonal_positions()) {
                h.valuePtr()[p] += lambda * (hvals[static_cast<std::size_t>(p)] + eps);
            }
            solver.factorize(h);
            if (solver.info() != Eigen::Success) {
                lambda *= 10.0;
                ++result.iterations;
                continue;
            }
            const Eigen::VectorXd step = solver.solve(-grad);
            const Eigen::VectorXd candidate = d + step;
            const auto trial = problem.evaluate(candidate);
            ++result.iterations;
            if (!std::isfinite(trial.energy.total)) {
                throw RegistrationError("NaN/inf energy at level " + std::to_string(level) + " iteration " +
                                        std::to_string(it) + " (lambda " + std::to_string(lambda) + ")");
            }

            if (trial.min_jacobian < params.regrid_tol) {
                if (d.isZero(0.0)) {
                    // Fresh identity cannot be frozen; shrink the step instead.
                    result.trace.push_back({level, it, lambda, false, false, trial.energy});
                    lambda *= 10.0;
                    continue;
                }
                if (result.regrid_count >= params.max_regrids) {
                    throw RegistrationError("runaway regridding: more than " + std::to_string(params.max_regrids) +
                                            " regrids (min |J| " + std::to_string(trial.min_jacobian) + ")");
                }
                lattice.set_parameters(d);
                result.snapshots.push_back(lattice);
                ++result.regrid_count;
                problem.resample_moving(d);
                d.setZero();
                lattice.reset();
                current = problem.evaluate(d);
                result.trace.push_back({level, it, lambda, true, true, current.energy});
                relinearize = true;
                continue;
            }

            if (trial.energy.total < current.energy.total) {
                const double rel = (current.energy.total - trial.energy.total) / std::max(current.energy.total, 1e-300);
                d = candidate;
                current = trial;
                lambda = std::max(lambda / 10.0, 1e-12);
                relinearize = true;
                result.trace.push_back({level, it, lambda, true, false, trial.energy});
                if (rel < params.tolerance) {
                    level_converged = true;
                    break;
                }
            } else {
                result.trace.push_back({level, it, lambda, false, false, trial.energy});
                lambda *= 10.0;
                if (lambda > 1e12) {
                    level_converged = true;  // no descent direction left
                    break;
                }
            }
            if (current.energy.total <= 0.0) {
                level_converged = true;
                break;
            }
        }
        lattice.set_parameters(d);
        result.converged = result.converged && level_converged;
    }

    result.lattice = lattice;
    result.field = compose_snapshots(result.snapshots, lattice);
    const ScalarField jac = jacobian_field(result.field);
    result.min_jacobian = *std::min_element(jac.values().begin(), jac.values().end());
    return result;
}

RegistrationResult lm_register(const Frame& moving, const Frame& fixed, const RegistrationParams& params) {
    require_same_size(moving.size(), fixed.size(), "lm_register");
    RegistrationResult result = lm_register(mean_intensity(moving), mean_intensity(fixed), params);
    result.warped = warp_image(moving, result.field);
    return result;
}

nlohmann::json trace_to_json(const std::vector<TraceEntry>& trace) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : trace) {
        arr.push_back({{"level", t.level},
                       {"iteration", t.iteration},
                       {"lambda", t.lambda},
                       {"accepted", t.accepted},
                       {"regrid", t.regrid},
                       {"data", t.energy.data},
                       {"smoothness", t.energy.smoothness},
                       {"topology", t.energy.topology},
                       {"total", t.energy.total}});
    }
    return arr;
}

// ---------------------------------------------------------------------------
// Field dump

namespace {

void put_u32(std::ofstream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in) {
    unsigned char b[4] = {};
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_field(const DeformationField& field, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write field " + path.string());
    out.write("FFD1", 4);
    put_u32(out, static_cast<std::uint32_t>(field.size.height));
    put_u32(out, static_cast<std::uint32_t>(field.size.width));
    put_u32(out, 2);
    for (int plane = 0; plane < 2; ++plane) {
        for (const Vec2& p : field.map) {
            const float v = static_cast<float>(plane == 0 ? p.x : p.y);
            std::uint32_t bits = 0;
            std::memcpy(&bits, &v, 4);
            put_u32(out, bits);
        }
    }
    if (!out) throw IoError("short write on field " + path.string());
}

DeformationField load_field(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read field " + path.string());
    char magic[4] = {};
    in.read(magic, 4);
    if (std::memcmp(magic, "FFD1", 4) != 0) throw FormatError("bad field magic in " + path.string());
    const auto h = static_cast<int>(get_u32(in));
    const auto w = static_cast<int>(get_u32(in));
    const auto planes = get_u32(in);
    if (planes != 2 || w < 1 || h < 1) throw FormatError("bad field header in " + path.string());
    DeformationField f;
    f.size = {w, h};
    f.map.resize(f.size.area());
    for (int plane = 0; plane < 2; ++plane) {
        for (auto& p : f.map) {
            const std::uint32_t bits = get_u32(in);
            float v = 0.0F;
            std::memcpy(&v, &bits, 4);
            (plane == 0 ? p.x : p.y) = v;
        }
    }
    if (!in) throw FormatError("truncated field file " + path.string());
    return f;
}

}  // namespace speclift
