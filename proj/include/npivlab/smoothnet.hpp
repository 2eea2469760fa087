#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <utility>
#include <vector>

#include "npivlab/common.hpp"

namespace npivlab::nets {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double sigmoid_deriv(double s) { return s * (1.0 - s); }  // in terms of sigma(x)

/**
 * Smooth output clip: a bounded, 1-Lipschitz C-infinity function equal to
 * the identity on [-c_id, c_id] with |clip(x)| <= c_max everywhere.
 *
 * Outside the identity region the slope follows the standard smooth
 * transition ramp rho(t) = h(2-t) / (h(t) + h(2-t)), h(t) = exp(-1/t),
 * integrated over a band of length 2*(c_max - c_id); rho(t) + rho(2-t) = 1
 * makes the ramp integrate to exactly c_max - c_id, so the clip saturates
 * at exactly +-c_max and is constant beyond the band.
 */
struct ClipSpec {
    double c_id = 2.0;
    double c_max = 3.0;

    static double bump(double t) { return t > 0.0 ? std::exp(-1.0 / t) : 0.0; }

    /// Transition slope on [0,2]; equals 1 at 0 and 0 at 2, flat at both ends.
    static double ramp(double t) {
        if (t <= 0.0) return 1.0;
        if (t >= 2.0) return 0.0;
        const double a = bump(t), b = bump(2.0 - t);
        return b / (a + b);
    }

    /// Integral of ramp over [0, s] by composite Gauss-Legendre, accurate to
    /// machine precision so the saturation bound holds exactly.
    static double ramp_integral(double s) {
        if (s <= 0.0) return 0.0;
        if (s >= 2.0) return 1.0;
        static const double xs[5] = {0.1488743389816312, 0.4333953941292472,
                                     0.6794095682990244, 0.8650633666889845,
                                     0.9739065285171717};
        static const double ws[5] = {0.2955242247147529, 0.2692667193099963,
                                     0.2190863625159820, 0.1494513491505806,
                                     0.0666713443086881};
        double acc = 0.0;
        const int panels = 32;
        const double h = s / panels;
        for (int p = 0; p < panels; ++p) {
            const double c = 0.5 * h, m = (p + 0.5) * h;
            for (int i = 0; i < 5; ++i)
                acc += c * ws[i] * (ramp(m + c * xs[i]) + ramp(m - c * xs[i]));
        }
        return std::min(acc, 1.0);
    }

    double operator()(double x) const {
        const double ax = std::abs(x);
        if (ax <= c_id) return x;
        const double d = c_max - c_id;
        const double v = c_id + d * ramp_integral((ax - c_id) / d);
        return x >= 0.0 ? v : -v;
    }

    double deriv(double x) const {
        const double ax = std::abs(x);
        if (ax <= c_id) return 1.0;
        return ramp((ax - c_id) / (c_max - c_id));
    }

    bool valid() const { return c_max > c_id && c_id > 0.0; }
};

struct Layer {
    Eigen::MatrixXd w;
    Eigen::VectorXd b;
};

struct NetMeta {
    int depth = 0;       // number of affine maps L
    int width = 0;       // maximum layer output size W
    long long nonzeros = 0;  // sparsity count S
    double max_abs = 0.0;    // norm bound M
};

/// Parameter gradients of a net, shaped like its layers, plus the input gradient.
struct NetGrad {
    std::vector<Eigen::MatrixXd> dw;
    std::vector<Eigen::VectorXd> db;
    Eigen::VectorXd dx;
};

/**
 * A layered sigmoid network with a smooth output clip: the function class
 * with depth L, width W, sparsity S and norm bound M. The logistic sigmoid
 * is applied elementwise between affine maps; the final output is scalar
 * and passes through the clip. Nets are immutable after construction;
 * forward and backward are pure.
 */
class SmoothNet {
public:
    SmoothNet() = default;
    SmoothNet(std::vector<Layer> layers, ClipSpec clip)
        : layers_(std::move(layers)), clip_(clip) {
        require(!layers_.empty(), "net needs at least one affine layer");
        require(clip_.valid(), "clip requires c_max > c_id > 0");
        require(layers_.back().w.rows() == 1, "output layer must be scalar");
        for (std::size_t i = 0; i + 1 < layers_.size(); ++i)
            require(layers_[i].w.rows() == layers_[i + 1].w.cols(),
                    "layer dimensions do not chain");
        for (const auto& l : layers_)
            require(l.w.rows() == l.b.size(), "bias length must match layer rows");
    }

    int input_dim() const { return static_cast<int>(layers_.front().w.cols()); }
    const std::vector<Layer>& layers() const { return layers_; }
    const ClipSpec& clip() const { return clip_; }

    /// Recompute (L, W, S, M) from the parameters.
    NetMeta meta() const {
        NetMeta m;
        m.depth = static_cast<int>(layers_.size());
        for (const auto& l : layers_) {
            m.width = std::max(m.width, static_cast<int>(l.w.rows()));
            for (Eigen::Index i = 0; i < l.w.size(); ++i) {
                const double v = l.w.data()[i];
                if (v != 0.0) ++m.nonzeros;
                m.max_abs = std::max(m.max_abs, std::abs(v));
            }
            for (Eigen::Index i = 0; i < l.b.size(); ++i) {
                if (l.b[i] != 0.0) ++m.nonzeros;
                m.max_abs = std::max(m.max_abs, std::abs(l.b[i]));
            }
        }
        return m;
    }

    double forward(const Eigen::VectorXd& x) const {
        require(x.size() == layers_.front().w.cols(), "input dimension mismatch");
        Eigen::VectorXd a = x;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            Eigen::VectorXd z = layers_[i].w * a + layers_[i].b;
            if (i + 1 == layers_.size()) return clip_(z[0]);
            a = z.unaryExpr([](double t) { return sigmoid(t); });
        }
        return 0.0;  // unreachable
    }

    double forward1d(double x) const {
        Eigen::VectorXd v(1);
        v[0] = x;
        return forward(v);
    }

    /// Zero-initialized gradient buffer shaped like this net.
    NetGrad zero_grad() const {
        NetGrad g;
        for (const auto& l : layers_) {
            g.dw.emplace_back(Eigen::MatrixXd::Zero(l.w.rows(), l.w.cols()));
            g.db.emplace_back(Eigen::VectorXd::Zero(l.b.size()));
        }
        g.dx = Eigen::VectorXd::Zero(layers_.front().w.cols());
        return g;
    }

    /**
     * Reverse-mode derivative of forward. Accumulates seed * d(out)/d(param)
     * into `grad` (which must be shaped by zero_grad) and seed * d(out)/dx
     * into grad.dx. Returns the forward value.
     */
    double backward(const Eigen::VectorXd& x, double seed, NetGrad& grad) const {
        require(x.size() == layers_.front().w.cols(), "input dimension mismatch");
        const std::size_t L = layers_.size();
        std::vector<Eigen::VectorXd> acts(L + 1);  // acts[i]: input to layer i
        acts[0] = x;
        Eigen::VectorXd pre_out;
        for (std::size_t i = 0; i < L; ++i) {
            Eigen::VectorXd z = layers_[i].w * acts[i] + layers_[i].b;
            if (i + 1 == L) {
                pre_out = z;
            } else {
                acts[i + 1] = z.unaryExpr([](double t) { return sigmoid(t); });
            }
        }
        const double out = clip_(pre_out[0]);

        // Adjoint of the pre-clip output.
        Eigen::VectorXd delta(1);
        delta[0] = seed * clip_.deriv(pre_out[0]);
        for (std::size_t ii = L; ii-- > 0;) {
            grad.dw[ii] += delta * acts[ii].transpose();
            grad.db[ii] += delta;
            Eigen::VectorXd back = layers_[ii].w.transpose() * delta;
            if (ii == 0) {
                grad.dx += back;
            } else {
                // Chain through the sigmoid of the previous layer.
                delta = back.cwiseProduct(
                    acts[ii].unaryExpr([](double s) { return sigmoid_deriv(s); }));
            }
        }
        return out;
    }

private:
    std::vector<Layer> layers_;
    ClipSpec clip_;
};

/// A list of nets sharing an input dimension, evaluated as a vector feature map.
struct NetBundle {
    std::vector<SmoothNet> nets;

    int input_dim() const { return nets.empty() ? 0 : nets.front().input_dim(); }
    int size() const { return static_cast<int>(nets.size()); }

    void validate() const {
        for (const auto& n : nets)
            require(n.input_dim() == input_dim(), "bundle members must share input dimension");
    }

    Eigen::VectorXd eval(const Eigen::VectorXd& x) const {
        Eigen::VectorXd out(size());
        for (int i = 0; i < size(); ++i) out[i] = nets[static_cast<std::size_t>(i)].forward(x);
        return out;
    }

    Eigen::VectorXd eval1d(double x) const {
        Eigen::VectorXd v(1);
        v[0] = x;
        return eval(v);
    }
};

/**
 * Entropy bound of the clipped sigmoid class: (L+3) * S * log(M W) + S * log(1/delta).
 * Requires the norm bound M >= 4 and delta > 0.
 */
inline double covering_bound(int L, int W, long long S, double M, double delta) {
    require(M >= 4.0, "covering bound requires norm bound M >= 4");
    require(delta > 0.0, "covering bound requires delta > 0");
    require(L >= 1 && W >= 1 && S >= 0, "invalid class parameters");
    return static_cast<double>(L + 3) * static_cast<double>(S) * std::log(M * W) +
           static_cast<double>(S) * std::log(1.0 / delta);
}

}  // namespace npivlab::nets
