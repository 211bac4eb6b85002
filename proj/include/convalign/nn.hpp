#pragma once

// Minimal dense building blocks with explicit backward passes. Sequences are
// row-major in the math sense: an n x d matrix holds one token per row.
// Parameters live in a flat ParameterSet addressed by index; every backward
// accumulates into a matching gradient set.

#include <cmath>
#include <numbers>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "convalign/error.hpp"
#include "convalign/rng.hpp"

namespace convalign::nn {

using Matrix = Eigen::MatrixXd;

class ParameterSet {
public:
    std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols) {
        if (index_.count(name)) throw Error(Errc::ShapeMismatch, "duplicate parameter " + name);
        index_.emplace(name, values_.size());
        names_.push_back(std::move(name));
        values_.emplace_back(Matrix::Zero(rows, cols));
        return values_.size() - 1;
    }

    std::size_t size() const noexcept { return values_.size(); }
    Matrix& operator[](std::size_t i) { return values_[i]; }
    const Matrix& operator[](std::size_t i) const { return values_[i]; }
    const std::string& name(std::size_t i) const { return names_[i]; }
    const std::vector<std::string>& names() const noexcept { return names_; }

    std::optional<std::size_t> find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
        return n;
    }

    // Same names and shapes, zero-filled.
    ParameterSet zeros_like() const {
        ParameterSet g = *this;
        for (auto& v : g.values_) v.setZero();
        return g;
    }

    void set_zero() {
        for (auto& v : values_) v.setZero();
    }

    bool all_finite() const {
        for (const auto& v : values_)
            if (!v.allFinite()) return false;
        return true;
    }

private:
    std::vector<std::string> names_;
    std::vector<Matrix> values_;
    std::unordered_map<std::string, std::size_t> index_;
};

inline void init_uniform(Matrix& m, double bound, std::uint64_t seed) {
    Rng rng(seed);
    for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.uniform(-bound, bound);
}

inline void init_normal(Matrix& m, double sd, std::uint64_t seed) {
    Rng rng(seed);
    for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.normal(0.0, sd);
}

// ---------------------------------------------------------------------------

struct Linear {
    std::size_t w = 0, b = 0; // w: in x out, b: 1 x out

    static Linear create(ParameterSet& p, const std::string& name, Eigen::Index in, Eigen::Index out) {
        return {p.add(name + ".w", in, out), p.add(name + ".b", 1, out)};
    }

    Matrix forward(const ParameterSet& p, const Matrix& x) const {
        Matrix y = x * p[w];
        y.rowwise() += p[b].row(0);
        return y;
    }

    Matrix backward(const ParameterSet& p, ParameterSet& g, const Matrix& x, const Matrix& dy) const {
        g[w].noalias() += x.transpose() * dy;
        g[b] += dy.colwise().sum();
        return dy * p[w].transpose();
    }
};

struct LayerNorm {
    std::size_t gamma = 0, beta = 0;
    static constexpr double eps = 1e-5;

    struct Cache {
        Matrix xhat;
        Eigen::VectorXd inv_std;
    };

    static LayerNorm create(ParameterSet& p, const std::string& name, Eigen::Index d) {
        return {p.add(name + ".gamma", 1, d), p.add(name + ".beta", 1, d)};
    }

    Matrix forward(const ParameterSet& p, const Matrix& x, Cache& c) const {
        const auto d = static_cast<double>(x.cols());
        c.xhat.resize(x.rows(), x.cols());
        c.inv_std.resize(x.rows());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const double mu = x.row(r).sum() / d;
            const double var = (x.row(r).array() - mu).square().sum() / d;
            c.inv_std(r) = 1.0 / std::sqrt(var + eps);
            c.xhat.row(r) = (x.row(r).array() - mu) * c.inv_std(r);
        }
        Matrix y = c.xhat.array().rowwise() * p[gamma].row(0).array();
        y.rowwise() += p[beta].row(0);
        return y;
    }

    Matrix backward(const ParameterSet& p, ParameterSet& g, const Cache& c, const Matrix& dy) const {
        g[gamma] += (dy.array() * c.xhat.array()).colwise().sum().matrix();
        g[beta] += dy.colwise().sum();
        const Matrix dxhat = dy.array().rowwise() * p[gamma].row(0).array();
        const auto d = static_cast<double>(dy.cols());
        Matrix dx(dy.rows(), dy.cols());
        for (Eigen::Index r = 0; r < dy.rows(); ++r) {
            const double m1 = dxhat.row(r).sum() / d;
            const double m2 = dxhat.row(r).dot(c.xhat.row(r)) / d;
            dx.row(r) = c.inv_std(r) * (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2);
        }
        return dx;
    }
};

// Exact GELU, x * Phi(x).
inline Matrix gelu(const Matrix& x) {
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); });
}

inline Matrix gelu_backward(const Matrix& x, const Matrix& dy) {
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    const Matrix deriv = x.unaryExpr([&](double v) {
        return 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
    });
    return dy.cwiseProduct(deriv);
}

inline void softmax_rows_inplace(Matrix& s) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
    }
}

// Gradient of row-wise softmax: dS = P o (dP - rowsum(dP o P)).
inline Matrix softmax_rows_backward(const Matrix& probs, const Matrix& dprobs) {
    Matrix ds = probs.cwiseProduct(dprobs);
    const Eigen::VectorXd dots = ds.rowwise().sum();
    ds -= probs.cwiseProduct(dots.replicate(1, probs.cols()));
    return ds;
}

// Scaled dot-product attention over `heads` slices of already-projected
// queries, keys and values.
struct AttentionCache {
    std::vector<Matrix> probs;
};

inline Matrix attend(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads, AttentionCache& c) {
    const auto d = q.cols();
    const auto dh = d / static_cast<Eigen::Index>(heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix out(q.rows(), v.cols());
    c.probs.resize(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * dh;
        Matrix s = scale * (q.middleCols(off, dh) * k.middleCols(off, dh).transpose());
        softmax_rows_inplace(s);
        out.middleCols(off, dh).noalias() = s * v.middleCols(off, dh);
        c.probs[h] = std::move(s);
    }
    return out;
}

inline void attend_backward(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads,
                            const AttentionCache& c, const Matrix& dout, Matrix& dq, Matrix& dk, Matrix& dv) {
    const auto d = q.cols();
    const auto dh = d / static_cast<Eigen::Index>(heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    dq = Matrix::Zero(q.rows(), q.cols());
    dk = Matrix::Zero(k.rows(), k.cols());
    dv = Matrix::Zero(v.rows(), v.cols());
    for (std::size_t h = 0; h < heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * dh;
        const Matrix& pr = c.probs[h];
        const auto dout_h = dout.middleCols(off, dh);
        dv.middleCols(off, dh).noalias() = pr.transpose() * dout_h;
        const Matrix dprobs = dout_h * v.middleCols(off, dh).transpose();
        const Matrix ds = scale * softmax_rows_backward(pr, dprobs);
        dq.middleCols(off, dh).noalias() = ds * k.middleCols(off, dh);
        dk.middleCols(off, dh).noalias() = ds.transpose() * q.middleCols(off, dh);
    }
}

// ---------------------------------------------------------------------------

// Single-layer LSTM, zero initial state. Gate order in the 4h columns: i, f, g, o.
struct Lstm {
    std::size_t wx = 0, wh = 0, b = 0;
    Eigen::Index hidden = 0;

    struct Cache {
        Matrix x;
        Matrix gates; // n x 4h, post-activation
        Matrix c;     // n x h
        Matrix tanh_c;
        Matrix h;
    };

    static Lstm create(ParameterSet& p, const std::string& name, Eigen::Index in, Eigen::Index hidden) {
        return {p.add(name + ".wx", in, 4 * hidden), p.add(name + ".wh", hidden, 4 * hidden),
                p.add(name + ".b", 1, 4 * hidden), hidden};
    }

    static double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

    // Returns all hidden states (n x h).
    Matrix forward(const ParameterSet& p, const Matrix& x, Cache& c) const {
        const auto n = x.rows();
        const auto H = hidden;
        c.x = x;
        Matrix z = x * p[wx];
        z.rowwise() += p[b].row(0);
        c.gates.resize(n, 4 * H);
        c.c.resize(n, H);
        c.tanh_c.resize(n, H);
        c.h.resize(n, H);
        Eigen::RowVectorXd h_prev = Eigen::RowVectorXd::Zero(H), c_prev = Eigen::RowVectorXd::Zero(H);
        for (Eigen::Index t = 0; t < n; ++t) {
            Eigen::RowVectorXd zt = z.row(t);
            zt.noalias() += h_prev * p[wh];
            for (Eigen::Index j = 0; j < H; ++j) {
                zt(j) = sigmoid(zt(j));
                zt(H + j) = sigmoid(zt(H + j));
                zt(2 * H + j) = std::tanh(zt(2 * H + j));
                zt(3 * H + j) = sigmoid(zt(3 * H + j));
            }
            c.gates.row(t) = zt;
            const auto i = zt.segment(0, H).array(), f = zt.segment(H, H).array(), g = zt.segment(2 * H, H).array(),
                       o = zt.segment(3 * H, H).array();
            c_prev = (f * c_prev.array() + i * g).matrix();
            c.c.row(t) = c_prev;
            c.tanh_c.row(t) = c_prev.array().tanh().matrix();
            h_prev = (o * c.tanh_c.row(t).array()).matrix();
            c.h.row(t) = h_prev;
        }
        return c.h;
    }

    // dh: gradient w.r.t. every hidden state (n x h). Returns dx.
    Matrix backward(const ParameterSet& p, ParameterSet& g, const Cache& c, const Matrix& dh) const {
        const auto n = c.x.rows();
        const auto H = hidden;
        Matrix dz(n, 4 * H);
        Eigen::RowVectorXd dh_next = Eigen::RowVectorXd::Zero(H), dc_next = Eigen::RowVectorXd::Zero(H);
        for (Eigen::Index t = n - 1; t >= 0; --t) {
            const auto gt = c.gates.row(t);
            const Eigen::ArrayXd i = gt.segment(0, H).transpose().array(), f = gt.segment(H, H).transpose().array(),
                                 gg = gt.segment(2 * H, H).transpose().array(),
                                 o = gt.segment(3 * H, H).transpose().array();
            const Eigen::ArrayXd tc = c.tanh_c.row(t).transpose().array();
            const Eigen::ArrayXd c_prev =
                t > 0 ? Eigen::ArrayXd(c.c.row(t - 1).transpose().array()) : Eigen::ArrayXd::Zero(H);
            const Eigen::ArrayXd dht = (dh.row(t) + dh_next).transpose().array();
            const Eigen::ArrayXd dc = dc_next.transpose().array() + dht * o * (1.0 - tc * tc);
            dz.row(t).segment(0, H) = (dc * gg * i * (1.0 - i)).matrix().transpose();
            dz.row(t).segment(H, H) = (dc * c_prev * f * (1.0 - f)).matrix().transpose();
            dz.row(t).segment(2 * H, H) = (dc * i * (1.0 - gg * gg)).matrix().transpose();
            dz.row(t).segment(3 * H, H) = (dht * tc * o * (1.0 - o)).matrix().transpose();
            dc_next = (dc * f).matrix().transpose();
            dh_next.noalias() = dz.row(t) * p[wh].transpose();
            if (t > 0) g[wh].noalias() += c.h.row(t - 1).transpose() * dz.row(t);
        }
        g[wx].noalias() += c.x.transpose() * dz;
        g[b] += dz.colwise().sum();
        return dz * p[wx].transpose();
    }
};

// Inverted dropout mask (scaled by 1/(1-rate)); empty when inactive.
inline Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng* rng) {
    if (rate <= 0.0 || rng == nullptr) return {};
    Matrix m(rows, cols);
    const double keep = 1.0 / (1.0 - rate);
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng->uniform01() < rate ? 0.0 : keep;
    return m;
}

inline Matrix apply_mask(const Matrix& x, const Matrix& mask) {
    return mask.size() == 0 ? x : Matrix(x.cwiseProduct(mask));
}

// Sinusoidal position table, max_len x d.
inline Matrix sinusoidal_positions(Eigen::Index max_len, Eigen::Index d) {
    Matrix pe(max_len, d);
    for (Eigen::Index pos = 0; pos < max_len; ++pos) {
        for (Eigen::Index i = 0; i < d; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            pe(pos, i) = (i % 2 == 0) ? std::sin(static_cast<double>(pos) * rate) : std::cos(static_cast<double>(pos) * rate);
        }
    }
    return pe;
}

} // namespace convalign::nn
