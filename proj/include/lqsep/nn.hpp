#pragma once

// Minimal dense layers with hand-written backward passes. Activations are
// laid out channels x time (one column per time step); gradients accumulate
// into Parameter::grad until the optimizer consumes them.

#include <Eigen/Dense>

#include <functional>
#include <random>
#include <string>
#include <vector>

namespace lqsep::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

struct Parameter {
    Matrix value;
    Matrix grad;

    void resize(Index rows, Index cols) {
        value = Matrix::Zero(rows, cols);
        grad = Matrix::Zero(rows, cols);
    }
    void zero_grad() { grad.setZero(); }
};

using ParameterVisitor = std::function<void(const std::string& name, Parameter& p)>;

/// Unrolls sliding windows: row (c * kernel + j), column t holds
/// x(c, t * stride - pad + j * dilation), zero outside the signal.
Matrix im2col(const Matrix& x, int kernel, int stride, int pad, int dilation, Index t_out);

/// Adjoint of im2col: scatters-adds columns back into `y`.
void col2im_add(const Matrix& cols, Matrix& y, int kernel, int stride, int pad, int dilation);

class Conv1d {
public:
    Conv1d() = default;
    Conv1d(int in_channels, int out_channels, int kernel, int stride = 1, int pad = 0, int dilation = 1);

    void init(std::mt19937_64& rng);
    Index output_length(Index t_in) const;

    /// `cols` receives the unrolled input needed by backward().
    Matrix forward(const Matrix& x, Matrix& cols) const;
    /// Accumulates weight/bias gradients and returns dL/dx.
    Matrix backward(const Matrix& dy, const Matrix& cols, Index t_in);

    void visit(const std::string& prefix, const ParameterVisitor& f);

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }

    Parameter weight;  // out x (in * kernel)
    Parameter bias;    // out x 1

private:
    int in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, pad_ = 0, dilation_ = 1;
};

/// Transposed convolution: the adjoint of a strided Conv1d with the same
/// geometry. With kernel 4, stride 2, pad 1 the length doubles.
class ConvTranspose1d {
public:
    ConvTranspose1d() = default;
    ConvTranspose1d(int in_channels, int out_channels, int kernel, int stride, int pad);

    void init(std::mt19937_64& rng);
    Index output_length(Index t_in) const;

    Matrix forward(const Matrix& x) const;
    Matrix backward(const Matrix& dy, const Matrix& x);

    void visit(const std::string& prefix, const ParameterVisitor& f);

    Parameter weight;  // (out * kernel) x in
    Parameter bias;    // out x 1

private:
    int in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, pad_ = 0;
};

inline Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }
inline Matrix relu_backward(const Matrix& dy, const Matrix& x) {
    return (x.array() > 0.0).select(dy, 0.0);
}

/// x + conv_1x1(relu(conv_k3_dilated(relu(x)))).
class ResidualBlock {
public:
    struct Tape {
        Matrix x, cols1, a1, cols2;
    };

    ResidualBlock() = default;
    ResidualBlock(int channels, int dilation);

    void init(std::mt19937_64& rng);
    Matrix forward(const Matrix& x, Tape& tape) const;
    Matrix backward(const Matrix& dy, const Tape& tape);
    void visit(const std::string& prefix, const ParameterVisitor& f);

private:
    Conv1d conv1_, conv2_;
};

/// Adam with optional global-norm gradient clipping.
class Adam {
public:
    struct Options {
        double learning_rate = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double clip_norm = 0.0;  // 0 disables clipping
    };

    Adam(std::vector<Parameter*> params, Options opt);

    void step();
    void zero_grad();
    double grad_norm() const;
    long steps() const { return t_; }
    void set_learning_rate(double lr) { opt_.learning_rate = lr; }

private:
    std::vector<Parameter*> params_;
    std::vector<Matrix> m_, v_;
    Options opt_;
    long t_ = 0;
};

}  // namespace lqsep::nn
