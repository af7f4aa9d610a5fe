#include "lqsep/nn.hpp"

#include <cmath>

namespace lqsep::nn {

Matrix im2col(const Matrix& x, int kernel, int stride, int pad, int dilation, Index t_out) {
    const Index channels = x.rows();
    const Index t_in = x.cols();
    Matrix cols = Matrix::Zero(channels * kernel, t_out);
    for (Index t = 0; t < t_out; ++t) {
        for (int j = 0; j < kernel; ++j) {
            const Index src = t * stride - pad + static_cast<Index>(j) * dilation;
            if (src < 0 || src >= t_in) continue;
            for (Index c = 0; c < channels; ++c) cols(c * kernel + j, t) = x(c, src);
        }
    }
    return cols;
}

void col2im_add(const Matrix& cols, Matrix& y, int kernel, int stride, int pad, int dilation) {
    const Index channels = y.rows();
    const Index t_len = y.cols();
    for (Index t = 0; t < cols.cols(); ++t) {
        for (int j = 0; j < kernel; ++j) {
            const Index dst = t * stride - pad + static_cast<Index>(j) * dilation;
            if (dst < 0 || dst >= t_len) continue;
            for (Index c = 0; c < channels; ++c) y(c, dst) += cols(c * kernel + j, t);
        }
    }
}

namespace {

void uniform_init(Matrix& m, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
}

}  // namespace

Conv1d::Conv1d(int in_channels, int out_channels, int kernel, int stride, int pad, int dilation)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(pad), dilation_(dilation) {
    weight.resize(out_, in_ * kernel_);
    bias.resize(out_, 1);
}

void Conv1d::init(std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ * kernel_));
    uniform_init(weight.value, bound, rng);
    uniform_init(bias.value, bound, rng);
}

Index Conv1d::output_length(Index t_in) const {
    return (t_in + 2 * pad_ - dilation_ * (kernel_ - 1) - 1) / stride_ + 1;
}

Matrix Conv1d::forward(const Matrix& x, Matrix& cols) const {
    cols = im2col(x, kernel_, stride_, pad_, dilation_, output_length(x.cols()));
    Matrix y = weight.value * cols;
    y.colwise() += bias.value.col(0);
    return y;
}

Matrix Conv1d::backward(const Matrix& dy, const Matrix& cols, Index t_in) {
    weight.grad.noalias() += dy * cols.transpose();
    bias.grad.col(0) += dy.rowwise().sum();
    const Matrix dcols = weight.value.transpose() * dy;
    Matrix dx = Matrix::Zero(in_, t_in);
    col2im_add(dcols, dx, kernel_, stride_, pad_, dilation_);
    return dx;
}

void Conv1d::visit(const std::string& prefix, const ParameterVisitor& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
}

ConvTranspose1d::ConvTranspose1d(int in_channels, int out_channels, int kernel, int stride, int pad)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(pad) {
    weight.resize(out_ * kernel_, in_);
    bias.resize(out_, 1);
}

void ConvTranspose1d::init(std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ * kernel_ / stride_));
    uniform_init(weight.value, bound, rng);
    uniform_init(bias.value, bound, rng);
}

Index ConvTranspose1d::output_length(Index t_in) const { return (t_in - 1) * stride_ - 2 * pad_ + kernel_; }

Matrix ConvTranspose1d::forward(const Matrix& x) const {
    const Matrix cols = weight.value * x;
    Matrix y = Matrix::Zero(out_, output_length(x.cols()));
    col2im_add(cols, y, kernel_, stride_, pad_, 1);
    y.colwise() += bias.value.col(0);
    return y;
}

Matrix ConvTranspose1d::backward(const Matrix& dy, const Matrix& x) {
    const Matrix dcols = im2col(dy, kernel_, stride_, pad_, 1, x.cols());
    weight.grad.noalias() += dcols * x.transpose();
    bias.grad.col(0) += dy.rowwise().sum();
    return weight.value.transpose() * dcols;
}

void ConvTranspose1d::visit(const std::string& prefix, const ParameterVisitor& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
}

ResidualBlock::ResidualBlock(int channels, int dilation)
    : conv1_(channels, channels, 3, 1, dilation, dilation), conv2_(channels, channels, 1) {}

void ResidualBlock::init(std::mt19937_64& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    // Start close to the identity map.
    conv2_.weight.value *= 0.1;
    conv2_.bias.value.setZero();
}

Matrix ResidualBlock::forward(const Matrix& x, Tape& tape) const {
    tape.x = x;
    tape.a1 = conv1_.forward(relu(x), tape.cols1);
    return x + conv2_.forward(relu(tape.a1), tape.cols2);
}

Matrix ResidualBlock::backward(const Matrix& dy, const Tape& tape) {
    const Matrix da1 = relu_backward(conv2_.backward(dy, tape.cols2, tape.a1.cols()), tape.a1);
    const Matrix dx_inner = relu_backward(conv1_.backward(da1, tape.cols1, tape.x.cols()), tape.x);
    return dy + dx_inner;
}

void ResidualBlock::visit(const std::string& prefix, const ParameterVisitor& f) {
    conv1_.visit(prefix + ".conv1", f);
    conv2_.visit(prefix + ".conv2", f);
}

Adam::Adam(std::vector<Parameter*> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (const Parameter* p : params_) {
        m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
}

double Adam::grad_norm() const {
    double sq = 0.0;
    for (const Parameter* p : params_) sq += p->grad.squaredNorm();
    return std::sqrt(sq);
}

void Adam::step() {
    ++t_;
    double scale = 1.0;
    if (opt_.clip_norm > 0.0) {
        const double norm = grad_norm();
        if (norm > opt_.clip_norm) scale = opt_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = *params_[i];
        const Matrix g = p.grad * scale;
        m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
        v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
        p.value.array() -= opt_.learning_rate * (m_[i].array() / bc1) /
                           ((v_[i].array() / bc2).sqrt() + opt_.eps);
    }
}

void Adam::zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
}

}  // namespace lqsep::nn
