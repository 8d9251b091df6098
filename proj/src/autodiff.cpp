#include "capscl/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace capscl::ad {

namespace {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

ConstMatMap view(const Tensor& t) {
    return ConstMatMap(t.data().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
}

MatMap view(Tensor& t) {
    return MatMap(t.data().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
}

MatMap grad_view(const Tensor& t) {
    return MatMap(t.grad().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
}

void require(bool ok, const std::string& message) {
    if (!ok) throw DimensionError(message);
}

void require_matrix(const Tensor& t, const char* op) {
    require(t.rank() == 2, std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                        shape_string(a.shape()) + " vs " +
                                        shape_string(b.shape()));
}

/// Creates the output tensor; it tracks gradients iff the tape wants them.
Tensor make_output(const Tape& tape, Shape shape, std::initializer_list<const Tensor*> inputs) {
    return Tensor::zeros(std::move(shape), tape.wants(inputs));
}

Tensor finish(Tape& tape, Tensor out, const char* op, std::function<void()> rule) {
    check_finite(out, op);
    if (out.requires_grad()) tape.record(out, std::move(rule));
    return out;
}

}  // namespace

bool Tape::wants(std::initializer_list<const Tensor*> inputs) const {
    if (!recording_) return false;
    for (const Tensor* t : inputs) {
        if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
}

void Tape::record(Tensor output, std::function<void()> rule) {
    if (consumed_) throw std::logic_error("tape: cannot record after backward()");
    entries_.push_back(Entry{std::move(output), std::move(rule)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw DimensionError("backward: loss must be a scalar, got " + shape_string(loss.shape()));
    }
    if (consumed_) throw std::logic_error("tape: backward() already ran");
    consumed_ = true;
    if (!loss.requires_grad()) return;
    Tensor seed = loss;
    seed.grad()[0] += Scalar(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->output.has_grad()) it->rule();
    }
    entries_.clear();
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = make_output(tape, a.shape(), {&a, &b});
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
    return finish(tape, out, "add", [a, b, out]() mutable {
        auto g = out.grad();
        if (a.requires_grad()) {
            auto ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto gb = b.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = make_output(tape, a.shape(), {&a, &b});
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
    return finish(tape, out, "sub", [a, b, out]() mutable {
        auto g = out.grad();
        if (a.requires_grad()) {
            auto ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto gb = b.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = make_output(tape, a.shape(), {&a, &b});
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
    return finish(tape, out, "mul", [a, b, out]() mutable {
        auto g = out.grad();
        auto x = a.data();
        auto y = b.data();
        if (a.requires_grad()) {
            auto ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
        }
        if (b.requires_grad()) {
            auto gb = b.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
        }
    });
}

Tensor scale(Tape& tape, const Tensor& a, Scalar factor) {
    Tensor out = make_output(tape, a.shape(), {&a});
    auto o = out.data();
    auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
    return finish(tape, out, "scale", [a, out, factor]() mutable {
        auto g = out.grad();
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
}

Tensor add_row(Tape& tape, const Tensor& x, const Tensor& bias) {
    require_matrix(x, "add_row");
    require(bias.numel() == x.cols(), "add_row: bias of " + shape_string(bias.shape()) +
                                          " does not match " + shape_string(x.shape()));
    Tensor out = make_output(tape, x.shape(), {&x, &bias});
    view(out) = view(x).rowwise() +
                ConstMatMap(bias.data().data(), 1, Eigen::Index(bias.numel())).row(0);
    return finish(tape, out, "add_row", [x, bias, out]() mutable {
        auto g = grad_view(out);
        if (x.requires_grad()) grad_view(x) += g;
        if (bias.requires_grad()) {
            MatMap(bias.grad().data(), 1, Eigen::Index(bias.numel())) += g.colwise().sum();
        }
    });
}

Tensor mul_row(Tape& tape, const Tensor& x, const Tensor& gate) {
    require_matrix(x, "mul_row");
    require(gate.numel() == x.cols(), "mul_row: gate of " + shape_string(gate.shape()) +
                                          " does not match " + shape_string(x.shape()));
    Tensor out = make_output(tape, x.shape(), {&x, &gate});
    const std::size_t n = x.rows(), c = x.cols();
    auto xv = x.data();
    auto gv = gate.data();
    auto o = out.data();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) o[r * c + j] = xv[r * c + j] * gv[j];
    return finish(tape, out, "mul_row", [x, gate, out, n, c]() mutable {
        auto g = out.grad();
        auto xv = x.data();
        auto gv = gate.data();
        if (x.requires_grad()) {
            auto gx = x.grad();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r * c + j] * gv[j];
        }
        if (gate.requires_grad()) {
            auto gg = gate.grad();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < c; ++j) gg[j] += g[r * c + j] * xv[r * c + j];
        }
    });
}

Tensor add_segment(Tape& tape, const Tensor& x, std::size_t segment, const Tensor& y) {
    require_matrix(x, "add_segment");
    require(segment > 0 && x.rows() % segment == 0, "add_segment: rows not divisible by segment");
    const std::size_t batch = x.rows() / segment, c = x.cols();
    require(y.rows() == batch && y.cols() == c,
            "add_segment: addend " + shape_string(y.shape()) + " does not match " +
                shape_string(x.shape()) + " with segment " + std::to_string(segment));
    Tensor out = make_output(tape, x.shape(), {&x, &y});
    auto xv = x.data();
    auto yv = y.data();
    auto o = out.data();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const std::size_t b = r / segment;
        for (std::size_t j = 0; j < c; ++j) o[r * c + j] = xv[r * c + j] + yv[b * c + j];
    }
    return finish(tape, out, "add_segment", [x, y, out, segment, c]() mutable {
        auto g = out.grad();
        if (x.requires_grad()) {
            auto gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (y.requires_grad()) {
            auto gy = y.grad();
            for (std::size_t r = 0; r < x.rows(); ++r) {
                const std::size_t b = r / segment;
                for (std::size_t j = 0; j < c; ++j) gy[b * c + j] += g[r * c + j];
            }
        }
    });
}

Tensor mul_segment(Tape& tape, const Tensor& x, std::size_t segment, const Tensor& y) {
    require_matrix(x, "mul_segment");
    require(segment > 0 && x.rows() % segment == 0, "mul_segment: rows not divisible by segment");
    const std::size_t batch = x.rows() / segment, c = x.cols();
    const std::size_t yc = y.cols();
    require(y.rows() == batch && (yc == c || yc == 1),
            "mul_segment: factor " + shape_string(y.shape()) + " does not match " +
                shape_string(x.shape()) + " with segment " + std::to_string(segment));
    Tensor out = make_output(tape, x.shape(), {&x, &y});
    auto xv = x.data();
    auto yv = y.data();
    auto o = out.data();
    auto factor = [yc](std::size_t b, std::size_t j) { return b * yc + (yc == 1 ? 0 : j); };
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const std::size_t b = r / segment;
        for (std::size_t j = 0; j < c; ++j) o[r * c + j] = xv[r * c + j] * yv[factor(b, j)];
    }
    return finish(tape, out, "mul_segment", [x, y, out, segment, c, factor]() mutable {
        auto g = out.grad();
        auto xv = x.data();
        auto yv = y.data();
        if (x.requires_grad()) {
            auto gx = x.grad();
            for (std::size_t r = 0; r < x.rows(); ++r) {
                const std::size_t b = r / segment;
                for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r * c + j] * yv[factor(b, j)];
            }
        }
        if (y.requires_grad()) {
            auto gy = y.grad();
            for (std::size_t r = 0; r < x.rows(); ++r) {
                const std::size_t b = r / segment;
                for (std::size_t j = 0; j < c; ++j) gy[factor(b, j)] += g[r * c + j] * xv[r * c + j];
            }
        }
    });
}

Tensor relu(Tape& tape, const Tensor& x) {
    Tensor out = make_output(tape, x.shape(), {&x});
    auto xv = x.data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > 0 ? xv[i] : Scalar(0);
    return finish(tape, out, "relu", [x, out]() mutable {
        auto g = out.grad();
        auto xv = x.data();
        auto gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] > 0) gx[i] += g[i];
    });
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
    Tensor out = make_output(tape, x.shape(), {&x});
    auto xv = x.data();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const Scalar v = xv[i];
        if (v >= 0) {
            o[i] = Scalar(1) / (Scalar(1) + std::exp(-v));
        } else {
            const Scalar e = std::exp(v);
            o[i] = e / (Scalar(1) + e);
        }
    }
    return finish(tape, out, "sigmoid", [x, out]() mutable {
        auto g = out.grad();
        auto y = out.data();
        auto gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (Scalar(1) - y[i]);
    });
}

Tensor softmax_rows(Tape& tape, const Tensor& x) {
    require_matrix(x, "softmax_rows");
    Tensor out = make_output(tape, x.shape(), {&x});
    const std::size_t n = x.rows(), c = x.cols();
    auto xv = x.data();
    auto o = out.data();
    for (std::size_t r = 0; r < n; ++r) {
        const Scalar* row = xv.data() + r * c;
        Scalar* dst = o.data() + r * c;
        const Scalar mx = *std::max_element(row, row + c);
        Scalar z = 0;
        for (std::size_t j = 0; j < c; ++j) z += (dst[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < c; ++j) dst[j] /= z;
    }
    return finish(tape, out, "softmax_rows", [x, out, n, c]() mutable {
        auto g = out.grad();
        auto y = out.data();
        auto gx = x.grad();
        for (std::size_t r = 0; r < n; ++r) {
            Scalar dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
            for (std::size_t j = 0; j < c; ++j)
                gx[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
        }
    });
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps) {
    require_matrix(x, "layer_norm");
    const std::size_t n = x.rows(), c = x.cols();
    require(gain.numel() == c && bias.numel() == c, "layer_norm: gain/bias width mismatch");
    Tensor out = make_output(tape, x.shape(), {&x, &gain, &bias});
    std::vector<Scalar> xhat(n * c), rstd(n);
    auto xv = x.data();
    auto gv = gain.data();
    auto bv = bias.data();
    auto o = out.data();
    for (std::size_t r = 0; r < n; ++r) {
        const Scalar* row = xv.data() + r * c;
        Scalar mu = 0;
        for (std::size_t j = 0; j < c; ++j) mu += row[j];
        mu /= Scalar(c);
        Scalar var = 0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= Scalar(c);
        rstd[r] = Scalar(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[r * c + j] = (row[j] - mu) * rstd[r];
            o[r * c + j] = xhat[r * c + j] * gv[j] + bv[j];
        }
    }
    return finish(tape, out, "layer_norm",
                  [x, gain, bias, out, n, c, xhat = std::move(xhat), rstd = std::move(rstd)]() mutable {
                      auto g = out.grad();
                      auto gv = gain.data();
                      if (gain.requires_grad()) {
                          auto gg = gain.grad();
                          for (std::size_t r = 0; r < n; ++r)
                              for (std::size_t j = 0; j < c; ++j) gg[j] += g[r * c + j] * xhat[r * c + j];
                      }
                      if (bias.requires_grad()) {
                          auto gb = bias.grad();
                          for (std::size_t r = 0; r < n; ++r)
                              for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
                      }
                      if (x.requires_grad()) {
                          auto gx = x.grad();
                          for (std::size_t r = 0; r < n; ++r) {
                              Scalar mean_d = 0, mean_dx = 0;
                              for (std::size_t j = 0; j < c; ++j) {
                                  const Scalar d = g[r * c + j] * gv[j];
                                  mean_d += d;
                                  mean_dx += d * xhat[r * c + j];
                              }
                              mean_d /= Scalar(c);
                              mean_dx /= Scalar(c);
                              for (std::size_t j = 0; j < c; ++j) {
                                  const Scalar d = g[r * c + j] * gv[j];
                                  gx[r * c + j] += rstd[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
                              }
                          }
                      }
                  });
}

Tensor dropout(Tape& tape, const Tensor& x, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
    if (!training || rate == 0.0) return x;
    Tensor out = make_output(tape, x.shape(), {&x});
    const Scalar keep_scale = Scalar(1.0 / (1.0 - rate));
    std::vector<Scalar> mask(x.numel());
    auto xv = x.data();
    auto o = out.data();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = rng.uniform() < rate ? Scalar(0) : keep_scale;
        o[i] = xv[i] * mask[i];
    }
    return finish(tape, out, "dropout", [x, out, mask = std::move(mask)]() mutable {
        auto g = out.grad();
        auto gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    require(a.cols() == b.rows(), "matmul: inner dimensions differ " + shape_string(a.shape()) +
                                      " * " + shape_string(b.shape()));
    Tensor out = make_output(tape, {a.rows(), b.cols()}, {&a, &b});
    view(out).noalias() = view(a) * view(b);
    return finish(tape, out, "matmul", [a, b, out]() mutable {
        auto g = grad_view(out);
        if (a.requires_grad()) grad_view(a).noalias() += g * view(b).transpose();
        if (b.requires_grad()) grad_view(b).noalias() += view(a).transpose() * g;
    });
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require(b.rank() >= 2, "matmul_nt: expected a matrix, got " + shape_string(b.shape()));
    require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ " + shape_string(a.shape()) +
                                      " * " + shape_string(b.shape()) + "^T");
    Tensor out = make_output(tape, {a.rows(), b.rows()}, {&a, &b});
    view(out).noalias() = view(a) * view(b).transpose();
    return finish(tape, out, "matmul_nt", [a, b, out]() mutable {
        auto g = grad_view(out);
        if (a.requires_grad()) grad_view(a).noalias() += g * view(b);
        if (b.requires_grad()) grad_view(b).noalias() += g.transpose() * view(a);
    });
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
    Tensor y = matmul_nt(tape, x, weight);
    return bias.defined() ? add_row(tape, y, bias) : y;
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids) {
    require_matrix(table, "embedding");
    const std::size_t vocab = table.rows(), d = table.cols();
    for (auto id : ids) {
        if (id < 0 || std::size_t(id) >= vocab) {
            throw std::out_of_range("embedding: token id " + std::to_string(id) +
                                    " outside vocabulary of " + std::to_string(vocab));
        }
    }
    Tensor out = make_output(tape, {ids.size(), d}, {&table});
    auto tv = table.data();
    auto o = out.data();
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy_n(tv.data() + std::size_t(ids[r]) * d, d, o.data() + r * d);
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    return finish(tape, out, "embedding", [table, out, d, idv = std::move(idv)]() mutable {
        auto g = out.grad();
        auto gt = table.grad();
        for (std::size_t r = 0; r < idv.size(); ++r)
            for (std::size_t j = 0; j < d; ++j) gt[std::size_t(idv[r]) * d + j] += g[r * d + j];
    });
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
    require_matrix(logits, "cross_entropy");
    const std::size_t n = logits.rows(), c = logits.cols();
    require(labels.size() == n, "cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(n) + " rows");
    require(n > 0, "cross_entropy: empty batch");
    for (int y : labels) {
        if (y < 0 || std::size_t(y) >= c) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                    std::to_string(c) + ")");
        }
    }
    Tensor out = make_output(tape, {}, {&logits});
    std::vector<Scalar> prob(n * c);
    auto lv = logits.data();
    Scalar total = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const Scalar* row = lv.data() + r * c;
        const Scalar mx = *std::max_element(row, row + c);
        Scalar z = 0;
        for (std::size_t j = 0; j < c; ++j) z += (prob[r * c + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < c; ++j) prob[r * c + j] /= z;
        total += -(row[labels[r]] - mx - std::log(z));
    }
    out.data()[0] = total / Scalar(n);
    std::vector<int> lab(labels.begin(), labels.end());
    return finish(tape, out, "cross_entropy",
                  [logits, out, n, c, prob = std::move(prob), lab = std::move(lab)]() mutable {
                      const Scalar g = out.grad()[0] / Scalar(n);
                      auto gl = logits.grad();
                      for (std::size_t r = 0; r < n; ++r)
                          for (std::size_t j = 0; j < c; ++j)
                              gl[r * c + j] +=
                                  g * (prob[r * c + j] - (int(j) == lab[r] ? Scalar(1) : Scalar(0)));
                  });
}

Tensor sum(Tape& tape, const Tensor& x) {
    Tensor out = make_output(tape, {}, {&x});
    Scalar s = 0;
    for (Scalar v : x.data()) s += v;
    out.data()[0] = s;
    return finish(tape, out, "sum", [x, out]() mutable {
        const Scalar g = out.grad()[0];
        for (auto& gx : x.grad()) gx += g;
    });
}

Tensor mean(Tape& tape, const Tensor& x) {
    require(x.numel() > 0, "mean: empty tensor");
    return scale(tape, sum(tape, x), Scalar(1) / Scalar(x.numel()));
}

Tensor row_mean(Tape& tape, const Tensor& x) {
    require_matrix(x, "row_mean");
    const std::size_t n = x.rows(), c = x.cols();
    require(c > 0, "row_mean: no columns");
    Tensor out = make_output(tape, {n, 1}, {&x});
    view(out) = view(x).rowwise().mean();
    return finish(tape, out, "row_mean", [x, out, c]() mutable {
        grad_view(x).colwise() += grad_view(out).col(0) / Scalar(c);
    });
}

Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    const std::size_t n = parts.front().rows();
    std::size_t total = 0;
    bool wants = false;
    for (const auto& p : parts) {
        require_matrix(p, "concat_cols");
        require(p.rows() == n, "concat_cols: row count mismatch");
        total += p.cols();
        wants = wants || tape.wants({&p});
    }
    Tensor out = Tensor::zeros({n, total}, wants);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        view(out).middleCols(Eigen::Index(offset), Eigen::Index(p.cols())) = view(p);
        offset += p.cols();
    }
    return finish(tape, out, "concat_cols", [parts, out]() mutable {
        auto g = grad_view(out);
        std::size_t offset = 0;
        for (auto& p : parts) {
            if (p.requires_grad())
                grad_view(p) += g.middleCols(Eigen::Index(offset), Eigen::Index(p.cols()));
            offset += p.cols();
        }
    });
}

Tensor select_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> rows) {
    require_matrix(x, "select_rows");
    const std::size_t c = x.cols();
    for (auto r : rows) require(r < x.rows(), "select_rows: row index out of range");
    Tensor out = make_output(tape, {rows.size(), c}, {&x});
    auto xv = x.data();
    auto o = out.data();
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(xv.data() + rows[i] * c, c, o.data() + i * c);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return finish(tape, out, "select_rows", [x, out, c, idx = std::move(idx)]() mutable {
        auto g = out.grad();
        auto gx = x.grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) gx[idx[i] * c + j] += g[i * c + j];
    });
}

Tensor column(Tape& tape, const Tensor& x, std::size_t col) {
    require_matrix(x, "column");
    require(col < x.cols(), "column: index out of range");
    Tensor out = make_output(tape, {x.rows(), 1}, {&x});
    view(out) = view(x).col(Eigen::Index(col));
    return finish(tape, out, "column", [x, out, col]() mutable {
        grad_view(x).col(Eigen::Index(col)) += grad_view(out).col(0);
    });
}

Tensor stop_gradient(const Tensor& x) {
    Tensor out = x.clone();
    out.set_requires_grad(false);
    return out;
}

Tensor conv1d(Tape& tape, const Tensor& input, std::size_t tokens, const Tensor& filters,
              const Tensor& bias) {
    require_matrix(input, "conv1d");
    require(filters.rank() == 3, "conv1d: filters must be [n_w x window x channels], got " +
                                     shape_string(filters.shape()));
    const std::size_t n_w = filters.shape()[0], window = filters.shape()[1],
                      channels = filters.shape()[2];
    require(channels == input.cols(), "conv1d: filter channels " + std::to_string(channels) +
                                          " != input channels " + std::to_string(input.cols()));
    require(tokens > 0 && input.rows() % tokens == 0, "conv1d: rows not divisible by token count");
    require(window >= 1 && window <= tokens, "conv1d: window " + std::to_string(window) +
                                                 " larger than token count " + std::to_string(tokens));
    require(bias.numel() == n_w, "conv1d: bias length must equal filter count");
    const std::size_t batch = input.rows() / tokens;
    const std::size_t out_tokens = tokens - window + 1;
    const std::size_t width = window * channels;

    // Each window slice is contiguous in row-major storage.
    RowMat cols(Eigen::Index(batch * out_tokens), Eigen::Index(width));
    auto xv = input.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < out_tokens; ++t)
            std::copy_n(xv.data() + (b * tokens + t) * channels, width,
                        cols.data() + (b * out_tokens + t) * width);

    Tensor out = make_output(tape, {batch * out_tokens, n_w}, {&input, &filters, &bias});
    ConstMatMap f(filters.data().data(), Eigen::Index(n_w), Eigen::Index(width));
    view(out).noalias() = cols * f.transpose();
    view(out).rowwise() += ConstMatMap(bias.data().data(), 1, Eigen::Index(n_w)).row(0);
    return finish(tape, out, "conv1d",
                  [input, filters, bias, out, cols = std::move(cols), batch, tokens, out_tokens,
                   width, channels, n_w]() mutable {
                      auto g = grad_view(out);
                      if (filters.requires_grad()) {
                          MatMap(filters.grad().data(), Eigen::Index(n_w), Eigen::Index(width))
                              .noalias() += g.transpose() * cols;
                      }
                      if (bias.requires_grad()) {
                          MatMap(bias.grad().data(), 1, Eigen::Index(n_w)) += g.colwise().sum();
                      }
                      if (input.requires_grad()) {
                          ConstMatMap f(filters.data().data(), Eigen::Index(n_w), Eigen::Index(width));
                          RowMat dcols = g * f;
                          auto gx = input.grad();
                          for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t t = 0; t < out_tokens; ++t) {
                                  const Scalar* src = dcols.data() + (b * out_tokens + t) * width;
                                  Scalar* dst = gx.data() + (b * tokens + t) * channels;
                                  for (std::size_t k = 0; k < width; ++k) dst[k] += src[k];
                              }
                      }
                  });
}

Tensor maxpool_over_time(Tape& tape, const Tensor& input, std::size_t tokens) {
    require_matrix(input, "maxpool_over_time");
    require(tokens > 0, "maxpool_over_time: empty token dimension");
    require(input.rows() > 0 && input.rows() % tokens == 0,
            "maxpool_over_time: rows not divisible by token count");
    const std::size_t batch = input.rows() / tokens, c = input.cols();
    Tensor out = make_output(tape, {batch, c}, {&input});
    std::vector<std::size_t> argmax(batch * c);
    auto xv = input.data();
    auto o = out.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < c; ++j) {
            std::size_t best = b * tokens;
            for (std::size_t t = 1; t < tokens; ++t) {
                const std::size_t r = b * tokens + t;
                if (xv[r * c + j] > xv[best * c + j]) best = r;
            }
            argmax[b * c + j] = best;
            o[b * c + j] = xv[best * c + j];
        }
    return finish(tape, out, "maxpool_over_time", [input, out, c, argmax = std::move(argmax)]() mutable {
        auto g = out.grad();
        auto gx = input.grad();
        for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i] * c + i % c] += g[i];
    });
}

GumbelSample gumbel_softmax(Tape& tape, const Tensor& logits, double temperature, Rng& rng) {
    if (!(temperature > 0.0)) throw std::invalid_argument("gumbel_softmax: temperature must be > 0");
    require_matrix(logits, "gumbel_softmax");
    const std::size_t n = logits.rows(), k = logits.cols();
    const Scalar inv_t = Scalar(1.0 / temperature);
    GumbelSample s{make_output(tape, logits.shape(), {&logits}),
                   make_output(tape, logits.shape(), {&logits})};
    auto lv = logits.data();
    auto soft = s.soft.data();
    auto hard = s.hard.data();
    std::vector<Scalar> z(k);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < k; ++j) z[j] = (lv[r * k + j] + Scalar(rng.gumbel())) * inv_t;
        const Scalar mx = *std::max_element(z.begin(), z.end());
        Scalar total = 0;
        for (std::size_t j = 0; j < k; ++j) total += (soft[r * k + j] = std::exp(z[j] - mx));
        std::size_t best = 0;
        for (std::size_t j = 0; j < k; ++j) {
            soft[r * k + j] /= total;
            if (soft[r * k + j] > soft[r * k + best]) best = j;
        }
        hard[r * k + best] = Scalar(1);
    }
    // Both outputs share the softmax Jacobian; `hard` borrows it for the
    // straight-through estimator.
    auto rule_for = [logits, soft_t = s.soft, n, k, inv_t](Tensor out) mutable {
        return [logits, soft_t, out, n, k, inv_t]() mutable {
            auto g = out.grad();
            auto y = soft_t.data();
            auto gl = logits.grad();
            for (std::size_t r = 0; r < n; ++r) {
                Scalar dot = 0;
                for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
                for (std::size_t j = 0; j < k; ++j)
                    gl[r * k + j] += inv_t * y[r * k + j] * (g[r * k + j] - dot);
            }
        };
    };
    s.soft = finish(tape, s.soft, "gumbel_softmax", rule_for(s.soft));
    s.hard = finish(tape, s.hard, "gumbel_softmax", rule_for(s.hard));
    return s;
}

Tensor argmax_onehot(const Tensor& logits) {
    require_matrix(logits, "argmax_onehot");
    const std::size_t n = logits.rows(), k = logits.cols();
    Tensor out = Tensor::zeros(logits.shape());
    auto lv = logits.data();
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (lv[r * k + j] > lv[r * k + best]) best = j;
        out.data()[r * k + best] = Scalar(1);
    }
    return out;
}

Tensor multihead_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                           std::size_t tokens, std::size_t heads,
                           std::span<const std::uint8_t> key_pad,
                           std::vector<Scalar>* attention_out) {
    require_matrix(q, "multihead_attention");
    require_same_shape(q, k, "multihead_attention");
    require_same_shape(q, v, "multihead_attention");
    const std::size_t d = q.cols();
    require(heads > 0 && d % heads == 0, "multihead_attention: width not divisible by heads");
    require(tokens > 0 && q.rows() % tokens == 0, "multihead_attention: rows not divisible by tokens");
    require(key_pad.size() == q.rows(), "multihead_attention: pad mask length mismatch");
    const std::size_t batch = q.rows() / tokens, dh = d / heads;
    const Scalar scl = Scalar(1) / std::sqrt(Scalar(dh));
    const auto T = Eigen::Index(tokens), DH = Eigen::Index(dh), D = Eigen::Index(d);

    Tensor out = make_output(tape, q.shape(), {&q, &k, &v});
    std::vector<Scalar> probs(batch * heads * tokens * tokens, Scalar(0));
    std::vector<std::uint8_t> pad(key_pad.begin(), key_pad.end());

    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * tokens * d + h * dh;
            ConstStridedMap Q(q.data().data() + off, T, DH, Eigen::OuterStride<>(D));
            ConstStridedMap K(k.data().data() + off, T, DH, Eigen::OuterStride<>(D));
            ConstStridedMap V(v.data().data() + off, T, DH, Eigen::OuterStride<>(D));
            MatMap P(probs.data() + (b * heads + h) * tokens * tokens, T, T);
            P.noalias() = (Q * K.transpose()) * scl;
            for (std::size_t i = 0; i < tokens; ++i) {
                Scalar mx = -std::numeric_limits<Scalar>::infinity();
                for (std::size_t j = 0; j < tokens; ++j)
                    if (!pad[b * tokens + j]) mx = std::max(mx, P(Eigen::Index(i), Eigen::Index(j)));
                Scalar z = 0;
                for (std::size_t j = 0; j < tokens; ++j) {
                    Scalar& p = P(Eigen::Index(i), Eigen::Index(j));
                    p = pad[b * tokens + j] ? Scalar(0) : std::exp(p - mx);
                    z += p;
                }
                if (z > 0) P.row(Eigen::Index(i)) /= z;
            }
            StridedMap O(out.data().data() + off, T, DH, Eigen::OuterStride<>(D));
            O.noalias() = P * V;
        }
    if (attention_out) *attention_out = probs;

    return finish(tape, out, "multihead_attention",
                  [q, k, v, out, probs = std::move(probs), batch, heads, tokens, d, dh, scl, T, DH,
                   D]() mutable {
                      const bool gq = q.requires_grad(), gk = k.requires_grad(), gv = v.requires_grad();
                      RowMat dP(T, T), dS(T, T);
                      for (std::size_t b = 0; b < batch; ++b)
                          for (std::size_t h = 0; h < heads; ++h) {
                              const std::size_t off = b * tokens * d + h * dh;
                              ConstStridedMap Q(q.data().data() + off, T, DH, Eigen::OuterStride<>(D));
                              ConstStridedMap K(k.data().data() + off, T, DH, Eigen::OuterStride<>(D));
                              ConstStridedMap V(v.data().data() + off, T, DH, Eigen::OuterStride<>(D));
                              ConstStridedMap dO(out.grad().data() + off, T, DH, Eigen::OuterStride<>(D));
                              ConstMatMap P(probs.data() + (b * heads + h) * tokens * tokens, T, T);
                              if (gv) {
                                  StridedMap dV(v.grad().data() + off, T, DH, Eigen::OuterStride<>(D));
                                  dV.noalias() += P.transpose() * dO;
                              }
                              if (!gq && !gk) continue;
                              dP.noalias() = dO * V.transpose();
                              for (Eigen::Index i = 0; i < T; ++i) {
                                  const Scalar dot = (dP.row(i).array() * P.row(i).array()).sum();
                                  dS.row(i) = P.row(i).array() * (dP.row(i).array() - dot);
                              }
                              dS *= scl;
                              if (gq) {
                                  StridedMap dQ(q.grad().data() + off, T, DH, Eigen::OuterStride<>(D));
                                  dQ.noalias() += dS * K;
                              }
                              if (gk) {
                                  StridedMap dK(k.grad().data() + off, T, DH, Eigen::OuterStride<>(D));
                                  dK.noalias() += dS.transpose() * Q;
                              }
                          }
                  });
}

}  // namespace capscl::ad
