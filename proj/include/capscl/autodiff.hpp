#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "capscl/rng.hpp"
#include "capscl/tensor.hpp"

namespace capscl::ad {

/// Records operations of one forward pass for reverse-mode differentiation.
///
/// Entries are appended in execution order, so inputs always precede the
/// entries that consume them. backward() walks the entries once in reverse.
/// A tape built with recording disabled evaluates ops without storing them.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    std::size_t size() const { return entries_.size(); }

    /// True when some input needs a gradient and the tape is live.
    bool wants(std::initializer_list<const Tensor*> inputs) const;

    void record(Tensor output, std::function<void()> rule);

    /// Seeds d(loss)/d(loss) = 1 and runs every local rule in reverse.
    /// Gradients accumulate into requires_grad leaves.
    void backward(const Tensor& loss);

private:
    struct Entry {
        Tensor output;
        std::function<void()> rule;
    };
    std::vector<Entry> entries_;
    bool recording_;
    bool consumed_ = false;
};

// Elementwise and broadcasting ops. Matrices are rank-2 [rows x cols]; a
// "segmented" matrix stacks `segment` consecutive rows per example.

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, Scalar factor);
/// x[r][c] + bias[c]
Tensor add_row(Tape& tape, const Tensor& x, const Tensor& bias);
/// x[r][c] * gate[c]
Tensor mul_row(Tape& tape, const Tensor& x, const Tensor& gate);
/// x[b*segment + t][c] + y[b][c]
Tensor add_segment(Tape& tape, const Tensor& x, std::size_t segment, const Tensor& y);
/// x[b*segment + t][c] * y[b][c]; y may also be [B x 1] (one scalar per example).
Tensor mul_segment(Tape& tape, const Tensor& x, std::size_t segment, const Tensor& y);

Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor softmax_rows(Tape& tape, const Tensor& x);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  Scalar eps = Scalar(1e-5));
/// Inverted dropout; identity when !training or rate == 0.
Tensor dropout(Tape& tape, const Tensor& x, double rate, Rng& rng, bool training);

/// a[m x k] * b[k x n]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
/// a[m x k] * b[n x k]^T
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);
/// x * weight^T + bias, weight [out x in]; bias may be undefined.
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Rows of table selected by ids.
Tensor embedding(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids);
/// Mean cross-entropy of row-wise softmax(logits) against integer labels.
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);
/// Per-row mean over columns: [n x c] -> [n x 1].
Tensor row_mean(Tape& tape, const Tensor& x);
Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts);
Tensor select_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> rows);
Tensor column(Tape& tape, const Tensor& x, std::size_t col);
/// Value copy that blocks gradient flow.
Tensor stop_gradient(const Tensor& x);

/// Valid, stride-1 1-D convolution over each example's token axis.
/// input [B*tokens x channels], filters [n_w x window x channels], bias [n_w]
/// -> [B*(tokens - window + 1) x n_w].
Tensor conv1d(Tape& tape, const Tensor& input, std::size_t tokens, const Tensor& filters,
              const Tensor& bias);
inline Tensor conv1d(Tape& tape, const Tensor& input, const Tensor& filters, const Tensor& bias) {
    return conv1d(tape, input, input.rows(), filters, bias);
}

/// Max over each example's token axis: [B*tokens x C] -> [B x C].
/// Ties route the gradient to the first maximal token.
Tensor maxpool_over_time(Tape& tape, const Tensor& input, std::size_t tokens);
inline Tensor maxpool_over_time(Tape& tape, const Tensor& input) {
    return maxpool_over_time(tape, input, input.rows());
}

struct GumbelSample {
    Tensor soft;  ///< softmax((logits + g) / temperature), [B x K]
    Tensor hard;  ///< one-hot argmax in value, gradient of `soft` (straight-through)
};
/// Straight-through Gumbel-Softmax over each row of logits [B x K].
GumbelSample gumbel_softmax(Tape& tape, const Tensor& logits, double temperature, Rng& rng);
/// One-hot argmax of each row (no noise, no gradient); first index on ties.
Tensor argmax_onehot(const Tensor& logits);

/// Scaled dot-product multi-head attention over each example.
/// q, k, v: [B*tokens x d]; key_pad[b*tokens + j] != 0 excludes key j.
/// If attention_out is non-null it receives the [B*heads*tokens x tokens] weights.
Tensor multihead_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                           std::size_t tokens, std::size_t heads,
                           std::span<const std::uint8_t> key_pad,
                           std::vector<Scalar>* attention_out = nullptr);

}  // namespace capscl::ad
