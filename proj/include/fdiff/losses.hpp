#pragma once

#include <cmath>

#include "fdiff/tensor.hpp"

namespace fdiff {

struct LossBreakdown {
    Tensor total; // scalar on the tape
    double mse = 0.0, bce = 0.0, dice = 0.0;
};

inline void require_binary(const Tensor& labels, const char* where) {
    for (std::int64_t i = 0; i < labels.numel(); ++i) {
        const double v = labels.data()[i];
        if (v != 0.0 && v != 1.0)
            throw InvalidLabel(std::string(where) + ": labels must be 0/1, found " +
                               std::to_string(v));
    }
}

/// MSE + BCE + soft-Dice on a probability map against binary labels.
/// BCE clamps probabilities to [1e-7, 1-1e-7]; Dice smoothing is 1e-5.
inline LossBreakdown total_loss_probs(const Tensor& probs, const Tensor& labels) {
    if (!probs.same_shape(labels))
        throw ShapeMismatch("total_loss: probs " + shape_str(probs.shape()) + " vs labels " +
                            shape_str(labels.shape()));
    require_binary(labels, "total_loss");

    const double n = static_cast<double>(probs.numel());

    Tensor diff = sub(probs, labels);
    Tensor mse = mean(mul(diff, diff));

    constexpr double kClamp = 1e-7;
    Tensor pc = clamp(probs, kClamp, 1.0 - kClamp);
    Tensor pos = mul(labels, fdiff::log(pc));
    Tensor one_minus_labels = add_scalar(neg(labels), 1.0);
    Tensor one_minus_pc = add_scalar(neg(pc), 1.0);
    Tensor negterm = mul(one_minus_labels, fdiff::log(one_minus_pc));
    Tensor bce = scale(sum(add(pos, negterm)), -1.0 / n);

    constexpr double kSmooth = 1e-5;
    Tensor inter = sum(mul(probs, labels));
    Tensor denom = add_scalar(add(sum(probs), sum(labels)), kSmooth);
    Tensor ratio = scalar_div(add_scalar(scale(inter, 2.0), kSmooth), denom);
    Tensor dice = add_scalar(neg(ratio), 1.0);

    LossBreakdown out;
    out.mse = mse.item();
    out.bce = bce.item();
    out.dice = dice.item();
    out.total = add(add(mse, bce), dice);
    check_finite(out.total, "total_loss");
    return out;
}

/// Combined training loss on raw logits: p = sigmoid(logits).
inline LossBreakdown total_loss(const Tensor& logits, const Tensor& labels) {
    return total_loss_probs(sigmoid(logits), labels);
}

} // namespace fdiff
