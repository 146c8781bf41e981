"""Finite-difference verification battery.

Covers every registered op, the masked conv layer, the class-conditional
alignment term, and the full per-task loss on a toy two-conv/two-FC network.
Inputs are seeded and kept away from the relu/|.| kinks so central
differences are trustworthy at eps = 1e-5.
"""

from __future__ import annotations

import numpy as np

from .alignment import cmmd
from .autodiff import (
    GradCheckReport,
    Tensor,
    add,
    add_bias,
    conv2d,
    grad_check,
    hadamard,
    l1_norm,
    matmul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
)
from .network import Architecture, AuxModel, extract_knowledge, init_task, masked_conv_forward
from .training import TrainConfig, task_loss


def toy_architecture(class_count: int = 4) -> Architecture:
    """Two convs, two hidden FC layers, small enough for per-coordinate FD."""
    return Architecture(
        input_shape=(1, 6, 6),
        conv_channels=(2, 3),
        conv_kernels=(3, 3),
        conv_strides=(2, 1),
        conv_paddings=(1, 0),
        fc_widths=(10, 7),
        class_count=class_count,
    )


def _away_from_zero(rng, shape, low=0.1, high=1.0):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def run_gradcheck_battery(eps: float = 1e-5, tol: float = 1e-4, seed: int = 7) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    report = GradCheckReport(eps=eps, tol=tol)

    def run(label, build, params, names):
        sub = grad_check(build, params, eps=eps, tol=tol, names=[f"{label}/{n}" for n in names])
        report.results.extend(sub.results)

    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    k = Tensor(rng.normal(size=(3, 2, 3, 3)))
    run("conv2d", lambda: reduce_sum(relu(conv2d(x, k, stride=2, padding=1))), [x, k], ["input", "kernel"])

    a = Tensor(_away_from_zero(rng, (3, 3)))
    b = Tensor(_away_from_zero(rng, (3, 3)))
    run("hadamard", lambda: reduce_sum(hadamard(a, b)), [a, b], ["a", "b"])

    ma = Tensor(rng.normal(size=(3, 4)))
    mb = Tensor(rng.normal(size=(4, 2)))
    run("matmul", lambda: reduce_mean(matmul(ma, mb)), [ma, mb], ["a", "b"])

    fx = Tensor(rng.normal(size=(4, 5)))
    fb = Tensor(rng.normal(size=(5,)))
    run("add_bias_rows", lambda: reduce_sum(relu(add_bias(fx, fb))), [fx, fb], ["x", "bias"])

    cx = Tensor(rng.normal(size=(2, 3, 4, 4)))
    cb = Tensor(rng.normal(size=(3,)))
    run("add_bias_channels", lambda: reduce_sum(relu(add_bias(cx, cb))), [cx, cb], ["x", "bias"])

    rx = Tensor(_away_from_zero(rng, (4, 4)))
    run("relu", lambda: reduce_sum(relu(rx)), [rx], ["x"])

    logits = Tensor(rng.normal(size=(5, 4)))
    targets = np.array([0, 1, 2, 3, 1])
    run("softmax_cross_entropy", lambda: softmax_cross_entropy(logits, targets), [logits], ["logits"])

    sx = Tensor(rng.normal(size=(3, 4)))
    run("reduce_sum", lambda: reduce_sum(sx), [sx], ["x"])
    run("reduce_mean", lambda: reduce_mean(sx), [sx], ["x"])

    lx = Tensor(_away_from_zero(rng, (3, 3)))
    run("l1_norm", lambda: l1_norm(lx), [lx], ["x"])

    ga = Tensor(rng.normal(size=(2, 3)))
    gb = Tensor(rng.normal(size=(6,)))
    run(
        "add_scale_reshape",
        lambda: scale(add(reduce_sum(ga), reduce_mean(reshape(gb, (2, 3)))), 0.7),
        [ga, gb],
        ["a", "b"],
    )

    mask = Tensor(rng.uniform(0.5, 1.5, size=(2, 1, 3, 3)))
    kernel = Tensor(rng.normal(size=(2, 1, 3, 3)))
    mbias = Tensor(rng.normal(size=(2,)))
    minput = Tensor(rng.normal(size=(2, 1, 6, 6)))
    run(
        "masked_conv_layer",
        lambda: reduce_sum(
            masked_conv_forward(extract_knowledge(mask, kernel), minput, mbias, stride=2, padding=1)
        ),
        [mask, kernel, mbias, minput],
        ["mask", "kernel", "bias", "input"],
    )

    labels = np.array([0, 0, 1, 1, 2, 2])
    s_aux = Tensor(rng.normal(size=(6, 3)))
    s_task = Tensor(rng.normal(size=(6, 3)))
    run("cmmd", lambda: cmmd(s_aux, s_task, labels), [s_aux, s_task], ["aux_stream", "task_stream"])

    # Full per-task loss on the toy network, every trainable parameter.
    aux = AuxModel.initialize(toy_architecture(class_count=4), seed=seed)
    net = init_task(aux, (0, 1, 2), seed=seed, task_id=0)
    batch_x = rng.uniform(0.0, 1.0, size=(4, 1, 6, 6))
    batch_y = np.array([0, 1, 2, 0])
    cfg = TrainConfig(lambda_l1=0.7, lambda_align=0.5)
    named = sorted(net.parameters().items())
    run(
        "full_task_loss",
        lambda: task_loss(net, (batch_x, batch_y), cfg)[0],
        [p for _, p in named],
        [n for n, _ in named],
    )

    return report
