"""Finite-difference verification of every differentiable op.

Each check builds a scalar loss that weights the op output with a fixed
random projection (plain sums make norm/softmax gradients degenerate),
computes the tape gradient, and compares against central differences with
per-element step 1e-2 * max(1, |x_i|). The pass bound is
|g_a - g_n| <= 1e-2 * max(1, |g_a|, |g_n|) per element.

Inputs to kinked ops (ReLU-style) are nudged away from the kink, where
the derivative genuinely does not exist and finite differences are
meaningless.
"""

import numpy as np

from . import ops
from .encoder import StageConfig, encoder_forward, init_encoder, sra_attention, transformer_block
from .losses import bce_loss, combined_loss, dice_loss
from .model import ModelConfig, TransRUPNet
from .serialize import named_tensors
from .tensor import (
    DTYPE,
    Tape,
    Tensor,
    add,
    backward,
    clip,
    div,
    finite_diff_grad,
    log,
    matmul,
    maximum_scalar,
    mul,
    no_record,
    reduce_mean,
    reduce_sum,
    reshape,
    sub,
    transpose,
)

REL_TOL = 1e-2


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradient(f, x: Tensor) -> float:
    """Max relative error between tape gradient and central differences."""
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(leaf)
    backward(loss, tape)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    numeric = finite_diff_grad(f, leaf).data
    return rel_error(analytic, numeric)


def _away_from_kink(arr: np.ndarray, points, margin: float = 0.06) -> np.ndarray:
    out = arr.copy()
    for c in points:
        near = np.abs(out - c) < margin
        out[near] = c + np.where(out[near] >= c, margin + 0.05, -(margin + 0.05))
    return out


def _proj(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(DTYPE))


def _weighted_sum(out: Tensor, r: Tensor) -> Tensor:
    return reduce_sum(mul(out, r))


def _check_args(build, args) -> float:
    """Check the gradient of build(*tensors) w.r.t. each tensor in turn."""
    worst = 0.0
    for i in range(len(args)):
        fixed = list(args)

        def f(t, i=i, fixed=fixed):
            probe = list(fixed)
            probe[i] = t
            return build(*probe)

        worst = max(worst, check_gradient(f, args[i]))
    return worst


def _elementwise_checks(rng):
    a = Tensor(rng.standard_normal((3, 4)).astype(DTYPE))
    b = Tensor((rng.standard_normal((3, 4)) + 3.0).astype(DTYPE))  # away from 0 for div
    r = _proj(rng, (3, 4))
    yield "add", lambda: _check_args(lambda x, y: _weighted_sum(add(x, y), r), (a, b))
    yield "sub", lambda: _check_args(lambda x, y: _weighted_sum(sub(x, y), r), (a, b))
    yield "mul", lambda: _check_args(lambda x, y: _weighted_sum(mul(x, y), r), (a, b))
    yield "div", lambda: _check_args(lambda x, y: _weighted_sum(div(x, y), r), (a, b))
    bias = Tensor(rng.standard_normal(4).astype(DTYPE))
    yield "add_broadcast", lambda: _check_args(lambda x, y: _weighted_sum(add(x, y), r), (a, bias))


def build_registry(rng):
    """List of (name, runner) pairs; each runner returns a max rel error."""
    checks = list(_elementwise_checks(rng))

    x_kink = Tensor(_away_from_kink(rng.standard_normal((4, 5)).astype(DTYPE), [0.0]))
    r45 = _proj(rng, (4, 5))
    checks.append(("maximum_scalar", lambda: _check_args(lambda t: _weighted_sum(maximum_scalar(t, 0.0), r45), (x_kink,))))
    x_clip = Tensor(_away_from_kink(rng.uniform(-2, 2, (4, 5)).astype(DTYPE), [-1.0, 1.0]))
    checks.append(("clip", lambda: _check_args(lambda t: _weighted_sum(clip(t, -1.0, 1.0), r45), (x_clip,))))
    x_pos = Tensor((rng.uniform(0.3, 3.0, (4, 5))).astype(DTYPE))
    checks.append(("log", lambda: _check_args(lambda t: _weighted_sum(log(t), r45), (x_pos,))))

    ma = Tensor(rng.standard_normal((2, 3, 4)).astype(DTYPE))
    mb = Tensor(rng.standard_normal((2, 4, 5)).astype(DTYPE))
    rmat = _proj(rng, (2, 3, 5))
    checks.append(("matmul", lambda: _check_args(lambda p, q: _weighted_sum(matmul(p, q), rmat), (ma, mb))))

    x_red = Tensor(rng.standard_normal((3, 4, 2)).astype(DTYPE))
    r_red = _proj(rng, (3, 2))
    checks.append(("reduce_sum", lambda: _check_args(lambda t: _weighted_sum(reduce_sum(t, axes=1), r_red), (x_red,))))
    checks.append(("reduce_mean", lambda: _check_args(lambda t: _weighted_sum(reduce_mean(t, axes=1), r_red), (x_red,))))
    r_flat = _proj(rng, (24,))
    checks.append(("reshape", lambda: _check_args(lambda t: _weighted_sum(reshape(t, (24,)), r_flat), (x_red,))))
    r_tr = _proj(rng, (2, 3, 4))
    checks.append(("transpose", lambda: _check_args(lambda t: _weighted_sum(transpose(t, (2, 0, 1)), r_tr), (x_red,))))

    checks.append(("relu", lambda: _check_args(lambda t: _weighted_sum(ops.relu(t), r45), (x_kink,))))
    x_act = Tensor(rng.standard_normal((4, 5)).astype(DTYPE))
    checks.append(("sigmoid", lambda: _check_args(lambda t: _weighted_sum(ops.sigmoid(t), r45), (x_act,))))
    checks.append(("gelu", lambda: _check_args(lambda t: _weighted_sum(ops.gelu(t), r45), (x_act,))))
    checks.append(("softmax", lambda: _check_args(lambda t: _weighted_sum(ops.softmax_last(t), r45), (x_act,))))

    # conv2d: stride-1 padded and strided variants, w.r.t. x, weight, bias
    xc = Tensor(rng.standard_normal((2, 2, 5, 5)).astype(DTYPE))
    conv_p = ops.init_conv2d(rng, 2, 3, 3, stride=1, padding=1)
    conv_p.weight = Tensor(rng.standard_normal(conv_p.weight.shape).astype(DTYPE), requires_grad=True)
    conv_p.bias = Tensor(rng.standard_normal(conv_p.bias.shape).astype(DTYPE), requires_grad=True)
    r_conv = _proj(rng, (2, 3, 5, 5))

    def conv_build(x, w, b):
        p = ops.Conv2dParams(weight=w, bias=b, stride=1, padding=1)
        return _weighted_sum(ops.conv2d(x, p), r_conv)

    checks.append(("conv2d", lambda: _check_args(conv_build, (xc, conv_p.weight, conv_p.bias))))

    xs = Tensor(rng.standard_normal((1, 2, 6, 6)).astype(DTYPE))
    conv_s = ops.init_conv2d(rng, 2, 2, 2, stride=2, padding=0)
    conv_s.weight = Tensor(rng.standard_normal(conv_s.weight.shape).astype(DTYPE), requires_grad=True)
    r_convs = _proj(rng, (1, 2, 3, 3))

    def conv_stride_build(x, w, b):
        p = ops.Conv2dParams(weight=w, bias=b, stride=2, padding=0)
        return _weighted_sum(ops.conv2d(x, p), r_convs)

    checks.append(("conv2d_stride2", lambda: _check_args(conv_stride_build, (xs, conv_s.weight, conv_s.bias))))

    # batch norm, both modes; fresh running stats per call keep f pure
    xb = Tensor(rng.standard_normal((3, 2, 4, 4)).astype(DTYPE))
    gamma = Tensor((rng.standard_normal(2) * 0.5 + 1.0).astype(DTYPE))
    beta = Tensor(rng.standard_normal(2).astype(DTYPE))
    run_mean = rng.standard_normal(2).astype(DTYPE)
    run_var = rng.uniform(0.5, 2.0, 2).astype(DTYPE)
    r_bn = _proj(rng, (3, 2, 4, 4))

    def bn_build(mode):
        def build(x, g, b):
            p = ops.BatchNorm2dParams(
                gamma=g, beta=b,
                running_mean=Tensor(run_mean.copy()),
                running_var=Tensor(run_var.copy()),
            )
            return _weighted_sum(ops.batch_norm2d(x, p, mode), r_bn)

        return build

    checks.append(("batch_norm2d_train", lambda: _check_args(bn_build("train"), (xb, gamma, beta))))
    checks.append(("batch_norm2d_eval", lambda: _check_args(bn_build("eval"), (xb, gamma, beta))))

    xl = Tensor(rng.standard_normal((3, 4, 6)).astype(DTYPE))
    ln_g = Tensor((rng.standard_normal(6) * 0.5 + 1.0).astype(DTYPE))
    ln_b = Tensor(rng.standard_normal(6).astype(DTYPE))
    r_ln = _proj(rng, (3, 4, 6))
    checks.append(
        ("layer_norm", lambda: _check_args(lambda x, g, b: _weighted_sum(ops.layer_norm(x, g, b), r_ln), (xl, ln_g, ln_b)))
    )

    xw = Tensor(rng.standard_normal((3, 4)).astype(DTYPE))
    lw = Tensor(rng.standard_normal((5, 4)).astype(DTYPE))
    lb = Tensor(rng.standard_normal(5).astype(DTYPE))
    r_lin = _proj(rng, (3, 5))
    checks.append(("linear", lambda: _check_args(lambda x, w, b: _weighted_sum(ops.linear(x, w, b), r_lin), (xw, lw, lb))))

    xu = Tensor(rng.standard_normal((1, 2, 3, 4)).astype(DTYPE))
    r_up = _proj(rng, (1, 2, 7, 9))
    checks.append(("bilinear_upsample", lambda: _check_args(lambda t: _weighted_sum(ops.bilinear_upsample(t, 7, 9), r_up), (xu,))))

    ca = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(DTYPE))
    cb = Tensor(rng.standard_normal((2, 3, 3, 3)).astype(DTYPE))
    r_cat = _proj(rng, (2, 5, 3, 3))
    checks.append(
        ("concat_channels", lambda: _check_args(lambda p, q: _weighted_sum(ops.concat_channels([p, q]), r_cat), (ca, cb)))
    )

    pred = Tensor(rng.uniform(0.1, 0.9, (2, 1, 4, 4)).astype(DTYPE))
    target = Tensor((rng.uniform(0, 1, (2, 1, 4, 4)) > 0.5).astype(DTYPE))
    checks.append(("bce_loss", lambda: _check_args(lambda p: bce_loss(p, target), (pred,))))
    checks.append(("dice_loss", lambda: _check_args(lambda p: dice_loss(p, target), (pred,))))
    checks.append(("combined_loss", lambda: _check_args(lambda p: combined_loss(p, target), (pred,))))

    # attention pieces on an 4x4 token grid
    cfg = StageConfig(embed_dim=8, depth=1, num_heads=2, sr_ratio=2, patch_stride=4, mlp_ratio=2)
    enc = init_encoder(rng, [cfg], in_channels=3)
    block = enc.stages[0].blocks[0]
    tokens = Tensor(rng.standard_normal((2, 16, 8)).astype(DTYPE))
    r_tok = _proj(rng, (2, 16, 8))
    checks.append(
        ("sra_attention", lambda: _check_args(lambda t: _weighted_sum(sra_attention(t, 4, 4, cfg, block.attn), r_tok), (tokens,)))
    )
    checks.append(
        ("transformer_block", lambda: _check_args(lambda t: _weighted_sum(transformer_block(t, 4, 4, cfg, block), r_tok), (tokens,)))
    )
    return checks


def run_op_checks(seed: int = 0, seeds_per_op: int = 20):
    """Run every registry check ``seeds_per_op`` times; returns name -> max err."""
    results = {}
    for rep in range(seeds_per_op):
        rng = np.random.default_rng(np.random.SeedSequence([seed, rep]))
        for name, runner in build_registry(rng):
            err = runner()
            if name not in results or err > results[name]:
                results[name] = err
    return results


def _gradcheck_model_config():
    stages = (
        StageConfig(embed_dim=8, depth=1, num_heads=1, sr_ratio=2, patch_stride=4, mlp_ratio=2),
        StageConfig(embed_dim=16, depth=1, num_heads=2, sr_ratio=2, patch_stride=2, mlp_ratio=2),
        StageConfig(embed_dim=32, depth=1, num_heads=4, sr_ratio=1, patch_stride=2, mlp_ratio=2),
    )
    return ModelConfig(input_size=(32, 32), reduce_channels=8, stages=stages)


def check_parameters(loss_fn, named_params, n_sample: int, rng) -> float:
    """Finite-difference spot check on a random subset of parameters.

    ``loss_fn`` must be deterministic given the current parameter values;
    parameters are perturbed in place and restored.
    """
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in named_params}
    index = [(name, p, i) for name, p in named_params for i in range(p.size)]
    chosen = rng.choice(len(index), size=min(n_sample, len(index)), replace=False)
    worst = 0.0
    with no_record():
        for pick in chosen:
            name, p, i = index[int(pick)]
            flat = p.data.ravel()
            orig = flat[i]
            step = 1e-2 * max(1.0, abs(float(orig)))
            flat[i] = orig + step
            f_plus = float(loss_fn().data)
            flat[i] = orig - step
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = float(grads[name].ravel()[i])
            denom = max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def check_encoder(seed: int = 0, n_sample: int = 120) -> float:
    """Gradient spot check of the full tiny encoder (input + parameters)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 901]))
    cfgs = _gradcheck_model_config().stages
    enc = init_encoder(rng, cfgs)
    x = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)).astype(DTYPE))
    r = [_proj(rng, (1, d, s, s)) for d, s in ((8, 8), (16, 4), (32, 2))]

    def loss_fn():
        out = encoder_forward(x, cfgs, enc)
        total = _weighted_sum(out.e1, r[0])
        total = add(total, _weighted_sum(out.e2, r[1]))
        return add(total, _weighted_sum(out.e3, r[2]))

    named = list(named_tensors(enc))
    trainable = [(n, t) for n, t in named if t.requires_grad]
    err_params = check_parameters(loss_fn, trainable, n_sample, rng)
    err_input = check_gradient(
        lambda t: _weighted_sum(encoder_forward(t, cfgs, enc).e3, r[2]), x
    )
    return max(err_params, err_input)


def check_model(seed: int = 0, n_sample: int = 200) -> float:
    """Full tiny-model gradient check through the combined loss."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 902]))
    model = TransRUPNet(_gradcheck_model_config(), seed=seed + 1)
    x = Tensor(rng.uniform(0, 1, (2, 3, 32, 32)).astype(DTYPE))
    y = Tensor((rng.uniform(0, 1, (2, 1, 32, 32)) > 0.6).astype(DTYPE))
    snapshot = [(t, t.data.copy()) for _, t in model.named_tensors() if not t.requires_grad]

    def loss_fn():
        return combined_loss(model.forward(x, mode="train"), y)

    try:
        return check_parameters(loss_fn, model.named_parameters(), n_sample, rng)
    finally:
        for t, saved in snapshot:
            t.data = saved
