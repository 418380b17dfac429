"""Loss-function oracles: scalar-loop references, closed forms, gradients."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from synthfeat import losses
from synthfeat.losses import (LossWeights, depth_loss, discriminator_loss,
                              edge_loss, generator_adversarial_loss,
                              generator_task_loss, normal_loss)

from conftest import random_targets


# ---------------------------------------------------------------------------
# scalar-loop reference implementations


def edge_loss_scalar(logits, contour, beta, valid):
    b = logits.shape[0]
    total = 0.0
    for i in range(b):
        for y in range(logits.shape[1]):
            for x in range(logits.shape[2]):
                if not valid[i, y, x]:
                    continue
                z = float(logits[i, y, x])
                p_edge = 1.0 / (1.0 + math.exp(-z))
                if contour[i, y, x] > 0.5:
                    total += -float(beta[i]) * math.log(p_edge)
                else:
                    total += -(1.0 - float(beta[i])) * math.log(1.0 - p_edge)
    return total / b


def depth_loss_scalar(pred, target, valid):
    b = pred.shape[0]
    acc = 0.0
    for i in range(b):
        ds = [float(pred[i, y, x] - target[i, y, x])
              for y in range(pred.shape[1]) for x in range(pred.shape[2])
              if valid[i, y, x]]
        n = len(ds)
        acc += sum(d * d for d in ds) / n - sum(ds) ** 2 / (2.0 * n * n)
    return acc / b


def normal_loss_scalar(pred, target, valid):
    b = pred.shape[0]
    acc = 0.0
    for i in range(b):
        dots, n = 0.0, 0
        for y in range(pred.shape[2]):
            for x in range(pred.shape[3]):
                if valid[i, y, x]:
                    dots += sum(float(pred[i, c, y, x] * target[i, c, y, x])
                                for c in range(3))
                    n += 1
        acc += -dots / n
    return acc / b


def disc_loss_scalar(d_syn, d_real):
    total = 0.0
    for z in d_syn.flatten().tolist():
        total += -math.log(1.0 / (1.0 + math.exp(-z)))      # label 1
    for z in d_real.flatten().tolist():
        total += -math.log(1.0 - 1.0 / (1.0 + math.exp(-z)))  # label 0
    return total / (d_syn.numel() + d_real.numel())


def gen_adv_scalar(d_syn, d_real=None):
    total = 0.0
    for z in d_syn.flatten().tolist():
        total += -math.log(1.0 - 1.0 / (1.0 + math.exp(-z)))
    total /= d_syn.numel()
    if d_real is not None:
        t2 = 0.0
        for z in d_real.flatten().tolist():
            t2 += -math.log(1.0 / (1.0 + math.exp(-z)))
        total += t2 / d_real.numel()
    return total


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-12)


def test_losses_match_scalar_references():
    rng = np.random.default_rng(0)
    for trial in range(100):
        h = int(rng.integers(2, 33))
        w = int(rng.integers(2, 33))
        b = int(rng.integers(1, 3))
        contour, beta, log_depth, normal, valid = random_targets(rng, b, h, w)
        logits = torch.from_numpy(rng.normal(scale=2.0, size=(b, h, w)))
        pred_d = torch.from_numpy(rng.normal(size=(b, h, w)))
        pred_n = torch.from_numpy(rng.normal(size=(b, 3, h, w)))
        pred_n = pred_n / pred_n.norm(dim=1, keepdim=True)
        d_syn = torch.from_numpy(rng.normal(size=(b, 1, 3, 3)))
        d_real = torch.from_numpy(rng.normal(size=(b, 1, 3, 3)))

        assert _rel(float(edge_loss(logits, contour, beta, valid)),
                    edge_loss_scalar(logits, contour, beta, valid)) < 1e-6
        assert _rel(float(depth_loss(pred_d, log_depth, valid)),
                    depth_loss_scalar(pred_d, log_depth, valid)) < 1e-6
        assert _rel(float(normal_loss(pred_n, normal, valid)),
                    normal_loss_scalar(pred_n, normal, valid)) < 1e-6
        assert _rel(float(discriminator_loss(d_syn, d_real)),
                    disc_loss_scalar(d_syn, d_real)) < 1e-6
        assert _rel(float(generator_adversarial_loss(d_syn)),
                    gen_adv_scalar(d_syn)) < 1e-6
        assert _rel(float(generator_adversarial_loss(d_syn, d_real)),
                    gen_adv_scalar(d_syn, d_real)) < 1e-6


# ---------------------------------------------------------------------------
# closed-form values


def test_depth_loss_constant_residual():
    # residual identically c: mean(d^2) - (sum d)^2/(2 n^2) = c^2 - c^2/2 = c^2/2
    for c in (0.5, -1.25, 3.0):
        pred = torch.full((1, 4, 4), c, dtype=torch.float64)
        target = torch.zeros((1, 4, 4), dtype=torch.float64)
        valid = torch.ones((1, 4, 4), dtype=torch.bool)
        assert abs(float(depth_loss(pred, target, valid)) - c * c / 2.0) < 1e-9


def test_normal_loss_perfect_is_minus_one():
    rng = np.random.default_rng(1)
    n = torch.from_numpy(rng.normal(size=(2, 3, 5, 5)))
    n = n / n.norm(dim=1, keepdim=True)
    valid = torch.ones((2, 5, 5), dtype=torch.bool)
    assert float(normal_loss(n, n, valid)) == pytest.approx(-1.0, abs=1e-12)


def test_edge_loss_2x2_fixture():
    # one edge pixel, three background pixels, all valid, zero logits:
    # beta = 3/4; loss = beta*ln2 + 3*(1-beta)*ln2 = (3/4 + 3/4) ln2 = 1.5 ln2
    logits = torch.zeros((1, 2, 2), dtype=torch.float64)
    contour = torch.zeros((1, 2, 2), dtype=torch.float64)
    contour[0, 0, 0] = 1.0
    valid = torch.ones((1, 2, 2), dtype=torch.bool)
    beta = torch.tensor([0.75], dtype=torch.float64)
    val = float(edge_loss(logits, contour, beta, valid))
    assert abs(val - 1.5 * math.log(2.0)) < 1e-9


def test_discriminator_loss_zero_logits_is_ln2():
    z = torch.zeros((2, 1, 3, 3), dtype=torch.float64)
    assert float(discriminator_loss(z, z)) == pytest.approx(math.log(2.0), abs=1e-12)


def test_edge_loss_confident_correct_limit():
    # very confident, correct logits -> loss ~ 0, no NaN from log(0) paths
    contour = torch.zeros((1, 2, 2), dtype=torch.float64)
    contour[0, 0, 0] = 1.0
    logits = torch.where(contour > 0.5, 500.0, -500.0)
    valid = torch.ones((1, 2, 2), dtype=torch.bool)
    beta = torch.tensor([0.75], dtype=torch.float64)
    assert float(edge_loss(logits, contour, beta, valid)) < 1e-12


# ---------------------------------------------------------------------------
# gradient checks (central finite differences, double precision)


def _grad_check(fn, x, eps=1e-6):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().clone()
    fd = torch.zeros_like(analytic)
    flat_x = x.detach().reshape(-1)
    flat_fd = fd.reshape(-1)
    for i in range(flat_x.numel()):
        orig = float(flat_x[i])
        flat_x[i] = orig + eps
        hi = float(fn(x.detach()))
        flat_x[i] = orig - eps
        lo = float(fn(x.detach()))
        flat_x[i] = orig
        flat_fd[i] = (hi - lo) / (2 * eps)
    scale = max(float(fd.abs().max()), 1e-10)
    return float((analytic - fd).abs().max()) / scale


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    contour, beta, log_depth, normal, valid = random_targets(rng, 1, 4, 4)
    logits = torch.from_numpy(rng.normal(size=(1, 4, 4)))
    pred_d = torch.from_numpy(rng.normal(size=(1, 4, 4)))
    pred_n = torch.from_numpy(rng.normal(size=(1, 3, 4, 4)))
    pred_n = pred_n / pred_n.norm(dim=1, keepdim=True)
    d_syn = torch.from_numpy(rng.normal(size=(1, 1, 2, 2)))
    d_real = torch.from_numpy(rng.normal(size=(1, 1, 2, 2)))

    checks = {
        "edge": (lambda x: edge_loss(x, contour, beta, valid), logits),
        "depth": (lambda x: depth_loss(x, log_depth, valid), pred_d),
        "normal": (lambda x: normal_loss(x, normal, valid, unit_tol=1e-2), pred_n),
        "disc": (lambda x: discriminator_loss(x, d_real), d_syn),
        "gen_adv": (lambda x: generator_adversarial_loss(x, d_real), d_syn),
    }
    for name, (fn, x) in checks.items():
        err = _grad_check(fn, x)
        assert err < 1e-4, f"{name}: finite-difference mismatch {err}"


# ---------------------------------------------------------------------------
# validation and composition


def test_depth_loss_nonnegative_property():
    rng = np.random.default_rng(3)
    for _ in range(50):
        _, _, log_depth, _, valid = random_targets(rng, 2, 6, 6)
        pred = torch.from_numpy(rng.normal(size=(2, 6, 6)))
        assert float(depth_loss(pred, log_depth, valid)) >= -1e-12


def test_edge_loss_rejects_bad_beta():
    logits = torch.zeros((1, 2, 2))
    contour = torch.zeros((1, 2, 2))
    valid = torch.ones((1, 2, 2), dtype=torch.bool)
    with pytest.raises(ValueError):
        edge_loss(logits, contour, torch.tensor([1.5]), valid)


def test_normal_loss_rejects_non_unit_prediction():
    pred = torch.full((1, 3, 2, 2), 2.0)
    target = torch.zeros((1, 3, 2, 2))
    target[:, 2] = 1.0
    valid = torch.ones((1, 2, 2), dtype=torch.bool)
    with pytest.raises(ValueError):
        normal_loss(pred, target, valid)


def test_losses_reject_nan_inputs():
    bad = torch.full((1, 2, 2), float("nan"))
    valid = torch.ones((1, 2, 2), dtype=torch.bool)
    with pytest.raises(ValueError):
        depth_loss(bad, torch.zeros((1, 2, 2)), valid)
    with pytest.raises(ValueError):
        edge_loss(bad, torch.zeros((1, 2, 2)), torch.tensor([0.5]), valid)


def test_zero_valid_pixels_is_an_error():
    valid = torch.zeros((1, 2, 2), dtype=torch.bool)
    with pytest.raises(ValueError):
        depth_loss(torch.zeros((1, 2, 2)), torch.zeros((1, 2, 2)), valid)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-1.0, 1.0, 1.0).validate()
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0, 0.0).validate()
    LossWeights(1.0, 0.0, 0.0).validate()


def test_generator_task_loss_composition():
    rng = np.random.default_rng(9)
    contour, beta, log_depth, normal, valid = random_targets(rng, 1, 4, 4)
    preds = {
        "contour": torch.from_numpy(rng.normal(size=(1, 1, 4, 4))),
        "depth": torch.from_numpy(rng.normal(size=(1, 1, 4, 4))),
        "normal": torch.from_numpy(rng.normal(size=(1, 3, 4, 4))),
    }
    preds["normal"] = preds["normal"] / preds["normal"].norm(dim=1, keepdim=True)
    d_syn = torch.from_numpy(rng.normal(size=(1, 1, 2, 2)))
    w = LossWeights(2.0, 3.0, 4.0)
    total, terms = generator_task_loss(d_syn, preds, contour, beta, log_depth,
                                       normal, valid, w)
    expect = (terms["adv"] + 2.0 * terms["edge"] + 3.0 * terms["depth"]
              + 4.0 * terms["normal"])
    assert float(total) == pytest.approx(float(expect), rel=1e-12)
    # without the adversarial term
    total2, terms2 = generator_task_loss(None, preds, contour, beta, log_depth,
                                         normal, valid, w)
    assert "adv" not in terms2
    assert float(total2) == pytest.approx(
        float(2.0 * terms["edge"] + 3.0 * terms["depth"] + 4.0 * terms["normal"]),
        rel=1e-12)


def test_generator_task_loss_bifool_requires_real_logits():
    rng = np.random.default_rng(2)
    contour, beta, log_depth, normal, valid = random_targets(rng, 1, 4, 4)
    preds = {"contour": torch.zeros((1, 1, 4, 4)),
             "depth": torch.zeros((1, 1, 4, 4)),
             "normal": torch.zeros((1, 3, 4, 4))}
    preds["normal"][:, 2] = 1.0
    with pytest.raises(ValueError):
        generator_task_loss(torch.zeros((1, 1, 2, 2)), preds, contour, beta,
                            log_depth, normal, valid, LossWeights(), bifool=True)
