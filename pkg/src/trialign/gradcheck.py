"""Finite-difference verification of every analytic gradient.

Each check draws seeded random configurations, compares the analytic
gradient against central differences (h = 1e-6, float64), and reports the
worst relative error across all configurations and coordinates. Relative
error is |a - f| / max(|a|, |f|), falling back to the absolute difference
when both are at noise level. Degenerate triangles (squared area at or
below 1e-8) are redrawn rather than compared, matching the zero-subgradient
convention.

``negative_control`` adds a deliberately sign-flipped triangle-area check
that must fail; it exists so the harness can prove it would catch a broken
gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .losses import (LossConfig, Objective, dtm_loss, contrastive_loss,
                     sample_negative_captions, total_loss)
from .nn import Mlp

FD_H = 1e-6
_NOISE_FLOOR = 1e-10


@dataclass
class CheckResult:
    name: str
    n_configs: int
    max_rel_err: float
    tolerance: float
    passed: bool


def rel_err(a: float, b: float) -> float:
    denom = max(abs(a), abs(b))
    if denom < _NOISE_FLOOR:
        return abs(a - b)
    return abs(a - b) / denom


def central_diff(f, x: np.ndarray, index, h: float = FD_H) -> float:
    xp = x.copy()
    xp[index] += h
    xm = x.copy()
    xm[index] -= h
    return (f(xp) - f(xm)) / (2.0 * h)


def _max_err_vs_fd(f, x: np.ndarray, analytic: np.ndarray, h: float = FD_H) -> float:
    """Worst relative error between analytic grad and FD over all coords."""
    worst = 0.0
    flat_x = x.reshape(-1)
    flat_a = analytic.reshape(-1)

    def f_flat(xf):
        return f(xf.reshape(x.shape))

    for i in range(flat_x.size):
        fd = central_diff(f_flat, flat_x, i, h)
        worst = max(worst, rel_err(flat_a[i], fd))
    return worst


# ---------------------------------------------------------------------------
# Individual checks
# ---------------------------------------------------------------------------


def check_triangle_area(rng, n_configs: int, sign_flip: bool = False) -> float:
    worst = 0.0
    done = 0
    while done < n_configs:
        pts = rng.standard_normal((3, 6))
        x, y, z = pts
        u, v = x - y, x - z
        g = np.dot(u, u) * np.dot(v, v) - np.dot(u, v) ** 2
        if g <= 1e-8:
            continue
        grad = geometry.triangle_area_grad(x, y, z)
        analytic = np.stack([grad.d_x, grad.d_y, grad.d_z])
        if sign_flip:
            analytic = -analytic
        worst = max(worst, _max_err_vs_fd(
            lambda p: geometry.triangle_area(p[0], p[1], p[2]), pts, analytic))
        done += 1
    return worst


def _mlp_value_and_grads(mlp: Mlp, x: np.ndarray, weighting: np.ndarray):
    """Scalar probe sum(output * weighting) plus its analytic gradients."""
    out, tape = mlp.forward(x)
    dx, grads = mlp.backward(tape, weighting)
    value = float(np.sum(out * weighting))
    return value, dx, grads


def _check_mlp(rng, n_configs: int, dims, normalize: bool, batch: int = 3) -> float:
    worst = 0.0
    for _ in range(n_configs):
        mlp = Mlp.build(dims, normalize_output=normalize, rng=rng)
        x = rng.standard_normal((batch, dims[0]))
        weighting = rng.standard_normal((batch, dims[-1] if len(dims) > 1 else dims[0]))
        _, dx, grads = _mlp_value_and_grads(mlp, x, weighting)

        def probe_params(flat, mlp=mlp, x=x, weighting=weighting):
            saved = mlp.get_flat()
            mlp.set_flat(flat)
            out, _ = mlp.forward(x)
            mlp.set_flat(saved)
            return float(np.sum(out * weighting))

        if mlp.num_params:
            flat = mlp.get_flat()
            analytic_flat = np.concatenate(
                [np.concatenate([dw.ravel(), db]) for dw, db in grads])
            worst = max(worst, _max_err_vs_fd(probe_params, flat, analytic_flat))

        def probe_input(xi, mlp=mlp, weighting=weighting):
            out, _ = mlp.forward(xi)
            return float(np.sum(out * weighting))

        worst = max(worst, _max_err_vs_fd(probe_input, x, dx))
    return worst


def check_dense_layer(rng, n_configs: int) -> float:
    return _check_mlp(rng, n_configs, [5, 4], normalize=False)


def check_hidden_activation(rng, n_configs: int) -> float:
    # Two dense layers exercise the activation sandwiched between them.
    return _check_mlp(rng, n_configs, [5, 4, 3], normalize=False)


def check_unit_norm(rng, n_configs: int) -> float:
    return _check_mlp(rng, n_configs, [4], normalize=True)


def check_encoder_stack(rng, n_configs: int) -> float:
    return _check_mlp(rng, n_configs, [6, 8, 8, 3], normalize=True)


def _random_batch(rng, b: int = 4, n: int = 5):
    def unit_rows(m):
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    return (unit_rows(rng.standard_normal((b, n))),
            unit_rows(rng.standard_normal((b, n))),
            unit_rows(rng.standard_normal((b, n))))


def _check_loss_embeddings(rng, n_configs: int, make_loss) -> float:
    """FD over every embedding coordinate of random unit-norm batches."""
    worst = 0.0
    for _ in range(n_configs):
        t, v, a = _random_batch(rng)
        out = make_loss(t, v, a)
        stacked = np.stack([t, v, a])
        analytic = np.stack([out.d_text, out.d_video, out.d_audio])

        def probe(p, make_loss=make_loss):
            return make_loss(p[0], p[1], p[2]).value

        worst = max(worst, _max_err_vs_fd(probe, stacked, analytic))
    return worst


def check_loss_triangle(rng, n_configs: int) -> float:
    cfg = LossConfig(objective=Objective.TRIANGLE, tau=0.2, dtm_weight=0.0)
    return _check_loss_embeddings(
        rng, n_configs, lambda t, v, a: contrastive_loss(t, v, a, cfg))


def check_loss_cosine_anchor(rng, n_configs: int) -> float:
    cfg = LossConfig(objective=Objective.COSINE_ANCHOR, tau=0.2, dtm_weight=0.0)
    return _check_loss_embeddings(
        rng, n_configs, lambda t, v, a: contrastive_loss(t, v, a, cfg))


def check_loss_gram_volume(rng, n_configs: int) -> float:
    cfg = LossConfig(objective=Objective.GRAM_VOLUME, tau=0.2, dtm_weight=0.0)
    return _check_loss_embeddings(
        rng, n_configs, lambda t, v, a: contrastive_loss(t, v, a, cfg))


def check_loss_symile_mip(rng, n_configs: int) -> float:
    cfg = LossConfig(objective=Objective.SYMILE_MIP, tau=0.2, dtm_weight=0.0)
    return _check_loss_embeddings(
        rng, n_configs, lambda t, v, a: contrastive_loss(t, v, a, cfg))


def check_loss_dtm(rng, n_configs: int) -> float:
    worst = 0.0
    for _ in range(n_configs):
        t, v, a = _random_batch(rng)
        n = t.shape[1]
        matcher = Mlp.build([3 * n, 6, 1], normalize_output=False, rng=rng)
        plan = sample_negative_captions(t.shape[0], rng)
        out = dtm_loss(t, v, a, matcher, plan)
        stacked = np.stack([t, v, a])
        analytic = np.stack([out.d_text, out.d_video, out.d_audio])

        def probe_emb(p, matcher=matcher, plan=plan):
            return dtm_loss(p[0], p[1], p[2], matcher, plan).value

        worst = max(worst, _max_err_vs_fd(probe_emb, stacked, analytic))

        flat = matcher.get_flat()
        analytic_m = np.concatenate(
            [np.concatenate([dw.ravel(), db]) for dw, db in out.matcher_grads])

        def probe_matcher(f, matcher=matcher, t=t, v=v, a=a, plan=plan):
            saved = matcher.get_flat()
            matcher.set_flat(f)
            value = dtm_loss(t, v, a, matcher, plan).value
            matcher.set_flat(saved)
            return value

        worst = max(worst, _max_err_vs_fd(probe_matcher, flat, analytic_m))
    return worst


def check_loss_total(rng, n_configs: int) -> float:
    worst = 0.0
    cfg = LossConfig(objective=Objective.TRIANGLE, tau=0.2, dtm_weight=0.1)
    for _ in range(n_configs):
        t, v, a = _random_batch(rng)
        matcher = Mlp.build([3 * t.shape[1], 6, 1], normalize_output=False, rng=rng)
        plan = sample_negative_captions(t.shape[0], rng)
        out = total_loss(t, v, a, cfg, matcher, plan)
        stacked = np.stack([t, v, a])
        analytic = np.stack([out.d_text, out.d_video, out.d_audio])

        def probe(p, matcher=matcher, plan=plan):
            return total_loss(p[0], p[1], p[2], cfg, matcher, plan).value

        worst = max(worst, _max_err_vs_fd(probe, stacked, analytic))
    return worst


CHECKS = {
    "triangle_area": check_triangle_area,
    "dense_layer": check_dense_layer,
    "hidden_activation": check_hidden_activation,
    "unit_norm": check_unit_norm,
    "encoder_stack": check_encoder_stack,
    "loss_triangle": check_loss_triangle,
    "loss_cosine_anchor": check_loss_cosine_anchor,
    "loss_gram_volume": check_loss_gram_volume,
    "loss_symile_mip": check_loss_symile_mip,
    "loss_dtm": check_loss_dtm,
    "loss_total": check_loss_total,
}


def run_checks(checks=None, n_configs: int = 100, tolerance: float = 1e-5,
               seed: int = 0, negative_control: bool = False) -> list[CheckResult]:
    """Run the named checks (all by default) and collect their results."""
    names = list(CHECKS) if checks is None else list(checks)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown check(s): {unknown}; known: {sorted(CHECKS)}")
    results = []
    for i, name in enumerate(names):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        worst = CHECKS[name](rng, n_configs)
        results.append(CheckResult(name=name, n_configs=n_configs, max_rel_err=worst,
                                   tolerance=tolerance, passed=worst < tolerance))
    if negative_control:
        rng = np.random.default_rng(np.random.SeedSequence([seed, len(names)]))
        worst = check_triangle_area(rng, max(n_configs, 1), sign_flip=True)
        results.append(CheckResult(name="negative_control_sign_flip", n_configs=n_configs,
                                   max_rel_err=worst, tolerance=tolerance,
                                   passed=worst < tolerance))
    return results


def write_csv(results: list[CheckResult], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["check", "n_configs", "max_rel_err", "tolerance", "passed"])
        for r in results:
            writer.writerow([r.name, r.n_configs, f"{r.max_rel_err:.3e}",
                             f"{r.tolerance:.1e}", str(r.passed).lower()])
