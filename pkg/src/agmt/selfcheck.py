"""Numerical self-check suite: gradients, invariances, loss and metric oracles.

Every check is seeded, so the table printed by ``run_selfcheck`` is identical
from run to run.
"""

from __future__ import annotations

import contextlib
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import evaluation as ev
from . import oracles
from . import tensor as T
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .grouping import a_grouping_forward, init_a_grouping, inject_fault
from .losses import (
    DiversityLossParams,
    MetricLossParams,
    binomial_deviance_loss,
    contrastive_loss,
    diversity_loss,
    margin_loss,
    total_loss,
)
from .tensor import Tensor

OP_TOL = 1e-6
COMPOSED_TOL = 1e-4
PERM_EMB_TOL = 1e-9
PERM_ATTN_TOL = 1e-15
SHIFT_EMB_TOL = 1e-8
SHIFT_MAP_TOL = 1e-6
ROW_SUM_TOL = 1e-12
ORACLE_TOL = 1e-12
KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} {self.value:.3e} (tol {self.tolerance:.0e}) {self.detail}"


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

def _away_from_zero(rng, shape, low=0.1, high=1.5):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _op_cases() -> dict:
    """op name -> factory(rng) returning (fn, inputs)."""

    def leaf(a):
        return Tensor(a, requires_grad=True)

    def weighted(out_fn, shape_fn):
        # contract the op output with fixed random weights to get a scalar
        def make(rng):
            inputs, fn = shape_fn(rng)
            probe = fn()
            weights = Tensor(rng.normal(size=probe.shape))
            return (lambda: T.sum(T.mul(out_fn(fn()), weights))), inputs
        return make

    def unary(op, sampler=lambda rng, s: rng.normal(size=s), shape=(3, 4)):
        def build(rng):
            x = leaf(sampler(rng, shape))
            return [x], lambda: op(x)
        return weighted(lambda y: y, build)

    def binary(op, shape_a=(3, 4), shape_b=(3, 4), sampler_b=lambda rng, s: rng.normal(size=s)):
        def build(rng):
            a = leaf(rng.normal(size=shape_a))
            b = leaf(sampler_b(rng, shape_b))
            return [a, b], lambda: op(a, b)
        return weighted(lambda y: y, build)

    def conv3(rng):
        x = leaf(rng.normal(size=(2, 5, 4, 3)))
        w = leaf(rng.normal(size=(3, 3, 3, 2)))
        b = leaf(rng.normal(size=(2,)))
        return [x, w, b], lambda: T.conv3x3_circular(x, w, b)

    def conv3_wide(rng):
        x = leaf(rng.normal(size=(2, 4, 3, 5)))
        w = leaf(rng.normal(size=(3, 3, 5, 2)))
        b = leaf(rng.normal(size=(2,)))
        return [x, w, b], lambda: T.conv3x3_circular(x, w, b)

    def conv1(rng):
        x = leaf(rng.normal(size=(2, 3, 3, 4)))
        w = leaf(rng.normal(size=(4, 3)))
        b = leaf(rng.normal(size=(3,)))
        return [x, w, b], lambda: T.conv1x1(x, w, b)

    def concat(rng):
        a = leaf(rng.normal(size=(2, 3)))
        b = leaf(rng.normal(size=(2, 2)))
        return [a, b], lambda: T.concat([a, b], axis=1)

    def take(rng):
        x = leaf(rng.normal(size=(4, 3)))
        idx = rng.integers(0, 4, size=6)
        return [x], lambda: T.take(x, idx, axis=0)

    def batched_matmul(rng):
        a = leaf(rng.normal(size=(2, 3, 4)))
        b = leaf(rng.normal(size=(4, 5)))
        return [a, b], lambda: T.matmul(a, b)

    return {
        "matmul": binary(T.matmul, (3, 4), (4, 2)),
        "matmul(batched)": weighted(lambda y: y, batched_matmul),
        "transpose": unary(T.transpose, shape=(2, 3, 4)),
        "reshape": unary(lambda x: T.reshape(x, (4, 3)), shape=(3, 4)),
        "expand": unary(lambda x: T.expand(x, (2, 3, 4)), shape=(1, 4)),
        "take": weighted(lambda y: y, take),
        "concat": weighted(lambda y: y, concat),
        "add": binary(T.add),
        "sub": binary(T.sub),
        "mul": binary(T.mul),
        "div": binary(T.div, sampler_b=_away_from_zero),
        "scale": unary(lambda x: T.scale(x, -1.7)),
        "exp": unary(T.exp),
        "log": unary(T.log, sampler=lambda rng, s: rng.uniform(0.2, 3.0, size=s)),
        "relu": unary(T.relu, sampler=_away_from_zero),
        "hinge": unary(T.hinge, sampler=_away_from_zero),
        "softplus": unary(T.softplus, sampler=lambda rng, s: 4.0 * rng.normal(size=s)),
        "sum": unary(lambda x: T.sum(x, axis=1)),
        "mean": unary(lambda x: T.mean(x, axis=0)),
        "l2_norm_rows": unary(T.l2_norm_rows),
        "softmax_rows": unary(T.softmax_rows),
        "conv1x1": weighted(lambda y: y, conv1),
        "conv3x3_circular": weighted(lambda y: y, conv3),
        "conv3x3_circular(wide)": weighted(lambda y: y, conv3_wide),
    }


def op_gradient_errors(instances: int = 20, seed: int = 0) -> dict:
    """op name -> max relative error over ``instances`` random cases."""
    out = {}
    for k, (name, make) in enumerate(_op_cases().items()):
        worst = 0.0
        for i in range(instances):
            fn, inputs = make(np.random.default_rng([seed, k, i]))
            worst = max(worst, T.gradient_check(fn, inputs))
        out[name] = worst
    return out


def _tiny_objective(rng, kind: str):
    """Small backbone + A-grouping + combined loss over a 4-image batch."""
    cfg = BackboneConfig(1, (2, 3), 6)
    backbone = init_backbone(int(rng.integers(2**31)), cfg)
    head = init_a_grouping(int(rng.integers(2**31)), 3, 2, 3, 2)
    for t in list(backbone.named_parameters().values()) + list(head.named_parameters().values()):
        t.data[...] = t.data + 0.3 * rng.normal(size=t.shape)
    images = Tensor(rng.uniform(0, 1, size=(4, 6, 6, 1)))
    labels = np.array([0, 0, 1, 1])
    metric = MetricLossParams.defaults(kind)
    eta = Tensor(metric.eta, requires_grad=True) if kind == "margin" else None
    weights = [t for n, t in {**backbone.named_parameters(), **head.named_parameters()}.items()
               if not n.endswith("bias")]
    params = list(backbone.named_parameters().values()) + list(head.named_parameters().values())
    if eta is not None:
        params.append(eta)

    def fn():
        emb, _ = a_grouping_forward(backbone_forward(images, backbone), head)
        return total_loss(emb, labels, metric, eta=eta, diversity=DiversityLossParams(),
                          lambda1=0.5, lambda2=0.01, weights=weights).total

    return fn, params


def composed_gradient_errors(instances: int = 20, seed: int = 0) -> dict:
    """metric kind -> max relative error of the full objective's gradient.

    Instances whose graph sits within ``KINK_MARGIN`` of a relu/hinge kink are
    redrawn, since central differences straddling a kink are meaningless."""
    out = {}
    for k, kind in enumerate(("contrastive", "binomial", "margin")):
        worst, done, draw = 0.0, 0, 0
        while done < instances:
            rng = np.random.default_rng([seed, 100 + k, draw])
            draw += 1
            fn, params = _tiny_objective(rng, kind)
            if T.kink_distance(fn()) < KINK_MARGIN:
                continue
            worst = max(worst, T.gradient_check(fn, params))
            done += 1
        out[kind] = worst
    return out


# ---------------------------------------------------------------------------
# invariances
# ---------------------------------------------------------------------------

def _random_head(rng, channels=32, key_dim=16, value_dim=16, groups=4):
    head = init_a_grouping(int(rng.integers(2**31)), channels, key_dim, value_dim, groups)
    head.queries.data[...] = rng.normal(size=head.queries.shape)
    return head


def permutation_invariance(instances: int = 100, seed: int = 0) -> tuple:
    """(max embedding diff, max attention diff) between a feature map and its
    spatially permuted copy, over random instances with H=W=7, C=32, P=4."""
    emb_diff = attn_diff = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, 7, i])
        head = _random_head(rng)
        feat = rng.normal(size=(7, 7, 32))
        perm = rng.permutation(49)
        shuffled = feat.reshape(49, 32)[perm].reshape(7, 7, 32)
        with T.no_grad():
            f0, a0 = a_grouping_forward(Tensor(feat), head)
            f1, a1 = a_grouping_forward(Tensor(shuffled), head)
        emb_diff = max(emb_diff, float(np.abs(f0.data - f1.data).max()))
        attn_diff = max(attn_diff, float(np.abs(a0.data[:, perm] - a1.data).max()))
    return emb_diff, attn_diff


def attention_row_sum_error(instances: int = 20, seed: int = 0) -> float:
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, 8, i])
        head = _random_head(rng)
        with T.no_grad():
            _, a = a_grouping_forward(Tensor(rng.normal(size=(7, 7, 32))), head)
        worst = max(worst, float(np.abs(a.data.sum(axis=-1) - 1.0).max()))
    return worst


def translation_invariance(instances: int = 50, seed: int = 0, size: int = 16,
                           widths=(4, 8), groups: int = 4) -> tuple:
    """(max embedding diff, max heatmap diff) for cyclically shifted images
    through backbone + A-grouping."""
    from .interpret import group_heatmaps

    emb_diff = map_diff = 0.0
    cfg = BackboneConfig(1, widths, size)
    for i in range(instances):
        rng = np.random.default_rng([seed, 9, i])
        backbone = init_backbone(int(rng.integers(2**31)), cfg)
        head = _random_head(rng, channels=widths[-1], key_dim=8, value_dim=8, groups=groups)
        image = rng.uniform(0, 1, size=(size, size, 1))
        dy, dx = (int(v) for v in rng.integers(0, size, size=2))
        shifted = np.roll(image, (dy, dx), axis=(0, 1))
        with T.no_grad():
            f0, a0 = a_grouping_forward(backbone_forward(Tensor(np.stack([image, shifted])), backbone), head)
        emb_diff = max(emb_diff, float(np.abs(f0.data[0] - f0.data[1]).max()))
        h0 = group_heatmaps(a0.data[0], (size, size), (size, size))
        h1 = group_heatmaps(a0.data[1], (size, size), (size, size))
        map_diff = max(map_diff, float(np.abs(np.roll(h0, (dy, dx), axis=(1, 2)) - h1).max()))
    return emb_diff, map_diff


# ---------------------------------------------------------------------------
# scalar loss oracles
# ---------------------------------------------------------------------------

def loss_oracle_cases() -> list:
    """(name, computed, expected) for the documented scalar examples."""
    bin_p = MetricLossParams.defaults("binomial")
    div_p = DiversityLossParams()

    def scalar(t):
        return float(T.sum(t).item())

    cases = [
        ("contrastive l=1 d=0.3", scalar(contrastive_loss(Tensor([0.3]), [1.0])), 0.3),
        ("contrastive l=0 d=1.5", scalar(contrastive_loss(Tensor([1.5]), [0.0], 1.0)), 0.0),
        ("contrastive l=0 d=0.4", scalar(contrastive_loss(Tensor([0.4]), [0.0], 1.0)), oracles.contrastive(0.4, 0)),
        ("binomial s=m l=1", scalar(binomial_deviance_loss(Tensor([0.5]), [1.0], bin_p)), math.log(2.0)),
        ("binomial s=m l=0", scalar(binomial_deviance_loss(Tensor([0.5]), [0.0], bin_p)), math.log(2.0)),
        ("binomial s=0.9 l=1", scalar(binomial_deviance_loss(Tensor([0.9]), [1.0], bin_p)), math.log1p(math.exp(-20.0))),
        ("margin l=1 d=1.0", scalar(margin_loss(Tensor([1.0]), [1.0], 0.2, 1.2)), 0.0),
        ("margin l=0 d=1.4", scalar(margin_loss(Tensor([1.4]), [0.0], 0.2, 1.2)), 0.0),
        ("margin l=1 d=1.3", scalar(margin_loss(Tensor([1.3]), [1.0], 0.2, 1.2)), oracles.margin(1.3, 1)),
        ("diversity s=mu", scalar(diversity_loss(Tensor([0.5]), div_p)), math.log(2.0)),
        ("diversity s=-1", scalar(diversity_loss(Tensor([-1.0]), div_p)), math.log1p(math.exp(-3.0))),
        ("diversity s=1", scalar(diversity_loss(Tensor([1.0]), div_p)), math.log1p(math.exp(1.0))),
    ]
    eta = Tensor(1.2, requires_grad=True)
    T.backward(T.sum(margin_loss(Tensor([1.3]), [1.0], 0.2, eta)))
    cases.append(("margin d(loss)/d(eta)", float(eta.grad), -1.0))
    return cases


def loss_oracle_error() -> tuple:
    errs = [(abs(got - want), name) for name, got, want in loss_oracle_cases()]
    return max(errs)


# ---------------------------------------------------------------------------
# metric oracles
# ---------------------------------------------------------------------------

def _metric_instance(rng):
    n = int(rng.integers(4, 21))
    dim = int(rng.integers(2, 6))
    n_classes = int(rng.integers(2, max(3, n // 2) + 1))
    labels = rng.integers(0, n_classes, size=n)
    if rng.random() < 0.5:
        x = rng.integers(-2, 3, size=(n, dim)).astype(np.float64)  # forces distance ties
    else:
        x = rng.normal(size=(n, dim))
    return x, labels


def metric_oracle_errors(instances: int = 200, seed: int = 0) -> dict:
    worst = {"recall": 0.0, "nmi": 0.0, "f1": 0.0, "map": 0.0}
    # random instances often contain singleton classes; the skip warning is expected here
    level = ev.logger.level
    ev.logger.setLevel(logging.ERROR)
    try:
        _metric_oracle_loop(instances, seed, worst)
    finally:
        ev.logger.setLevel(level)
    return worst


def _metric_oracle_loop(instances: int, seed: int, worst: dict) -> None:
    for i in range(instances):
        rng = np.random.default_rng([seed, 11, i])
        x, labels = _metric_instance(rng)
        lab = labels.tolist()
        for k in range(1, min(4, len(x) - 1) + 1):
            worst["recall"] = max(worst["recall"], abs(ev.recall_at_k(x, labels, k) - oracles.recall_at_k(x, lab, k)))
        n_clusters = len(set(lab))
        assign = ev.kmeans(x, n_clusters, seed=i)
        ref_assign = oracles.kmeans(x.tolist(), n_clusters, seed=i)
        if assign.tolist() != ref_assign:
            worst["nmi"] = max(worst["nmi"], 1.0)
        worst["nmi"] = max(worst["nmi"], abs(ev.nmi(x, labels, n_clusters, seed=i) - oracles.nmi(ref_assign, lab)))
        worst["f1"] = max(worst["f1"], abs(ev.pairwise_f1(labels, assign) - oracles.pairwise_f1(lab, ref_assign)))
        if any(lab.count(c) > 1 for c in set(lab)):
            worst["map"] = max(worst["map"], abs(ev.map_at_r(x, labels) - oracles.map_at_r(x, lab)))


def perfect_case_values() -> tuple:
    """(NMI of a perfect clustering, mAP of perfectly separated classes)."""
    labels = np.repeat(np.arange(4), 3)
    x = np.eye(4)[labels] * 10.0 + 0.01 * np.tile(np.arange(3), 4)[:, None]
    return ev.nmi(x, labels, 4, seed=0), ev.map_at_r(x, labels)


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------

def _timed(fn: Callable) -> tuple:
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def run_selfcheck(fault: Optional[str] = None, quick: bool = False) -> list:
    """Run every check; ``fault`` optionally breaks the head for the duration."""
    scale = 4 if quick else 1
    results = []
    ctx = inject_fault(fault) if fault else contextlib.nullcontext()
    with ctx:
        ops, dt = _timed(lambda: op_gradient_errors(max(2, 20 // scale)))
        name, err = max(ops.items(), key=lambda kv: kv[1])
        results.append(CheckResult("gradient/ops", err <= OP_TOL, err, OP_TOL, f"worst={name}", dt))

        comp, dt = _timed(lambda: composed_gradient_errors(max(2, 20 // scale)))
        name, err = max(comp.items(), key=lambda kv: kv[1])
        results.append(CheckResult("gradient/objective", err <= COMPOSED_TOL, err, COMPOSED_TOL, f"worst={name}", dt))

        (emb, attn), dt = _timed(lambda: permutation_invariance(100 // scale))
        results.append(CheckResult("permutation/embedding", emb <= PERM_EMB_TOL, emb, PERM_EMB_TOL, "", dt))
        results.append(CheckResult("permutation/attention", attn <= PERM_ATTN_TOL, attn, PERM_ATTN_TOL, "", 0.0))

        rows, dt = _timed(attention_row_sum_error)
        results.append(CheckResult("attention/row-sum", rows <= ROW_SUM_TOL, rows, ROW_SUM_TOL, "", dt))

        (emb, hm), dt = _timed(lambda: translation_invariance(50 // scale))
        results.append(CheckResult("translation/embedding", emb <= SHIFT_EMB_TOL, emb, SHIFT_EMB_TOL, "", dt))
        results.append(CheckResult("translation/heatmap", hm <= SHIFT_MAP_TOL, hm, SHIFT_MAP_TOL, "", 0.0))

        (err, name), dt = _timed(loss_oracle_error)
        results.append(CheckResult("oracle/losses", err <= ORACLE_TOL, err, ORACLE_TOL, f"worst={name}", dt))

        metrics, dt = _timed(lambda: metric_oracle_errors(200 // scale))
        name, err = max(metrics.items(), key=lambda kv: kv[1])
        results.append(CheckResult("oracle/metrics", err <= ORACLE_TOL, err, ORACLE_TOL, f"worst={name}", dt))

        (nmi_val, map_val), dt = _timed(perfect_case_values)
        bad = abs(nmi_val - 1.0) + abs(map_val - 1.0)
        results.append(CheckResult("oracle/perfect-cases", nmi_val == 1.0 and map_val == 1.0, bad, 0.0, "", dt))
    return results


def format_table(results: list) -> str:
    return "\n".join(r.line() for r in results) + "\n"
