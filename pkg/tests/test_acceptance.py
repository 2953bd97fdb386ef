"""Acceptance gate: one test per criterion, each at its stated tolerance and budget.

Criteria 6-8 train the desk-scale experiment (six 30-epoch runs, repeated once
for the reproducibility check, plus one diversity ablation) and take roughly
half an hour on one core.
"""

import time

import numpy as np
import pytest

from agmt.data import split_zero_shot
from agmt.experiment import compare_groupings, desk_config, load_dataset, run_once
from agmt.interpret import (
    bilinear_upsample,
    export_overlay,
    fold_attention,
    group_heatmaps,
    select_top_exemplars,
    unfold_tensor,
)
from agmt.model import Model
from agmt.selfcheck import (
    COMPOSED_TOL,
    OP_TOL,
    ORACLE_TOL,
    PERM_ATTN_TOL,
    PERM_EMB_TOL,
    SHIFT_EMB_TOL,
    SHIFT_MAP_TOL,
    composed_gradient_errors,
    loss_oracle_error,
    metric_oracle_errors,
    op_gradient_errors,
    perfect_case_values,
    permutation_invariance,
    translation_invariance,
)

pytestmark = pytest.mark.acceptance

# recorded oracle run of criterion 6 (3 seeds, desk configuration); the margins
# asserted below are the ones stated by the criterion
RECORDED = {"a_mean": 0.6492, "n_mean": 0.4948, "chance": 0.0493, "untrained": 0.2229}
MIN_GAP_OVER_CHANCE = 0.20


def _timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def test_c1_permutation_invariance(report_criterion):
    (emb, attn), dt = _timed(lambda: permutation_invariance(instances=100))
    ok = emb <= PERM_EMB_TOL and attn <= PERM_ATTN_TOL and dt < 5.0
    report_criterion(1, "permutation invariance", ok,
                     f"embedding {emb:.2e} (tol {PERM_EMB_TOL:.0e}), attention {attn:.2e}, {dt:.1f}s (< 5s)")
    assert emb <= PERM_EMB_TOL
    assert attn <= PERM_ATTN_TOL
    assert dt < 5.0


def test_c2_translation_invariance(report_criterion):
    (emb, heat), dt = _timed(lambda: translation_invariance(instances=50))
    ok = emb <= SHIFT_EMB_TOL and heat <= SHIFT_MAP_TOL and dt < 30.0
    report_criterion(2, "translation invariance", ok,
                     f"embedding {emb:.2e} (tol {SHIFT_EMB_TOL:.0e}), heatmap {heat:.2e} (tol {SHIFT_MAP_TOL:.0e}), "
                     f"{dt:.1f}s (< 30s)")
    assert emb <= SHIFT_EMB_TOL
    assert heat <= SHIFT_MAP_TOL
    assert dt < 30.0


def test_c3_gradient_integrity(report_criterion):
    (ops, comp), dt = _timed(lambda: (op_gradient_errors(instances=20), composed_gradient_errors(instances=20)))
    worst_op = max(ops, key=ops.get)
    worst_comp = max(comp, key=comp.get)
    ok = ops[worst_op] <= OP_TOL and comp[worst_comp] <= COMPOSED_TOL and dt < 120.0
    report_criterion(3, "gradient integrity", ok,
                     f"{len(ops)} ops worst {worst_op} {ops[worst_op]:.2e} (tol {OP_TOL:.0e}); "
                     f"composed worst {worst_comp} {comp[worst_comp]:.2e} (tol {COMPOSED_TOL:.0e}); {dt:.1f}s (< 120s)")
    assert set(comp) == {"contrastive", "binomial", "margin"}
    assert ops[worst_op] <= OP_TOL
    assert comp[worst_comp] <= COMPOSED_TOL
    assert dt < 120.0


def test_c4_loss_oracles(report_criterion):
    err, name = loss_oracle_error()
    report_criterion(4, "loss oracles", err <= ORACLE_TOL, f"worst {name} {err:.2e} (tol {ORACLE_TOL:.0e})")
    assert err <= ORACLE_TOL


def test_c5_metric_oracles(report_criterion):
    errs = metric_oracle_errors(instances=200)
    nmi_val, map_val = perfect_case_values()
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= ORACLE_TOL and nmi_val == 1.0 and map_val == 1.0
    report_criterion(5, "metric oracles", ok,
                     f"worst {worst} {errs[worst]:.2e} (tol {ORACLE_TOL:.0e}); perfect NMI {nmi_val!r}, mAP {map_val!r}")
    assert errs[worst] <= ORACLE_TOL
    assert nmi_val == 1.0
    assert map_val == 1.0


@pytest.fixture(scope="module")
def desk_runs():
    config = desk_config()
    comparison, dt = _timed(lambda: compare_groupings(config, seeds=(0, 1, 2)))
    return config, comparison, dt


def test_c6_grouping_benefit(desk_runs, report_criterion):
    config, comp, dt = desk_runs
    untrained = float(np.mean([r.initial_recall for r in comp.a_runs]))
    baseline = max(comp.chance, untrained)
    gap = comp.a_mean - comp.n_mean
    ok = gap > 0 and comp.a_mean - baseline >= MIN_GAP_OVER_CHANCE and dt < 900.0
    report_criterion(6, "grouping benefit", ok,
                     f"R@1 A {comp.a_mean:.4f} vs N {comp.n_mean:.4f} (gap {gap:+.4f}, need > 0); "
                     f"chance {comp.chance:.4f}, untrained {untrained:.4f} (A - baseline "
                     f"{comp.a_mean - baseline:+.4f}, need >= {MIN_GAP_OVER_CHANCE}); {dt:.0f}s (< 900s)")
    print(comp.summary())
    assert gap > 0
    assert comp.a_mean - baseline >= MIN_GAP_OVER_CHANCE
    assert dt < 900.0


def test_c7_diversity_effect(desk_runs, report_criterion):
    config, comp, _ = desk_runs
    trained = comp.a_runs[0]
    assert trained.config.loss.lambda1 > 0
    ablation = run_once(trained.config.replace(**{"loss.lambda1": 0.0}))
    ok = trained.cosine_final < trained.cosine_initial and trained.cosine_final < ablation.cosine_final
    report_criterion(7, "diversity effect", ok,
                     f"cos init {trained.cosine_initial:.6f}, trained {trained.cosine_final:.6f}, "
                     f"lambda1=0 ablation {ablation.cosine_final:.6f}")
    assert trained.cosine_final < trained.cosine_initial
    assert trained.cosine_final < ablation.cosine_final


def test_c8_reproducibility(desk_runs, report_criterion):
    config, first, _ = desk_runs
    second = compare_groupings(config, seeds=(0, 1, 2))
    pairs = list(zip(first.a_runs + first.n_runs, second.a_runs + second.n_runs))
    same_ckpt = all(a.checkpoint == b.checkpoint for a, b in pairs)
    same_report = all(a.report.to_text() == b.report.to_text() for a, b in pairs)
    report_criterion(8, "reproducibility", same_ckpt and same_report,
                     f"{len(pairs)} runs; checkpoints identical={same_ckpt}, reports identical={same_report}")
    assert same_ckpt
    assert same_report


def test_c9_interpretability_pipeline(tmp_path, report_criterion):
    config = desk_config()
    _, test_set = split_zero_shot(load_dataset(config), config.data.train_fraction, config.data.seed)
    model = Model(config.model_config(), config.metric_params(), seed=0)
    images = test_set.images[:64]
    _, attention = model.embed(images)
    hw = images.shape[1:3]

    tensor = np.random.default_rng(0).normal(size=(*hw, 5))
    round_trip = (np.array_equal(fold_attention(unfold_tensor(tensor), *hw), tensor)
                  and all(np.array_equal(unfold_tensor(fold_attention(a, *hw)), a) for a in attention))

    constant = all(np.array_equal(bilinear_upsample(np.full((h, w), v), 2 * h + 1, 3 * w), np.full((2 * h + 1, 3 * w), v))
                   for h, w, v in ((7, 7, 0.3), (8, 8, 1 / 64), (1, 3, 2.5)))

    oracle_ok = True
    for group in range(attention.shape[1]):
        order, _ = select_top_exemplars(attention, group, count=12)
        oracle = sorted(range(len(attention)), key=lambda i: (-max(attention[i, group].tolist()), i))[:12]
        oracle_ok &= order.tolist() == oracle

    heat = group_heatmaps(attention[int(order[0])], hw, hw)[0]
    first = export_overlay(images[int(order[0])], heat, tmp_path / "a.ppm").read_bytes()
    second = export_overlay(images[int(order[0])], heat, tmp_path / "b.ppm").read_bytes()
    deterministic = first == second

    ok = round_trip and constant and oracle_ok and deterministic
    report_criterion(9, "interpretability pipeline", ok,
                     f"fold round-trip {round_trip}, constant upsample {constant}, "
                     f"top-12 vs sort oracle {oracle_ok}, byte-identical export {deterministic}")
    assert round_trip and constant and oracle_ok and deterministic
