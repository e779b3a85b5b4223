"""Acceptance suite: one test per shipped guarantee.

Criteria 5-7 meta-train real checkpoints on a held-out synthetic family
(velocities within +/-2 px/frame at 32x32) and take several minutes; the
whole module is budgeted well under half an hour on one desktop core.
Each test prints its measured numbers before asserting, so a failing run
still shows the margins: run with `pytest tests/test_acceptance.py -v -s`.
"""

import time

import numpy as np
import pytest

from conftest import MICRO_ARCH, fd_param_gradients, rel_error
from metainterp import evaluate
from metainterp.adapt import interpolate_middles
from metainterp.cli import main as cli_main
from metainterp.evaluate import (
    ablate_inner_steps,
    ablate_lr,
    feasibility_curve,
    mean_psnr,
    psnr,
    write_k_grid,
    write_lr_row,
)
from metainterp.model import (
    Arch,
    forward,
    init_params,
    make_leaves,
    predict_tensor,
    save_checkpoint,
)
from metainterp.tasks import make_task, save_sequence, synth_sequence
from metainterp.tensor import backward_gradients
from metainterp.training import (
    AdaptConfig,
    MetaConfig,
    inner_adapt,
    inner_loss_value,
    meta_train,
    narrow_triplets,
    outer_step,
    pretrain,
    query_loss_value,
    retrain,
    stacked_loss,
)

GRAD_TOL = 1e-6

# Desk-scale experiment: small enough to train on one core in minutes,
# large enough that test-time adaptation has room to matter.
SUITE_ARCH = Arch(channels=3, widths=(8, 16, 32), taps=5)
VELOCITY = 2.0  # px/frame, sampled uniformly in +/- this
N_TRAIN, N_VAL, N_TEST = 40, 8, 50
PRETRAIN_LR, PRETRAIN_STEPS = 1e-3, 600
OUTER_LR = 2e-3
META_STEPS = 2000  # criterion 5 requires >= 2000
INNER_LR = 0.1
SUITE_CFG = AdaptConfig(inner_lr=INNER_LR, steps=1, optimizer="sgd")
ABLATION_STEPS = 1000  # equal budget for every alpha cell
ABLATION_RATES = (0.02, 0.1, 0.2)


def _family(count: int, family_seed: int, length: int = 7):
    r = np.random.default_rng(family_seed)
    return [
        synth_sequence(
            family_seed * 1000 + i,
            (r.uniform(-VELOCITY, VELOCITY), r.uniform(-VELOCITY, VELOCITY)),
            length=length,
        )
        for i in range(count)
    ]


@pytest.fixture(scope="module")
def datasets():
    train = _family(N_TRAIN, 1)
    val = _family(N_VAL, 2)
    test = _family(N_TEST, 3)
    tasks = [make_task(seq, 0, source=f"seq{i:03d}") for i, seq in enumerate(test)]
    return {"train": train, "val": val, "tasks": tasks}


@pytest.fixture(scope="module")
def suite(datasets):
    """Baseline, re-trained, and meta-trained checkpoints plus build time."""
    started = time.perf_counter()
    init = init_params(SUITE_ARCH, seed=0)
    baseline = pretrain(
        init, narrow_triplets(datasets["train"]), lr=PRETRAIN_LR,
        steps=PRETRAIN_STEPS, batch=4, seed=0,
    )
    retrained = retrain(
        baseline, datasets["train"], lr=OUTER_LR, steps=META_STEPS, batch=4, seed=0
    )
    meta, report = meta_train(
        baseline, datasets["train"], datasets["val"], SUITE_CFG,
        MetaConfig(outer_lr=OUTER_LR, outer_steps=META_STEPS, batch=4, seed=0,
                   val_interval=50, patience=8),
    )
    return {
        "baseline": baseline,
        "retrained": retrained,
        "meta": meta,
        "report": report,
        "build_s": time.perf_counter() - started,
    }


# -- micro-model gradient oracle (criteria 1 and 2) ---------------------------

_micro_cache: dict = {}


def _micro_oracle():
    """Finite-difference gradients of the inner and outer losses, cached.

    Runs at a briefly pretrained point rather than a raw random init: that
    is where the update rules operate, and every tensor's gradient is then
    large enough for the fixed 1e-6 difference step to resolve cleanly.
    """
    if _micro_cache:
        return _micro_cache
    micro_seqs = [
        synth_sequence(60 + i, (0.25 * i - 0.5, 0.5 - 0.2 * i), size=(8, 8), channels=1)
        for i in range(6)
    ]
    params = pretrain(
        init_params(MICRO_ARCH, seed=11), narrow_triplets(micro_seqs),
        lr=3e-3, steps=100, batch=4, seed=0,
    )
    rng = np.random.default_rng(5)
    frames = [rng.random((1, 8, 8)) for _ in range(7)]
    task = make_task(frames, 0)
    alpha = 0.05

    started = time.perf_counter()
    fd_inner = fd_param_gradients(lambda p: inner_loss_value(p, task), params)
    leaves = make_leaves(params)
    analytic_inner = backward_gradients(
        stacked_loss(leaves, MICRO_ARCH, task.support), leaves
    )
    # First-order rule: the outer gradient is taken at the adapted copy.
    adapted = inner_adapt(params, task, AdaptConfig(inner_lr=alpha, steps=1))
    fd_outer = fd_param_gradients(lambda p: query_loss_value(p, task), adapted)
    leaves = make_leaves(adapted)
    analytic_outer = backward_gradients(
        stacked_loss(leaves, MICRO_ARCH, (task.query,)), leaves
    )
    _micro_cache.update(
        params=params, task=task, alpha=alpha, adapted=adapted,
        fd_inner=fd_inner, analytic_inner=analytic_inner,
        fd_outer=fd_outer, analytic_outer=analytic_outer,
        elapsed_s=time.perf_counter() - started,
    )
    return _micro_cache


def test_criterion_01_gradient_fidelity():
    """Every micro-model parameter gradient of both losses matches FD."""
    oracle = _micro_oracle()
    worst_in = max(
        rel_error(oracle["analytic_inner"][n], oracle["fd_inner"][n])
        for n in oracle["fd_inner"]
    )
    worst_out = max(
        rel_error(oracle["analytic_outer"][n], oracle["fd_outer"][n])
        for n in oracle["fd_outer"]
    )
    print(
        f"\ncriterion 1: inner-loss rel err {worst_in:.2e}, "
        f"outer-loss rel err {worst_out:.2e}, runtime {oracle['elapsed_s']:.1f}s"
    )
    assert worst_in < GRAD_TOL
    assert worst_out < GRAD_TOL
    assert oracle["elapsed_s"] < 30.0


def test_criterion_02_update_rule_oracles():
    """Inner step equals the FD rule; outer gradients add exactly."""
    oracle = _micro_oracle()
    params, task, alpha = oracle["params"], oracle["task"], oracle["alpha"]

    adapted = inner_adapt(params, task, AdaptConfig(inner_lr=alpha, steps=1))
    worst = max(
        rel_error(adapted[n], params[n] - alpha * oracle["fd_inner"][n])
        for n in params.tensors
    )
    print(f"\ncriterion 2: inner step vs FD rule rel err {worst:.2e}")
    assert worst < GRAD_TOL

    # Duplicated task: the summed outer gradient is exactly twice one task's.
    beta = 0.01
    leaves = make_leaves(oracle["adapted"])
    grads = backward_gradients(
        stacked_loss(leaves, MICRO_ARCH, (task.query,)), leaves
    )
    acfg = AdaptConfig(inner_lr=alpha, steps=1)
    mcfg = MetaConfig(outer_lr=beta, outer_steps=1, batch=1)
    doubled, _ = outer_step(params, [task, task], acfg, mcfg)
    for name in params.tensors:
        assert np.array_equal(doubled[name], params[name] - beta * (2.0 * grads[name]))

    # Exact identities when adaptation is switched off.
    for off in (AdaptConfig(inner_lr=0.0, steps=1), AdaptConfig(inner_lr=alpha, steps=0)):
        same = inner_adapt(params, task, off)
        assert all(np.array_equal(same[n], params[n]) for n in params.tensors)


def test_criterion_03_degeneracy_identities(suite, datasets, tmp_path):
    """k=0 evaluation is bit-identical to unadapted; --no-adapt == --alpha 0."""
    meta = suite["meta"]
    off = AdaptConfig(inner_lr=INNER_LR, steps=0)
    for task in datasets["tasks"][:5]:
        plain = forward(meta, task.query.input_a, task.query.input_b)
        via_k0 = forward(
            inner_adapt(meta, task, off), task.query.input_a, task.query.input_b
        )
        assert plain.tobytes() == via_k0.tobytes()

    ckpt = tmp_path / "meta.ckpt"
    save_checkpoint(meta, ckpt)
    seq_dir = tmp_path / "seq"
    save_sequence(_family(1, 77)[0], seq_dir)
    out_a, out_b = tmp_path / "noadapt", tmp_path / "alpha0"
    assert cli_main(["interpolate", "--ckpt", str(ckpt), "--seq", str(seq_dir),
                     "--out", str(out_a), "--no-adapt"]) == 0
    assert cli_main(["interpolate", "--ckpt", str(ckpt), "--seq", str(seq_dir),
                     "--out", str(out_b), "--alpha", "0"]) == 0
    frames_a = sorted(out_a.glob("*.ppm"))
    frames_b = sorted(out_b.glob("*.ppm"))
    assert frames_a and len(frames_a) == len(frames_b)
    for fa, fb in zip(frames_a, frames_b):
        assert fa.read_bytes() == fb.read_bytes()
    print("\ncriterion 3: k=0 and --no-adapt identities are byte-exact")


def test_criterion_04_constant_preservation(suite):
    """forward(c, c) = c for 100 random constants; taps sum to one."""
    rng = np.random.default_rng(40)
    worst = 0.0
    for params in (init_params(SUITE_ARCH, seed=4), suite["meta"]):
        for c in rng.random(50):
            frame = np.full((3, 32, 32), c)
            worst = max(worst, float(np.abs(forward(params, frame, frame) - c).max()))
    detail = {}
    leaves = make_leaves(suite["meta"], requires_grad=False)
    predict_tensor(
        leaves, SUITE_ARCH, rng.random((3, 32, 32)), rng.random((3, 32, 32)),
        detail=detail,
    )
    tap_err = max(
        float(np.abs(detail[h].sum(axis=0) - 1.0).max())
        for h in ("head_va", "head_ha", "head_vb", "head_hb")
    )
    print(f"\ncriterion 4: constant drift {worst:.2e}, tap-sum error {tap_err:.2e}")
    assert worst < 1e-9
    assert tap_err < 1e-12


def test_criterion_05_adaptation_benefit(suite, datasets):
    """One adapted gradient step beats unadapted and naive-adapted baselines."""
    tasks = datasets["tasks"]
    assert len(tasks) >= 50
    started = time.perf_counter()
    baseline_un = mean_psnr(suite["baseline"], tasks)
    ret_un = mean_psnr(suite["retrained"], tasks)
    ret_naive = mean_psnr(suite["retrained"], tasks, SUITE_CFG)
    meta_un = mean_psnr(suite["meta"], tasks)
    meta_ad = mean_psnr(suite["meta"], tasks, SUITE_CFG)
    total_s = suite["build_s"] + (time.perf_counter() - started)
    print(
        f"\ncriterion 5 (PSNR dB over {len(tasks)} tasks): "
        f"baseline {baseline_un:.3f} | retrained {ret_un:.3f} "
        f"(naive k=1: {ret_naive:.3f}) | meta unadapted {meta_un:.3f} "
        f"adapted {meta_ad:.3f}\n"
        f"  margins: adapted-vs-unadapted {meta_ad - meta_un:+.3f}, "
        f"adapted-vs-naive {meta_ad - ret_naive:+.3f}, "
        f"adapted-vs-retrained {meta_ad - ret_un:+.3f}; "
        f"train+eval {total_s / 60:.1f} min"
    )
    assert meta_ad > meta_un
    assert meta_ad > ret_naive
    assert meta_ad > ret_un  # the headline three-way comparison direction
    assert total_s < 30 * 60

    # Meta-training strictly reduces held-out post-adaptation loss relative
    # to the same model before meta-training.
    from metainterp.training import validation_loss

    post_meta = validation_loss(suite["meta"], tasks, SUITE_CFG)
    post_base = validation_loss(suite["baseline"], tasks, SUITE_CFG)
    print(
        f"  post-adaptation loss: meta {post_meta:.5f} vs pre-meta {post_base:.5f}"
    )
    assert post_meta < post_base

    # Whole-sequence doubling benefits as well: interpolate a low-rate
    # sequence and score the synthesized middles against full-rate truth.
    gains = []
    for seed in (301, 302, 303):
        full = synth_sequence(seed, (1.1, -0.7), length=13)
        low = full[::2]
        truth = full[1::2]
        adapted = interpolate_middles(suite["meta"], low, SUITE_CFG, adapt=True)
        plain = interpolate_middles(suite["meta"], low, SUITE_CFG, adapt=False)
        gains.append(
            np.mean([psnr(a, t) for a, t in zip(adapted, truth)])
            - np.mean([psnr(p, t) for p, t in zip(plain, truth)])
        )
    print(f"  sequence-doubling adapted-minus-plain: {np.mean(gains):+.3f} dB")
    assert np.mean(gains) >= 0.0


def test_criterion_06_alpha_ablation_direction(suite, datasets, tmp_path):
    """Every tested inner rate scores at least the zero-rate cell."""
    tasks = datasets["tasks"]
    cell_zero = retrain(
        suite["baseline"], datasets["train"], lr=OUTER_LR, steps=ABLATION_STEPS,
        batch=4, seed=0,
    )
    checkpoints = [(0.0, cell_zero)]
    for rate in ABLATION_RATES:
        meta, _ = meta_train(
            suite["baseline"], datasets["train"], datasets["val"],
            AdaptConfig(inner_lr=rate, steps=1),
            MetaConfig(outer_lr=OUTER_LR, outer_steps=ABLATION_STEPS, batch=4,
                       seed=0, val_interval=50, patience=8),
        )
        checkpoints.append((rate, meta))
    cells = ablate_lr(checkpoints, tasks, steps=1)
    write_lr_row(tmp_path / "lr_ablation.csv", cells)
    header = (tmp_path / "lr_ablation.csv").read_text().splitlines()[0]
    assert header.split(",") == [f"alpha={rate:g}" for rate, _ in cells]
    zero_value = cells[0][1]
    report = ", ".join(f"alpha={r:g}: {v:.3f}" for r, v in cells)
    print(f"\ncriterion 6: {report}")
    for rate, value in cells[1:]:
        assert value >= zero_value, f"alpha={rate} scored below the zero cell"


def test_criterion_07_inner_step_grid(suite, datasets, tmp_path):
    """Step-count grid has the required shape; k=0 equals re-trained."""
    tasks = datasets["tasks"]
    ks = (0, 1, 2, 3, 5)
    grid = ablate_inner_steps(
        suite["meta"], suite["retrained"], tasks, inner_lr=INNER_LR, ks=ks
    )
    path = tmp_path / "k_ablation.csv"
    write_k_grid(path, ks, grid)
    lines = path.read_text().splitlines()
    assert lines[0] == "method,k=0,k=1,k=2,k=3,k=5"
    assert len(lines) == 4
    assert grid["naive_finetune"][0] == mean_psnr(suite["retrained"], tasks)
    assert grid["meta"][0] == mean_psnr(suite["meta"], tasks)
    gain_by_k = ", ".join(f"k={k}: {g:+.3f}" for k, g in zip(ks, grid["gain"]))
    trend = "declining" if all(
        a >= b for a, b in zip(grid["gain"][1:], grid["gain"][2:])
    ) else "non-monotone"
    print(f"\ncriterion 7: meta-minus-naive gain {gain_by_k} ({trend} beyond k=1)")


def test_criterion_08_feasibility_gain(suite):
    """Naive fine-tuning reaches +0.1 dB on a large-motion sequence."""
    seq = synth_sequence(777, (1.8, 0.7))
    series = feasibility_curve(suite["baseline"], seq, lr=1e-3, steps=200)
    peak = max(series)
    print(
        f"\ncriterion 8: peak gain {peak:+.3f} dB at step "
        f"{int(np.argmax(series))}, final {series[-1]:+.3f} dB"
    )
    assert series[0] == 0.0
    assert peak >= 0.1


def test_criterion_09_determinism(tmp_path):
    """Identical seeds give byte-identical checkpoints, frames, and CSVs."""

    def pipeline(root):
        root.mkdir()
        data, ckpt, meta = root / "data", root / "base.ckpt", root / "meta.ckpt"
        table, frames = root / "table.csv", root / "frames"
        assert cli_main(["synth-data", "--out", str(data), "--count", "3",
                         "--size", "16x16", "--seed", "5"]) == 0
        assert cli_main(["pretrain", "--data", str(data), "--out", str(ckpt),
                         "--steps", "15", "--widths", "4,8", "--taps", "3",
                         "--seed", "0"]) == 0
        assert cli_main(["meta-train", "--ckpt", str(ckpt), "--data", str(data),
                         "--val", str(data), "--out", str(meta), "--alpha", "0.05",
                         "--beta", "1e-3", "--k", "1", "--batch", "2",
                         "--steps", "4", "--seed", "0", "--quiet"]) == 0
        assert cli_main(["interpolate", "--ckpt", str(meta),
                         "--seq", str(data / "seq_0000"), "--out", str(frames),
                         "--alpha", "0.05"]) == 0
        assert cli_main(["eval", "--baseline", str(ckpt), "--retrained", str(ckpt),
                         "--meta", str(meta), "--data", str(data),
                         "--out", str(table), "--alpha", "0.05"]) == 0

    pipeline(tmp_path / "run1")
    pipeline(tmp_path / "run2")
    compared = 0
    for path1 in sorted((tmp_path / "run1").rglob("*")):
        # run-config.txt provenance embeds the run's own paths; skip it.
        if path1.is_dir() or path1.name.endswith("run-config.txt"):
            continue
        path2 = tmp_path / "run2" / path1.relative_to(tmp_path / "run1")
        assert path1.read_bytes() == path2.read_bytes(), f"{path1.name} differs"
        compared += 1
    print(f"\ncriterion 9: {compared} artifacts byte-identical across reruns")
    assert compared > 30  # checkpoints, every frame, every CSV


def test_criterion_10_psnr_closed_forms():
    """Known-difference PSNR values and exact symmetry."""
    a = np.full((3, 8, 8), 0.75)
    b = np.full((3, 8, 8), 0.25)
    half = psnr(a, b)
    quarter = psnr(np.full((3, 8, 8), 0.5), b)
    print(f"\ncriterion 10: half-diff {half:.4f} dB, quarter-diff {quarter:.4f} dB")
    assert half == pytest.approx(6.0206, abs=1e-4)
    assert quarter == pytest.approx(12.0412, abs=1e-4)
    rng = np.random.default_rng(10)
    for _ in range(10):
        x, y = rng.random((3, 6, 6)), rng.random((3, 6, 6))
        assert psnr(x, y) == psnr(y, x)
    assert psnr(a, a.copy()) == evaluate.PSNR_CAP_DB
