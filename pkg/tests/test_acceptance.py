"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""

import csv
import io
import json
import math
import time

import numpy as np
import pytest

from heromamba import tensor as T
from heromamba.blocks import ColorFusion
from heromamba.cli import main
from heromamba.gradcheck import finite_diff_check, tensorwise_errors
from heromamba.metrics import fsim, psnr, ssim_index
from heromamba.network import ABLATION_LADDER, build_network, load_checkpoint, ModelConfig, parameter_count, variant_config
from heromamba.simulation import degrade_with, invert_with, make_dataset, save_dataset
from heromamba.ssm import scan_complexity_probe, selective_scan_1d, SS2D
from heromamba.tensor import Tensor
from heromamba.train import LOG_FILE, MODEL_FILE, ExperimentConfig, evaluate, load_pairs, read_log, train

from conftest import ACCEPTANCE_LINES, randomize, weighted_sum
from test_losses_metrics import brute_force_ssim
from test_ssm import naive_scan_1d, random_params, ss2d_oracle
from test_tensor import CASES, _leaves_of

pytestmark = pytest.mark.slow


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """Desk overfit config: 8 easy pairs at 32x32, batch 4, 500 steps at 3e-4."""
    root = tmp_path_factory.mktemp("overfit")
    pairs, manifest = make_dataset(8, 32, seed=1, difficulty="easy")
    save_dataset(root / "data", pairs, manifest)
    cfg = ExperimentConfig(data_dir=str(root / "data"), out_dir=str(root / "run"), image_size=32,
                           base_channels=8, d_state=4, batch_size=4, total_steps=500, lr=3e-4)
    t0 = time.perf_counter()
    result = train(cfg)
    wall = time.perf_counter() - t0
    return dict(root=root, cfg=cfg, result=result, wall=wall, log=read_log(root / "run" / LOG_FILE))


def test_criterion_02_overfit(overfit_run):
    log = overfit_run["log"]
    ratio = log[-1]["loss"] / log[0]["loss"]
    I, J, _ = load_pairs(overfit_run["cfg"].data_dir)
    baseline = float(np.mean([psnr(i, j) for i, j in zip(I, J)]))
    model = load_checkpoint(overfit_run["root"] / "run" / MODEL_FILE)
    fitted = evaluate(model, I, J)["psnr"]
    wall = overfit_run["wall"]
    ok = ratio <= 0.1 and fitted >= 28.0 and fitted > baseline and wall <= 600
    record(2, ok, f"loss ratio {ratio:.4f} (<= 0.1), train PSNR {fitted:.2f} dB (>= 28, baseline "
                  f"{baseline:.2f}), {wall:.0f} s (<= 600)")


def test_criterion_03_gradient_integrity():
    worst_primitive, worst_name = 0.0, ""
    for name, build in sorted(CASES.items()):
        for seed in range(5):
            rng = np.random.default_rng([seed, len(name)])
            fn, params = build(rng)
            params = params if params is not None else _leaves_of(fn)
            w = rng.normal(size=fn().shape)
            err = finite_diff_check(lambda: weighted_sum(fn(), w), params, h=1e-4)
            if err > worst_primitive:
                worst_primitive, worst_name = err, name

    # full model at size 16 / base 4 in float64, pushed off its identity init so
    # that every branch carries gradient; step sizes drawn from softplus(N(0, 1))
    # so that A's gradient is not buried under the step's round-off
    rng = np.random.default_rng(0)
    model = build_network(ModelConfig(image_size=16, base_channels=4)).to(np.float64)
    for name, p in model.named_parameters():
        p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)
        if name.endswith("dt_bias"):
            p.data = rng.normal(0.0, 1.0, size=p.shape)
    x = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 16, 16)))
    w = rng.normal(size=(2, 3, 16, 16))
    f = lambda: weighted_sum(model(x), w)
    T.backward(f())
    # biases cancelled by a following batch norm and the 1x1-map scans (where
    # A never acts) have identically zero gradient; nothing to compare
    live = [p for _, p in model.named_parameters() if np.abs(p.grad).max() > 1e-12]
    picks = rng.choice(len(live), size=80, replace=False)
    errors = tensorwise_errors(f, [live[k] for k in picks], h=1e-4, coords_per_param=4, seed=0)
    worst_model = max(errors)
    ok = worst_model <= 1e-3 and worst_primitive <= 1e-5
    record(3, ok, f"full model worst rel. err {worst_model:.2e} over {len(errors)} tensors x 4 entries "
                  f"(<= 1e-3); primitives worst {worst_primitive:.2e} [{worst_name}] (<= 1e-5)")


def test_criterion_04_scan_oracle():
    worst_scan = 0.0
    for i in range(100):
        rng = np.random.default_rng(10_000 + i)
        L, d_inner, d_state = int(rng.integers(1, 65)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        p = random_params(rng, d_inner, d_state)
        u = rng.normal(size=(L, d_inner))
        worst_scan = max(worst_scan, np.abs(selective_scan_1d(Tensor(u), p).data - naive_scan_1d(u, p)).max())
    worst_ss2d = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        m = randomize(SS2D(4, rng, d_state=4).to(np.float64), rng, 0.3)
        x = rng.normal(size=(2, 4, 6, 5))
        worst_ss2d = max(worst_ss2d, np.abs(m(Tensor(x)).data - ss2d_oracle(x, m)).max())
    record(4, worst_scan <= 1e-6 and worst_ss2d <= 1e-5,
           f"scan max abs err {worst_scan:.2e} (<= 1e-6); SS2D {worst_ss2d:.2e} (<= 1e-5)")


def test_criterion_05_linear_complexity():
    # load bursts on a shared host last up to seconds; 40 round-robin repeats
    # spread each length's samples over about five seconds
    scan = scan_complexity_probe([2048, 4096, 8192, 16384], repeats=40)
    ratios = [b.seconds / a.seconds for a, b in zip(scan, scan[1:])]
    attn = scan_complexity_probe([512, 1024, 2048], kind="attention", repeats=3)
    attn_ratios = [b.seconds / a.seconds for a, b in zip(attn, attn[1:])]
    ok = all(1.6 <= r <= 2.6 for r in ratios) and min(attn_ratios) >= 3.2
    record(5, ok, "scan time(2L)/time(L) " + ", ".join(f"{r:.2f}" for r in ratios) + " (in [1.6, 2.6]) from "
                  + "/".join(f"{r.seconds * 1e3:.1f}" for r in scan) + " ms; "
                  "attention " + ", ".join(f"{r:.2f}" for r in attn_ratios) + " (>= 3.2)")


def test_criterion_06_metric_fidelity():
    worst_ssim = 0.0
    for i in range(20):
        rng = np.random.default_rng(i)
        x = rng.uniform(size=(3, 32, 32))
        y = np.clip(x + rng.normal(0, 0.2, size=x.shape), 0, 1)
        worst_ssim = max(worst_ssim, abs(ssim_index(x, y) - brute_force_ssim(x, y)))
    worst_psnr = 0.0
    rng = np.random.default_rng(0)
    for mse in (1e-4, 1e-2, 0.25):
        # +-sqrt(mse) per pixel gives exactly that mean squared error
        x = np.full((3, 8, 8), 0.5)
        y = x + np.sqrt(mse) * rng.choice([-1.0, 1.0], size=x.shape)
        worst_psnr = max(worst_psnr, abs(psnr(y, x) - 10 * math.log10(1 / mse)))
    worst_fsim = 0.0
    for i in range(3):
        rng = np.random.default_rng(i)
        x = np.clip(rng.uniform(size=(3, 32, 32)).cumsum(axis=2) / 16, 0, 1)
        y = np.clip(x + rng.normal(0, 0.05, size=x.shape), 0, 1)
        worst_fsim = max(worst_fsim, abs(fsim(x, x) - 1.0), abs(fsim(x, y) - fsim(y, x)))
    ok = worst_ssim <= 1e-6 and worst_psnr <= 1e-9 and worst_fsim <= 1e-6
    record(6, ok, f"SSIM vs brute force {worst_ssim:.1e} (<= 1e-6); PSNR {worst_psnr:.1e} (<= 1e-9); "
                  f"FSIM identity/symmetry {worst_fsim:.1e} (<= 1e-6)")


def test_criterion_07_physics_oracle():
    rng = np.random.default_rng(7)
    J = rng.uniform(size=(3, 1000, 1))
    t = rng.uniform(0.05, 1.0, size=J.shape)
    B = rng.uniform(size=3)
    round_trip = np.abs(invert_with(degrade_with(J, t, B), t, B) - J).max()
    I = degrade_with(np.full((3, 1, 1), 0.8), 0.5, [0.2, 0.2, 0.2])
    approx = invert_with(I, 0.5, [0.2, 0.2, 0.2], mode="approx")[0, 0, 0]
    exact = invert_with(I, 0.5, [0.2, 0.2, 0.2], mode="exact")[0, 0, 0]
    ok = round_trip <= 1e-6 and abs(approx - 0.35) <= 1e-12 and abs(exact - 0.8) <= 1e-12
    record(7, ok, f"round trip {round_trip:.1e} (<= 1e-6); worked pixel approx {approx:.4f} vs exact {exact:.4f}")


def test_criterion_08_ablation_ladder(tmp_path):
    pairs, manifest = make_dataset(8, 32, seed=2)
    save_dataset(tmp_path / "data", pairs, manifest)
    counts, names, finished = [], [], []
    for variant, flags in ABLATION_LADDER.items():
        model = build_network(variant_config(variant))
        counts.append(parameter_count(model))
        names.append({n for n, _ in model.named_parameters()})
        cfg = ExperimentConfig(data_dir=str(tmp_path / "data"), out_dir=str(tmp_path / variant),
                               total_steps=50, eval_every=50, checkpoint_every=50, **flags)
        res = train(cfg)
        finished.append(res.steps_done == 50 and math.isfinite(res.last_loss))
    increasing = all(a < b for a, b in zip(counts, counts[1:]))
    nested = all(a < b for a, b in zip(names, names[1:]))
    ok = all(finished) and increasing and nested
    record(8, ok, f"{sum(finished)}/5 variants trained 50 steps; parameter counts {counts}; "
                  f"name sets strictly nested: {nested}")


def test_criterion_09_color_fusion_limits(overfit_run):
    rng = np.random.default_rng(0)
    block = randomize(ColorFusion(4, rng).to(np.float64), rng, 0.3)
    f = Tensor(rng.normal(size=(2, 4, 5, 5)))
    b_e = [[0.2, 0.5, 0.7], [0.1, 0.4, 0.9]]
    errs = []
    for bias, target in ((60.0, "f"), (-60.0, "B")):
        block.t_head.weight.data[:] = 0.0
        block.t_head.bias.data[:] = bias
        comp = block.components(f, b_e)
        ref = f.data if target == "f" else comp["B"].data
        errs.append(np.abs(comp["c"].data - ref).max())
    log = overfit_run["log"]
    lo = min(r["omega_min"] for r in log)
    hi = max(r["omega_max"] for r in log)
    ok = max(errs) <= 1e-6 and 0.0 < lo <= hi < 1.0
    record(9, ok, f"t'->1 err {errs[0]:.1e}, t'->0 err {errs[1]:.1e} (<= 1e-6); "
                  f"omega over {len(log)} steps in [{lo:.4f}, {hi:.4f}] (inside (0, 1))")


def _cli_pipeline(root):
    data, run, report = root / "data", root / "run", root / "report.csv"
    cfg = {"data_dir": str(data), "out_dir": str(run), "image_size": 32, "base_channels": 2, "d_state": 2,
           "batch_size": 2, "total_steps": 4, "checkpoint_every": 2, "eval_every": 2}
    root.mkdir()
    (root / "cfg.json").write_text(json.dumps(cfg))
    codes = [
        main(["gen-data", "--out", str(data), "--n", "3", "--size", "32", "--seed", "5"]),
        main(["train", "--config", str(root / "cfg.json")]),
        main(["eval", "--model", str(run / MODEL_FILE), "--data", str(data), "--report", str(report)]),
    ]
    files = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
             if p.is_file() and p.name not in (LOG_FILE, "cfg.json", "config.json")}
    log = [{k: v for k, v in r.items() if k != "wall_s"} for r in read_log(run / LOG_FILE)]
    return codes, files, log


def test_criterion_10_reproducibility(tmp_path):
    codes_a, files_a, log_a = _cli_pipeline(tmp_path / "a")
    codes_b, files_b, log_b = _cli_pipeline(tmp_path / "b")
    same_files = files_a.keys() == files_b.keys() and all(files_a[k] == files_b[k] for k in files_a)
    ok = codes_a == codes_b == [0, 0, 0] and same_files and log_a == log_b and len(log_a) == 4
    record(10, ok, f"{len(files_a)} files (dataset, checkpoints, report) bit-identical: {same_files}; "
                   f"logs identical without wall_s: {log_a == log_b}")
