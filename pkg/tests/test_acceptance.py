"""Acceptance suite: one test per acceptance criterion, each printing a PASS/FAIL line.

The training-based checks (7 and 8) share one desk-scale run and take
tens of minutes on a single CPU core.
"""
import math
import subprocess
import sys
import time

import numpy as np
import pytest
import scipy.linalg as sla
import torch

from fmtrecon.config import desk_config
from fmtrecon.dataset import Dataset, generate_dataset
from fmtrecon.ddpm import PAPER_SCHEDULE, forward_noise, make_schedule, posterior_mean, q_posterior_mean
from fmtrecon.experiment import compare, train
from fmtrecon.forward import (OpticalProps, SensorLayout, assemble_diffusion_operator, build_weight_matrix,
                              simulate_measurements, solve_field)
from fmtrecon.geometry import GridSpec, PhantomSpec, TargetSpec, Volume, rasterize_phantom
from fmtrecon.metrics import cnr, dice, localization_error
from fmtrecon.netmodel import NetConfig, init_params, loss_and_grad, mse_loss
from fmtrecon.solvers import SolverConfig, art_reconstruct, stomp_reconstruct

pytestmark = pytest.mark.acceptance

# evaluation seed for criterion 8 and the single documented alternate
EVAL_SEED = 0
RETRY_SEED = 1


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail, elapsed):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail} ({elapsed:.1f} s)")
        assert ok, detail
    return report


def test_criterion_01_schedule(verdict):
    t0 = time.perf_counter()
    s = make_schedule(**PAPER_SCHEDULE)
    betas = np.linspace(1e-4, 0.02, 1000)
    # cumulative product taken one factor at a time
    oracle, running = [], 1.0
    for b in betas:
        running *= 1.0 - b
        oracle.append(running)
    oracle = np.array(oracle)
    elapsed = time.perf_counter() - t0
    ok = (s.T == 1000 and np.allclose(s.beta, betas, rtol=0, atol=1e-15)
          and np.allclose(s.alpha_bar, oracle, rtol=1e-12, atol=0)
          and bool(np.all(np.diff(s.alpha_bar) < 0)) and s.alpha_bar[-1] < 1e-4 and elapsed < 1.0)
    verdict(1, "schedule", ok, f"alpha_bar_T={s.alpha_bar[-1]:.3e}, "
            f"max rel dev={np.max(np.abs(s.alpha_bar / oracle - 1)):.1e}", elapsed)


def test_criterion_02_noising_marginal(verdict):
    t0 = time.perf_counter()
    s = make_schedule(**PAPER_SCHEDULE)
    n = 100_000
    rng = np.random.default_rng(20)
    x_ori = rng.uniform(-1, 1, size=(1, 2, 2, 2))
    worst_mean, worst_var, ok = 0.0, 0.0, True
    for t in (1, s.T // 2, s.T):
        eps = rng.standard_normal((n, 2, 2, 2))
        x = forward_noise(np.broadcast_to(x_ori, eps.shape), t, eps, s)
        ab = s.alpha_bar[t - 1]
        var = 1.0 - ab
        mean_z = np.abs(x.mean(axis=0) - math.sqrt(ab) * x_ori[0]) / math.sqrt(var / n)
        var_rel = np.abs(x.var(axis=0) - var) / var
        worst_mean, worst_var = max(worst_mean, mean_z.max()), max(worst_var, var_rel.max())
        ok &= bool(mean_z.max() <= 3 and var_rel.max() <= 0.03)
    elapsed = time.perf_counter() - t0
    verdict(2, "noising marginal", ok and elapsed < 30,
            f"worst mean deviation {worst_mean:.2f} sigma, worst variance deviation {worst_var:.2%}", elapsed)


def test_criterion_03_posterior_mean(verdict):
    t0 = time.perf_counter()
    s = make_schedule(**PAPER_SCHEDULE)
    rng = np.random.default_rng(30)
    worst = 0.0
    x0 = rng.standard_normal((100, 2, 8, 8))
    eps = rng.standard_normal((100, 2, 8, 8))
    for t in range(1, s.T + 1):
        x_t = forward_noise(x0, t, eps, s)
        ref = q_posterior_mean(x0, x_t, t, s)
        got = posterior_mean(x_t, eps, t, s)
        # relative error measured per input
        err = np.max(np.abs(got - ref), axis=(1, 2, 3)) / np.max(np.abs(ref), axis=(1, 2, 3))
        worst = max(worst, err.max())
    elapsed = time.perf_counter() - t0
    verdict(3, "posterior mean", worst <= 1e-10 and elapsed < 10,
            f"worst relative error {worst:.2e} over 100 inputs x {s.T} steps", elapsed)


def test_criterion_04_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    cfg = NetConfig(3, 2, base_width=4, levels=2, blocks_per_level=2, time_embed_dim=16, norm_groups=2)
    net = init_params(cfg, 0, dtype=torch.float64)
    gen = torch.Generator().manual_seed(40)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.5)
    x = torch.randn(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    eps = torch.randn(1, 2, 8, 8, generator=gen, dtype=torch.float64)
    t = torch.tensor([7])
    _, grads = loss_and_grad(net, x, t, eps)
    h, errs = 1e-4, []
    with torch.no_grad():
        for name, p in net.named_parameters():
            flat, analytic = p.view(-1), grads[name].view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = mse_loss(net, x, t, eps).item()
                flat[i] = old - h
                down = mse_loss(net, x, t, eps).item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                an = analytic[i].item()
                errs.append(abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    errs = np.array(errs)
    elapsed = time.perf_counter() - t0
    frac = float(np.mean(errs <= 1e-3))
    verdict(4, "gradient fidelity", frac >= 0.99 and errs.max() <= 1e-2 and elapsed < 300,
            f"{errs.size} coordinates, {frac:.2%} within 1e-3, worst {errs.max():.2e}", elapsed)


def test_criterion_05_forward_model(verdict):
    t0 = time.perf_counter()
    props = OpticalProps()
    grid = GridSpec.enclosing(16, 16, 16)
    op = assemble_diffusion_operator(grid, props)
    rhs = np.zeros(grid.shape)
    rhs[8, 8, 8] = 1.0 / grid.voxel_volume
    ref = sla.cho_solve(sla.cho_factor(op.toarray()), rhs.ravel())
    solve_err = np.max(np.abs(solve_field(op, rhs.ravel()) - ref)) / np.max(np.abs(ref))

    rgrid = GridSpec.enclosing(16, 16, 8)
    ring = SensorLayout.ring(src_angles=6, src_heights=1, det_angles=6, det_heights=1)
    colocated = SensorLayout(ring.sources, ring.sources.copy(), 1.5, 1.5)
    W = build_weight_matrix(rgrid, props, colocated, normalized=False).matrix.toarray()
    n = colocated.n_sources
    recip = max(np.max(np.abs(W[s * n + d] - W[d * n + s])) / np.max(np.abs(W[s * n + d]))
                for s in range(n) for d in range(n))

    dgrid = GridSpec.enclosing(24, 24, 8)
    Wd = build_weight_matrix(dgrid, props, SensorLayout.ring(src_angles=8, src_heights=1, det_angles=16,
                                                             det_heights=2), normalized=False)

    def total(center):
        spec = PhantomSpec(targets=(TargetSpec(center, 0.2, 0.5),))
        return simulate_measurements(Wd, rasterize_phantom(spec, dgrid)).values.sum()

    shallow, deep = total((1.1, 0.0, 0.0)), total((0.0, 0.0, 0.0))
    elapsed = time.perf_counter() - t0
    ok = solve_err <= 1e-6 and recip <= 1e-8 and deep < shallow and elapsed < 120
    verdict(5, "forward model", ok, f"solve rel err {solve_err:.1e}, reciprocity {recip:.1e}, "
            f"signal deep/shallow {deep / shallow:.3f}", elapsed)


def test_criterion_06_solvers(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(60)
    A = np.abs(rng.standard_normal((20, 10)))
    b = A @ rng.uniform(0, 1, 10)
    x = art_reconstruct(A, b, SolverConfig.art(iters=10_000, relax=0.5)).x
    art_res = np.linalg.norm(A @ x - b) / np.linalg.norm(b)

    D = rng.standard_normal((64, 256))
    D /= np.linalg.norm(D, axis=0)
    x_true = np.zeros(256)
    x_true[rng.choice(256, 3, replace=False)] = rng.uniform(1, 3, 3)
    got = stomp_reconstruct(D, D @ x_true, SolverConfig.stomp(iters=20, threshold=0.8)).x
    stomp_err = np.linalg.norm(got - x_true) / np.linalg.norm(x_true)
    elapsed = time.perf_counter() - t0
    verdict(6, "solvers", art_res <= 1e-4 and stomp_err <= 1e-6 and elapsed < 60,
            f"ART relative residual {art_res:.1e}, StOMP coefficient error {stomp_err:.1e}", elapsed)


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Generate the desk dataset and train for 2000 steps once for criteria 7 and 8."""
    root = tmp_path_factory.mktemp("desk")
    cfg = desk_config()
    t0 = time.perf_counter()
    ds = Dataset.open(generate_dataset(root / "data", cfg))
    result = train(cfg, ds, root / "model.ckpt", steps=2000, log_path=root / "loss.csv")
    return cfg, ds, result, time.perf_counter() - t0, root


def test_criterion_07_training_sanity(verdict, desk_run):
    cfg, ds, result, elapsed, _ = desk_run
    first, last = np.mean(result.losses[:100]), np.mean(result.losses[-100:])
    shape = cfg.shape()
    ok = (len(ds) == 300 and len(result.losses) == 2000 and (shape.n, shape.b, shape.num) == (32, 8, 4)
          and cfg.noise_schedule().T == 200 and last <= 0.5 * first and elapsed <= 7200)
    verdict(7, "training sanity", ok, f"first-100 mean loss {first:.4f}, last-100 mean loss {last:.4f}, "
            f"ratio {last / first:.3f}", elapsed)


def test_criterion_08_end_to_end_ordering(verdict, desk_run):
    cfg, ds, result, _, root = desk_run
    t0 = time.perf_counter()
    assert cfg.compare.held_out >= 10
    lines = []
    for attempt, seed in enumerate((EVAL_SEED, RETRY_SEED)):
        out = compare(cfg, ["art", "mdiff"], root / f"compare_seed{seed}", result.checkpoint,
                      W=ds.weights(), seed=seed)
        mdiff, art = out["summary"]["mdiff"]["Dice_mean"], out["summary"]["art"]["Dice_mean"]
        ok = mdiff >= 0.5 and mdiff >= art + 0.05
        lines.append(f"seed {seed}: mean Dice MDiff {mdiff:.3f} vs ART {art:.3f} "
                     f"over {out['summary']['mdiff']['n']} phantoms")
        if ok:
            break
    elapsed = time.perf_counter() - t0
    verdict(8, "end-to-end ordering", ok and elapsed <= 1800, "; ".join(lines), elapsed)


def test_criterion_09_metric_suite(verdict):
    t0 = time.perf_counter()
    grid = GridSpec.enclosing(16, 16, 8)

    def blocks(indices, value=1.0):
        data = np.zeros(grid.shape)
        for idx in indices:
            data[idx] = value
        return Volume(grid, data)

    a = blocks([(2, 3, k) for k in range(8)])
    b = blocks([(2, 3, k) for k in range(4, 12)])
    far = blocks([(5, 9, k) for k in range(8)])
    checks = {"identity": dice(a, a) == 1.0, "disjoint": dice(a, far) == 0.0, "half overlap": dice(a, b) == 0.5}

    xx, yy, zz = grid.centers()
    target = TargetSpec((0.1, -0.2, 0.05), 0.15, 0.5)
    dist = (xx - 0.1) ** 2 + (yy + 0.2) ** 2 + (zz - 0.05) ** 2
    idx = np.unravel_index(np.argmin(dist), grid.shape)
    le = localization_error(blocks([idx], 3.0), [target]).errors[0]
    exact = math.dist((xx[idx], yy[idx], zz[idx]), target.center)
    diag = math.sqrt(grid.dx**2 + grid.dy**2 + grid.dz**2)
    checks["point mass LE"] = abs(le - exact) <= 1e-12 and le <= diag

    rng = np.random.default_rng(90)
    roi = rng.uniform(size=grid.shape) < 0.2
    signs = []
    for _ in range(20):
        field = rng.normal(size=grid.shape)
        v = cnr(Volume(grid, field), roi)
        signs.append(cnr(Volume(grid, -field), roi) == -v and v == cnr(Volume(grid, field), roi))
    checks["CNR antisymmetry"] = all(signs)
    checks["deterministic"] = dice(a, b) == dice(a, b) and localization_error(a, [target]).errors == \
        localization_error(a, [target]).errors
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    verdict(9, "metric suite", not failed and elapsed < 10,
            f"{len(checks) - len(failed)}/{len(checks)} checks hold" + (f", failed: {failed}" if failed else ""),
            elapsed)


def run_cli(*args):
    subprocess.run([sys.executable, "-m", "fmtrecon", *map(str, args)], check=True, capture_output=True)


def test_criterion_10_reproducibility(verdict, tmp_path):
    t0 = time.perf_counter()
    outputs = {}
    for run in ("first", "second"):
        base = tmp_path / run
        run_cli("gen-data", "--preset", "desk", "--count", 40, "--out", base / "data")
        run_cli("train", "--dataset", base / "data", "--steps", 50, "--out", base / "train")
        run_cli("reconstruct", "--method", "mdiff", "--dataset", base / "data", "--record", 3,
                "--checkpoint", base / "train" / "model.ckpt", "--out", base / "recon")
        # a shortened sweep count keeps the run inside its budget; determinism does not depend on it
        run_cli("reconstruct", "--method", "art", "--dataset", base / "data", "--record", 3,
                "--iters", 1000, "--out", base / "recon")
        run_cli("evaluate", base / "recon" / "mdiff.json", base / "recon" / "art.json",
                "--out", base / "metrics.csv")
        files = ["data/manifest.jsonl", "data/weights.trip", "data/records/000003_volume.f32",
                 "data/records/000003_meas.f32", "data/records/000003_cond.f32", "train/model.ckpt",
                 "recon/mdiff.f32", "recon/mdiff.json", "recon/art.f32", "recon/art.json", "metrics.csv"]
        outputs[run] = {f: (base / f).read_bytes() for f in files}
    loss_rows = (tmp_path / "first" / "train" / "loss.csv").read_text().splitlines()
    differing = [f for f in outputs["first"] if outputs["first"][f] != outputs["second"][f]]
    elapsed = time.perf_counter() - t0
    verdict(10, "reproducibility", not differing and len(loss_rows) == 51 and elapsed < 600,
            f"{len(outputs['first']) - len(differing)}/{len(outputs['first'])} primary files byte-identical"
            + (f", differing: {differing}" if differing else ""), elapsed)
