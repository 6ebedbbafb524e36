"""Acceptance suite: one test per criterion, each recorded through the
``criterion`` fixture so the terminal summary lists PASS/FAIL per criterion.

Criterion 8 trains 9 desk-scale models (about half an hour on one core).
"""

import inspect
import itertools
import math
import re
import time
from pathlib import Path

import numpy as np
import pytest

from ehybrid.cli import main
from ehybrid.config import load_config, serialize_config
from ehybrid.diffcore import ops
from ehybrid.diffcore.gradcheck import full_suite
from ehybrid.diffcore.layers import init_parameters
from ehybrid.diffcore.tensor import GradTape, Tensor
from ehybrid.fusion import FusionBlockSpec, HybridFusionBlock, hf_forward, hf_param_count
from ehybrid.scattering import ScatteringConfig, scatter
from ehybrid.training import average_precision, mean_average_precision, read_final
from ehybrid.wavelets import (MorletParams, build_filter_bank, build_gaussian_lowpass, dilate_rotate,
                              evaluate_morlet, filter_support, phase_shift)

# Reference output resolution and channels after each row of the 224x224 plan
TABLE_224 = [(112, 32), (56, 16), (56, 24), (28, 24), (28, 40), (14, 40), (14, 80), (7, 112), (7, 192),
             (7, 320), (7, 1280)]


def failures(checks):
    return [name for name, ok in checks if not ok]


def summary(checks, seconds, extra=""):
    bad = failures(checks)
    text = f"{len(checks) - len(bad)}/{len(checks)} checks, {seconds:.1f} s"
    if extra:
        text += f", {extra}"
    if bad:
        text += "; failed: " + ", ".join(bad[:5])
    return text


def with_out_config(tmp_path, base: str, out: Path, **overrides) -> Path:
    """Copy of a bundled config with some keys replaced."""
    text = serialize_config(load_config(base))
    for key, value in overrides.items():
        text = re.sub(rf"^{re.escape(key)} = .*$", f"{key} = {value}", text, flags=re.M)
    path = tmp_path / f"{out.name}.cfg"
    path.write_text(text)
    return path


# --- 1 ---------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_criterion_1_filter_bank(criterion):
    start = time.perf_counter()
    p = MorletParams()
    checks = []
    bank = build_filter_bank(4, 8, 4)
    for j, l in itertools.product(range(4), range(8)):
        psi = bank.psi[j][l]
        checks.append((f"zero sum j={j} l={l}", abs(psi.sum()) <= 1e-6 * np.abs(psi).max()))
        for k in range(4):
            real = bank.psi_real[j][l][k]
            checks.append((f"zero sum real j={j} l={l} k={k}", abs(real.sum()) <= 1e-6 * np.abs(real).max()))

    base = dilate_rotate(p, 0, 0.0, p.support)
    c0 = p.support // 2
    for j, l in itertools.product(range(1, 4), range(8)):
        psi = dilate_rotate(p, j, l * math.pi / 8, filter_support(j))
        c = psi.shape[0] // 2
        checks.append((f"dilation j={j} l={l}", psi[c, c] == 2.0 ** (-2 * j) * base[c0, c0]))

    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(2000):
        j = int(rng.integers(0, 4))
        theta, phi = rng.uniform(0, 2 * math.pi, 2)
        x, y = rng.uniform(-10, 10, 2)
        c, s = math.cos(phi), math.sin(phi)
        a = evaluate_morlet(c * x - s * y, s * x + c * y, p, j, theta + phi)
        b = evaluate_morlet(x, y, p, j, theta)
        worst = max(worst, abs(a - b) / max(1.0, abs(b)))
    checks.append(("rotation composition", worst <= 1e-10))
    for j in range(3):
        n = filter_support(j)
        a, b = dilate_rotate(p, j, 0.0, n), dilate_rotate(p, j, math.pi / 2, n)
        checks.append((f"quarter turn j={j}", np.abs(np.rot90(a, -1) - b).max() <= 1e-10 * np.abs(a).max()))

    for J in range(1, 5):
        checks.append((f"low-pass sum J={J}", abs(build_gaussian_lowpass(J, filter_support(J)).sum() - 1) <= 1e-12))

    psi = dilate_rotate(p, 1, 0.4, filter_support(1))
    scale = np.abs(psi).max()
    for alpha, ref in ((0.0, psi.real), (math.pi / 2, psi.imag), (math.pi, -psi.real)):
        checks.append((f"phase {alpha:.3f}", np.abs(phase_shift(psi, alpha) - ref).max() <= 1e-15 * scale))

    seconds = time.perf_counter() - start
    checks.append(("runtime < 10 s", seconds < 10))
    criterion(1, not failures(checks), summary(checks, seconds, f"rotation err {worst:.1e}"))


# --- 2 ---------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_criterion_2_scattering(criterion):
    start = time.perf_counter()
    checks = []
    x = np.random.default_rng(0).random((1, 3, 224, 224))
    for J, shape in ((2, (1, 195, 56, 56)), (3, (1, 291, 28, 28))):
        out = scatter(x, build_filter_bank(J, side=224), ScatteringConfig(J)).coefficients
        checks.append((f"shape J={J}", out.shape == shape))

    bank = build_filter_bank(2, side=32)
    const = scatter(np.full((1, 1, 32, 32), 0.37), bank, ScatteringConfig(2)).coefficients
    checks.append(("constant annihilated", np.abs(const[0, 1:]).max() <= 1e-6))

    xs = np.random.default_rng(1).standard_normal((2, 2, 32, 32))
    worst = 0.0
    for lam in (2.5, -3.0, 1e-3):
        a = scatter(lam * xs, bank, ScatteringConfig(2)).coefficients
        b = scatter(xs, bank, ScatteringConfig(2)).coefficients
        expected = abs(lam) * b
        expected[:, 0::65] = lam * b[:, 0::65]  # order-0 paths are linear
        worst = max(worst, np.abs(a - expected).max() / np.abs(a).max())
    checks.append(("homogeneity", worst <= 1e-10))

    yy, xx = np.mgrid[:64, :64]
    blob = np.exp(-((xx - 32.0) ** 2 + (yy - 32.0) ** 2) / (2 * 14.0 ** 2))[None, None]
    changes = []
    for J in (1, 2, 3):
        b64 = build_filter_bank(J, side=64)
        a = scatter(blob, b64, ScatteringConfig(J), padding="circular").coefficients
        b = scatter(np.roll(blob, 2, axis=3), b64, ScatteringConfig(J), padding="circular").coefficients
        changes.append(np.linalg.norm(a - b) / np.linalg.norm(a))
    checks.append(("2 px shift at J=3 <= 10%", changes[2] <= 0.10))
    checks.append(("monotone in J", changes[0] > changes[1] > changes[2]))

    seconds = time.perf_counter() - start
    checks.append(("runtime < 60 s", seconds < 60))
    detail = "shift change J=1,2,3: " + ", ".join(f"{c:.3f}" for c in changes)
    criterion(2, not failures(checks), summary(checks, seconds, detail))


# --- 3 ---------------------------------------------------------------------

def differentiable_ops():
    return sorted(name for name, fn in inspect.getmembers(ops, inspect.isfunction)
                  if not name.startswith("_") and fn.__module__ == ops.__name__
                  and inspect.signature(fn).return_annotation in ("Tensor", Tensor))


@pytest.mark.criterion(3)
def test_criterion_3_gradients(criterion):
    start = time.perf_counter()
    results = full_suite()
    checks = []
    for r in results:
        limit = 1e-3 if r.name.startswith("composite") else 1e-4
        checks.append((r.name, r.max_rel_err <= limit))
    covered = {r.name.split()[0] for r in results}
    missing = [op for op in differentiable_ops() if op not in covered]
    checks.append(("every op covered" + (f" (missing {missing})" if missing else ""), not missing))
    checks.append(("composite present", any(r.name.startswith("composite") for r in results)))
    seconds = time.perf_counter() - start
    checks.append(("runtime < 300 s", seconds < 300))
    worst = max(r.max_rel_err for r in results)
    criterion(3, not failures(checks), summary(checks, seconds, f"worst rel err {worst:.1e}"))


# --- 4 ---------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_criterion_4_shape_table(criterion, capsys):
    code = main(["shape-check", "--config", "default224.cfg", "--runtime"])
    lines = capsys.readouterr().out.splitlines()
    rows = []
    for line in lines[1:12]:
        m = re.search(r"(\d+)x(\d+)\s+(\d+)\s*$", line)
        rows.append((int(m.group(1)), int(m.group(3))) if m else None)
    checks = [("exit code 0", code == 0)]
    checks += [(f"row {i + 1}", got == want) for i, (got, want) in enumerate(zip(rows, TABLE_224))]
    checks.append(("11 rows", len(rows) == 11))
    checks.append(("runtime matches", lines[-1] == "runtime shapes match the static table"))
    criterion(4, not failures(checks), summary(checks, 0.0).rsplit(",", 1)[0])


# --- 5 ---------------------------------------------------------------------

def _block(variant, sub, dtype=np.float64, seed=0):
    block = HybridFusionBlock(FusionBlockSpec(variant, sub, 6, 5, 4), dtype=dtype)
    init_parameters(block, seed)
    return block


def _inputs(dtype=np.float64):
    rng = np.random.default_rng(1)
    return (Tensor(rng.standard_normal((3, 6, 4, 4)).astype(dtype), requires_grad=True),
            Tensor(rng.standard_normal((3, 5, 4, 4)).astype(dtype), requires_grad=True))


def _grads(block, ablation, training):
    net, scat = _inputs()
    r = Tensor(np.random.default_rng(9).standard_normal((3, 4, 4, 4)))
    with GradTape() as tape:
        loss = ops.sum(ops.mul(hf_forward(net, scat, block, training, ablation, rng=np.random.default_rng(0)), r))
    tape.backward(loss)
    return net.grad, scat.grad, r.data


@pytest.mark.criterion(5)
def test_criterion_5_fusion(criterion):
    checks = []
    combos = list(itertools.product("EZH", (0, 1, 3)))
    for v, s in combos:
        net, scat = _inputs()
        ok = True
        for training in (True, False):
            out = hf_forward(net, scat, _block(v, s), training, rng=np.random.default_rng(0))
            ok &= out.shape == (3, 4, 4, 4) and bool(np.isfinite(out.data).all())
        checks.append((f"{v}{s} runs", ok))

        for training in (True, False):
            _, g_scat, _ = _grads(_block(v, s), "scat", training)
            checks.append((f"{v}{s} scat-disabled grad", np.count_nonzero(g_scat) == 0))
            block = _block(v, s)
            g_net, _, r = _grads(block, "net", training)
            if s == 0:
                ok = np.count_nonzero(g_net) == 0
            else:
                # only the shortcut projection still reaches the network input
                w = block.proj.weight.data[:, :, 0, 0]
                ok = np.allclose(g_net, np.einsum("oc,nohw->nchw", w, r), rtol=0, atol=1e-12)
            checks.append((f"{v}{s} net-disabled grad", ok))

    for s in (0, 1, 3):
        for dtype in (np.float32, np.float64):
            e, h = _block("E", s, dtype), _block("H", s, dtype)
            e.eval(), h.eval()
            # eval-mode BN with running_var + eps == 1 is an exact identity
            for bn in (e.bn_net, e.bn_scat):
                bn.running_mean.data[...] = 0
                bn.running_var.data[...] = 1 - bn.eps
            identity = all(np.all(bn.running_var.data + bn.eps == 1) for bn in (e.bn_net, e.bn_scat))
            net, scat = _inputs(dtype)
            same = identity and np.array_equal(e(net, scat).data, h(net, scat).data)
            checks.append((f"E{s}==H{s} {np.dtype(dtype).name}", same))

    for s in (0, 1, 3):
        e, z = FusionBlockSpec("E", s, 16, 195, 24), FusionBlockSpec("Z", s, 16, 195, 24)
        checks.append((f"Z-E delta sub {s}", hf_param_count(e) - hf_param_count(z) == 211 * 9 + 2 * 211))
        checks.append((f"count E{s}", HybridFusionBlock(e).param_store().count() == hf_param_count(e)))

    for v in "EZH":
        net, scat = _inputs()
        one = hf_forward(net, scat, _block(v, 1), False).data
        three = hf_forward(net, scat, _block(v, 3), False).data
        checks.append((f"{v}: eval 1==3", np.array_equal(one, three)))

    criterion(5, not failures(checks), summary(checks, 0.0).rsplit(",", 1)[0])


# --- 6 ---------------------------------------------------------------------

def enumerate_pr_ap(scores, positives):
    """AP as the sum of (R_i - R_{i-1}) * P_i over every cutoff of the ranked list."""
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(positives)
    area, prev, tp = 0.0, 0.0, 0
    for cutoff, i in enumerate(ranked, start=1):
        tp += positives[i]
        area += (tp / n_pos - prev) * tp / cutoff
        prev = tp / n_pos
    return area


@pytest.mark.criterion(6)
def test_criterion_6_map_oracle(criterion):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        m, k = int(rng.integers(1, 21)), int(rng.integers(1, 6))
        labels = rng.integers(0, k, m)
        scores = rng.integers(0, 4, (m, k)) / 4.0 if rng.random() < 0.5 else rng.random((m, k))
        aps = [enumerate_pr_ap(list(scores[:, c]), [int(y == c) for y in labels])
               for c in range(k) if (labels == c).any()]
        worst = max(worst, abs(mean_average_precision(scores, labels)[0] - sum(aps) / len(aps)))
    # single class, four samples, positives ranked 1st and 3rd
    hand = average_precision([0.9, 0.8, 0.7, 0.6], [True, False, True, False])
    via_map = mean_average_precision(np.array([[0.9, 0.1], [0.8, 0.2], [0.7, 0.3], [0.6, 0.4]]),
                                     np.array([0, 1, 0, 1]))[1][0]
    checks = [("1000 instances <= 1e-12", worst <= 1e-12), ("hand case 5/6", abs(hand - 5 / 6) <= 1e-15 and via_map == hand)]
    criterion(6, not failures(checks), f"worst |diff| {worst:.1e}, hand case AP {hand:.15f}")


# --- 7 ---------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_criterion_7_determinism(criterion, tmp_path):
    start = time.perf_counter()
    a, b = tmp_path / "a", tmp_path / "b"
    cfg = with_out_config(tmp_path, "desk32.cfg", tmp_path / "det", **{"train.epochs": 2, "data.per_class": 50})
    codes = [main(["train", "--config", str(cfg), "--out", str(out), "--seed", "0"]) for out in (a, b)]
    checks = [("both runs exit 0", codes == [0, 0])]
    for name in ("checkpoint.bin", "final.csv", "per_class_ap.csv", "summary.csv"):
        same = (a / name).is_file() and (a / name).read_bytes() == (b / name).read_bytes()
        checks.append((f"{name} identical", same))
    seconds = time.perf_counter() - start
    criterion(7, not failures(checks), summary(checks, seconds))


# --- 8 ---------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(8)
def test_criterion_8_desk_experiment(criterion, tmp_path):
    start = time.perf_counter()
    out = tmp_path / "desk32"
    code = main(["ablate", "--config", "desk32.cfg", "--out", str(out)])
    seconds = time.perf_counter() - start
    rows = dict(read_final(out / "final.csv")) if code == 0 else {}
    means = {arm: rows.get(f"{arm}:mean", float("nan")) for arm in ("hybrid", "scat_disabled", "baseline")}
    per_seed = [k for k in rows if ":seed=" in k]
    checks = [
        ("ablate exit 0", code == 0),
        ("9 per-seed rows", len(per_seed) == 9),
        ("hybrid >= scat_disabled", means["hybrid"] >= means["scat_disabled"]),
        ("hybrid >= baseline - 0.01", means["hybrid"] >= means["baseline"] - 0.01),
    ]
    detail = ", ".join(f"{arm} {m:.4f}" for arm, m in means.items())
    detail += f"; per seed: " + " ".join(f"{k}={v:.4f}" for k, v in rows.items() if ":seed=" in k)
    detail += f"; {seconds / 60:.1f} min (target 45)"
    criterion(8, not failures(checks), detail + ("" if not failures(checks) else "; failed: "
                                                  + ", ".join(failures(checks))))


# --- 9 ---------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_criterion_9_subsample_sweep(criterion, tmp_path, capsys):
    start = time.perf_counter()
    cfg = with_out_config(tmp_path, "desk32.cfg", tmp_path / "sweep", **{"train.epochs": 2})
    runs, sizes = [], []
    for name in ("first", "second"):
        out = tmp_path / name
        code = main(["subsample-sweep", "--config", str(cfg), "--out", str(out)])
        err = capsys.readouterr().err
        sizes.append({m.group(1): int(m.group(2)) for m in re.finditer(r"^(\S+@\S+) n=(\d+)", err, re.M)})
        runs.append((code, out))
    expected = ["hybrid@1", "baseline@1", "hybrid@0.5", "baseline@0.5", "hybrid@0.25", "baseline@0.25"]
    first = runs[0][1]
    labels = [arm for arm, _ in read_final(first / "final.csv")] if runs[0][0] == 0 else []
    checks = [("both sweeps exit 0", [c for c, _ in runs] == [0, 0]), ("grid rows", labels == expected)]
    want = {label: math.floor(1600 * float(label.split("@")[1])) for label in expected}
    checks.append(("subset sizes 1600/800/400", sizes[0] == want and sizes[1] == want))
    checks.append(("final.csv identical", (first / "final.csv").read_bytes()
                   == (runs[1][1] / "final.csv").read_bytes()))
    for label in expected:
        d = label.replace("@", "_f")
        same = all((first / d / f).read_bytes() == (runs[1][1] / d / f).read_bytes()
                   for f in ("per_class_ap.csv", "summary.csv"))
        checks.append((f"{label} deterministic", same))
    seconds = time.perf_counter() - start
    maps = ", ".join(f"{k} {v:.3f}" for k, v in read_final(first / "final.csv")) if labels else "no output"
    criterion(9, not failures(checks), summary(checks, seconds, maps))
