"""
Acceptance criteria, one test per criterion.

Every test records a single ``CRITERION n PASS|FAIL: ...`` line; the lines are
printed as they happen and repeated in the pytest terminal summary.

Criterion 10 (the full phantom training experiment) only runs with
FILTERNET_FULL_ACCEPTANCE=1.  Otherwise its runtime is projected from measured
step times and the criterion is reported as failed (xfail) with that figure.
"""

import math
import os
import time

import numpy as np
import pytest

from filternet import cli
from filternet.checks import (EDGE_TOL, LAYER_TOL, NETWORK_TOL, gradcheck_edge_gate,
                              gradcheck_layers, gradcheck_network)
from filternet.data.patches import N_AUGMENT, PATCH_SHAPE, augment, extract_patches
from filternet.data.phantom import PhantomSpec, generate_phantom
from filternet.data.split import make_split
from filternet.edge_gate import gaussian_kernel
from filternet.evaluation import (FOREGROUND, assd_masks, dsc, extract_surface,
                                  largest_component)
from filternet.models import NetworkSpec, parameter_count
from filternet.training import (LossConfig, OptimizerConfig, TrainConfig, lambda_weight,
                                learning_rate, parse_config, smoothed, train, with_overrides)

from oracles import assd_brute, gaussian_kernel_direct, surface_points

RESULTS = []
FULL = os.environ.get("FILTERNET_FULL_ACCEPTANCE") == "1"


def record(n, ok: bool, detail: str, tag: str = ""):
    line = f"CRITERION {n}{tag} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------------------
# 1-9: structure, gradients, schedules, data, metrics


def test_criterion_1_receptive_field_delta(capsys):
    t = time.perf_counter()
    assert cli.main(["rf", "--variant", "FilterNet"]) == 0
    fn = capsys.readouterr().out
    assert cli.main(["rf", "--variant", "UNet"]) == 0
    un = capsys.readouterr().out
    elapsed = time.perf_counter() - t

    def axes(text):
        first = text.splitlines()[0]
        return [int(tok.split("=")[1]) for tok in first.split() if "=" in tok]

    d = [a - b for a, b in zip(axes(fn), axes(un))]
    ok = d[0] == 22 and d[1] == 22 and elapsed < 1.0
    assert record(1, ok, f"FilterNet - UNet receptive field = {d[0]} x, {d[1]} y (want 22), "
                         f"{elapsed:.3f} s (< 1 s)")


def test_criterion_2_edge_gate_sigma_gradient():
    t = time.perf_counter()
    errs = gradcheck_edge_gate(n_pairs=20, seed=0)
    elapsed = time.perf_counter() - t
    ok = len(errs) == 20 and max(errs) <= 1e-4 and elapsed < 30
    assert EDGE_TOL == 1e-4
    assert record(2, ok, f"max relative error {max(errs):.2e} over {len(errs)} pairs (<= 1e-4), "
                         f"{elapsed:.1f} s (< 30 s)")


def test_criterion_3_layer_and_network_gradients():
    t = time.perf_counter()
    layers = gradcheck_layers(seed=0)
    nets = {v: gradcheck_network(v, seed=0) for v in ("UNet", "BUNet", "UNetF", "FilterNet")}
    elapsed = time.perf_counter() - t
    worst_layer = max(layers, key=layers.get)
    ok = (max(layers.values()) <= 1e-4 and max(nets.values()) <= 1e-3 and elapsed < 300)
    assert LAYER_TOL == 1e-4 and NETWORK_TOL == 1e-3
    nets_txt = ", ".join(f"{k} {v:.1e}" for k, v in nets.items())
    assert record(3, ok, f"{len(layers)} layers max {layers[worst_layer]:.1e} ({worst_layer}) "
                         f"<= 1e-4; networks {nets_txt} <= 1e-3; {elapsed:.0f} s (< 300 s)")


def test_criterion_4_gaussian_kernel():
    ok = True
    worst_sum = 0.0
    for s in (0.5, 0.85, 1.0, 2.0, 3.0):
        k, _, _ = gaussian_kernel(s)
        worst_sum = max(worst_sum, abs(k.sum() - 1.0))
        ok &= abs(k.sum() - 1.0) <= 1e-12
        ok &= bool(np.array_equal(k, k.T) and np.array_equal(k, k[::-1]) and np.array_equal(k, k[:, ::-1]))
        ok &= bool(np.allclose(k, gaussian_kernel_direct(s), rtol=0, atol=1e-15))
    centre = gaussian_kernel(1.0)[0][2, 2]
    ok &= abs(centre - 0.1621) <= 1e-4
    assert record(4, ok, f"max |sum-1| {worst_sum:.1e} (<= 1e-12), symmetric, "
                         f"sigma=1 centre {centre:.5f} (0.1621 +- 1e-4)")


def test_criterion_5_schedules():
    opt, loss = OptimizerConfig(), LossConfig()
    lr_ok = all(learning_rate(e, opt) == 1e-3 / 5 ** (e // 10) for e in range(30))
    lam_ok = all(lambda_weight(e, loss) == 0.001 * 10 ** (e // 10) for e in range(30))
    assert record(5, lr_ok and lam_ok,
                  f"lr(0,15,25) = {learning_rate(0, opt):g}, {learning_rate(15, opt):g}, "
                  f"{learning_rate(25, opt):g}; lambda(0,10,20) = {lambda_weight(0, loss):g}, "
                  f"{lambda_weight(10, loss):g}, {lambda_weight(20, loss):g}; exact over 0-29")


def test_criterion_6_patching():
    rng = np.random.default_rng(0)
    leg = rng.standard_normal((160, 160, 28)).astype(np.float32)
    lab = rng.integers(0, 6, (160, 160, 28)).astype(np.uint8)
    patches = extract_patches(leg, lab)
    shapes_ok = all(p.shape == PATCH_SHAPE and l.shape == PATCH_SHAPE for p, l in patches)
    extra = [augment(p, l, [0, i]) for i, (p, l) in enumerate(patches)]
    aug_ok = all(len(a) == 3 for a in extra) and N_AUGMENT == 3
    aug_ok &= all(ap.shape == PATCH_SHAPE and al.shape == PATCH_SHAPE for a in extra for ap, al in a)
    ok = len(patches) == 9 and shapes_ok and aug_ok
    assert record(6, ok, f"{len(patches)} patches of {PATCH_SHAPE} (want 9), "
                         f"{len(extra[0])} augmented pairs per patch (want 3)")


def _dsc_brute(p, t):
    inter = int(np.logical_and(p, t).sum())
    n = int(p.sum()) + int(t.sum())
    return 1.0 if n == 0 else 2.0 * inter / n


def test_criterion_7_metric_oracles():
    spacing = (0.7, 0.7, 7.0)
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    mismatches = trials = 0
    while trials < 1000:
        p = rng.random((16, 16, 8)) < rng.uniform(0.02, 0.7)
        t = rng.random((16, 16, 8)) < rng.uniform(0.02, 0.7)
        if not p.any() or not t.any():
            continue
        trials += 1
        same = (np.array_equal(extract_surface(p).voxels, surface_points(p))
                and assd_masks(p, t, spacing) == assd_brute(p, t, spacing)
                and dsc(p, t) == _dsc_brute(p, t))
        mismatches += not same
    elapsed = time.perf_counter() - t0
    a = np.zeros((10, 6, 3), dtype=bool)
    b = np.zeros_like(a)
    a[3], b[5] = True, True
    slab = assd_masks(a, b, spacing)
    ok = mismatches == 0 and abs(slab - 1.4) <= 1e-9 and elapsed < 120
    assert record(7, ok, f"{trials} random volumes, {mismatches} mismatches vs brute force; "
                         f"slab ASSD {slab:.12f} mm (1.4 +- 1e-9); {elapsed:.0f} s (< 120 s)")


def test_criterion_8_split_protocol():
    spec = PhantomSpec(seed=0, dims=(16, 16, 8))
    ids = [generate_phantom(spec, i).subject_id for i in range(8)]
    legs = [(s, side) for s in ids for side in ("left", "right")]
    plan = make_split(ids, 4, seed=0)
    tested = [s for f in range(4) for s in plan.test_subjects(f)]
    once = sorted(tested) == sorted(ids)
    disjoint = all(not set(plan.groups[i]) & set(plan.groups[j])
                   for i in range(4) for j in range(i + 1, 4))
    co = True
    for f in range(4):
        test_legs = [l for l in legs if l[0] in plan.test_subjects(f)]
        train_legs = [l for l in legs if l[0] in plan.train_subjects(f)]
        co &= len(test_legs) == 2 * len(plan.test_subjects(f))
        co &= not {s for s, _ in test_legs} & {s for s, _ in train_legs}
        co &= len(test_legs) + len(train_legs) == 16
    train_ok = all(set(plan.train_subjects(f)).isdisjoint(plan.test_subjects(f)) for f in range(4))
    ok = once and disjoint and co and train_ok
    assert record(8, ok, f"8 subjects / 16 legs, groups {[len(g) for g in plan.groups]}, "
                         f"each tested once: {once}, disjoint: {disjoint}, legs co-assigned: {co}")


def test_criterion_9_parameter_ordering():
    n = {v: parameter_count(NetworkSpec(v, 16)) for v in ("UNet", "BUNet", "FilterNet")}
    ok = n["FilterNet"] < n["UNet"] and n["FilterNet"] == n["BUNet"] + 1
    assert record(9, ok, f"FilterNet {n['FilterNet']} < UNet {n['UNet']}; "
                         f"BUNet {n['BUNet']} + 1 = FilterNet")


# ---------------------------------------------------------------------------
# 10: phantom training experiment

C10_VARIANTS = ("UNet", "BUNet", "UNetF", "FilterNet")
C10_SEEDS = (0, 1, 2)
C10_SUBJECTS = 8
C10_BUDGET_S = 3600.0


def c10_config(variant: str, seed: int) -> TrainConfig:
    return parse_config(f"variant = {variant}\nbase_channels = 8\nepochs = 10\nseed = {seed}\n")


def projected_runtime() -> tuple:
    """Measured seconds per step (one timed step per variant) and the projected total."""
    cfg = c10_config("FilterNet", 0)
    train_legs = 2 * C10_SUBJECTS * (cfg.folds - 1) // cfg.folds
    patches_per_leg = 9 * (1 + N_AUGMENT)
    steps_per_epoch = math.ceil(train_legs * patches_per_leg / cfg.optimizer.batch_size)
    rng = np.random.default_rng(0)
    batch = [(rng.standard_normal((1,) + PATCH_SHAPE).astype(np.float32),
              rng.integers(0, 6, PATCH_SHAPE).astype(np.uint8))
             for _ in range(cfg.optimizer.batch_size)]
    per_step = {}
    for v in C10_VARIANTS:
        c = with_overrides(c10_config(v, 0), epochs=1)
        t = time.perf_counter()
        train(c, batch)
        per_step[v] = time.perf_counter() - t
    train_s = sum(per_step.values()) * steps_per_epoch * cfg.optimizer.epochs * cfg.folds * len(C10_SEEDS)
    return per_step, steps_per_epoch, train_s


def run_full_experiment():
    from filternet.experiment import crossval, legs_from_phantom

    subjects = {}
    for i in range(C10_SUBJECTS):
        s = legs_from_phantom(generate_phantom(PhantomSpec(seed=0), i))
        subjects[s.subject_id] = s
    results = {}
    for seed in C10_SEEDS:
        for v in C10_VARIANTS:
            results[(v, seed)] = crossval(c10_config(v, seed), subjects)
    return results


def evaluate_full(results) -> dict:
    drops = {}
    for (v, _), res in results.items():
        for tr in res.train_results:
            losses = tr.losses()
            end_epoch1 = max(i for i, r in enumerate(tr.log) if r.epoch <= 1)
            s = smoothed(losses, 20)
            drops.setdefault(v, []).append(1.0 - s[end_epoch1] / s[0])

    def mean_fg(records, metric):
        vals = [getattr(r, metric) for r in records if r.cls in FOREGROUND
                and not math.isnan(getattr(r, metric))]
        return float(np.mean(vals)) if vals else math.nan

    fn_dsc = float(np.mean([mean_fg(results[("FilterNet", s)].records, "dsc") for s in C10_SEEDS]))
    assd_med = {v: float(np.median([mean_fg(results[(v, s)].records, "assd_mm") for s in C10_SEEDS]))
                for v in ("FilterNet", "UNet")}
    sigmas = [tr.model.gate.sigma_value for s in C10_SEEDS
              for tr in results[("FilterNet", s)].train_results]
    return {
        "a": min(min(d) for d in drops.values()) >= 0.5,
        "a_detail": {v: round(min(d), 3) for v, d in drops.items()},
        "b": fn_dsc >= 0.85, "b_detail": fn_dsc,
        "c": assd_med["FilterNet"] <= assd_med["UNet"], "c_detail": assd_med,
        "d": all(0.05 < s < 5 and s != 1.0 for s in sigmas), "d_detail": sigmas,
    }


def test_criterion_10_phantom_training():
    per_step, steps_per_epoch, projected = projected_runtime()
    timing = (", ".join(f"{v} {t:.1f} s" for v, t in per_step.items())
              + f" per step; {steps_per_epoch} steps/epoch")
    if not FULL:
        record(10, False, f"not run: projected training time {projected / 3600:.0f} h "
                          f"(budget 1 h) from {timing}; set FILTERNET_FULL_ACCEPTANCE=1 to run")
        pytest.xfail("full phantom experiment exceeds the runtime budget on this machine")
    t = time.perf_counter()
    out = evaluate_full(run_full_experiment())
    elapsed = time.perf_counter() - t
    ok = out["a"] and out["b"] and out["c"] and out["d"] and elapsed < C10_BUDGET_S
    assert record(10, ok, f"(a) min loss drop {out['a_detail']} (>= 0.5): {out['a']}; "
                          f"(b) FilterNet DSC {out['b_detail']:.4f} (>= 0.85): {out['b']}; "
                          f"(c) median ASSD {out['c_detail']}: {out['c']}; "
                          f"(d) sigma {np.round(out['d_detail'], 4).tolist()}: {out['d']}; "
                          f"{elapsed / 60:.0f} min (< 60)")


def test_criterion_10_full_path_runs(monkeypatch):
    """The opt-in experiment code runs end to end (tiny settings, no claim checked)."""
    import test_acceptance as mod

    monkeypatch.setattr(mod, "C10_SUBJECTS", 4)
    monkeypatch.setattr(mod, "C10_SEEDS", (0,))
    monkeypatch.setattr(mod, "C10_VARIANTS", ("UNet", "FilterNet"))
    monkeypatch.setattr(mod, "c10_config", lambda v, seed: parse_config(
        f"variant = {v}\nbase_channels = 1\nepochs = 2\nmax_steps = 1\nbatch_size = 1\n"
        f"augment = false\nseed = {seed}\nlambda0 = 0.5\n"))
    results = mod.run_full_experiment()
    assert len(results) == 2
    for res in results.values():
        assert sorted({r.subject_id for r in res.records}) == ["S000", "S001", "S002", "S003"]
    out = mod.evaluate_full(results)
    assert set(out) == {"a", "a_detail", "b", "b_detail", "c", "c_detail", "d", "d_detail"}
    assert len(out["d_detail"]) == 4 and all(s != 1.0 for s in out["d_detail"])


def test_criterion_10_reduced_scale_evidence():
    """Not criterion 10: a 4x in-plane downsampled stand-in with a larger step size.

    Legs are shrunk to 40x40x28 and trained whole (12 training legs, 6 steps
    per epoch, 30 epochs, lr 0.05) so the run fits in a few minutes.  It shows
    that phantom training through the real preprocessing path learns; it says
    nothing about the 10-epoch, lr 1e-3, full-resolution protocol.
    """
    from scipy import ndimage

    from filternet.evaluation import leg_metrics, model_predictor
    from filternet.experiment import legs_from_phantom

    legs = []
    for i in range(C10_SUBJECTS):
        subj = legs_from_phantom(generate_phantom(PhantomSpec(seed=0), i))
        for side in ("left", "right"):
            img, lab, sp = subj.legs[side]
            legs.append((ndimage.zoom(img, (0.25, 0.25, 1), order=1).astype(np.float32),
                         lab[2::4, 2::4, :], (sp[0] * 4, sp[1] * 4, sp[2])))
    train_set = [(img[None], lab) for img, lab, _ in legs[:12]]
    cfg = with_overrides(c10_config("FilterNet", 0), epochs=30, lr0=0.05)
    t = time.perf_counter()
    res = train(cfg, train_set)
    losses = res.losses()
    s = smoothed(losses, 20)
    predict = model_predictor(res.model)
    dscs = []
    for img, lab, sp in legs[12:]:
        pred = np.argmax(predict(img[None, None])[0], axis=0)
        m = leg_metrics(pred, lab, sp)
        dscs.append(float(np.mean([m[c][0] for c in FOREGROUND])))
    elapsed = time.perf_counter() - t
    ok = s[-1] <= 0.5 * losses[0] and float(np.mean(dscs)) >= 0.5
    record(10, ok, f"[evidence only, not the criterion] 4x downsampled legs, lr 0.05, "
                   f"{len(losses)} steps: smoothed loss {losses[0]:.3f} -> {s[-1]:.3f}; held-out "
                   f"mean foreground DSC {np.mean(dscs):.3f} on 4 legs; sigma "
                   f"{res.model.gate.sigma_value:.6f}; {elapsed:.0f} s", tag="-reduced")
    assert ok


# ---------------------------------------------------------------------------
# 11: edge-gate variants from config, largest-component properties

GATE_VARIANTS = {
    "F_L": "gate_mode = laplacian_only\n",
    "fixed sigma=1": "gate_mode = fixed_sigma\nsigma0 = 1.0\n",
    "fixed sigma=1 + LCC": "gate_mode = fixed_sigma\nsigma0 = 1.0\npost_process = lcc\n",
    "trainable sigma": "gate_mode = trainable_sigma\n",
}


def test_criterion_11_gate_variants_from_config():
    from filternet.evaluation import SubjectLegs, evaluate_fold, model_predictor

    rng = np.random.default_rng(11)
    shape = (16, 16, 8)
    patches = [(rng.standard_normal((1,) + shape).astype(np.float32),
                rng.integers(0, 6, shape).astype(np.uint8)) for _ in range(2)]
    runs = {}
    for name, text in GATE_VARIANTS.items():
        cfg = parse_config("variant = FilterNet\nbase_channels = 2\nepochs = 1\nbatch_size = 2\n"
                           "lambda0 = 0.5\n" + text)
        res = train(cfg, patches)
        leg = SubjectLegs("S0", {"left": (patches[0][0][0], patches[0][1])})
        ev = evaluate_fold(model_predictor(res.model), [leg], 0, cfg.variant,
                           cfg.post_process == "lcc", patch=shape)
        runs[name] = (cfg, res, ev)
    sig = {k: (v[0].gate_mode, v[1].model.gate.sigma_value, v[2].records[0].post_processed)
           for k, v in runs.items()}
    wiring = (sig["F_L"][0] == "laplacian_only"
              and sig["fixed sigma=1"][1] == 1.0 and not sig["fixed sigma=1"][2]
              and sig["fixed sigma=1 + LCC"][1] == 1.0 and sig["fixed sigma=1 + LCC"][2]
              and sig["trainable sigma"][1] != 1.0)

    props = True
    for _ in range(300):
        lab = rng.integers(0, 6, (12, 12, 6)).astype(np.uint8)
        lab[rng.random(lab.shape) < 0.5] = 0
        out = largest_component(lab)
        props &= bool(np.array_equal(largest_component(out), out))
        props &= all((out == c).sum() <= (lab == c).sum() for c in range(1, 6))
    ok = wiring and props
    assert record(11, ok, f"4 gate variants ran from config (sigma after a step: "
                          + ", ".join(f"{k} {v[1]:.6f}" for k, v in sig.items())
                          + f"); largest_component idempotent and non-increasing on 300 volumes: {props}")
