"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s``; the verdict lines are
printed even without ``-s``.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from _oracles import (
    FD_RTOL,
    brute_ap,
    brute_matching,
    check_grads,
    directional_check,
    recursive_levenshtein,
)
from cmert.benchmark import BenchmarkConfig, run_variant
from cmert.cli import main as cli
from cmert.diagnostics import leakage_audit
from cmert.memory import FeatureStream, PartitionConfig, collate, extract_windows
from cmert.metrics import (
    edit_score,
    extract_segments,
    per_frame_map,
    point_f1,
    segment_f1,
    segment_iou,
    top5_recall,
)
from cmert.model import ModelConfig, ModelParams, forward
from cmert.streaming import read_predictions, run_stream
from cmert.tensor import (
    Tensor,
    add,
    concat,
    exp,
    expand,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    merge_heads,
    mul,
    relu,
    scale,
    slice_time,
    softmax_rows,
    split_heads,
    sub,
    sum_all,
    transpose,
)
from cmert.training import TrainConfig, total_loss

MINUTE = 60.0
SEEDS3 = (0, 1, 2)

# Desk-scale benchmark shared by criteria 3 and 6.  The profile shapes and
# the near/distant comparison use the default geometry; the ablation grid
# uses a 2-frame short window, where early positions lack context; latency
# needs a short window longer than delta=4.
BENCH = BenchmarkConfig(train_streams=64, test_streams=8, test_length=400)
PROFILE_BENCH = BENCH
ABLATION_BENCH = replace(BENCH, short_frames=2)
LATENCY_BENCH = replace(BENCH, short_frames=8)
FUTURE_BENCH = BENCH

NO_PAST = {"past_frames": 0}


def verdict(capsys, n, checks):
    """Print the criterion line and return the failed check names."""
    failed = [name for name, ok in checks if not ok]
    line = f"criterion {n}: {'PASS' if not failed else 'FAIL'}  [" + "; ".join(
        name for name, _ in checks) + "]"
    if failed:
        line += "  failed: " + "; ".join(failed)
    with capsys.disabled():
        print("\n" + line)
    return failed


def majority(flags):
    return sum(bool(f) for f in flags) * 2 > len(flags)


# ---------------------------------------------------------------- criterion 1

def _leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _probe(out, seed):
    return sum_all(mul(out, Tensor(np.random.default_rng(seed).normal(size=out.shape))))


def _primitive_errors(seed):
    rng = np.random.default_rng(seed)
    x, y = _leaf(rng, 4, 6), _leaf(rng, 6, 5)
    pos = _leaf(rng, 4, 6, positive=True)
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4)
    c1, c2 = _leaf(rng, 2, 1, 4), _leaf(rng, 2, 2, 4)
    rl = _leaf(rng, 4, 6)
    rl.data[np.abs(rl.data) < 1e-2] = 0.5
    g, bias = _leaf(rng, 6), _leaf(rng, 6)
    mask = rng.random((4, 6)) < 0.7
    mask[:, 0] = True
    p = seed + 1
    cases = {
        "add": (lambda: _probe(add(a, b), p), [a, b]),
        "sub": (lambda: _probe(sub(a, b), p), [a, b]),
        "mul": (lambda: _probe(mul(a, b), p), [a, b]),
        "scale": (lambda: _probe(scale(x, -1.7), p), [x]),
        "log": (lambda: _probe(log(pos), p), [pos]),
        "exp": (lambda: _probe(exp(x), p), [x]),
        "relu": (lambda: _probe(relu(rl), p), [rl]),
        "mean": (lambda: mean(mul(x, x)), [x]),
        "matmul": (lambda: _probe(matmul(x, y), p), [x, y]),
        "transpose": (lambda: _probe(transpose(x), p), [x]),
        "expand": (lambda: _probe(expand(x, 3), p), [x]),
        "concat": (lambda: _probe(concat([c1, c2]), p), [c1, c2]),
        "slice_time": (lambda: _probe(slice_time(x, 1, 3), p), [x]),
        "heads": (lambda: _probe(merge_heads(split_heads(x, 2), 2, batched=False), p), [x]),
        "softmax_rows": (lambda: _probe(softmax_rows(x, mask), p), [x]),
        "log_softmax": (lambda: _probe(log_softmax(x), p), [x]),
        "layer_norm": (lambda: _probe(layer_norm(x, g, bias), p), [x, g, bias]),
    }
    return {name: check_grads(build, leaves) for name, (build, leaves) in cases.items()}


def _tiny_model(seed):
    part = PartitionConfig(long_frames=6, short_frames=3, antic_frames=1, past_frames=1,
                           future_frames=4, feature_dim=3, num_classes=2, long_subsample=2)
    p = ModelParams(part, ModelConfig(d_model=8, heads=2, q_long0=3, q_long1=2), seed=seed)
    rng = np.random.default_rng(seed)
    for _, t in p.named():
        t.data = t.data + rng.normal(scale=0.2, size=t.shape)
    s = FeatureStream(rng.normal(size=(30, 3)), rng.integers(0, 3, 30), num_classes=2)
    return p, collate([extract_windows(s, t, part) for t in (9, 17)]), rng


def test_criterion_1_gradients(capsys):
    t0 = time.perf_counter()
    worst_prim, worst_model = 0.0, 0.0
    for seed in range(20):
        worst_prim = max(worst_prim, max(_primitive_errors(seed).values()))
        p, b, rng = _tiny_model(seed)
        build = lambda: total_loss(forward(p, b), b, TrainConfig()).objective  # noqa: E731
        worst_model = max(worst_model, directional_check(build, [t for _, t in p.named()], rng))
    elapsed = time.perf_counter() - t0
    failed = verdict(capsys, 1, [
        (f"primitives rel err {worst_prim:.1e}", worst_prim < FD_RTOL),
        (f"full model rel err {worst_model:.1e}", worst_model < FD_RTOL),
        (f"runtime {elapsed:.0f}s", elapsed < MINUTE),
    ])
    assert not failed


# ---------------------------------------------------------------- criterion 2

def _audit_model(seed, leaky=False, **part_kw):
    part = dict(long_frames=12, short_frames=5, antic_frames=2, past_frames=2, future_frames=6,
                feature_dim=4, num_classes=3, long_subsample=3)
    part.update(part_kw)
    p = ModelParams(PartitionConfig(**part),
                    ModelConfig(d_model=8, heads=2, q_long0=3, q_long1=3, leaky_anticipation=leaky),
                    seed=seed)
    rng = np.random.default_rng(seed + 100)
    for _, t in p.named():
        t.data = t.data + rng.normal(scale=0.3, size=t.shape)
    return p


def test_criterion_2_causality(capsys):
    t0 = time.perf_counter()
    causal = max(leakage_audit(_audit_model(s), seed=s).max_future for s in range(5))
    leaky = max(leakage_audit(_audit_model(s, leaky=True), seed=s).max_future for s in range(5))
    elapsed = time.perf_counter() - t0
    failed = verdict(capsys, 2, [
        (f"causal max leak {causal:.1e}", causal < 1e-9),
        (f"leaky max leak {leaky:.1e}", leaky > 1e-6),
        (f"runtime {elapsed:.0f}s", elapsed < MINUTE),
    ])
    assert not failed


# ---------------------------------------------------------------- criterion 3

def test_criterion_3_latency(capsys):
    checks = []
    T = 5
    i, j = np.indices((T, T))
    for delta in (1, 2, 4):
        sens = leakage_audit(_audit_model(delta, delta=delta), seed=delta).sensitivity
        exact = np.all(sens[j > i + delta] == 0.0) and np.all(sens[j <= i + delta] > 0.0)
        checks.append((f"reach exactly {delta}", bool(exact)))
    wins = []
    for seed in SEEDS3:
        a0 = run_variant(LATENCY_BENCH, seed, "delta0").accuracy
        a4 = run_variant(LATENCY_BENCH, seed, "delta4", partition={"delta": 4}).accuracy
        wins.append(a4 >= a0)
    checks.append((f"delta4 >= delta0 on {sum(wins)}/3 seeds", majority(wins)))
    assert not verdict(capsys, 3, checks)


# ---------------------------------------------------------------- criterion 4

def _stream(T, D, C, seed):
    rng = np.random.default_rng(seed)
    return FeatureStream(rng.normal(size=(T, D)), rng.integers(0, C + 1, T), num_classes=C)


def test_criterion_4_shapes_and_identities(capsys):
    part = PartitionConfig(long_frames=16, short_frames=4, antic_frames=2, past_frames=2,
                           future_frames=6, feature_dim=5, num_classes=3, long_subsample=4)
    p = ModelParams(part, ModelConfig(d_model=16, heads=2, q_long0=4, q_long1=4), seed=0)
    s = _stream(40, 5, 3, 0)
    b = collate([extract_windows(s, t, part) for t in (3, 20, 39)])
    out = forward(p, b)
    checks = [
        ("M_SA length", out.m_sa_hat.shape[1] == part.short_frames + part.antic_frames),
        ("M_F length", out.m_f.shape[1] == part.future_frames),
    ]

    gaps = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        cfg = TrainConfig(lambda1=float(rng.random()), lambda2=float(rng.random()))
        lb = total_loss(forward(p, b), b, cfg)
        gaps.append(abs(lb.total - (lb.l_sa1 + cfg.lambda1 * lb.l_sa0 + cfg.lambda2 * lb.l_f)))
    checks.append((f"loss identity gap {max(gaps):.1e}", max(gaps) < 1e-12))

    trunc_ok = True
    for delta in (0, 2):
        pd = ModelParams(replace(part, delta=delta), p.model, seed=1)
        full = {r.t: r for r in run_stream(pd, s)}
        for stop in range(1, len(s) + 1):
            for r in run_stream(pd, s.truncate(stop)):
                if r.flushed:
                    continue
                ref = full[r.t]
                trunc_ok &= r.det.tobytes() == ref.det.tobytes()
                trunc_ok &= all(r.ant[k].tobytes() == ref.ant[k].tobytes() for k in r.ant)
    checks.append(("truncation invariance", trunc_ok))

    long = _stream(500, 5, 3, 4)
    plain, cached = run_stream(p, long), run_stream(p, long, cache=True, verify=True)
    cache_ok = len(plain) == len(cached) and all(
        x.det.tobytes() == y.det.tobytes()
        and all(x.ant[k].tobytes() == y.ant[k].tobytes() for k in x.ant)
        for x, y in zip(plain, cached))
    checks.append(("cache equivalence", cache_ok))
    assert not verdict(capsys, 4, checks)


# ---------------------------------------------------------------- criterion 5

def _labels(rng, T, C, mean_run=3):
    out = []
    while len(out) < T:
        lab = 0 if rng.random() < 0.3 else int(rng.integers(1, C + 1))
        out.extend([lab] * int(rng.integers(1, 2 * mean_run)))
    return np.array(out[:T])


def _brute_top5(probs, labels):
    def hit(row, y):
        return sum(1 for c in range(len(row))
                   if row[c] > row[y] or (row[c] == row[y] and c < y)) < 5
    hits = np.array([hit(probs[i], labels[i]) for i in range(len(labels))])
    return np.mean([100 * hits[labels == c].mean() for c in np.unique(labels)])


def _f1(tp, n_pred, n_gt):
    return 100.0 if n_pred + n_gt == 0 else 100.0 * 2 * tp / (n_pred + n_gt)


def test_criterion_5_metric_oracles(capsys):
    t0 = time.perf_counter()
    bad = {k: 0 for k in ("mAP", "top5", "P-F1", "S-F1", "Edit")}
    n = 150
    for seed in range(n):
        rng = np.random.default_rng(seed)
        T, C = int(rng.integers(2, 51)), int(rng.integers(1, 5))
        y = rng.integers(0, C + 1, T)
        y[0] = 1
        probs = rng.integers(0, 5, (T, C + 1)) / 4.0  # coarse scores force ties
        present = [c for c in range(1, C + 1) if (y == c).any()]
        want = np.mean([100 * brute_ap(list(probs[:, c]), list(y == c)) for c in present])
        bad["mAP"] += abs(per_frame_map(probs, y) - want) > 1e-9

        K = int(rng.integers(6, 10))
        yk = rng.integers(1, K, T)
        pk = rng.integers(0, 4, (T, K)).astype(float)
        bad["top5"] += abs(top5_recall(pk, yk) - _brute_top5(pk, yk)) > 1e-9

        pred = extract_segments(_labels(rng, T, 3))
        gt = extract_segments(_labels(rng, T, 3))
        radius = float(rng.integers(1, 6))
        tp = brute_matching(tuple(pred), tuple(gt),
                            lambda a, g: a.label == g.label and abs(a.start - g.start) <= radius)
        bad["P-F1"] += point_f1(pred, gt, radius, 1.0) != _f1(tp, len(pred), len(gt))

        thr = float(rng.choice([0.1, 0.25, 0.5]))
        tp = brute_matching(tuple(pred), tuple(gt),
                            lambda a, g: a.label == g.label and segment_iou(a, g) >= thr)
        bad["S-F1"] += segment_f1(pred, gt, thr) != _f1(tp, len(pred), len(gt))

        d = recursive_levenshtein([s.label for s in pred], [s.label for s in gt])
        m = max(len(pred), len(gt))
        bad["Edit"] += edit_score(pred, gt) != (100.0 if m == 0 else 100.0 * (1 - d / m))
    elapsed = time.perf_counter() - t0
    checks = [(f"{k} mismatches {v}/{n}", v == 0) for k, v in bad.items()]
    checks.append((f"runtime {elapsed:.0f}s", elapsed < MINUTE))
    assert not verdict(capsys, 5, checks)


# ---------------------------------------------------------------- criterion 6

def _monotone_decreasing(loss):
    return bool(np.all(np.diff(loss) <= 0))


def _valley(loss):
    k = int(np.argmin(loss))
    return 0 < k < len(loss) - 1 and loss[0] > loss[k] and loss[-1] > loss[k]


def test_criterion_6_mechanisms(capsys):
    a_flags, b_flags, c_flags, d_flags = [], [], [], []
    for seed in SEEDS3:
        base = run_variant(PROFILE_BENCH, seed, "no-past", partition=NO_PAST,
                           model={"refinement": False})
        a_flags.append(_monotone_decreasing(base.profile.loss))
        leaky = run_variant(PROFILE_BENCH, seed, "leaky", partition=NO_PAST,
                            model={"leaky_anticipation": True})
        b_flags.append(_valley(leaky.profile.loss))

        acc = {
            "base": run_variant(ABLATION_BENCH, seed, "base", partition=NO_PAST,
                                model={"refinement": False}).accuracy,
            "ce": run_variant(ABLATION_BENCH, seed, "ce", model={"refinement": False}).accuracy,
            "mr": run_variant(ABLATION_BENCH, seed, "mr", partition=NO_PAST).accuracy,
            "cemr": run_variant(ABLATION_BENCH, seed, "cemr").accuracy,
        }
        c_flags.append(acc["cemr"] >= acc["mr"] >= acc["base"]
                       and acc["cemr"] >= acc["ce"] >= acc["base"])

        near = run_variant(FUTURE_BENCH, seed, "near").accuracy
        far = run_variant(FUTURE_BENCH, seed, "distant",
                          partition={"future_mode": "distant"}).accuracy
        d_flags.append(far <= near)
    checks = [
        (f"(a) monotone profile on {sum(a_flags)}/3 seeds", majority(a_flags)),
        (f"(b) leaky valley on {sum(b_flags)}/3 seeds", majority(b_flags)),
        (f"(c) ablation ordering on {sum(c_flags)}/3 seeds", majority(c_flags)),
        (f"(d) distant <= near on {sum(d_flags)}/3 seeds", majority(d_flags)),
    ]
    assert not verdict(capsys, 6, checks)


# ---------------------------------------------------------------- criterion 7

def _pipeline(root, seed):
    train_dir, test_dir = root / "train", root / "test"
    codes = [
        cli(["gen", "--length", "400", "--streams", "8", "--seed", str(seed), "--out", str(train_dir)]),
        cli(["gen", "--length", "400", "--streams", "1", "--seed", str(seed + 1),
             "--out", str(test_dir)]),
        cli(["train", "--data", str(train_dir), "--out", str(root / "run"), "--seed", str(seed),
             "--steps", "2000"]),
        cli(["infer", "--ckpt", str(root / "run" / "checkpoint.cmrt"),
             "--stream", str(test_dir / "stream_000.cmrt"), "--cache", "--out", str(root / "infer")]),
        cli(["eval", "--pred", str(root / "infer" / "predictions.jsonl"),
             "--gt", str(test_dir / "stream_000.cmrt"), "--out", str(root / "eval")]),
    ]
    return codes


def test_criterion_7_end_to_end(capsys, tmp_path):
    seed = 7
    a, b = tmp_path / "a", tmp_path / "b"
    codes = _pipeline(a, seed) + _pipeline(b, seed)
    checks = [("all commands exit 0", codes == [0] * len(codes))]
    if codes != [0] * len(codes):
        assert not verdict(capsys, 7, checks)

    same = all((a / f).read_bytes() == (b / f).read_bytes() for f in (
        "run/checkpoint.cmrt", "infer/predictions.jsonl", "eval/report.json"))
    checks.append(("deterministic artifacts", same))

    report = json.loads((a / "eval" / "report.json").read_text())
    from cmert.memory import load_stream
    labels = load_stream(a / "test" / "stream_000.cmrt").labels
    frames, det, _ = read_predictions(a / "infer" / "predictions.jsonl")
    det = det[np.argsort(frames, kind="stable")]
    rng = np.random.default_rng(seed)
    chance = float(np.mean([per_frame_map(det[rng.permutation(len(det))], labels)
                            for _ in range(20)]))
    got = report["per_frame_map"]
    checks.append((f"mAP {got:.1f} vs shuffled {chance:.1f}", got >= chance + 20))
    assert not verdict(capsys, 7, checks)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
