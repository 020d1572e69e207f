"""Acceptance criteria, each run at its stated tolerance and time budget.

Every test appends one PASS/FAIL line to the acceptance summary printed at
the end of the pytest run. Criterion 7 is a report: its inequality is
printed as PASS or FLAGGED and never fails the suite by itself.
"""
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from vcontrast import autodiff as ad
from vcontrast.autodiff import Tape, Tensor
from vcontrast.cli import main as cli_main
from vcontrast.evaluation import avg_improvement, neglect_probe, pair_accuracy, visual_dependency
from vcontrast.model import ModelParams, bundles_from_table, pair_logprobs
from vcontrast.mvc.filtering import FilterConfig, read_kept_ids, run_filter
from vcontrast.mvc.simulate import vectors_with_cosine
from vcontrast.mvc.store import EmbeddingRecord, write_store
from vcontrast.objectives import (LN2, OBJECTIVES, Betas, LogProbBundle, attend_loss, dpo_loss, exchange,
                                  objective_loss, reject_loss, svco_loss, vco_loss, viscon_loss)
from vcontrast.synthetic import gen_corpus, strip_shortcut
from vcontrast.training import TrainConfig, _derive_seed, train

from conftest import ACCEPTANCE_LINES, FD_STEP, numeric_grad, rel_error


def record_result(number: int, title: str, ok: bool, detail: str, label: str | None = None) -> None:
    status = label or ("PASS" if ok else "FAIL")
    line = f"criterion {number} [{status}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# ---------------------------------------------------------------- 1

def test_c1_objective_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    expected = {"dpo": 1, "viscon": 1, "attend": 1, "reject": 1, "vco": 2, "svco": 4}
    for _ in range(50):
        vw, vl = -rng.uniform(0.1, 30, 3), -rng.uniform(0.1, 30, 3)
        bw = LogProbBundle(*vw, *vw)
        bl = LogProbBundle(*vl, *vl)
        values = {"dpo": dpo_loss(bw, bl), "viscon": viscon_loss(bw), "attend": attend_loss(bw),
                  "reject": reject_loss(bw), "vco": vco_loss(bw), "svco": svco_loss(bw, bl)}
        for name, loss in values.items():
            worst = max(worst, abs(loss.item() - expected[name] * LN2))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 1.0
    record_result(1, "objective exactness at policy == reference", ok,
                  f"max |loss - k ln2| = {worst:.2e} (tol 1e-9), {elapsed:.2f}s (< 1s)")
    assert ok


# ---------------------------------------------------------------- 2

def test_c2_symmetry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    n, mismatches = 1000, 0
    for _ in range(n):
        v = -rng.exponential(5.0, 12)
        betas = Betas(*rng.uniform(0.01, 2.0, 3))
        bw, bl = LogProbBundle(*v[:6]), LogProbBundle(*v[6:])
        if svco_loss(bw, bl, betas).item() != svco_loss(exchange(bl), exchange(bw), betas).item():
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 1.0
    record_result(2, "svco exchange symmetry", ok,
                  f"{mismatches}/{n} bundles differ bit-wise, {elapsed:.2f}s (< 1s)")
    assert ok


# ---------------------------------------------------------------- 3

def _bundle_grad_check(name, rng):
    batch = int(rng.integers(1, 5))
    values = -rng.uniform(0.05, 25, size=(12, batch))
    betas = Betas(*rng.uniform(0.05, 1.0, 3))
    leaves = [Tensor(v, requires_grad=True) for v in values]
    with Tape() as tape:
        loss = objective_loss(name, LogProbBundle(*leaves[:6]), LogProbBundle(*leaves[6:]), betas)
    grads = ad.backward(tape, loss, wrt=leaves)
    analytic = np.array([grads[t] for t in leaves])

    def f(flat):
        v = flat.reshape(12, batch)
        return objective_loss(name, LogProbBundle(*v[:6]), LogProbBundle(*v[6:]), betas).item()

    fd = numeric_grad(f, values.reshape(-1)).reshape(12, batch)
    pol = [0, 1, 2, 6, 7, 8]
    ref = [3, 4, 5, 9, 10, 11]
    return rel_error(analytic[pol], fd[pol]), bool(np.all(analytic[ref] == 0.0))


def _model_grad_check(name, rng, pairs):
    ref_params = ModelParams.init(int(rng.integers(2**31)), requires_grad=True)
    policy = ModelParams({k: Tensor(t.data + rng.normal(0, 0.2, t.shape), requires_grad=True)
                          for k, t in ref_params.tensors.items()})
    batch = [pairs[i] for i in rng.choice(len(pairs), size=2, replace=False)]
    betas = Betas(*rng.uniform(0.05, 1.0, 3))
    with Tape() as tape:
        ref_table = pair_logprobs(ref_params, batch)
        bw, bl = bundles_from_table(pair_logprobs(policy, batch), ref_table)
        loss = objective_loss(name, bw, bl, betas)
    grads = ad.backward(tape, loss, wrt=policy.values() + ref_params.values())
    ref_zero = all(np.all(grads[t] == 0.0) for t in ref_params.values())
    fixed_ref = ref_table.data

    # probe entries the loss actually depends on
    candidates = [(k, i) for k in policy.tensors for i in np.flatnonzero(np.abs(grads[policy[k]]) > 1e-7)]
    picks = [candidates[j] for j in rng.choice(len(candidates), size=min(6, len(candidates)), replace=False)]
    analytic = np.array([grads[policy[k]].reshape(-1)[i] for k, i in picks])

    def f(vals):
        arrays = {k: t.data.copy() for k, t in policy.tensors.items()}
        for (k, i), v in zip(picks, vals):
            arrays[k].reshape(-1)[i] = v
        p = ModelParams({k: Tensor(a) for k, a in arrays.items()})
        b1, b2 = bundles_from_table(pair_logprobs(p, batch), fixed_ref)
        return objective_loss(name, b1, b2, betas).item()

    start = np.array([policy[k].data.reshape(-1)[i] for k, i in picks])
    return rel_error(analytic, numeric_grad(f, start)), ref_zero


def test_c3_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    pairs = gen_corpus(3, 200)
    n_configs = 100
    worst, ref_ok, checks = 0.0, True, 0
    for name in OBJECTIVES:
        for _ in range(n_configs):
            err, zero = _bundle_grad_check(name, rng)
            worst, ref_ok, checks = max(worst, err), ref_ok and zero, checks + 1
            err, zero = _model_grad_check(name, rng, pairs)
            worst, ref_ok, checks = max(worst, err), ref_ok and zero, checks + 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and ref_ok and elapsed < 30.0
    record_result(3, "gradient fidelity vs central differences", ok,
                  f"{checks} configs ({n_configs} per objective, bundle and end-to-end), h={FD_STEP:g}, "
                  f"max rel err {worst:.2e} (< 1e-4), reference grads exactly zero: {ref_ok}, "
                  f"{elapsed:.1f}s (< 30s)")
    assert ok


# ---------------------------------------------------------------- 4

E0 = np.array([1.0, 0.0, 0.0, 0.0])
AT_07 = np.array([7.0, 5.0, 5.0, 1.0])  # cosine with E0 is exactly 0.7
AT_05 = np.array([1.0, 1.0, 1.0, 1.0])  # exactly 0.5


def _brute_cos(a, b) -> float:
    a, b = [float(x) for x in a], [float(x) for x in b]
    dot = math.fsum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(math.fsum(x * x for x in a)) * math.sqrt(math.fsum(y * y for y in b)))


def _filter_fixture(rng, n=1000):
    cats = ("object", "attribute", "count", "position")
    recs = []
    for k in range(n):
        cat = cats[k % 4]
        kind = k % 10
        if kind == 0:
            clip, dino = (E0, AT_07), vectors_with_cosine(rng, 4, rng.uniform(-0.5, 0.45))
        elif kind == 1:
            clip, dino = vectors_with_cosine(rng, 4, rng.uniform(0.75, 0.99)), (E0, AT_05)
        elif kind == 2:
            clip, dino = (E0, AT_07), (E0, AT_05)
        else:
            clip = vectors_with_cosine(rng, 4, rng.uniform(0.4, 0.99))
            dino = vectors_with_cosine(rng, 4, rng.uniform(0.1, 0.9))
        recs.append(EmbeddingRecord(f"r{k:05d}", *clip, *dino, category=cat))
    return recs


def test_c4_filter_oracle(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    recs = _filter_fixture(rng)
    store, shuffled_store = tmp_path / "s.bin", tmp_path / "s2.bin"
    write_store(recs, store)
    write_store([recs[i] for i in rng.permutation(len(recs))], shuffled_store)
    cfg = FilterConfig()
    outs = {}
    for label, path, seed in (("a", store, 7), ("b", shuffled_store, 7), ("c", store, 8)):
        outs[label] = tmp_path / f"kept_{label}.jsonl"
        run_filter(path, cfg, seed=seed, out_path=outs[label])
    kept = set(read_kept_ids(outs["a"]))

    # brute force on the float32 values actually stored
    thresholded = {r.pair_id for r in recs if r.category != "position"
                   and _brute_cos(r.clip_a, r.clip_b) > 0.7 and _brute_cos(r.dino_a, r.dino_b) < 0.5}
    non_bypass = [r for r in recs if r.category != "position"]
    bypass_ids = {r.pair_id for r in recs if r.category == "position"}
    rate = Fraction(len(thresholded), len(non_bypass))
    expected_bypass = math.floor(rate * len(bypass_ids) + Fraction(1, 2))
    boundary = {r.pair_id for r in recs if int(r.pair_id[1:]) % 10 in (0, 1, 2) and r.category != "position"}

    same_decisions = kept - bypass_ids == thresholded
    boundary_rejected = not (kept & boundary)
    bypass_count_ok = len(kept & bypass_ids) == expected_bypass
    stable = outs["a"].read_bytes() == outs["b"].read_bytes()
    seed_matters = set(read_kept_ids(outs["c"])) & bypass_ids != kept & bypass_ids
    elapsed = time.perf_counter() - t0
    ok = same_decisions and boundary_rejected and bypass_count_ok and stable and seed_matters and elapsed < 5
    record_result(4, "filter equals brute-force oracle", ok,
                  f"{len(recs)} records, thresholded set equal: {same_decisions}, "
                  f"{len(boundary)} boundary ties rejected: {boundary_rejected}, bypass sample "
                  f"{len(kept & bypass_ids)}=={expected_bypass}: {bypass_count_ok}, order/seed stable: {stable}, "
                  f"{elapsed:.2f}s (< 5s)")
    assert ok


# ---------------------------------------------------------------- 5, 6, 7

SEEDS = (0, 1, 2, 3, 4)
TOY_LR = 1.0
N_TRAIN = 2000
N_EVAL = 1000


def _shortcut_run(objective: str, seed: int, lr: float = TOY_LR) -> float:
    cfg = TrainConfig(objective=objective, learning_rate=lr, epochs=2, seed=seed)
    _, policy = train(cfg, gen_corpus(seed, N_TRAIN, shortcut=True))
    held_out = strip_shortcut(gen_corpus(10_000 + seed, N_EVAL, shortcut=True))
    return pair_accuracy(policy, held_out)


@pytest.fixture(scope="module")
def shortcut_results():
    t0 = time.perf_counter()
    acc = {obj: [_shortcut_run(obj, s) for s in SEEDS] for obj in ("svco", "vco")}
    return acc, time.perf_counter() - t0


def test_c5_shortcut_learning(shortcut_results):
    acc, elapsed = shortcut_results
    gap = float(np.mean(acc["svco"]) - np.mean(acc["vco"]))
    ok = gap >= 0.05 and elapsed < 300
    per_seed = ", ".join(f"{a:.3f}/{b:.3f}" for a, b in zip(acc["svco"], acc["vco"]))
    record_result(5, "S-VCO beats one-sided VCO once the shortcut is removed", ok,
                  f"pair_accuracy svco/vco per seed [{per_seed}], mean gap {100 * gap:+.1f} pts (>= +5), "
                  f"{elapsed:.0f}s (< 300s)")
    assert ok


def test_c6_neglect_probe():
    t0 = time.perf_counter()
    seed = 0
    held_out = gen_corpus(1_000_000, N_EVAL)
    untrained = ModelParams.init(_derive_seed(seed, 0))
    before = neglect_probe(untrained, held_out)
    # four epochs: at two the match rate sits near 0.87 on this toy
    cfg = TrainConfig(objective="svco", learning_rate=TOY_LR, epochs=4, seed=seed)
    _, policy = train(cfg, gen_corpus(seed, N_TRAIN))
    after = neglect_probe(policy, held_out)
    means = after.means
    elapsed = time.perf_counter() - t0
    untrained_ok = abs(before.match_below_mismatch - 0.5) <= 0.05
    trained_ok = after.match_below_mismatch >= 0.90
    between = min(means["match"], means["mismatch"]) < means["noimage"] < max(means["match"], means["mismatch"])
    ok = untrained_ok and trained_ok and between and elapsed < 300
    record_result(6, "neglect probe corrected by S-VCO", ok,
                  f"untrained match<mismatch {before.match_below_mismatch:.3f} (0.50 +/- 0.05), trained "
                  f"{after.match_below_mismatch:.3f} (>= 0.90), mean ppl match {means['match']:.4g} < noimage "
                  f"{means['noimage']:.4g} < mismatch {means['mismatch']:.4g}: {between}, {elapsed:.0f}s (< 300s)")
    assert ok


def test_c7_sft_ablation(shortcut_results, tmp_path_factory):
    acc, _ = shortcut_results
    sft = [_shortcut_run("sft2", s) for s in SEEDS]
    # stable-step sensitivity row: SFT at a learning rate it tolerates
    sft_small = [_shortcut_run("sft2", s, lr=0.3) for s in SEEDS]
    svco_mean, sft_mean = float(np.mean(acc["svco"])), float(np.mean(sft))
    holds = sft_mean <= svco_mean
    report = {
        "config": {"learning_rate": TOY_LR, "epochs": 2, "n_train": N_TRAIN, "n_eval": N_EVAL, "seeds": SEEDS},
        "svco": acc["svco"], "sft2": sft, "svco_mean": svco_mean, "sft2_mean": sft_mean,
        "inequality_holds": holds,
        "sensitivity_sft2_lr0.3": sft_small, "sensitivity_sft2_lr0.3_mean": float(np.mean(sft_small)),
    }
    path = tmp_path_factory.mktemp("reports") / "sft_ablation.json"
    path.write_text(json.dumps(report, indent=1) + "\n")
    record_result(7, "SFTx2 does not beat S-VCO under identical budgets", holds,
                  f"shortcut-removed pair_accuracy sft2 {sft_mean:.3f} vs svco {svco_mean:.3f}; "
                  f"sensitivity sft2 at lr 0.3: {np.mean(sft_small):.3f}; report {path}",
                  label="PASS" if holds else "FLAGGED")
    assert path.exists()


# ---------------------------------------------------------------- 8

METRICS = ("mmhal_score", "hal_rate", "cvbench", "mmvp", "rqa", "mmvet", "lvbench", "textvqa", "sqa")
LOWER_BETTER = {"hal_rate"}
TABLE = {
    "lv15": {
        "BASE": ("2.16", "57", "59.3", "21.3", "35.3", "30.46", "61.2", "46.40", "66.78"),
        "DPO_VLF": (("2.06", "65", "57.0", "16.7", "39.5", "31.65", "68.1", "49.16", "66.71"), "-1.25"),
        "DPO_MVC": (("2.45", "53", "63.2", "22.0", "42.1", "33.53", "66.0", "49.43", "66.07"), "8.11"),
        "mDPO_VLF": (("2.39", "57", "53.2", "18.7", "44.2", "31.79", "68.4", "41.71", "66.52"), "2.11"),
        "mDPO_MVC": (("2.29", "56", "59.4", "20.7", "35.2", "31.51", "63.0", "46.42", "66.80"), "1.26"),
        "SVCO_MVC": (("2.75", "46", "63.5", "25.3", "43.0", "34.68", "69.5", "49.16", "67.22"), "14.26"),
    },
    "int": {
        "BASE": ("2.74", "46", "67.6", "41.3", "57.5", "41.01", "74.5", "59.45", "74.77"),
        "DPO_VLF": (("2.70", "48", "68.1", "42.7", "54.4", "40.87", "81.0", "59.20", "74.79"), "0.10"),
        "DPO_MVC": (("2.92", "38", "68.8", "46.7", "57.9", "41.51", "83.5", "59.76", "73.80"), "5.78"),
        "mDPO_VLF": (("2.97", "42", "68.0", "42.0", "54.8", "40.46", "79.3", "58.97", "74.53"), "2.07"),
        "mDPO_MVC": (("3.04", "38", "70.0", "44.7", "57.9", "41.24", "80.2", "59.43", "74.65"), "5.43"),
        "SVCO_MVC": (("3.28", "35", "71.0", "50.7", "58.2", "44.04", "85.0", "60.26", "73.87"), "10.47"),
        "SVCO_RAW": (("3.10", "35", "71.3", "46.0", "58.8", "40.55", "86.5", "59.22", "73.87"), "7.73"),
        "VCO_MVC": (("3.16", "39", "70.1", "46.0", "56.2", "42.61", "84.8", "59.87", "74.44"), "6.82"),
        "SFT_MVCx2": (("2.68", "46", "66.6", "38.7", "56.5", "38.94", "70.7", "59.32", "74.77"), "-2.45"),
    },
}


def _exact_avg_improvement(base, tuned) -> Fraction:
    total = Fraction(0)
    for name, b, t in zip(METRICS, base, tuned):
        change = (Fraction(t) - Fraction(b)) / Fraction(b)
        total += -change if name in LOWER_BETTER else change
    return total / len(METRICS)


def test_c8_aggregation():
    worst, printed_ok, rows = 0.0, True, 0
    for model in TABLE.values():
        base = model["BASE"]
        for name, (tuned, printed) in ((k, v) for k, v in model.items() if k != "BASE"):
            got = avg_improvement(dict(zip(METRICS, map(float, base))), dict(zip(METRICS, map(float, tuned))),
                                  LOWER_BETTER)
            exact = _exact_avg_improvement(base, tuned)
            worst = max(worst, abs(got - float(exact)))
            # printed column is a percentage rounded to two decimals
            printed_ok &= abs(Fraction(printed) - exact * 100) <= Fraction(1, 200)
            rows += 1
    anchors = (visual_dependency(0.413, 0.0) == 1.0, abs(visual_dependency(50, 48) - 0.04) < 1e-12)
    ok = worst < 1e-12 and printed_ok and all(anchors)
    record_result(8, "aggregation reproduces hand-computed and printed values", ok,
                  f"{rows} table rows, max |avg_improvement - exact rational| = {worst:.1e} (< 1e-12), "
                  f"printed two-decimal values reproduced: {printed_ok}, dependency anchors (MMVP 1.0, SQA 0.04): "
                  f"{all(anchors)}")
    assert ok


# ---------------------------------------------------------------- 9

def _pipeline(workdir, seed=5):
    workdir.mkdir()
    w = str(workdir)
    steps = [
        ["gen-data", "--seed", str(seed), "--n", "300", "--shortcut", "--out", f"{w}/corpus.jsonl",
         "--captions", f"{w}/captions.jsonl", "--store", f"{w}/store.bin"],
        ["filter", "--store", f"{w}/store.bin", "--seed", str(seed), "--out", f"{w}/kept.jsonl"],
        ["augment", "--in", f"{w}/captions.jsonl", "--kept", f"{w}/kept.jsonl", "--out", f"{w}/augmented.jsonl"],
        ["train", "--objective", "svco", "--seed", str(seed), "--epochs", "1", "--lr", "1.0",
         "--checkpoint-interval", "4", "--corpus", f"{w}/corpus.jsonl", "--out", f"{w}/run"],
        ["eval", "--checkpoint", f"{w}/run/final.ckpt", "--corpus", f"{w}/corpus.jsonl", "--strip-shortcut",
         "--out", f"{w}/eval.json"],
        ["probe", "--checkpoint", f"{w}/run/final.ckpt", "--corpus", f"{w}/corpus.jsonl", "--out",
         f"{w}/probe.json", "--csv", f"{w}/probe.csv"],
    ]
    for argv in steps:
        assert cli_main(argv) == 0, argv
    return {str(p.relative_to(workdir)): p.read_bytes() for p in sorted(workdir.rglob("*")) if p.is_file()}


def test_c9_determinism(tmp_path):
    first = _pipeline(tmp_path / "first")
    second = _pipeline(tmp_path / "second")
    differing = sorted(k for k in set(first) | set(second) if first.get(k) != second.get(k))
    ok = not differing and len(first) > 10
    record_result(9, "pipeline rerun is byte-identical", ok,
                  f"{len(first)} artifacts compared (gen-data, filter, augment, train, eval, probe); "
                  f"differing: {differing or 'none'}")
    assert ok
