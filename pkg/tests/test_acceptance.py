"""Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.

Criteria 5 to 8 share one desk-scale pipeline (warm-up, two GRPO runs, held-out
evaluation). It takes roughly 20 minutes on one CPU core.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import binomtest

from groundrl import tensor as T
from groundrl.cli import main as cli_main
from groundrl.data import TaskConfig, build_dataset
from groundrl.evaluation import counterfactual_accuracy, evaluate_faithfulness, evaluate_pointing
from groundrl.grpo import Hyperparams, PolicyState, RolloutGroup, group_objective, kl_penalty, standardize_advantages, train
from groundrl.model import ModelConfig, SegmentedSequence, forward_with_trace, init_model, response_logprobs
from groundrl.reward import BoundingBox, alignment_score
from groundrl.saliency import SaliencyMap, bottleneck_rollout, direct_contributions
from groundrl.vocab import Segment
from groundrl.warmup import WarmupConfig, warmup
from conftest import ACCEPTANCE_LINES
from helpers import SMALL, random_image, random_params, random_sequence

# pinned tolerances and budgets
DECOMP_ATOL = 1e-6
DECOMP_PAIRS = 100
DECOMP_SECONDS = 30.0
GRAD_RTOL = 1e-4
GRAD_CONFIGS = 20
GRAD_MAX_PARAMS = 200
GRAD_SECONDS = 60.0
ALIGN_ATOL = 1e-9
KL_SAMPLES = 10**6
ADV_GROUPS = 10**4
ADV_ATOL = 1e-9
MASS_ATOL = 1e-9
MASS_TRACES = 100
FAITH_SAMPLES = 60
FAITH_FRACTION = 0.30
FAITH_P = 0.05
FAITH_SECONDS = 300.0
PG_GAP = 0.05
ACC_SLACK = 0.02
PIPELINE_SECONDS = 30 * 60.0
ACC_GAIN = 0.30
CF_SAMPLES = 100


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# ----------------------------------------------------- 1. decomposition

def test_criterion_1_decomposition_exactness():
    start = time.process_time()
    worst = 0.0
    checked = 0
    for k in range(DECOMP_PAIRS):
        rng = np.random.default_rng([1, k])
        cfg = replace(SMALL, n_layers=int(rng.integers(1, 4)), n_heads=int(rng.choice([1, 2, 4])))
        params = random_params(cfg, 100 + k)
        seq = random_sequence(cfg, rng)
        logits, tr = forward_with_trace(params, random_image(cfg, rng), seq)
        for i in range(len(seq)):
            for target in range(cfg.vocab_size):
                cv = direct_contributions(tr, i, target)
                worst = max(worst, abs(cv.total() - logits[i, target]))
                checked += 1
    elapsed = time.process_time() - start
    ok = worst <= DECOMP_ATOL and elapsed < DECOMP_SECONDS
    record(1, ok, f"{DECOMP_PAIRS} pairs, {checked} logits, max |sum c + rem - logit| = {worst:.2e} (tol {DECOMP_ATOL}), {elapsed:.1f}s cpu")
    assert ok


# ------------------------------------------------ 2. gradient fidelity

TINY = ModelConfig(n_layers=1, n_heads=1, d_model=3, vocab_size=6, grid=(1, 2), patch_px=1, max_len=6)


def tiny_group(k: int, hp: Hyperparams):
    """A G=3 group of random length-6 sequences on a 144-parameter model."""
    rng = np.random.default_rng([2, k])
    params = init_model(TINY, k)
    for name in params.arrays:
        params.arrays[name] = params.arrays[name] + rng.normal(scale=0.5, size=params.arrays[name].shape)
    images = rng.random((3,) + TINY.image_shape)
    segs = [Segment.VISUAL, Segment.VISUAL, Segment.PROMPT, Segment.THINK, Segment.THINK, Segment.ANSWER]
    seqs = [SegmentedSequence([0, 0, *rng.integers(0, 6, size=4)], segs) for _ in range(3)]

    def perturbed(scale):
        q = params.copy()
        for name in q.arrays:
            q.arrays[name] = q.arrays[name] + rng.normal(scale=scale, size=q.arrays[name].shape)
        return response_logprobs(q, TINY, images, seqs)[0].data

    old, ref = perturbed(0.05), perturbed(0.2)
    _, mask = response_logprobs(params, TINY, images, seqs)
    adv = standardize_advantages(rng.normal(size=3))
    group = FixedImageGroup(None, seqs, old, ref, mask, [], [], adv)
    group.fixed_images = images
    return params, group


class FixedImageGroup(RolloutGroup):
    """Group whose rows carry their own images instead of one DataSample."""

    fixed_images = None

    @property
    def images(self):
        return self.fixed_images


def test_criterion_2_gradient_fidelity():
    start = time.process_time()
    worst = 0.0
    n_params = sum(a.size for a in init_model(TINY, 0).arrays.values())
    for k in range(GRAD_CONFIGS):
        hp = Hyperparams(beta=[0.0, 0.04, 0.5][k % 3], ratio_level=["token", "sequence"][k % 2], eps_clip=[0.2, 0.1, 0.3][k % 3])
        params, group = tiny_group(k, hp)
        leaves = params.tensors(requires_grad=True)
        with T.GradientTape() as tape:
            obj, _ = group_objective(leaves, TINY, group, hp)
        grads = T.backward(tape, obj, leaves)
        analytic = np.concatenate([grads[n].data.ravel() for n in sorted(leaves)])

        def f(name, idx, delta):
            q = params.copy()
            q.arrays[name][idx] += delta
            return group_objective(q, TINY, group, hp)[0].item()

        h = 1e-6
        numeric = np.concatenate(
            [
                np.array([(f(n, idx, h) - f(n, idx, -h)) / (2 * h) for idx in np.ndindex(params.arrays[n].shape)])
                for n in sorted(leaves)
            ]
        )
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        worst = max(worst, rel)
    elapsed = time.process_time() - start
    ok = worst <= GRAD_RTOL and elapsed < GRAD_SECONDS and n_params <= GRAD_MAX_PARAMS
    record(2, ok, f"{GRAD_CONFIGS} configs on a {n_params}-parameter policy, max relative error {worst:.2e} (tol {GRAD_RTOL}), {elapsed:.1f}s cpu")
    assert ok


# ------------------------------------------------ 3. reward/metric algebra

def test_criterion_3_reward_and_metric_algebra():
    rng = np.random.default_rng(3)
    align_ok = True
    for _ in range(2000):
        rows, cols, p = int(rng.integers(1, 7)), int(rng.integers(1, 7)), int(rng.integers(1, 5))
        w, h = cols * p, rows * p
        boxes = []
        for _ in range(int(rng.integers(1, 4))):
            x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
            boxes.append(BoundingBox(x0, y0, int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1))))
        vals = rng.random((rows, cols)) * (rng.random((rows, cols)) < 0.7)
        s = alignment_score(SaliencyMap(vals), boxes, w, h)
        align_ok &= 0.0 <= s <= 1.0
        inside = np.zeros((h, w), bool)
        for b in boxes:
            inside[b.y0 : b.y1, b.x0 : b.x1] = True
        align_ok &= abs(alignment_score(SaliencyMap(np.ones((rows, cols))), boxes, w, h) - inside.mean()) <= ALIGN_ATOL

    log_r = rng.uniform(-40, 40, size=KL_SAMPLES)
    log_r[: KL_SAMPLES // 2] = rng.normal(scale=1e-4, size=KL_SAMPLES // 2)  # dense near r = 1
    kl_min = min(kl_penalty(0.0, float(d)) for d in log_r)
    kl_ok = kl_min >= 0.0

    adv_ok = True
    for k in range(ADV_GROUPS):
        g = int(rng.integers(2, 17))
        r = rng.choice([0.0, 1.0, 2.0], size=g) + (rng.random(g) if k % 3 else 0.0)
        a = standardize_advantages(r)
        if np.sqrt(np.mean((r - r.mean()) ** 2)) < 1e-8:
            adv_ok &= bool(np.all(a == 0))
        else:
            adv_ok &= abs(a.mean()) <= ADV_ATOL and abs(np.sqrt(np.mean(a**2)) - 1) <= ADV_ATOL
    ok = align_ok and kl_ok and adv_ok
    record(3, ok, f"alignment range/uniform ({ALIGN_ATOL}): {align_ok}; KL min over {KL_SAMPLES} = {kl_min:.3e}; advantages over {ADV_GROUPS} groups ({ADV_ATOL}): {adv_ok}")
    assert ok


# ------------------------------------------------- 4. rollout mass bound

def test_criterion_4_rollout_mass_bound():
    worst = -np.inf
    for k in range(MASS_TRACES):
        rng = np.random.default_rng([4, k])
        cfg = replace(SMALL, n_layers=int(rng.integers(1, 4)), n_heads=int(rng.choice([1, 2, 4])))
        params = random_params(cfg, 400 + k, scale=float(rng.uniform(0.5, 4)))
        seq = random_sequence(cfg, rng)
        _, tr = forward_with_trace(params, random_image(cfg, rng), seq)
        worst = max(worst, float(bottleneck_rollout(tr, seq).column_sums().max()))
    ok = worst <= 1 + MASS_ATOL
    record(4, ok, f"{MASS_TRACES} traces, max column sum {worst:.6f} (bound 1 + {MASS_ATOL})")
    assert ok


# ------------------------------------------------- shared desk pipeline

DATA_N, DATA_TEST, DATA_SEED = 4500, 500, 0
WARMUP_CHUNKS = (300, 300, 400, 500, 500)  # resumed in chunks; each chunk seeds its batches with its start step
GRPO_STEPS = 1000
GRPO_LR = 1e-4  # the 1e-3 default is unstable at one question per step
GRPO_SEED = 1
HELDOUT = 200
CF_SIGMAS = (0.1, 0.3)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    ds = build_dataset(TaskConfig(), DATA_N, DATA_TEST, DATA_SEED)
    train_set, test_set = ds.split("train"), ds.split("test")
    params = init_model(ModelConfig(), 0)
    done = 0
    for chunk in WARMUP_CHUNKS:
        params, _ = warmup(params, train_set, WarmupConfig(steps=chunk, seed=done))
        done += chunk
    out = {"data": ds, "warmup": params, "runs": {}, "root": root}
    start = time.process_time()
    for arm, use_sal in (("saliency", True), ("ablation", False)):
        hp = Hyperparams(steps=GRPO_STEPS, lr=GRPO_LR, seed=GRPO_SEED, use_saliency_reward=use_sal)
        state = PolicyState.from_checkpoint(params, hp.lr)
        log = train(state, train_set, hp, root / f"{arm}.jsonl")
        rep = evaluate_pointing(state.theta, test_set[:HELDOUT])
        out["runs"][arm] = {"params": state.theta, "log": log, "heldout": rep.aggregates()}
    out["grpo_cpu"] = time.process_time() - start
    return out


# -------------------------------------------- 5. faithfulness direction

def test_criterion_5_faithfulness_direction(pipeline):
    start = time.process_time()
    samples = pipeline["data"].split("test")[:FAITH_SAMPLES]
    rep = evaluate_faithfulness(pipeline["warmup"], samples, fractions=[FAITH_FRACTION], random_seed=5)
    col = f"deletion_{FAITH_FRACTION:g}"
    pairs = [(r[col], r[f"random_{col}"]) for r in rep.records if r[col] is not None]
    diff = np.array([a - b for a, b in pairs])
    below, nonzero = int((diff < 0).sum()), int((diff != 0).sum())
    p = binomtest(below, nonzero, alternative="greater").pvalue
    elapsed = time.process_time() - start
    ok = len(pairs) >= 50 and diff.mean() < 0 and p < FAITH_P and elapsed < FAITH_SECONDS
    record(
        5,
        ok,
        f"{len(pairs)} samples, deletion@{FAITH_FRACTION} saliency {np.mean([a for a, _ in pairs]):.2f} vs random "
        f"{np.mean([b for _, b in pairs]):.2f}, paired mean diff {diff.mean():.2f}, {below}/{nonzero} lower, sign test p={p:.2e}, {elapsed:.0f}s cpu",
    )
    assert ok


def test_deletion_ranking_sanity(pipeline):
    """Deleting the truly most-contributing patches hurts at least as much as deleting random ones."""
    from groundrl.evaluation import LikelihoodError, LikelihoodScorer, contribution_order, deletion_curve_for_order, greedy_responses
    from groundrl.model import trace_batch

    params = pipeline["warmup"]
    samples = pipeline["data"].split("test")[:60]
    images = np.stack([s.image for s in samples])
    seqs = greedy_responses(params, images, [s.question for s in samples])
    truth, rand = [], []
    for i, (s, seq, tr) in enumerate(zip(samples, seqs, trace_batch(params, images, seqs))):
        try:
            scorer = LikelihoodScorer(params, s.image, seq)
        except LikelihoodError:
            continue
        truth.append(deletion_curve_for_order(scorer, contribution_order(tr, seq), params.config.grid).normalized_scores)
        rand.append(deletion_curve_for_order(scorer, np.random.default_rng([9, i]).permutation(36), params.config.grid).normalized_scores)
    assert len(truth) >= 50
    assert np.all(np.mean(truth, axis=0) <= np.mean(rand, axis=0))


# ---------------------------------------------- 6. end-to-end effect

def test_criterion_6_saliency_reward_effect(pipeline):
    sal, abl = pipeline["runs"]["saliency"]["heldout"], pipeline["runs"]["ablation"]["heldout"]
    gap = sal["energy_pg"] - abl["energy_pg"]
    acc_drop = abl["accuracy"] - sal["accuracy"]
    cpu = pipeline["grpo_cpu"]
    ok = gap >= PG_GAP and acc_drop <= ACC_SLACK and cpu < PIPELINE_SECONDS
    record(
        6,
        ok,
        f"held-out ({HELDOUT}) energy-PG saliency {sal['energy_pg']:.4f} vs ablation {abl['energy_pg']:.4f} (gap {gap:+.4f}, need >= {PG_GAP}); "
        f"accuracy {sal['accuracy']:.3f} vs {abl['accuracy']:.3f} (drop {acc_drop:+.3f}, allow {ACC_SLACK}); two runs {cpu / 60:.1f} min cpu",
    )
    assert ok


# ------------------------------------------------ 7. training sanity

def test_criterion_7_training_raises_accuracy(pipeline):
    log = pipeline["runs"]["saliency"]["log"]
    first = np.mean([r["mean_accuracy"] for r in log[:50]])
    last = np.mean([r["mean_accuracy"] for r in log[-50:]])
    ok = last - first >= ACC_GAIN and len(log) <= 1000
    record(7, ok, f"{len(log)} steps, accuracy reward first-50 {first:.3f} -> last-50 {last:.3f} (gain {last - first:+.3f}, need >= {ACC_GAIN})")
    assert ok


def test_training_never_sees_test_ids(pipeline):
    test_ids = {s.id for s in pipeline["data"].split("test")}
    for run in pipeline["runs"].values():
        assert not {r["sample_id"] for r in run["log"]} & test_ids


# ------------------------------------------ 8. counterfactual direction

def test_criterion_8_counterfactual_direction(pipeline):
    params = pipeline["runs"]["saliency"]["params"]
    samples = pipeline["data"].split("test")[:CF_SAMPLES]
    clean, _ = counterfactual_accuracy(params, samples, 0.0, "foreground", seed=8)
    sigma = max(CF_SIGMAS)
    fg, _ = counterfactual_accuracy(params, samples, sigma, "foreground", seed=8)
    bg, _ = counterfactual_accuracy(params, samples, sigma, "background", seed=8)
    ok = clean - fg >= clean - bg
    record(8, ok, f"{len(samples)} samples, sigma {sigma}: clean {clean:.3f}, foreground drop {clean - fg:+.3f}, background drop {clean - bg:+.3f}")
    assert ok


# ------------------------------------------------------ 9. determinism

def _cli_pipeline(root):
    root.mkdir(parents=True)
    conf = root / "conf.json"
    conf.write_text(json.dumps({"model": {"n_layers": 1, "n_heads": 2, "d_model": 16}, "eval": {"max_new": 12}}))
    data, wu, gr = str(root / "data"), root / "wu", root / "gr"
    c = ["--config", str(conf), "--seed", "9"]
    steps = [
        ["gen-data", "--n", "60", "--n-test", "10", "--out", data, "--seed", "9"],
        ["warmup", "--data", data, *c, "--steps", "30", "--batch-size", "4", "--out", str(wu)],
        ["train-grpo", "--data", data, *c, "--init", str(wu / "checkpoint.json"), "--steps", "4", "--group-size", "4", "--max-new", "12", "--lr", "1e-4", "--out", str(gr)],
        ["eval-pg", "--data", data, *c, "--checkpoint", str(gr / "checkpoint.json"), "--out", str(root / "pg")],
        ["eval-faithfulness", "--data", data, *c, "--checkpoint", str(gr / "checkpoint.json"), "--limit", "4", "--out", str(root / "ff")],
        ["eval-counterfactual", "--data", data, *c, "--checkpoint", str(gr / "checkpoint.json"), "--sigmas", "0", "0.3", "--out", str(root / "cf")],
    ]
    for argv in steps:
        assert cli_main(argv) == 0, argv
    names = ["wu/warmup_log.jsonl", "gr/train_log.jsonl", "gr/checkpoint.json"]
    names += [f"{d}/report.{ext}" for d in ("pg", "ff", "cf") for ext in ("json", "csv")]
    return {n: (root / n).read_bytes() for n in names}


def test_criterion_9_determinism(tmp_path):
    a = _cli_pipeline(tmp_path / "a")
    b = _cli_pipeline(tmp_path / "b")
    differing = [n for n in a if a[n] != b[n]]
    ok = not differing and all(len(v) > 0 for v in a.values())
    record(9, ok, f"{len(a)} artifacts (training logs, checkpoint, reports) byte-identical across two seeded runs; differing: {differing or 'none'}")
    assert ok
