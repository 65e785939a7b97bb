"""Acceptance suite: one test per criterion, each with its runtime bound.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

import oracles
from helpers import rec
from vecap.evaluation import build_class_embedding, map_leave_one_out, recall_at_k, zeroshot_classify
from vecap.llmclient import LLMClient, RetryPolicy
from vecap.loss import LossState, TrainConfig, clip_loss, loss_and_grads, make_synthetic, mixed_variant_hook, train_toy
from vecap.mockllm import MockRule
from vecap.recaption import RecaptionConfig, build_fusion_prompt, build_vec_prompt, recaption_shard
from vecap.sampler import CaptionSource, SamplerConfig, mix
from vecap.shardio import ImageTextRecord, read_records, write_embeddings, write_records

# written out literally so a template regression cannot hide behind shared constants
VEC_TEMPLATE = "Describe the image concisely, less than 20 words"
FUSION_TEMPLATE = (
    "Rephrase the following two sentences into one short sentence while adhering to the provided "
    "instructions: Place attributes before noun entities without introducing new meaning. "
    'Do not start with "The image". 1. {alt}; 2. {vec}'
)


def elapsed(start):
    return time.perf_counter() - start


@pytest.mark.criterion("C1")
def test_c1_loss_sanity():
    """identical embeddings, N=4: loss == ln 4 within 1e-9, < 1 ms"""
    z = np.tile([[0.0, 1.0, 0.0]], (4, 1))
    state = LossState(z, z, 0.0)
    loss, _ = clip_loss(state)
    assert abs(loss - math.log(4)) <= 1e-9
    # best of several warm calls, as timeit does
    best = min(_time(lambda: clip_loss(state)) for _ in range(20))
    assert best < 1e-3


def _time(fn):
    t = time.perf_counter()
    fn()
    return elapsed(t)


@pytest.mark.criterion("C2")
def test_c2_gradient_correctness():
    """analytic grads match central differences (h=1e-5) over 20 seeds, < 10 s"""
    start = time.perf_counter()
    h = 1e-5

    def check(got, want):
        err = np.abs(np.asarray(got) - np.asarray(want))
        assert np.all(err <= np.maximum(1e-4 * np.abs(want), 1e-7)), float(np.max(err))

    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = [rng.standard_normal((8, 16)), rng.standard_normal((8, 16)), np.array([rng.uniform(-2.5, 0.0)])]
        _, da, db, dt = loss_and_grads(params[0], params[1], float(params[2][0]))

        def f():
            return loss_and_grads(params[0], params[1], float(params[2][0]))[0]

        for analytic, x in zip((da, db, np.array([dt])), params):
            numeric = np.zeros_like(x)
            for idx in np.ndindex(x.shape):
                orig = x[idx]
                x[idx] = orig + h
                up = f()
                x[idx] = orig - h
                down = f()
                x[idx] = orig
                numeric[idx] = (up - down) / (2 * h)
            check(analytic, numeric)
    assert elapsed(start) < 10


@pytest.mark.criterion("C3")
def test_c3_toy_mixed_training():
    """mixed sampling on separable toy data: held-out R@1 = 1.0 within 500 steps, finite loss, < 60 s"""
    start = time.perf_counter()
    data = make_synthetic(320, seed=0, variants=2)
    train, held = data.subset(np.arange(256)), data.subset(np.arange(256, 320))
    cfg = TrainConfig(total_steps=500, seed=0)
    result = train_toy(train, cfg, mixed_variant_hook(train, SamplerConfig(seed=0)))
    assert len(result.history) == 500
    assert all(math.isfinite(h[2]) for h in result.history)
    gt = {i: [i] for i in range(len(held))}
    for variant in held.txt_variants:
        zi, zt = result.encode(held.img, variant)
        assert recall_at_k(zi, zt, gt, (1,))[1] == 1.0
        assert recall_at_k(zt, zi, gt, (1,))[1] == 1.0
    assert elapsed(start) < 60


@pytest.mark.criterion("C4")
def test_c4_sampler_uniformity():
    """20,000 mixed draws: VeCap fraction in [0.489, 0.511], bit-exact under a fixed seed"""
    cfg = SamplerConfig(seed=0)
    records = [ImageTextRecord(f"rec-{i}", f"img/{i}.jpg", ("alt",), vec="v", vecap="fused") for i in range(20000)]
    first = [mix(r, cfg, 0) for r in records]
    frac = sum(c.source is CaptionSource.VECAP for c in first) / len(first)
    assert 0.489 <= frac <= 0.511, frac
    assert [mix(r, SamplerConfig(seed=0), 0) for r in records] == first


@pytest.mark.criterion("C5")
def test_c5_metric_oracles():
    """recall_at_k, zeroshot_classify, map_leave_one_out equal brute-force oracles on 50 instances, < 30 s"""
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    for _ in range(50):
        n = int(rng.integers(4, 201))
        d = int(rng.integers(1, 9))
        # quarter-integer entries make every dot product exact and ties frequent
        q = rng.integers(-3, 4, size=(n, d)) / 4.0
        x = rng.integers(-3, 4, size=(n, d)) / 4.0
        gt = {i: sorted(set(rng.integers(0, n, size=int(rng.integers(1, 4))).tolist())) for i in range(n)}
        ks = sorted({1, min(5, n), min(10, n)})
        assert recall_at_k(q, x, gt, ks) == oracles.recall_at_k((q @ x.T).tolist(), gt, ks)

        c = int(rng.integers(2, 20))
        cls = rng.integers(-3, 4, size=(c, d)) / 4.0
        labels = rng.integers(0, c, size=n)
        tk = sorted({1, min(5, c)})
        assert zeroshot_classify(q, cls, labels, tk) == oracles.topk_accuracy((q @ cls.T).tolist(), labels.tolist(), tk)

        m = int(rng.integers(1, n // 2 + 1))
        lab = np.concatenate([np.arange(m), np.arange(m), rng.integers(0, m, size=n - 2 * m)])
        rng.shuffle(lab)
        assert map_leave_one_out(q, lab) == oracles.leave_one_out_map((q @ q.T).tolist(), lab.tolist())
    assert elapsed(start) < 30


@pytest.mark.criterion("C6")
def test_c6_class_embedding():
    """class embeddings unit-norm within 1e-9 on 1000 sets; [1,0]/[0,1] -> [sqrt2/2, sqrt2/2] within 1e-12"""
    rng = np.random.default_rng(6)
    for _ in range(1000):
        t = rng.standard_normal((int(rng.integers(1, 81)), int(rng.integers(2, 129))))
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        assert abs(np.linalg.norm(build_class_embedding(t)) - 1.0) <= 1e-9
    got = build_class_embedding([[1.0, 0.0], [0.0, 1.0]])
    assert np.all(np.abs(got - math.sqrt(2) / 2) <= 1e-12)


@pytest.mark.criterion("C7")
def test_c7_pipeline_end_to_end(tmp_path, make_server, client):
    """100 records, 5 refusals, 7 over-length AltTexts: counts, golden prompts and order, < 10 s"""
    start = time.perf_counter()
    refuse = {3, 17, 42, 66, 91}
    too_long = {5, 20, 33, 50, 71, 88, 99}
    records = []
    for i in range(100):
        if i in refuse:
            alt = f"forbidden item {i}"
        elif i in too_long:
            alt = " ".join(["longword"] * 40) + f" {i}"
        else:
            alt = f"plain alt {i}"
        records.append(rec(i, alt=(alt,)))
    assert sum(len(r.alt_texts[0]) > 300 for r in records) == 7
    write_records(tmp_path / "in.jsonl", records)

    captioner = make_server(MockRule(match="Describe", respond="A photo of {image_ref}"))
    fuser = make_server(MockRule(match="forbidden", refusal=True), MockRule(respond="fused"))
    stats = recaption_shard(tmp_path / "in.jsonl", tmp_path / "out.jsonl", RecaptionConfig(),
                            captioner.url, fuser.url, client, batch_size=16, workers=4)
    out = list(read_records(tmp_path / "out.jsonl"))

    assert len(out) == 100
    assert (stats.refusals, stats.truncations) == (5, 7)
    assert [r.record_id for r in out] == [r.record_id for r in records]
    assert {i for i, r in enumerate(out) if "refusal_fallback" in r.flags} == refuse
    assert {i for i, r in enumerate(out) if "alttext_truncated" in r.flags} == too_long

    assert build_vec_prompt() == VEC_TEMPLATE
    assert all(p == VEC_TEMPLATE for r in captioner.log for p in r.prompts)
    sent = {p for r in fuser.log for p in r.prompts}
    assert FUSION_TEMPLATE.format(alt="plain alt 0", vec="A photo of img/0.jpg") in sent
    assert build_fusion_prompt("plain alt 0", "A photo of img/0.jpg") == \
        FUSION_TEMPLATE.format(alt="plain alt 0", vec="A photo of img/0.jpg")
    assert elapsed(start) < 10


@pytest.mark.criterion("C8")
def test_c8_networking(make_server):
    """ceil(n/64) requests, double-503 batch takes 3 attempts, in-flight <= workers"""
    client = LLMClient(sleep=lambda s: None)
    for n in (1, 64, 65, 130, 1000):
        server = make_server(MockRule(respond="{prompt}", jitter_ms=3), seed=n)
        items = [f"q{i}" for i in range(n)]
        assert list(client.schedule(items, 64, 4, server.url)) == items
        assert len(server.log) == math.ceil(n / 64)
        assert server.max_overlap() <= 4

    flaky = make_server(MockRule(match="q70", status=503, times=2), MockRule(respond="{prompt}"))
    items = [f"q{i}" for i in range(200)]
    assert list(client.schedule(items, 64, 2, flaky.url, RetryPolicy(base_delay=0, max_delay=0))) == items
    attempts = {}
    for r in flaky.log:
        attempts[r.request_id] = attempts.get(r.request_id, 0) + 1
    affected = next(r.request_id for r in flaky.log if "q70" in r.prompts)
    assert attempts.pop(affected) == 3
    assert set(attempts.values()) == {1}

    for workers in (1, 2, 3):
        slow = make_server(MockRule(respond="{prompt}", delay_ms=10, jitter_ms=20), seed=workers)
        items = [f"q{i}" for i in range(20 * workers)]
        assert list(client.schedule(items, 2, workers, slow.url)) == items
        assert slow.max_overlap() <= workers


def _cli(*argv):
    return subprocess.run([sys.executable, "-m", "vecap", *argv], capture_output=True, check=True).stdout


@pytest.mark.criterion("C9")
def test_c9_cli_determinism(tmp_path):
    """train-toy and eval stdout byte-identical across two runs"""
    train = ("train-toy", "--steps", "500", "--seed", "7")
    first = _cli(*train)
    assert first == _cli(*train)
    assert json.loads(first)["seed"] == 7

    rng = np.random.default_rng(9)
    e = rng.standard_normal((10, 8)).astype(np.float32)
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    write_embeddings(e, tmp_path / "img.bin")
    write_embeddings(e, tmp_path / "txt.bin")
    (tmp_path / "labels.jsonl").write_text("".join(json.dumps({"index": i, "label": i % 2}) + "\n" for i in range(10)))
    evaluate = ("eval", "--images", str(tmp_path / "img.bin"), "--texts", str(tmp_path / "txt.bin"),
                "--map-labels", str(tmp_path / "labels.jsonl"))
    first = _cli(*evaluate)
    assert first == _cli(*evaluate)
    assert json.loads(first)["recall"]["i2t"]["1"] == 1.0
