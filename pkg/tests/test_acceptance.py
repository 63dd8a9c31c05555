"""Acceptance suite: one test per release criterion, at fixed tolerances.

Each test prints one `[criterion N] PASS/FAIL` line (run with -s or -rA to
see them) and asserts its stated runtime budget. Criterion 10, the
full-dataset reproduction with large pretrained towers, needs dataset access
and GPU hours and is therefore a deliberate skip here.
"""

import functools
import random
import time

import numpy as np
import pytest
import torch

from playerreid.data import build_pair_instances, load_manifest
from playerreid.embeddings import EmbeddingMatrix
from playerreid.encoders import reference_tiny_encoder
from playerreid.eval import average_precision, cmc_rank_k, cosine_distance_matrix, mean_average_precision
from playerreid.loss import ContrastiveObjective, LossConfig, dual_view_forward, info_nce_symmetric
from playerreid.preprocess import PixelImage
from playerreid.rerank import k_reciprocal_rerank
from playerreid.sampler import SamplerConfig, sample_epoch, validate_batch
from playerreid.scorecam import ScoreCamConfig, score_cam
from playerreid.synth import SynthConfig, generate_corpus
from playerreid.train import TrainConfig, poly_warmup_lr, train
from playerreid.zeroshot import build_prompts, classify_zero_shot, macro_metrics, topk_accuracy

from conftest import make_split, random_embeddings, unit_rows
from oracles import (
    central_difference_errors,
    naive_average_precision,
    naive_cmc,
    naive_info_nce_symmetric,
    naive_k_reciprocal_rerank,
    naive_mean_ap,
)
from test_scorecam import StubEncoder, W1, W2, gray_image, stub_pre
from test_zeroshot import StubTextProvider


def criterion(number: int, budget_s: float, description: str):
    """Run the wrapped checks, print one pass/fail line, enforce the budget."""

    def decorator(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            start = time.monotonic()
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"[criterion {number}] FAIL - {description}")
                raise
            elapsed = time.monotonic() - start
            print(f"[criterion {number}] PASS - {description} ({elapsed:.1f}s)")
            assert elapsed < budget_s, f"criterion {number} exceeded {budget_s}s budget"

        return wrapper

    return decorator


@criterion(1, 10.0, "symmetric InfoNCE matches brute force on 100 random grids within 1e-6")
def test_criterion_1_loss_oracle():
    rng = np.random.default_rng(101)
    cases = 0
    for n in (2, 4, 8, 16):
        for eps in (0.0, 0.1):
            for _ in range(13):
                if cases >= 100:
                    break
                logits = rng.normal(0.0, 2.5, size=(n, n))
                ours = float(info_nce_symmetric(torch.from_numpy(logits), eps))
                reference = naive_info_nce_symmetric(logits, eps)
                assert abs(ours - reference) < 1e-6, (n, eps)
                cases += 1
    assert cases >= 100


@criterion(2, 120.0, "dual-view gradients match central differences (rel err < 1e-3)")
def test_criterion_2_gradient_audit():
    encoder = reference_tiny_encoder(seed=2).double()
    objective = ContrastiveObjective(LossConfig(logit_scale_trainable=False)).double()
    gen = torch.Generator().manual_seed(7)
    q = torch.rand(3, 3, 32, 32, generator=gen, dtype=torch.float64)
    g = torch.rand(3, 3, 32, 32, generator=gen, dtype=torch.float64)

    def loss_fn():
        value, _ = dual_view_forward(encoder, objective, q, g)
        return value

    loss_fn().backward()
    rng = np.random.default_rng(3)
    audited = 0
    for name, param in encoder.named_parameters():
        grad = param.grad.reshape(-1)
        for idx in rng.choice(param.numel(), size=min(10, param.numel()), replace=False):
            errors = central_difference_errors(loss_fn, param, int(idx), float(grad[idx]))
            assert min(errors) < 1e-3, f"{name}[{idx}]: {errors}"
            audited += 1
    assert audited >= 10 * 4  # 10 coordinates for each of the 4 layers


@criterion(3, 30.0, "1,000 randomized sampler epochs: no batch violations, no duplicates")
def test_criterion_3_sampler_property_suite():
    rng = random.Random(11)
    epochs_checked = 0
    while epochs_checked < 1000:
        n_players = rng.randint(4, 28)
        layout = {f"p{i}": (rng.randint(1, 2), rng.randint(1, 4)) for i in range(n_players)}
        instances = build_pair_instances(make_split(layout), seed=rng.randint(0, 10**6))
        batch_size = rng.randint(2, min(16, n_players))
        for _ in range(5):
            batches = sample_epoch(
                instances, SamplerConfig(batch_size=batch_size, seed=rng.randint(0, 10**6))
            )
            seen = set()
            for batch in batches:
                assert validate_batch(batch).ok
                assert batch.size == batch_size
                for inst in batch.instances:
                    key = (inst.query_record.record_id, inst.gallery_record.record_id)
                    assert key not in seen
                    seen.add(key)
            epochs_checked += 1
    assert epochs_checked >= 1000


@criterion(4, 10.0, "mAP/CMC equal naive enumeration on 200 instances within 1e-9; AP hand case 5/6")
def test_criterion_4_metric_oracle():
    ap = average_precision(np.array([0.1, 0.5, 0.9]), ["p", "x", "p"], "p")
    assert ap == (1.0 / 1.0 + 2.0 / 3.0) / 2.0  # the hand derivation, exactly
    assert abs(ap - 5.0 / 6.0) <= 2.0**-52  # 5/6 itself is not a float; 1 ulp

    rng = np.random.default_rng(12)
    for _ in range(200):
        n_q = int(rng.integers(1, 9))
        n_g = int(rng.integers(2, 33))
        values = rng.random((n_q, n_g))
        qpids = [f"p{rng.integers(0, 5)}" for _ in range(n_q)]
        gpids = [f"p{rng.integers(0, 5)}" for _ in range(n_g)]
        if not any(g in qpids for g in gpids):
            gpids[0] = qpids[0]
        matrix = cosine_distance_matrix(
            EmbeddingMatrix(ids=[f"q{i}" for i in range(n_q)], pids=qpids,
                            vectors=unit_rows(n_q, 8, rng).astype(np.float32)),
            EmbeddingMatrix(ids=[f"g{j}" for j in range(n_g)], pids=gpids,
                            vectors=unit_rows(n_g, 8, rng).astype(np.float32)),
        )
        matrix.values = values  # metrics consume the values, ids and pids
        assert abs(mean_average_precision(matrix) - naive_mean_ap(values, gpids, qpids)) < 1e-9
        for k in (1, min(5, n_g)):
            assert abs(cmc_rank_k(matrix, k) - naive_cmc(values, gpids, qpids, k)) < 1e-9


@criterion(5, 10.0, "re-ranking: lambda=1 identity, 6-point oracle within 1e-9, finite outputs")
def test_criterion_5_reranking():
    from test_rerank import SIX_POINT_EXPECTED, six_point_fixture

    rng = np.random.default_rng(13)
    q = random_embeddings(4, 8, rng, prefix="q", n_players=3)
    g = random_embeddings(12, 8, rng, prefix="g", n_players=3)
    original = cosine_distance_matrix(q, g)
    identity = k_reciprocal_rerank(q, g, k1=5, k2=2, lambda_value=1.0)
    assert (identity.values == original.values).all()

    qf, gf = six_point_fixture()
    result = k_reciprocal_rerank(qf, gf, k1=3, k2=2, lambda_value=0.3)
    np.testing.assert_allclose(result.values, SIX_POINT_EXPECTED, atol=1e-9)
    reference = naive_k_reciprocal_rerank(
        qf.vectors.astype(np.float64), gf.vectors.astype(np.float64), k1=3, k2=2, lam=0.3
    )
    np.testing.assert_allclose(result.values, reference, atol=1e-9)

    for _ in range(50):
        n_q = int(rng.integers(1, 8))
        n_g = int(rng.integers(2, 24))
        qr = random_embeddings(n_q, 8, rng, prefix="q", n_players=4)
        gr = random_embeddings(n_g, 8, rng, prefix="g", n_players=4)
        out = k_reciprocal_rerank(qr, gr, k1=20, k2=6, lambda_value=0.3)
        assert np.isfinite(out.values).all()


@criterion(6, 10.0, "LR schedule hits 4e-5 at warm-up end and 4e-6 at the last step, monotone decay")
def test_criterion_6_lr_schedule():
    total, warmup = 1000, 250
    assert poly_warmup_lr(warmup, total, warmup, 4e-5, 4e-6) == 4e-5
    assert poly_warmup_lr(total, total, warmup, 4e-5, 4e-6) == 4e-6
    trace = [poly_warmup_lr(s, total, warmup, 4e-5, 4e-6) for s in range(total + 1)]
    assert max(trace) <= 4e-5
    decay = trace[warmup:]
    assert all(b <= a for a, b in zip(decay, decay[1:]))
    assert min(decay) >= 4e-6


@criterion(7, 600.0, "desk run: mAP >= 0.95 in 8 epochs, epoch loss strictly down, seed-stable")
def test_criterion_7_end_to_end_desk_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance_run")
    corpus = generate_corpus(base / "corpus", SynthConfig(n_players=64, seed=3))
    split = load_manifest(corpus["train"])
    eval_split = load_manifest(corpus["test"])

    histories = []
    for attempt in ("a", "b"):
        encoder = reference_tiny_encoder(seed=0)
        cfg = TrainConfig(epochs=8, batch_size=16, seed=7, rerank_eval=False)
        _best, history = train(cfg, split, eval_split, encoder, run_dir=base / attempt)
        histories.append(history)

    history = histories[0]
    mean_losses = history.epoch_mean_losses()
    assert mean_losses[8] < mean_losses[1], (mean_losses[1], mean_losses[8])
    best_map = max(e.map_no_rerank for e in history.evals)
    assert best_map >= 0.95, best_map
    assert [s.loss for s in histories[0].steps] == [s.loss for s in histories[1].steps]


@criterion(8, 10.0, "Score-CAM: M=1 exact, 2-map trace within 1e-6, weights sum to 1, chunk-stable")
def test_criterion_8_score_cam():
    single = np.zeros((4, 4))
    single[1:3, 1:3] = np.array([[0.2, 0.6], [0.8, 0.4]])
    cam = score_cam(
        StubEncoder(maps=single[None]), gray_image(), lambda e: float(e[0]),
        ScoreCamConfig(layer_tag="stub"), stub_pre(),
    )
    np.testing.assert_array_equal(cam.values, single / single.max())

    assert abs((W1 + W2) - 1.0) < 1e-9
    two_map = score_cam(
        StubEncoder(), gray_image(), lambda e: 2.0 * float(e[0]),
        ScoreCamConfig(layer_tag="stub", batch_chunk=1), stub_pre(),
    )
    expected = np.zeros((4, 4))
    expected[:2, :] += W1
    expected[:, :2] += W2
    np.testing.assert_allclose(two_map.values, expected, atol=1e-6)
    np.testing.assert_allclose(two_map.values[:2, :2], 1.0, atol=1e-9)  # w1 + w2

    encoder = reference_tiny_encoder(seed=5)
    rng = np.random.default_rng(4)
    image = PixelImage(rng.random((36, 18, 3)))
    ref = rng.standard_normal(32)
    ref /= np.linalg.norm(ref)
    cams = [
        score_cam(encoder, image, lambda e: float(e @ ref), ScoreCamConfig(layer_tag="conv2", batch_chunk=c))
        for c in (1, 7, 64)
    ]
    np.testing.assert_allclose(cams[0].values, cams[1].values, atol=1e-6)
    np.testing.assert_allclose(cams[0].values, cams[2].values, atol=1e-6)


@criterion(9, 10.0, "zero-shot plumbing: stub fixtures give exact top-k and macro 0.75/0.75")
def test_criterion_9_zeroshot_plumbing():
    prompts = build_prompts("sex")
    basis = np.eye(3)
    provider = StubTextProvider({prompts.rendered[0]: basis[0], prompts.rendered[1]: basis[1]})
    images = {
        "r1": basis[0],  # male, classified male
        "r2": basis[1],  # male, classified female
        "r3": basis[1],  # female, classified female
        "r4": basis[0],  # female, classified male
    }
    labels = {"r1": "male", "r2": "male", "r3": "female", "r4": "female"}
    ranked = {rid: classify_zero_shot(vec, prompts, provider) for rid, vec in images.items()}
    predictions = [ranked[r] for r in ("r1", "r2", "r3", "r4")]
    truth = [labels[r] for r in ("r1", "r2", "r3", "r4")]
    assert topk_accuracy(predictions, truth, 1) == 0.5
    assert topk_accuracy(predictions, truth, 2) == 1.0

    # binary toy: class A TP=1 FP=1 FN=0; class B TP=1 FP=0 FN=1
    metrics = macro_metrics(["A", "A", "B"], ["A", "B", "B"])
    assert metrics.macro_precision == 0.75
    assert metrics.macro_recall == 0.75


@pytest.mark.skip(
    reason="criterion 10 is the optional full-dataset reproduction: needs the public "
    "dataset, large pretrained towers in the weight cache and GPU hours; excluded from CI "
    "by its own terms (targets: fine-tuned 96.9/98.2 mAP, zero-shot 66.8/85.0 mAP, "
    "jersey-number top1 0.87 within the stated bands)"
)
def test_criterion_10_full_reproduction():
    raise NotImplementedError
