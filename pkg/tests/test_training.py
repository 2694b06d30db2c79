import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from echo_esc.dataset import ClipRecord, DatasetKind, FoldSplit, Manifest
from echo_esc.errors import EmptySplit, NonFiniteLoss, OntologyMismatch, ShapeMismatch
from echo_esc.model import BackboneSpec, HeadSpec, Stage, build_model, read_checkpoint
from echo_esc.ontology import Ontology
from echo_esc.training import (
    Hyperparams,
    RunContext,
    TrainHistory,
    best_epoch_of,
    cross_entropy,
    cross_entropy_torch,
    evaluate,
    run_baseline,
    run_echo,
    train_stage,
)

TINY = BackboneSpec("TINY_CNN")


def loop_cross_entropy(yhat, y):
    n, c = len(yhat), len(yhat[0])
    total = 0.0
    for i in range(n):
        for j in range(c):
            if y[i][j]:
                total += y[i][j] * math.log(max(yhat[i][j], 1e-12))
    return -total / n


def test_loss_closed_forms():
    assert cross_entropy([[1.0, 0.0]], [[1, 0]]) == 0.0
    assert abs(cross_entropy([[0.5, 0.5]], [[1, 0]]) - math.log(2)) <= 1e-12
    assert abs(cross_entropy([[0.0, 1.0]], [[1, 0]]) - (-math.log(1e-12))) <= 1e-9


def test_loss_matches_loop_oracle_on_1000_batches():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n, c = rng.integers(1, 17), rng.integers(2, 51)
        logits = rng.normal(scale=rng.uniform(0.1, 8), size=(n, c))
        yhat = np.exp(logits - logits.max(1, keepdims=True))
        yhat /= yhat.sum(1, keepdims=True)
        y = np.eye(c)[rng.integers(0, c, n)]
        assert abs(cross_entropy(yhat, y) - loop_cross_entropy(yhat.tolist(), y.tolist())) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16), st.integers(2, 50), st.integers(0, 2**32 - 1))
def test_torch_loss_agrees(n, c, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(c), size=n)
    t = rng.integers(0, c, n)
    ours = cross_entropy_torch(torch.from_numpy(p), torch.from_numpy(t)).item()
    assert abs(ours - cross_entropy(p, np.eye(c)[t])) <= 1e-12
    assert ours >= 0


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        cross_entropy([[0.5, 0.5]], [[1, 0, 0]])
    with pytest.raises(ShapeMismatch):
        cross_entropy_torch(torch.ones(2, 3) / 3, torch.zeros(3, dtype=torch.long))


def test_best_epoch_first_minimum():
    assert best_epoch_of([0.9, 0.4, 0.4, 0.7]) == 2
    assert best_epoch_of([1.0]) == 1
    assert best_epoch_of([3, 2, 1, 1, 1]) == 3


def test_output_layer_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = build_model(TINY, HeadSpec(4), 0).double().eval()
    rng = np.random.default_rng(0)
    W = model.head.out.weight
    for trial in range(3):
        x = torch.from_numpy(rng.random((6, 3, 32, 32)))
        t = torch.from_numpy(rng.integers(0, 4, 6))

        def loss():
            return cross_entropy_torch(model(x).probs, t)

        model.zero_grad()
        loss().backward()
        analytic = W.grad.clone()
        # closed form for softmax + cross-entropy: (p - y)^T h / N
        with torch.no_grad():
            out = model(x)
            y = torch.nn.functional.one_hot(t, 4).double()
            closed = (out.probs - y).T @ out.hidden / len(t)
        assert torch.allclose(analytic, closed, rtol=1e-10, atol=1e-14)
        picks = rng.choice(W.numel(), size=10, replace=False)
        eps = 1e-6
        for flat in picks:
            r, c = divmod(int(flat), W.shape[1])
            with torch.no_grad():
                orig = W[r, c].item()
                W[r, c] = orig + eps
                up = loss().item()
                W[r, c] = orig - eps
                down = loss().item()
                W[r, c] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[r, c].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            assert rel <= 1e-4, (trial, r, c, a, numeric)


def _toy(n_per_class=40, labels=("a", "b"), size=16, seed=0, num_folds=5, separation=1.0):
    rng = np.random.default_rng(seed)
    records, feats = [], {}
    for k, lab in enumerate(labels):
        for i in range(n_per_class):
            cid = f"{lab}-{i:03d}"
            img = rng.normal(0.0, 0.1, (size, size))
            row = int((k + 0.5) * size / len(labels))
            img[row, :] += separation * 3
            feats[cid] = torch.from_numpy(np.repeat(img[None], 3, 0).astype(np.float32))
            records.append(ClipRecord(cid, "", lab, 1 + i % num_folds, 1.0))
    return Manifest(DatasetKind.CUSTOM, tuple(records), tuple(labels), num_folds, 1.0), feats


def test_separable_toy_reaches_full_validation_accuracy():
    m, feats = _toy()
    train, val, _ = FoldSplit(1, frozenset({2, 3, 4, 5})).partition(m)
    model = build_model(TINY, HeadSpec(2), 0)
    model, hist = train_stage(model, train, val, m.label_set, Hyperparams(batch_size=16, learning_rate=1e-3,
                                                                             epochs=10), feats)
    assert max(hist.val_acc) == 1.0
    assert len(hist.train_loss) == 10


def test_best_snapshot_is_returned():
    m, feats = _toy(seed=3, separation=0.15)
    train, val, _ = FoldSplit(1, frozenset({2, 3, 4, 5})).partition(m)
    hp = Hyperparams(batch_size=8, learning_rate=3e-3, epochs=8)
    model, hist = train_stage(build_model(TINY, HeadSpec(2), 1), train, val, m.label_set, hp, feats)
    loss, _ = evaluate(model, val, m.label_set, feats)
    assert hist.best_epoch == best_epoch_of(hist.val_loss)
    assert abs(loss - hist.best_val_loss) <= 1e-6


def test_training_is_deterministic():
    m, feats = _toy(seed=1)
    train, val, _ = FoldSplit(2, frozenset({1, 3, 4, 5})).partition(m)
    hp = Hyperparams(batch_size=8, learning_rate=1e-3, epochs=3, seed=5)
    runs = [train_stage(build_model(TINY, HeadSpec(2), 5), train, val, m.label_set, hp, feats)[1]
            for _ in range(2)]
    assert np.max(np.abs(np.subtract(runs[0].train_loss, runs[1].train_loss))) <= 1e-6
    assert runs[0].val_loss == runs[1].val_loss


def test_early_stopping_with_patience():
    m, feats = _toy(seed=2)
    train, val, _ = FoldSplit(1, frozenset({2, 3, 4, 5})).partition(m)
    hp = Hyperparams(batch_size=16, learning_rate=0.5, epochs=30)
    _, hist = train_stage(build_model(TINY, HeadSpec(2), 0), train, val, m.label_set, hp, feats, patience=2)
    assert len(hist.val_loss) < 30 and hist.stopped_early
    tail = hist.val_loss[hist.best_epoch:]
    assert len(tail) == 2 and min(tail) >= hist.best_val_loss


def test_stage_errors():
    m, feats = _toy()
    recs = list(m.records)
    model = build_model(TINY, HeadSpec(2), 0)
    hp = Hyperparams(epochs=1)
    with pytest.raises(EmptySplit):
        train_stage(model, [], recs, m.label_set, hp, feats)
    with pytest.raises(EmptySplit):
        train_stage(model, recs, [], m.label_set, hp, feats)
    with pytest.raises(ShapeMismatch):
        train_stage(build_model(TINY, HeadSpec(3), 0), recs, recs, m.label_set, hp, feats)
    bad = dict(feats)
    bad[recs[0].clip_id] = torch.full_like(feats[recs[0].clip_id], float("nan"))
    with pytest.raises(NonFiniteLoss):
        train_stage(model, recs, recs, m.label_set, Hyperparams(epochs=1, batch_size=len(recs)), bad)


def test_hyperparam_defaults_and_bounds():
    hp = Hyperparams()
    assert (hp.batch_size, hp.learning_rate, hp.epochs, hp.coarse_patience) == (32, 1e-4, 50, 10)
    for bad in (dict(batch_size=0), dict(epochs=0), dict(learning_rate=0.0)):
        with pytest.raises(ValueError):
            Hyperparams(**bad)


def test_history_roundtrip():
    h = TrainHistory([1.0, 0.5], [0.9, 0.7], [0.5, 0.95], 2, False)
    assert TrainHistory.from_dict(h.to_dict()) == h
    assert h.epochs_to_reach(0.9) == 2 and h.epochs_to_reach(0.99) is None


INDOOR = ("TV", "fan", "traffic", "car horn")
INDOOR_ONTOLOGY = Ontology({"indoor sounds": ("TV", "fan"), "outdoor sounds": ("traffic", "car horn")}, 2)


def test_run_echo_stages_and_isolation(tmp_path):
    m, feats = _toy(n_per_class=20, labels=INDOOR)
    ctx = RunContext(TINY, Hyperparams(batch_size=16, learning_rate=1e-3, epochs=2), feats, tmp_path / "cell", "cfg")
    seen = {}

    def on_transition(coarse, fine):
        seen["coarse_classes"], seen["fine_classes"] = coarse.num_classes, fine.num_classes
        seen["fine_backbone"] = {k: v.clone() for k, v in fine.backbone.state_dict().items()}

    split = FoldSplit(3, frozenset({1, 2, 4, 5}))
    res = run_echo(split, m, INDOOR_ONTOLOGY, ctx, on_transition)
    assert (seen["coarse_classes"], seen["fine_classes"]) == (2, 4)
    assert set(res.histories) == {"coarse", "fine"} and 0.0 <= res.test_accuracy <= 1.0
    coarse = read_checkpoint(res.checkpoint_refs["coarse"])
    assert coarse.meta.stage is Stage.COARSE and coarse.meta.ontology_hash == INDOOR_ONTOLOGY.hash
    assert coarse.meta.label_space == ["indoor sounds", "outdoor sounds"]
    for k, v in seen["fine_backbone"].items():
        assert coarse.backbone_params[k].tobytes() == v.numpy().tobytes()
    assert read_checkpoint(res.checkpoint_refs["fine"]).meta.num_classes == 4

    test_ids = {r.clip_id for r in m.records if r.fold_index == 3}
    stages = set()
    for line in (tmp_path / "cell" / "batches.log").read_text().splitlines():
        stage, _, _, ids = line.split("\t")
        stages.add(stage)
        assert not test_ids & set(ids.split(","))
    assert stages == {"coarse", "fine"}
    assert (tmp_path / "cell" / "history.json").exists()


def test_run_echo_rejects_mismatched_ontology():
    m, feats = _toy(n_per_class=10, labels=INDOOR)
    wrong = Ontology({"x": ("TV", "fan"), "y": ("traffic", "siren")}, 2)
    with pytest.raises(OntologyMismatch):
        run_echo(FoldSplit(1, frozenset({2, 3, 4, 5})), m, wrong, RunContext(TINY, Hyperparams(epochs=1), feats))


def test_run_baseline_contract(tmp_path):
    m, feats = _toy(n_per_class=20, labels=INDOOR)
    results = []
    for seed in (0, 1):
        ctx = RunContext(TINY, Hyperparams(batch_size=16, epochs=1, seed=seed), feats, tmp_path / f"s{seed}", "cfg")
        results.append(run_baseline(FoldSplit(1, frozenset({2, 3, 4, 5}), seed), m, ctx))
    for r in results:
        assert 0.0 <= r.test_accuracy <= 1.0 and r.num_test == 16
        assert read_checkpoint(r.checkpoint_refs["baseline"]).meta.stage is Stage.BASELINE
    assert results[0].seed == 0 and results[1].seed == 1
