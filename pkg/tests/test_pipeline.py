"""Training-loop, transfer, evaluation, and search tests."""

from __future__ import annotations

import numpy as np
import pytest

from nasflat import archspace as asp
from nasflat import autodiff as ad
from nasflat import pipeline as pl
from nasflat import predictor as pred
from nasflat import synthbench as sb
from nasflat.devicesets import LatencyTable
from nasflat.errors import EmptyFeasibleSet, InsufficientData, TooFewSamples


@pytest.fixture(scope="module")
def nb201():
    return asp.nb201_space()


@pytest.fixture(scope="module")
def small_world(nb201):
    """Three correlated source devices, one clone target, 80 archs."""
    parent = sb.gen_device(50, nb201, device_id="s0", sigma=0.02)
    devices = [
        parent,
        sb.gen_device(51, nb201, device_id="s1", sigma=0.02, clone_of=parent, cost_jitter=0.2),
        sb.gen_device(52, nb201, device_id="s2", sigma=0.02, clone_of=parent, cost_jitter=0.4),
        sb.gen_device(53, nb201, device_id="t0", sigma=0.03, clone_of=parent, cost_jitter=0.3),
    ]
    table, archs = sb.gen_dataset(nb201, devices, 80, seed=8)
    return table, {a.arch_id: a for a in archs}, ["s0", "s1", "s2"], "t0"


# --- hinge loss ----------------------------------------------------------------

def test_hinge_zero_when_ordered_with_margin():
    preds = ad.param(np.array([[0.0], [1.0], [2.0], [3.0]]))
    loss = pl.pairwise_hinge_loss(preds, [1.0, 2.0, 3.0, 4.0], margin=0.5)
    assert loss.data == 0.0


def test_hinge_two_equal_preds():
    preds = ad.param(np.array([[1.0], [1.0]]))
    loss = pl.pairwise_hinge_loss(preds, [5.0, 2.0], margin=0.1)
    assert loss.data == pytest.approx(0.1)


def test_hinge_translation_invariant():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(6, 1))
    t = rng.normal(size=6)
    a = pl.pairwise_hinge_loss(ad.param(p), t, margin=0.1).data
    b = pl.pairwise_hinge_loss(ad.param(p + 123.456), t, margin=0.1).data
    assert a == pytest.approx(b, abs=1e-12)


def test_hinge_too_few_samples():
    with pytest.raises(TooFewSamples):
        pl.pairwise_hinge_loss(ad.param(np.array([[1.0]])), [1.0], margin=0.1)


def test_hinge_all_tied_targets_is_zero():
    loss = pl.pairwise_hinge_loss(ad.param(np.array([[1.0], [9.0]])), [2.0, 2.0], margin=0.1)
    assert loss.data == 0.0


def test_hinge_gradient_through_predictor(nb201):
    st = pred.init_predictor(pred.PredictorConfig(seed=7), [nb201], ["d0"])
    archs = [asp.random_architecture(nb201, s) for s in range(5)]
    ops_rows = np.array([a.ops for a in archs], dtype=np.intp)
    targets = [3.0, 1.0, 4.0, 1.5, 2.5]

    def model_eval():
        preds = pred._forward(st, nb201, ops_rows, 0, None)
        return pl.pairwise_hinge_loss(preds, targets, margin=0.5)

    report = ad.finite_diff_check(model_eval, st.params, n_samples=50, seed=1)
    assert report.max_rel_err < 1e-4, report.worst_param


# --- pretrain --------------------------------------------------------------------

def _fresh_state(nb201, sources, seed=0):
    return pred.init_predictor(pred.PredictorConfig(seed=seed), [nb201], list(sources))


def test_pretrain_loss_decreases_and_ranks_train_device(nb201, small_world):
    table, archs, sources, _ = small_world
    st = _fresh_state(nb201, sources)
    cfg = pl.TrainConfig(epochs=10, batch_size=16, source_samples=80, seed=1)
    _, log = pl.pretrain(st, table, sources, archs, cfg)
    assert len(log) == 10
    assert log[-1] < log[0]
    # scores must rank the oracle latencies on a device it trained on
    train_eval = pl.evaluate(st, sources[0], table.subset(device_ids=[sources[0]]), archs)
    assert train_eval.spearman > 0.9


def test_pretrain_zero_epochs_keeps_params(nb201, small_world):
    table, archs, sources, _ = small_world
    st = _fresh_state(nb201, sources)
    before = {k: t.data.copy() for k, t in st.params.items()}
    pl.pretrain(st, table, sources, archs, pl.TrainConfig(epochs=0, seed=1))
    for k in before:
        assert np.array_equal(st.params[k].data, before[k])


def test_pretrain_deterministic(nb201, small_world):
    table, archs, sources, _ = small_world
    cfg = pl.TrainConfig(epochs=3, source_samples=50, seed=4)
    a = _fresh_state(nb201, sources, seed=2)
    b = _fresh_state(nb201, sources, seed=2)
    pl.pretrain(a, table, sources, archs, cfg)
    pl.pretrain(b, table, sources, archs, cfg)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_pretrain_insufficient_data(nb201, small_world):
    table, archs, sources, _ = small_world
    st = _fresh_state(nb201, sources)
    tiny = table.subset(arch_ids=list(archs)[:4])
    with pytest.raises(InsufficientData):
        pl.pretrain(st, tiny, sources, archs, pl.TrainConfig(epochs=1, batch_size=16, seed=0))


def test_training_trajectory_scale_invariant(nb201, small_world):
    """Rescaling one device's latencies must not change a single bit."""
    table, archs, sources, _ = small_world
    scaled = LatencyTable()
    for dev in table.devices():
        for arch_id in table.archs_for(dev):
            v = table.latency(arch_id, dev)
            scaled.add(arch_id, dev, v * (737.0 if dev == "s1" else 1.0))
    cfg = pl.TrainConfig(epochs=3, source_samples=60, seed=9)
    a = _fresh_state(nb201, sources, seed=5)
    b = _fresh_state(nb201, sources, seed=5)
    _, log_a = pl.pretrain(a, table, sources, archs, cfg)
    _, log_b = pl.pretrain(b, scaled, sources, archs, cfg)
    assert log_a == log_b
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


# --- transfer ---------------------------------------------------------------------

def _few_shot(table, sources, target, arch_ids):
    return table.subset(device_ids=list(sources) + [target], arch_ids=arch_ids)


def test_transfer_improves_on_clone(nb201, small_world):
    table, archs, sources, target = small_world
    st = _fresh_state(nb201, sources, seed=3)
    cfg = pl.TrainConfig(epochs=8, source_samples=60, transfer_epochs=20, seed=2)
    pl.pretrain(st, table, sources, archs, cfg)

    ids = sorted(archs)
    sampled, heldout_ids = ids[:20], ids[20:]
    heldout = table.subset(device_ids=[target], arch_ids=heldout_ids)

    before_state = pl.clone_state(st)
    pred.register_device(before_state, target)
    # warm-started but not fine-tuned baseline
    pred.init_target_hw_embedding(
        before_state, _few_shot(table, sources, target, sampled), sources
    )
    before = pl.evaluate(before_state, target, heldout, archs).spearman

    adapted = pl.transfer(
        pl.clone_state(st), target, _few_shot(table, sources, target, sampled),
        sources, archs, cfg,
    )
    after = pl.evaluate(adapted, target, heldout, archs).spearman
    assert after >= before - 0.02
    assert after > 0.6


def test_transfer_zero_epochs_only_touches_hw_row(nb201, small_world):
    table, archs, sources, target = small_world
    st = _fresh_state(nb201, sources, seed=3)
    cfg = pl.TrainConfig(epochs=1, source_samples=40, transfer_epochs=0, seed=2)
    pl.pretrain(st, table, sources, archs, cfg)
    before = {k: t.data.copy() for k, t in st.params.items()}
    sampled = sorted(archs)[:6]
    pl.transfer(st, target, _few_shot(table, sources, target, sampled), sources, archs, cfg)
    for k, old in before.items():
        if k == "hw_embed":
            assert st.params[k].data.shape[0] == old.shape[0] + 1
            assert np.array_equal(st.params[k].data[: old.shape[0]], old)
        else:
            assert np.array_equal(st.params[k].data, old)


def test_transfer_requires_two_samples(nb201, small_world):
    table, archs, sources, target = small_world
    st = _fresh_state(nb201, sources, seed=3)
    one = _few_shot(table, sources, target, sorted(archs)[:1])
    with pytest.raises(InsufficientData):
        pl.transfer(st, target, one, sources, archs, pl.TrainConfig(seed=0))


# --- evaluate --------------------------------------------------------------------

def test_evaluate_oracle_and_negated(nb201, small_world):
    """Ground truth built from the model's own scores gives rho = +/-1."""
    table, archs, sources, _ = small_world
    st = _fresh_state(nb201, sources, seed=6)
    ids = sorted(archs)[:50]
    scores = {
        a: pred.predict(st, archs[a], "s0") for a in ids
    }
    offset = 1.0 - min(scores.values())
    perfect = LatencyTable()
    inverted = LatencyTable()
    for a, s in scores.items():
        perfect.add(a, "s0", s + offset)
        inverted.add(a, "s0", (max(scores.values()) - s) + 1.0)
    assert pl.evaluate(st, "s0", perfect, archs).spearman == pytest.approx(1.0, abs=1e-9)
    assert pl.evaluate(st, "s0", inverted, archs).spearman == pytest.approx(-1.0, abs=1e-9)


def test_untrained_predictor_near_zero_rho(nb201, small_world):
    table, archs, sources, _ = small_world
    rng = np.random.default_rng(0)
    rhos = []
    for seed in range(12):
        st = _fresh_state(nb201, sources, seed=100 + seed)
        random_truth = LatencyTable()
        for a in sorted(archs):
            random_truth.add(a, "s0", float(rng.uniform(1, 10)))
        rhos.append(pl.evaluate(st, "s0", random_truth, archs).spearman)
    assert np.mean(np.abs(rhos)) < 0.3


def test_eval_report_aggregates_recompute_exactly():
    entries = [
        pl.EvalEntry("d0", 0, 0.91, 100, 20),
        pl.EvalEntry("d1", 0, 0.85, 100, 20),
        pl.EvalEntry("d0", 1, 0.88, 100, 20),
    ]
    report = pl.EvalReport.from_entries(entries)
    rhos = np.array([e.spearman for e in entries])
    assert report.mean_spearman == rhos.mean()
    assert report.std_spearman == rhos.std()
    assert "device_id,trial,spearman" in report.csv_text()
    assert report.summary()["target_samples_used"] == [20]


# --- constrained search ------------------------------------------------------------

def test_search_infinite_constraint_is_accuracy_ranking(nb201, small_world):
    table, archs, sources, _ = small_world
    st = _fresh_state(nb201, sources, seed=6)
    pool = [archs[a] for a in sorted(archs)[:30]]
    acc = {a.arch_id: float(i) for i, a in enumerate(pool)}
    result = pl.latency_constrained_search(
        pool, lambda a: acc[a.arch_id], st, "s0", np.inf, top_k=5,
    )
    want = [a.arch_id for a in sorted(pool, key=lambda x: -acc[x.arch_id])[:5]]
    assert result.ranked == want
    assert result.predictor_time_s > 0
    assert result.total_time_s >= result.predictor_time_s


def test_search_empty_feasible_set(nb201, small_world):
    table, archs, sources, _ = small_world
    st = _fresh_state(nb201, sources, seed=6)
    pool = [archs[a] for a in sorted(archs)[:10]]
    with pytest.raises(EmptyFeasibleSet):
        pl.latency_constrained_search(pool, lambda a: 1.0, st, "s0", -np.inf, top_k=3)


def test_calibration_maps_scores_to_ms():
    cal_scores = np.array([0.0, 1.0, 2.0, 3.0])
    cal_ms = 10.0 + 5.0 * cal_scores
    out = pl.calibrate_scores(np.array([0.5, 2.0, -4.0, 99.0]), cal_scores, cal_ms)
    assert out[0] == pytest.approx(12.5)   # interpolated
    assert out[1] == pytest.approx(20.0)   # exact knot
    assert out[2] == pytest.approx(10.0)   # clamped below
    assert out[3] == pytest.approx(25.0)   # clamped above
    # the map preserves the spread of the measured distribution: the largest
    # in-range score maps to the largest measured latency, not to a shrunken
    # regression estimate
    assert pl.calibrate_scores(np.array([3.0]), cal_scores, cal_ms)[0] == 25.0


# --- experiment reproducibility -----------------------------------------------------

def test_experiment_reproducible(nb201, small_world):
    table, archs, sources, target = small_world
    cfg = pl.TrainConfig(epochs=2, source_samples=40, transfer_epochs=4, seed=0)
    kwargs = dict(
        space=nb201, table=table, archs=archs, source_devices=sources,
        target_devices=[target], sampler_method="random", n_target_samples=8,
        train_config=cfg, predictor_config=pred.PredictorConfig(seed=0),
        master_seed=77, trials=1,
    )
    r1 = pl.run_transfer_experiment(**kwargs)
    r2 = pl.run_transfer_experiment(**kwargs)
    assert r1.report.csv_text() == r2.report.csv_text()
    assert r1.sampled_ids == r2.sampled_ids
    assert r1.report.entries[0].n_target_samples == 8
