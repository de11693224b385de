"""Training, few-shot transfer, evaluation, and latency-constrained search.

Pretraining runs seeded single-device minibatches with a pairwise hinge
ranking loss: cross-device latency comparisons are meaningless, so every
batch is drawn from one device. Transfer registers the target device,
warm-starts its hardware embedding from the best-correlated source, resets
the optimizer at the transfer learning rate, and fine-tunes all parameters on
the few measured target samples. Evaluation reports Spearman rank correlation
of predicted versus measured latency.

Because the loss consumes only latency comparisons, rescaling any device's
latencies by a positive constant leaves training trajectories bit-identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .archspace import Architecture, EncodingTable, SearchSpace
from .autodiff import AdamState, Tensor
from .devicesets import LatencyTable, spearman
from .errors import (
    EmptyFeasibleSet,
    InsufficientData,
    LengthMismatch,
    TooFewSamples,
)
from .predictor import (
    PredictorConfig,
    PredictorState,
    _forward,
    init_predictor,
    init_target_hw_embedding,
    register_device,
)
from .rng import rng_for, stable_seed
from .sampler import run_sampler


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 1e-5
    epochs: int = 150
    batch_size: int = 16
    transfer_epochs: int = 40
    transfer_lr: float = 0.003
    hinge_margin: float = 0.1
    trials: int = 3
    seed: int = 0
    source_samples: int = 900  # per-device pretraining budget

    def __post_init__(self):
        positive = (self.lr, self.transfer_lr, self.batch_size, self.hinge_margin, self.trials)
        if any(v <= 0 for v in positive):
            raise ValueError("lr, transfer_lr, batch_size, hinge_margin, trials must be positive")
        if self.epochs < 0 or self.transfer_epochs < 0 or self.weight_decay < 0:
            raise ValueError("epochs, transfer_epochs, weight_decay must be >= 0")

    @classmethod
    def for_space(cls, space: SearchSpace, **overrides) -> "TrainConfig":
        """Transfer schedule defaults: micro cells 40 epochs at lr 3e-3,
        macro chains 30 epochs at lr 1e-3."""
        if space.kind == "micro_cell":
            base = dict(transfer_epochs=40, transfer_lr=0.003)
        else:
            base = dict(transfer_epochs=30, transfer_lr=0.001)
        base.update(overrides)
        return cls(**base)


def pairwise_hinge_loss(preds: Tensor, targets: Sequence[float], margin: float = 0.1) -> Tensor:
    """Mean hinge over ordered pairs where the true latency says preds_i > preds_j.

    For every (i, j) with targets_i > targets_j the pair contributes
    max(0, margin - (preds_i - preds_j)). Tied targets contribute nothing.
    Translation-invariant in preds; differentiable through preds.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim != 1 or len(t) < 2:
        raise TooFewSamples(f"need >= 2 samples, got shape {t.shape}")
    k = preds.data.shape[0]
    if k != len(t):
        raise LengthMismatch(f"{k} predictions vs {len(t)} targets")
    ii, jj = np.nonzero(t[:, None] > t[None, :])
    if len(ii) == 0:
        return Tensor(0.0)
    pairs = np.zeros((len(ii), k))
    pairs[np.arange(len(ii)), ii] = 1.0
    pairs[np.arange(len(ii)), jj] = -1.0
    diffs = ad.matmul(pairs, preds)  # (n_pairs, 1) of preds_i - preds_j
    return ad.mean_all(ad.relu(ad.sub(margin, diffs)))


def _supplementary_rows(
    encodings: EncodingTable | None, arch_ids: Sequence[str], state: PredictorState
) -> np.ndarray | None:
    if state.config.supplementary_dim == 0:
        return None
    if encodings is None:
        raise InsufficientData("predictor expects supplementary encodings but none were given")
    return np.stack([encodings.vector(a) for a in arch_ids])


def _train_batch(
    state: PredictorState,
    space: SearchSpace,
    device_id: str,
    arch_ids: Sequence[str],
    archs: Mapping[str, Architecture],
    table: LatencyTable,
    encodings: EncodingTable | None,
    lr: float,
    weight_decay: float,
    margin: float,
) -> float:
    ops_rows = np.array([archs[a].ops for a in arch_ids], dtype=np.intp)
    targets = [table.latency(a, device_id) for a in arch_ids]
    supp = _supplementary_rows(encodings, arch_ids, state)
    row = state.device_row(device_id)
    with ad.recording() as tape:
        preds = _forward(state, space, ops_rows, row, supp)
        loss = pairwise_hinge_loss(preds, targets, margin)
    grads = ad.named_grads(state.params, ad.backward(tape, loss))
    ad.adam_step(state.params, grads, state.adam, lr, weight_decay)
    return float(loss.data)


def _epoch_batches(
    rng: np.random.Generator,
    device_ids: Sequence[str],
    ids_by_device: Mapping[str, list[str]],
    batch_size: int,
) -> list[tuple[str, list[str]]]:
    """Seeded shuffle of per-device minibatches; sub-pair remainders dropped."""
    batches: list[tuple[str, list[str]]] = []
    for device in device_ids:
        ids = list(ids_by_device[device])
        perm = rng.permutation(len(ids))
        shuffled = [ids[i] for i in perm]
        for i in range(0, len(shuffled), batch_size):
            chunk = shuffled[i : i + batch_size]
            if len(chunk) >= 2:
                batches.append((device, chunk))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def pretrain(
    state: PredictorState,
    source_table: LatencyTable,
    source_devices: Sequence[str],
    archs: Mapping[str, Architecture],
    config: TrainConfig,
    encodings: EncodingTable | None = None,
) -> tuple[PredictorState, list[float]]:
    """Rank-loss training over all source devices; returns per-epoch mean loss."""
    space = state.spaces[next(iter(archs.values())).space_id] if archs else None
    if space is None:
        raise InsufficientData("no architectures provided")
    ids_by_device: dict[str, list[str]] = {}
    budget_rng = rng_for("pretrain-budget", config.seed)
    for device in source_devices:
        ids = sorted(source_table.archs_for(device))
        if len(ids) < config.batch_size:
            raise InsufficientData(
                f"source device {device!r} has {len(ids)} measured archs "
                f"(need >= batch_size={config.batch_size})"
            )
        if len(ids) > config.source_samples:
            picks = budget_rng.permutation(len(ids))[: config.source_samples]
            ids = [ids[i] for i in sorted(picks)]
        ids_by_device[device] = ids

    state.adam = AdamState.for_params(state.params)
    rng = rng_for("pretrain", config.seed)
    log: list[float] = []
    for _ in range(config.epochs):
        losses = [
            _train_batch(
                state, space, device, chunk, archs, source_table, encodings,
                config.lr, config.weight_decay, config.hinge_margin,
            )
            for device, chunk in _epoch_batches(rng, source_devices, ids_by_device, config.batch_size)
        ]
        log.append(float(np.mean(losses)) if losses else 0.0)
    return state, log


def transfer(
    state: PredictorState,
    target_device: str,
    target_samples: LatencyTable,
    source_devices: Sequence[str],
    archs: Mapping[str, Architecture],
    config: TrainConfig,
    encodings: EncodingTable | None = None,
) -> PredictorState:
    """Adapt a pretrained predictor to one target device from few samples.

    target_samples must hold the target rows plus source rows on the same
    architectures (used for the hardware-embedding warm start). The optimizer
    is re-initialized and all parameters are fine-tuned at transfer_lr.
    """
    sampled = sorted(target_samples.archs_for(target_device))
    if len(sampled) < 2:
        raise InsufficientData(f"need >= 2 target samples, got {len(sampled)}")
    space = state.spaces[archs[sampled[0]].space_id]
    register_device(state, target_device)
    init_target_hw_embedding(state, target_samples, source_devices)

    state.adam = AdamState.for_params(state.params)
    rng = rng_for("transfer", config.seed, target_device)
    batch = min(config.batch_size, len(sampled))
    for _ in range(config.transfer_epochs):
        for device, chunk in _epoch_batches(rng, [target_device], {target_device: sampled}, batch):
            _train_batch(
                state, space, device, chunk, archs, target_samples, encodings,
                config.transfer_lr, config.weight_decay, config.hinge_margin,
            )
    return state


@dataclass
class EvalEntry:
    device_id: str
    trial: int
    spearman: float
    n_heldout: int
    n_target_samples: int
    preds: np.ndarray = field(repr=False, default=None)
    truths: np.ndarray = field(repr=False, default=None)


@dataclass
class EvalReport:
    entries: list[EvalEntry]
    mean_spearman: float
    std_spearman: float

    @classmethod
    def from_entries(cls, entries: Sequence[EvalEntry]) -> "EvalReport":
        rhos = np.array([e.spearman for e in entries], dtype=np.float64)
        return cls(list(entries), float(rhos.mean()), float(rhos.std()))

    def csv_text(self) -> str:
        lines = ["device_id,trial,spearman"]
        for e in self.entries:
            lines.append(f"{e.device_id},{e.trial},{repr(e.spearman)}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "mean_spearman": self.mean_spearman,
            "std_spearman": self.std_spearman,
            "n_entries": len(self.entries),
            "target_samples_used": sorted({e.n_target_samples for e in self.entries}),
            "per_device": [
                {
                    "device_id": e.device_id,
                    "trial": e.trial,
                    "spearman": e.spearman,
                    "n_heldout": e.n_heldout,
                    "n_target_samples": e.n_target_samples,
                }
                for e in self.entries
            ],
        }


def evaluate(
    state: PredictorState,
    target_device: str,
    heldout: LatencyTable,
    archs: Mapping[str, Architecture],
    encodings: EncodingTable | None = None,
    trial: int = 0,
    n_target_samples: int = 0,
    chunk_size: int = 64,
) -> EvalEntry:
    """Spearman of predicted vs measured latency on the held-out archs."""
    ids = sorted(heldout.archs_for(target_device))
    if not ids:
        raise InsufficientData(f"no held-out rows for device {target_device!r}")
    space = state.spaces[archs[ids[0]].space_id]
    row = state.device_row(target_device)
    preds = np.empty(len(ids))
    for start in range(0, len(ids), chunk_size):
        chunk = ids[start : start + chunk_size]
        ops_rows = np.array([archs[a].ops for a in chunk], dtype=np.intp)
        supp = _supplementary_rows(encodings, chunk, state)
        preds[start : start + len(chunk)] = _forward(state, space, ops_rows, row, supp).data[:, 0]
    truths = np.array([heldout.latency(a, target_device) for a in ids])
    rho = spearman(preds, truths)
    return EvalEntry(
        device_id=target_device,
        trial=trial,
        spearman=rho,
        n_heldout=len(ids),
        n_target_samples=n_target_samples,
        preds=preds,
        truths=truths,
    )


@dataclass
class SearchResult:
    ranked: list[str]                  # top-k arch_ids, best accuracy first
    predicted_latency: dict[str, float]
    accuracy: dict[str, float]
    predictor_time_s: float
    total_time_s: float


def calibrate_scores(
    scores: np.ndarray, cal_scores: np.ndarray, cal_ms: np.ndarray
) -> np.ndarray:
    """Map raw predictor scores to milliseconds by quantile matching.

    The ranking loss fixes only the ordering of scores, so an absolute
    latency constraint needs a score-to-ms map fit on the device's few
    measured samples. Quantile (CDF) matching is used instead of least
    squares: a regression fit shrinks predictions toward the mean, which
    systematically under-predicts slow architectures and inflates the
    constraint-violation rate. Scores outside the calibration range clamp to
    the extreme measured values.
    """
    scores = np.asarray(scores, dtype=np.float64)
    cal_scores = np.asarray(cal_scores, dtype=np.float64)
    cal_ms = np.asarray(cal_ms, dtype=np.float64)
    if len(cal_scores) == 0:
        return scores
    if len(cal_scores) == 1 or np.all(cal_scores == cal_scores[0]):
        return np.full_like(scores, cal_ms.mean())
    return np.interp(scores, np.sort(cal_scores), np.sort(cal_ms))


def latency_constrained_search(
    candidate_archs: Sequence[Architecture],
    accuracy_oracle: Callable[[Architecture], float],
    state: PredictorState,
    device_id: str,
    constraint_ms: float,
    top_k: int,
    encodings: EncodingTable | None = None,
    calibration: LatencyTable | None = None,
    archs_by_id: Mapping[str, Architecture] | None = None,
    chunk_size: int = 64,
) -> SearchResult:
    """Keep candidates predicted under the constraint and rank by accuracy.

    When a calibration table with measured rows for the device is given, raw
    scores are mapped to milliseconds before filtering; otherwise the
    constraint is interpreted in raw score units. Predictor invocation time
    is accounted separately from total search time.
    """
    t_start = time.perf_counter()
    predictor_time = 0.0
    predicted: dict[str, float] = {}
    space = None
    if candidate_archs:
        space = state.spaces[candidate_archs[0].space_id]
        row = state.device_row(device_id)
        for start in range(0, len(candidate_archs), chunk_size):
            chunk = candidate_archs[start : start + chunk_size]
            ops_rows = np.array([a.ops for a in chunk], dtype=np.intp)
            supp = _supplementary_rows(encodings, [a.arch_id for a in chunk], state)
            t0 = time.perf_counter()
            scores = _forward(state, space, ops_rows, row, supp).data[:, 0]
            predictor_time += time.perf_counter() - t0
            for arch, score in zip(chunk, scores):
                predicted[arch.arch_id] = float(score)
    if calibration is not None and space is not None:
        cal_ids = [
            a for a in sorted(calibration.archs_for(device_id))
            if archs_by_id is None or a in archs_by_id
        ]
        if cal_ids:
            lookup = archs_by_id or {a.arch_id: a for a in candidate_archs}
            cal_archs = [lookup[a] for a in cal_ids if a in lookup]
            if cal_archs:
                row = state.device_row(device_id)
                ops_rows = np.array([a.ops for a in cal_archs], dtype=np.intp)
                supp = _supplementary_rows(encodings, [a.arch_id for a in cal_archs], state)
                t0 = time.perf_counter()
                cal_scores = _forward(state, space, ops_rows, row, supp).data[:, 0]
                predictor_time += time.perf_counter() - t0
                measured = np.array(
                    [calibration.latency(a.arch_id, device_id) for a in cal_archs]
                )
                keys = list(predicted)
                mapped = calibrate_scores(
                    np.array([predicted[k] for k in keys]), cal_scores, measured
                )
                predicted = dict(zip(keys, mapped.tolist()))
    feasible = [a for a in candidate_archs if predicted[a.arch_id] <= constraint_ms]
    if not feasible:
        raise EmptyFeasibleSet(
            f"no candidate has predicted latency <= {constraint_ms} ms"
        )
    accuracy = {a.arch_id: float(accuracy_oracle(a)) for a in feasible}
    ranked = sorted(feasible, key=lambda a: (-accuracy[a.arch_id], a.arch_id))
    top = [a.arch_id for a in ranked[:top_k]]
    total_time = time.perf_counter() - t_start
    return SearchResult(
        ranked=top,
        predicted_latency={a: predicted[a] for a in top},
        accuracy={a: accuracy[a] for a in top},
        predictor_time_s=predictor_time,
        total_time_s=total_time,
    )


def clone_state(state: PredictorState) -> PredictorState:
    """Deep copy of parameters and registry; optimizer state is not carried."""
    params = {name: ad.param(t.data.copy()) for name, t in state.params.items()}
    return PredictorState(
        state.config,
        dict(state.spaces),
        params,
        dict(state.device_index),
        state.null_op_index,
    )


@dataclass
class ExperimentResult:
    report: EvalReport
    pretrain_log: list[float]
    sampled_ids: dict[tuple[str, int], list[str]]  # (device, trial) -> arch_ids


def run_transfer_experiment(
    space: SearchSpace,
    table: LatencyTable,
    archs: Mapping[str, Architecture],
    source_devices: Sequence[str],
    target_devices: Sequence[str],
    sampler_method: str,
    n_target_samples: int,
    train_config: TrainConfig,
    predictor_config: PredictorConfig,
    master_seed: int,
    encoding: EncodingTable | None = None,
    supplementary: EncodingTable | None = None,
    trials: int | None = None,
) -> ExperimentResult:
    """Pretrain on the sources, then per trial and target device: sample the
    measurement budget, transfer, and evaluate on the unsampled remainder."""
    trials = train_config.trials if trials is None else trials
    pool = [archs[a] for a in sorted(archs) if table.has(a, target_devices[0])]
    entries: list[EvalEntry] = []
    sampled_ids: dict[tuple[str, int], list[str]] = {}
    pretrain_log: list[float] = []
    for trial in range(trials):
        trial_seed = stable_seed("trial", master_seed, trial)
        base = init_predictor(predictor_config, [space], list(source_devices), seed=trial_seed)
        base, log = pretrain(
            base, table, source_devices, archs,
            replace(train_config, seed=trial_seed), encodings=supplementary,
        )
        pretrain_log = log
        for device in target_devices:
            device_pool = [a for a in pool if table.has(a.arch_id, device)]
            picked = run_sampler(
                sampler_method,
                device_pool,
                n_target_samples,
                seed=stable_seed("sample", master_seed, trial, device, sampler_method),
                space=space,
                encoding=encoding,
                reference_latencies=table.subset(device_ids=source_devices),
            )
            sampled_ids[(device, trial)] = picked
            few_shot = table.subset(
                device_ids=list(source_devices) + [device], arch_ids=picked
            )
            adapted = transfer(
                clone_state(base), device, few_shot, source_devices, archs,
                replace(train_config, seed=stable_seed("transfer", master_seed, trial, device)),
                encodings=supplementary,
            )
            heldout_ids = [a.arch_id for a in device_pool if a.arch_id not in set(picked)]
            heldout = table.subset(device_ids=[device], arch_ids=heldout_ids)
            entries.append(
                evaluate(
                    adapted, device, heldout, archs, encodings=supplementary,
                    trial=trial, n_target_samples=len(picked),
                )
            )
    return ExperimentResult(
        report=EvalReport.from_entries(entries),
        pretrain_log=pretrain_log,
        sampled_ids=sampled_ids,
    )
