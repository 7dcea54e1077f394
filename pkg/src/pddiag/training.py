"""Three-stage training, AdamW with cosine schedule, metrics, checkpoints.

Stage 1 fits encoder + fusion + classifier with plain cross entropy.
Stage 2 freezes those and fits the age branch on healthy non-PD subjects,
taking chronological age as the regression target. Stage 3 fine-tunes
everything under the combined hinge + corrected-cross-entropy objective.
All loops are single-threaded and deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .aggregator import (
    AggregatedFeature,
    DenseFeature,
    EncoderParams,
    FusionProjection,
    encode_dense,
    region_average_pool,
    upsample_fuse,
    weighted_aggregate,
)
from .cohort import Cohort, SubjectRecord
from .diagnoser import (
    BranchParams,
    Label,
    ce_loss_node,
    classify,
    correct_logits,
    decide,
    predict_brain_age,
    total_loss,
)
from .priors import AgingPriorParams, RelevanceTable, age_gap
from .volume_io import AtlasVolume

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# numpy 2 renamed trapz
_trapezoid = np.trapezoid if hasattr(np, "trapezoid") else np.trapz

# Age-head bias starts at a typical screening-cohort age so the regression
# only has to learn the residual trend, not the absolute offset.
AGE_HEAD_BIAS_INIT = 65.0

CHECKPOINT_MAGIC = b"PDDN0001"


class InvalidStage(ValueError):
    pass


class EmptyCohort(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


@dataclass
class ModelParams:
    encoder: EncoderParams
    fusion: FusionProjection
    branch1: BranchParams
    branch2: BranchParams

    @classmethod
    def init(cls, channels: int, seed: int, age_head_bias: float = AGE_HEAD_BIAS_INIT) -> "ModelParams":
        rng = np.random.default_rng(seed)
        return cls(
            encoder=EncoderParams.init(channels, rng),
            fusion=FusionProjection.init(channels, rng),
            branch1=BranchParams.init(channels, 2, rng, name="branch1"),
            branch2=BranchParams.init(channels, 1, rng, name="branch2", head_bias=age_head_bias),
        )

    @property
    def channels(self) -> int:
        return self.encoder.channels

    def named_params(self) -> list[tuple[str, Tensor]]:
        return (
            self.encoder.named_params()
            + self.fusion.named_params()
            + self.branch1.named_params()
            + self.branch2.named_params()
        )

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def copy(self) -> "ModelParams":
        named = {name: ad.parameter(t.data.copy()) for name, t in self.named_params()}
        return ModelParams(
            encoder=EncoderParams(
                conv1_w=named["encoder.conv1_w"],
                conv1_b=named["encoder.conv1_b"],
                conv2_w=named["encoder.conv2_w"],
                conv2_b=named["encoder.conv2_b"],
            ),
            fusion=FusionProjection(weight=named["fusion.weight"], bias=named["fusion.bias"]),
            branch1=BranchParams(
                conv_w=named["branch1.conv_w"],
                conv_b=named["branch1.conv_b"],
                head_w=named["branch1.head_w"],
                head_b=named["branch1.head_b"],
                name="branch1",
            ),
            branch2=BranchParams(
                conv_w=named["branch2.conv_w"],
                conv_b=named["branch2.conv_b"],
                head_w=named["branch2.head_w"],
                head_b=named["branch2.head_b"],
                name="branch2",
            ),
        )


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    base_lr: float
    weight_decay: float
    total_steps: int

    @classmethod
    def init(cls, params: list[Tensor], base_lr: float, weight_decay: float, total_steps: int) -> "OptimState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            step=0,
            base_lr=base_lr,
            weight_decay=weight_decay,
            total_steps=total_steps,
        )


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from base_lr at step 0 to 0 at total_steps."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(params: list[Tensor], state: OptimState, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update; gradients read from param.grad."""
    if len(params) != len(state.m):
        raise ShapeMismatch(f"optimizer tracks {len(state.m)} params, got {len(params)}")
    if lr is None:
        lr = cosine_lr(state.step, state.total_steps, state.base_lr)
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise ValueError("non-finite gradient; refusing to step")
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-3
    seed: int = 0


@dataclass
class EpochTrace:
    epoch: int
    loss: float
    age_loss: float | None = None
    cls_loss: float | None = None


@dataclass
class _Prepared:
    record: SubjectRecord
    array: np.ndarray
    agg: AggregatedFeature


def _prepare(cohort: Cohort, atlas: AtlasVolume, table: RelevanceTable) -> list[_Prepared]:
    prepared = []
    for rec in cohort:
        vol = rec.load_volume()
        pooled = region_average_pool(vol, atlas)
        prepared.append(_Prepared(record=rec, array=vol.data, agg=weighted_aggregate(pooled, table)))
    return prepared


def _fused(prep: _Prepared, model: ModelParams, detach: bool = False) -> DenseFeature:
    dense = encode_dense(prep.array, model.encoder)
    fused = upsample_fuse(prep.agg, dense, model.fusion)
    if detach:
        return DenseFeature(node=ad.constant(fused.data))
    return fused


def train_stage(
    stage: int,
    cohort: Cohort,
    atlas: AtlasVolume,
    table: RelevanceTable,
    prior: AgingPriorParams,
    config: TrainConfig,
    params: ModelParams,
) -> tuple[ModelParams, list[EpochTrace]]:
    """Run one training stage in place; returns the params and a loss trace."""
    if stage not in (1, 2, 3):
        raise InvalidStage(f"stage must be 1, 2, or 3, got {stage}")
    if len(cohort) == 0:
        raise EmptyCohort("cannot train on an empty cohort")
    if not cohort.labeled():
        raise ValueError("training cohort must be fully labeled")

    if stage == 2:
        subjects = Cohort([s for s in cohort if s.label is Label.OTHER and s.is_healthy])
        if len(subjects) == 0:
            raise EmptyCohort("stage 2 needs healthy non-PD subjects, found none")
    else:
        subjects = cohort

    prepared = _prepare(subjects, atlas, table)
    if stage == 2:
        fixed = [_fused(p, params, detach=True) for p in prepared]

    if stage == 1:
        trainables = [t for _, t in params.encoder.named_params() + params.fusion.named_params() + params.branch1.named_params()]
    elif stage == 2:
        trainables = [t for _, t in params.branch2.named_params()]
    else:
        trainables = params.params()

    n = len(prepared)
    steps_per_epoch = math.ceil(n / config.batch)
    state = OptimState.init(trainables, config.lr, config.weight_decay, config.epochs * steps_per_epoch)
    rng = np.random.default_rng(config.seed)
    trace: list[EpochTrace] = []

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses, ages, clss = [], [], []
        for start in range(0, n, config.batch):
            chunk = order[start : start + config.batch]
            ad.zero_grads(trainables)
            for idx in chunk:
                prep = prepared[idx]
                if stage == 1:
                    node = ce_loss_node(classify(_fused(prep, params), params.branch1), prep.record.label)
                elif stage == 2:
                    err = ad.sub(predict_brain_age(fixed[idx], params.branch2), ad.constant(prep.record.age))
                    node = ad.mul(err, err)
                else:
                    breakdown = total_loss(
                        _fused(prep, params), prep.record.age, prep.record.label, params.branch1, params.branch2, prior
                    )
                    node = breakdown.node
                    ages.append(breakdown.age)
                    clss.append(breakdown.cls)
                losses.append(node.item())
                ad.backward(node, seed=1.0 / len(chunk))
            adamw_step(trainables, state)
        trace.append(
            EpochTrace(
                epoch=epoch,
                loss=float(np.mean(losses)),
                age_loss=float(np.mean(ages)) if ages else None,
                cls_loss=float(np.mean(clss)) if clss else None,
            )
        )
    return params, trace


def write_loss_trace(trace: list[EpochTrace], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("epoch,loss,age_loss,cls_loss\n")
        for t in trace:
            age = "" if t.age_loss is None else repr(t.age_loss)
            cls = "" if t.cls_loss is None else repr(t.cls_loss)
            fh.write(f"{t.epoch},{t.loss!r},{age},{cls}\n")


def gradient_check(loss_fn, params: list[Tensor], probe_count: int = 50, h: float = 1e-5, seed: int = 0) -> float:
    """Compare analytic gradients against central differences at random coordinates.

    loss_fn() must rebuild and return the scalar loss Tensor from scratch.
    Returns the max of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    ad.zero_grads(params)
    root = loss_fn()
    if not np.isfinite(root.data):
        raise ValueError("loss is not finite")
    ad.backward(root)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    sizes = np.array([p.data.size for p in params])
    offsets = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    coords = rng.integers(0, int(sizes.sum()), size=probe_count)

    worst = 0.0
    for c in coords:
        k = int(np.searchsorted(offsets, c, side="right"))
        i = int(c - (offsets[k - 1] if k else 0))
        p = params[k]
        orig = p.data.flat[i]
        p.data.flat[i] = orig + h
        f_plus = float(loss_fn().data)
        p.data.flat[i] = orig - h
        f_minus = float(loss_fn().data)
        p.data.flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError("loss is not finite during probing")
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[k].flat[i])
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, rel)
    return worst


@dataclass
class PredictionRecord:
    subject_id: str
    label: Label | None
    p_pd: float
    delta: float
    predicted_age: float
    decision: Label


@dataclass
class Metrics:
    tp: int
    tn: int
    fp: int
    fn: int
    acc: float | None
    tpr: float | None
    fpr: float | None
    auc: float | None = None

    @classmethod
    def from_counts(cls, tp: int, tn: int, fp: int, fn: int, auc: float | None = None) -> "Metrics":
        total = tp + tn + fp + fn
        return cls(
            tp=tp,
            tn=tn,
            fp=fp,
            fn=fn,
            acc=(tp + tn) / total if total else None,
            tpr=tp / (tp + fn) if (tp + fn) else None,
            fpr=fp / (fp + tn) if (fp + tn) else None,
            auc=auc,
        )

    def to_kv_text(self) -> str:
        def fmt(x):
            return "undefined" if x is None else repr(float(x))

        lines = [
            f"tp={self.tp}",
            f"tn={self.tn}",
            f"fp={self.fp}",
            f"fn={self.fn}",
            f"acc={fmt(self.acc)}",
            f"tpr={fmt(self.tpr)}",
            f"fpr={fmt(self.fpr)}",
            f"auc={fmt(self.auc)}",
        ]
        return "\n".join(lines) + "\n"


def predict(
    params: ModelParams,
    cohort: Cohort,
    atlas: AtlasVolume,
    table: RelevanceTable,
    prior: AgingPriorParams,
) -> list[PredictionRecord]:
    """Full forward path per subject: encode, pool, aggregate, fuse, both branches, correct, decide."""
    if len(cohort) == 0:
        raise EmptyCohort("cannot predict on an empty cohort")
    records = []
    for prep in _prepare(cohort, atlas, table):
        fused = _fused(prep, params, detach=True)
        z = classify(fused, params.branch1)
        predicted = predict_brain_age(fused, params.branch2).item()
        delta = age_gap(predicted, prep.record.age)
        z_tilde = correct_logits(z, delta, prior)
        decision, p_pd = decide(z_tilde)
        records.append(
            PredictionRecord(
                subject_id=prep.record.subject_id,
                label=prep.record.label,
                p_pd=p_pd,
                delta=delta,
                predicted_age=predicted,
                decision=decision,
            )
        )
    return records


def metrics_from_records(records: list[PredictionRecord]) -> Metrics:
    if any(r.label is None for r in records):
        raise ValueError("records include unlabeled subjects; run prediction instead of evaluation")
    tp = sum(1 for r in records if r.label is Label.PD and r.decision is Label.PD)
    fn = sum(1 for r in records if r.label is Label.PD and r.decision is Label.OTHER)
    fp = sum(1 for r in records if r.label is Label.OTHER and r.decision is Label.PD)
    tn = sum(1 for r in records if r.label is Label.OTHER and r.decision is Label.OTHER)
    auc = None
    if tp + fn > 0 and fp + tn > 0:
        auc = roc_auc([r.p_pd for r in records], [r.label for r in records])
    return Metrics.from_counts(tp, tn, fp, fn, auc=auc)


def evaluate(
    params: ModelParams,
    cohort: Cohort,
    atlas: AtlasVolume,
    table: RelevanceTable,
    prior: AgingPriorParams,
) -> tuple[Metrics, list[PredictionRecord]]:
    if not cohort.labeled():
        raise ValueError("cohort has unlabeled subjects; use predict() instead")
    records = predict(params, cohort, atlas, table, prior)
    return metrics_from_records(records), records


def _to_binary_labels(labels) -> np.ndarray:
    out = []
    for l in labels:
        if isinstance(l, Label):
            out.append(1 if l is Label.PD else 0)
        else:
            out.append(int(l))
    return np.asarray(out)


def roc_points(scores, labels) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) rows from a descending threshold sweep."""
    y = _to_binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    points = [(0.0, 0.0, math.inf)]
    tp = fp = 0
    i = 0
    while i < len(s_sorted):
        thr = s_sorted[i]
        while i < len(s_sorted) and s_sorted[i] == thr:
            if y_sorted[i]:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append((fp / n_neg, tp / n_pos, float(thr)))
    return points


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via threshold sweep + trapezoidal integration."""
    pts = roc_points(scores, labels)
    fpr = np.array([p[0] for p in pts])
    tpr = np.array([p[1] for p in pts])
    return float(_trapezoid(tpr, fpr))


def save_checkpoint(
    params: ModelParams,
    optim_state: OptimState | None,
    path,
    stage: int | None = None,
    config_hash: str | None = None,
) -> None:
    """Magic, length-prefixed JSON metadata, then raw little-endian float64 arrays."""
    arrays: list[tuple[str, np.ndarray]] = [(name, t.data) for name, t in params.named_params()]
    if optim_state is not None:
        for i, m in enumerate(optim_state.m):
            arrays.append((f"optim.m.{i}", m))
        for i, v in enumerate(optim_state.v):
            arrays.append((f"optim.v.{i}", v))
    meta = {
        "channels": params.channels,
        "stage": stage,
        "config_hash": config_hash,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
        "optim": None
        if optim_state is None
        else {
            "step": optim_state.step,
            "base_lr": optim_state.base_lr,
            "weight_decay": optim_state.weight_decay,
            "total_steps": optim_state.total_steps,
        },
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, OptimState | None, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(f"bad checkpoint magic {magic!r}")
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        named: dict[str, np.ndarray] = {}
        for entry in meta["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) < count * 8:
                raise CheckpointError(f"truncated array {entry['name']}")
            named[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    channels = int(meta["channels"])
    expected = ModelParams.init(channels, seed=0)
    rebuilt = {}
    for name, t in expected.named_params():
        if name not in named:
            raise CheckpointError(f"checkpoint missing array {name}")
        if named[name].shape != t.data.shape:
            raise ShapeMismatch(f"{name}: checkpoint shape {named[name].shape} != expected {t.data.shape}")
        rebuilt[name] = named[name]
    model = ModelParams(
        encoder=EncoderParams(
            conv1_w=ad.parameter(rebuilt["encoder.conv1_w"]),
            conv1_b=ad.parameter(rebuilt["encoder.conv1_b"]),
            conv2_w=ad.parameter(rebuilt["encoder.conv2_w"]),
            conv2_b=ad.parameter(rebuilt["encoder.conv2_b"]),
        ),
        fusion=FusionProjection(weight=ad.parameter(rebuilt["fusion.weight"]), bias=ad.parameter(rebuilt["fusion.bias"])),
        branch1=BranchParams(
            conv_w=ad.parameter(rebuilt["branch1.conv_w"]),
            conv_b=ad.parameter(rebuilt["branch1.conv_b"]),
            head_w=ad.parameter(rebuilt["branch1.head_w"]),
            head_b=ad.parameter(rebuilt["branch1.head_b"]),
            name="branch1",
        ),
        branch2=BranchParams(
            conv_w=ad.parameter(rebuilt["branch2.conv_w"]),
            conv_b=ad.parameter(rebuilt["branch2.conv_b"]),
            head_w=ad.parameter(rebuilt["branch2.head_w"]),
            head_b=ad.parameter(rebuilt["branch2.head_b"]),
            name="branch2",
        ),
    )
    optim = None
    if meta["optim"] is not None:
        n = len(model.params())
        optim = OptimState(
            m=[named[f"optim.m.{i}"] for i in range(n)],
            v=[named[f"optim.v.{i}"] for i in range(n)],
            step=int(meta["optim"]["step"]),
            base_lr=float(meta["optim"]["base_lr"]),
            weight_decay=float(meta["optim"]["weight_decay"]),
            total_steps=int(meta["optim"]["total_steps"]),
        )
    return model, optim, meta


def save_checkpoint_atomic(params, optim_state, path, stage=None, config_hash=None) -> None:
    tmp = str(path) + ".tmp"
    save_checkpoint(params, optim_state, tmp, stage=stage, config_hash=config_hash)
    os.replace(tmp, path)
