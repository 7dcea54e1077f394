"""Dual-branch diagnosis head: classification, brain-age regression, losses.

Branch 1 maps the fused feature to two logits (PD, other); branch 2 has the
same architecture with its own parameters and regresses brain age. The age
gap (predicted minus chronological) feeds a two-sided hinge loss and a
smooth additive correction of the logits before cross entropy.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .aggregator import DenseFeature
from .priors import AgingPriorParams


class ShapeMismatch(ValueError):
    pass


class Label(enum.Enum):
    PD = "pd"
    OTHER = "other"


@dataclass
class Logits:
    """(z_pd, z_ot) pair; ``node`` keeps the graph when produced by classify()."""

    node: Tensor

    @classmethod
    def of(cls, z_pd: float, z_ot: float) -> "Logits":
        return cls(node=ad.constant(np.array([z_pd, z_ot], dtype=np.float64)))

    @property
    def z_pd(self) -> float:
        return float(self.node.data[0])

    @property
    def z_ot(self) -> float:
        return float(self.node.data[1])

    def values(self) -> tuple[float, float]:
        return self.z_pd, self.z_ot


@dataclass
class BranchParams:
    """One stride-2 conv block, global average pooling, and an affine head."""

    conv_w: Tensor
    conv_b: Tensor
    head_w: Tensor  # (outputs, C)
    head_b: Tensor  # (outputs,)
    name: str = "branch"

    @classmethod
    def init(
        cls,
        channels: int,
        outputs: int,
        rng: np.random.Generator,
        name: str = "branch",
        head_bias: float = 0.0,
        head_scale: float = 0.01,
    ) -> "BranchParams":
        fan_in = 27.0 * channels
        return cls(
            conv_w=ad.parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(channels, channels, 3, 3, 3))),
            conv_b=ad.parameter(np.zeros(channels)),
            head_w=ad.parameter(rng.normal(0.0, head_scale, size=(outputs, channels))),
            head_b=ad.parameter(np.full(outputs, head_bias, dtype=np.float64)),
            name=name,
        )

    @property
    def channels(self) -> int:
        return self.conv_w.data.shape[0]

    @property
    def outputs(self) -> int:
        return self.head_w.data.shape[0]

    def named_params(self) -> list[tuple[str, Tensor]]:
        return [
            (f"{self.name}.conv_w", self.conv_w),
            (f"{self.name}.conv_b", self.conv_b),
            (f"{self.name}.head_w", self.head_w),
            (f"{self.name}.head_b", self.head_b),
        ]


def _branch_features(fused: DenseFeature, params: BranchParams) -> Tensor:
    if params.conv_w.data.shape[1] != fused.channels:
        raise ShapeMismatch(f"branch expects {params.conv_w.data.shape[1]} channels, fused has {fused.channels}")
    h = ad.relu(ad.conv3d_down(fused.node, params.conv_w, params.conv_b))
    return ad.global_avg_pool(h)


def classify(fused: DenseFeature, params: BranchParams) -> Logits:
    """Two-way logits from the fused feature."""
    if params.outputs != 2:
        raise ShapeMismatch(f"classifier head must emit 2 logits, emits {params.outputs}")
    return Logits(node=ad.linear(params.head_w, _branch_features(fused, params), params.head_b))


def predict_brain_age(fused: DenseFeature, params: BranchParams) -> Tensor:
    """Scalar brain-age estimate in years (differentiable; .item() for the float)."""
    if params.outputs != 1:
        raise ShapeMismatch(f"age head must emit 1 output, emits {params.outputs}")
    out = ad.linear(params.head_w, _branch_features(fused, params), params.head_b)
    return ad.pick(out, 0)


def _softplus_scalar(x: float) -> float:
    # stable: for large x return x + log1p(e^-x), else log1p(e^x)
    if x > 30.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def phi(delta: float, tau: float) -> float:
    """softplus(delta - tau) - softplus(tau - delta); analytically delta - tau."""
    return _softplus_scalar(delta - tau) - _softplus_scalar(tau - delta)


def age_loss(delta: float, label: Label, prior: AgingPriorParams) -> float:
    """Hinge penalty: PD below zeta, others above tau."""
    if label is Label.PD:
        return max(0.0, prior.zeta - delta)
    return max(0.0, delta - prior.tau)


def correct_logits(z: Logits, delta: float, prior: AgingPriorParams) -> Logits:
    """Shift the PD logit up and the other logit down by alpha * phi(delta)."""
    c = prior.alpha * phi(delta, prior.tau)
    return Logits.of(z.z_pd + c, z.z_ot - c)


def cls_loss(z_tilde: Logits, label: Label) -> float:
    """Two-class cross entropy with log-sum-exp stabilization."""
    z = np.array(z_tilde.values())
    m = float(z.max())
    lse = m + math.log(math.exp(z[0] - m) + math.exp(z[1] - m))
    target = z[0] if label is Label.PD else z[1]
    return lse - float(target)


def decide(z_tilde: Logits) -> tuple[Label, float]:
    """Softmax readout; PD iff p_pd > 0.5, exact ties go to OTHER."""
    d = z_tilde.z_pd - z_tilde.z_ot
    if d >= 0:
        p_pd = 1.0 / (1.0 + math.exp(-d))
    else:
        e = math.exp(d)
        p_pd = e / (1.0 + e)
    return (Label.PD if p_pd > 0.5 else Label.OTHER), p_pd


def ce_loss_node(logits: Logits, label: Label) -> Tensor:
    """Graph-level cross entropy on a logits pair (used for stage-1 training)."""
    idx = 0 if label is Label.PD else 1
    return ad.sub(ad.logsumexp(logits.node), ad.pick(logits.node, idx))


@dataclass
class LossBreakdown:
    node: Tensor  # scalar total-loss graph root
    total: float
    age: float
    cls: float
    delta: float
    predicted_age: float
    corrected: Logits


def total_loss(
    fused: DenseFeature,
    age_chrono: float,
    label: Label,
    branch1: BranchParams,
    branch2: BranchParams,
    prior: AgingPriorParams,
) -> LossBreakdown:
    """Hinge age loss plus corrected cross entropy, end-to-end differentiable.

    The age gap feeds both the hinge term and the logit correction, so
    gradients reach branch 2 through both paths.
    """
    pred = predict_brain_age(fused, branch2)
    delta = ad.sub(pred, ad.constant(age_chrono))
    if label is Label.PD:
        l_age = ad.relu(ad.sub(ad.constant(prior.zeta), delta))
    else:
        l_age = ad.relu(ad.sub(delta, ad.constant(prior.tau)))
    tau = ad.constant(prior.tau)
    phi_node = ad.sub(ad.softplus(ad.sub(delta, tau)), ad.softplus(ad.sub(tau, delta)))
    z = classify(fused, branch1)
    z_tilde = ad.add(z.node, ad.mul(ad.constant(np.array([prior.alpha, -prior.alpha])), phi_node))
    idx = 0 if label is Label.PD else 1
    l_cls = ad.sub(ad.logsumexp(z_tilde), ad.pick(z_tilde, idx))
    node = ad.add(l_age, l_cls)
    return LossBreakdown(
        node=node,
        total=node.item(),
        age=l_age.item(),
        cls=l_cls.item(),
        delta=delta.item(),
        predicted_age=pred.item(),
        corrected=Logits(node=Tensor(z_tilde.data)),
    )
