"""LNSR penalty and the comparison regularizers.

All functions accept plain arrays or diffcore Vars, so the same code computes
reported values and builds differentiable training objectives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .encoder import LayerTrace, Parameters


class RegularizerError(ValueError):
    pass


@dataclass(frozen=True)
class LNSRConfig:
    sigma: float
    inject_layer: int
    layer_weights: tuple[float, ...]
    # Let the perturbed branch backpropagate into layers below inject_layer.
    backprop_below: bool = False

    def __post_init__(self):
        if self.sigma < 0:
            raise RegularizerError("sigma must be non-negative")
        if self.inject_layer < 1:
            raise RegularizerError("inject_layer must be >= 1")
        if any(w < 0 for w in self.layer_weights):
            raise RegularizerError("layer weights must be non-negative")

    @classmethod
    def uniform(cls, sigma: float, inject_layer: int, num_layers: int, weight: float = 1.0, **kw) -> "LNSRConfig":
        if not 1 <= inject_layer <= num_layers:
            raise RegularizerError(f"inject_layer {inject_layer} outside 1..{num_layers}")
        return cls(sigma, inject_layer, (weight,) * (num_layers - inject_layer + 1), **kw)

    def check(self, num_layers: int) -> None:
        if not 1 <= self.inject_layer <= num_layers:
            raise RegularizerError(f"inject_layer {self.inject_layer} outside 1..{num_layers}")
        if len(self.layer_weights) != num_layers - self.inject_layer + 1:
            raise RegularizerError(
                f"need {num_layers - self.inject_layer + 1} layer weights, got {len(self.layer_weights)}"
            )


@dataclass(frozen=True)
class L2SPConfig:
    alpha: float
    beta: float
    snapshot: Parameters = field(repr=False)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise RegularizerError("alpha and beta must be non-negative")


@dataclass(frozen=True)
class MixoutConfig:
    prob: float
    snapshot: Parameters = field(repr=False)
    # Rescale as in the original Mixout: (mixed - p * snapshot) / (1 - p).
    rescale: bool = False

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise RegularizerError("mixout probability must lie in [0, 1]")


@dataclass(frozen=True)
class NoiseOnlyConfig:
    sigma: float
    inject_layer: int

    def __post_init__(self):
        if self.sigma < 0:
            raise RegularizerError("sigma must be non-negative")
        if self.inject_layer < 1:
            raise RegularizerError("inject_layer must be >= 1")


def sample_noise(shape: Sequence[int], sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Draw iid N(0, sigma^2) noise.

    A standard normal block is always drawn and then scaled, so the generator
    advances by the same amount whatever sigma is.
    """
    if sigma < 0:
        raise RegularizerError("sigma must be non-negative")
    return rng.standard_normal(tuple(shape)) * sigma


def _masked_sq_norm(diff, mask: np.ndarray):
    """Per-example squared Frobenius norm over real positions.

    ``diff`` is (T, d) or (B, T, d); returns a scalar or a (B,) vector.
    """
    m = np.asarray(mask, dtype=np.float64)[..., None]
    d = diff * m if not np.all(m == 1.0) else diff
    if dc.value_of(d).ndim == 2:
        return dc.sum_squares(d)
    return dc.sum_(d * d, axis=(1, 2))


def lnsr_penalty(clean: LayerTrace, perturbed: LayerTrace, cfg: LNSRConfig, mask=None):
    """Weighted sum of squared output discrepancies over layers ``b..L``.

    Returns ``(total, per_layer)``. For batched traces each per-layer term is
    the batch mean of the per-example squared norms, so ``total`` is the mean
    per-example penalty.
    """
    b = cfg.inject_layer
    if perturbed.start_layer != b:
        raise RegularizerError(f"perturbed trace starts at layer {perturbed.start_layer}, config says {b}")
    if clean.end_layer != perturbed.end_layer or clean.start_layer > b:
        raise RegularizerError(
            f"trace layer ranges disagree: clean {clean.start_layer}..{clean.end_layer}, "
            f"perturbed {perturbed.start_layer}..{perturbed.end_layer}"
        )
    if len(cfg.layer_weights) != perturbed.end_layer - b + 1:
        raise RegularizerError("layer_weights length does not match the number of regularized layers")
    mask = clean.mask if mask is None else mask
    terms = []
    total = None
    for lam, r in zip(cfg.layer_weights, range(b, perturbed.end_layer + 1)):
        sq = _masked_sq_norm(perturbed.layer(r) - clean.layer(r), mask)
        if dc.value_of(sq).ndim:
            sq = dc.mean(sq)
        term = sq * float(lam)
        terms.append(term)
        total = term if total is None else total + term
    return total, terms


def l2sp_penalty(params: Parameters, cfg: L2SPConfig):
    """(alpha/2)||w_s - w_s0||^2 + (beta/2)||w_head||^2, squared Euclidean norms."""
    snap = cfg.snapshot
    body = None
    for name in params.body_names:
        if name not in snap.tensors:
            raise RegularizerError(f"snapshot lacks body tensor {name!r}")
        anchor = np.asarray(snap.tensors[name])
        if anchor.shape != dc.value_of(params[name]).shape:
            raise RegularizerError(f"snapshot shape mismatch for {name!r}")
        term = dc.sum_squares(params[name] - anchor)
        body = term if body is None else body + term
    head = None
    for name in params.head_names:
        term = dc.sum_squares(params[name])
        head = term if head is None else head + term
    total = 0.0
    if body is not None:
        total = body * (cfg.alpha / 2.0)
    if head is not None:
        total = total + head * (cfg.beta / 2.0)
    return total


def mixout_mask(params: Parameters, prob: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Per-scalar replacement masks for every body tensor (True = use snapshot)."""
    return {name: rng.random(dc.value_of(params[name]).shape) < prob for name in params.body_names}


def mixout_mix(params: Parameters, cfg: MixoutConfig, rng: np.random.Generator) -> Parameters:
    """Replace each body scalar by its snapshot value with probability p.

    Head tensors are never mixed. Works on arrays and on Vars; with Vars the
    gradient reaches only the entries that were kept.
    """
    masks = mixout_mask(params, cfg.prob, rng)
    mixed = {}
    for name, value in params.tensors.items():
        if name not in masks:
            mixed[name] = value
            continue
        anchor = np.asarray(cfg.snapshot.tensors[name])
        if anchor.shape != dc.value_of(value).shape:
            raise RegularizerError(f"snapshot shape mismatch for {name!r}")
        if isinstance(value, dc.Var):
            out = dc.where(masks[name], anchor, value)
        else:
            out = np.where(masks[name], anchor, value)
        if cfg.rescale and cfg.prob < 1.0:
            out = (out - anchor * cfg.prob) * (1.0 / (1.0 - cfg.prob))
        mixed[name] = out
    return Parameters(params.config, mixed)


def compose_loss(task_loss, penalty=0.0):
    """Task loss plus penalty. Rejects non-finite totals."""
    total = task_loss + penalty
    val = float(dc.value_of(total))
    if not math.isfinite(val):
        raise FloatingPointError(
            f"non-finite loss: task={float(dc.value_of(task_loss))!r} penalty={float(dc.value_of(penalty))!r}"
        )
    return total


__all__ = [
    "RegularizerError",
    "LNSRConfig",
    "L2SPConfig",
    "MixoutConfig",
    "NoiseOnlyConfig",
    "sample_noise",
    "lnsr_penalty",
    "l2sp_penalty",
    "mixout_mask",
    "mixout_mix",
    "compose_loss",
]
