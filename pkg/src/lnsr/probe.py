"""Noise-attenuation probe.

Gaussian noise, rescaled to ``scale`` times the norm of a layer's clean
output, is added to that output and carried through the remaining layers.
The curve records how large the perturbation is at each later layer, both
absolutely and relative to the clean output norm.

Probe layer ``k`` means the *output* of layer ``k``; it is the same tensor as
the input of layer ``k + 1``. ``k = 0`` is the embedding output.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .encoder import Batch


@dataclass
class ProbeCurve:
    inject_layer: int
    per_layer_abs: list[float]
    per_layer_ratio: list[float]
    n_examples: int
    scale: float = 0.05
    draws: int = 8
    skipped: int = 0
    # per-example injection-layer ratios, kept for the construction check
    injection_ratios: list[float] = field(default_factory=list, repr=False)

    @property
    def layers(self) -> list[int]:
        return list(range(self.inject_layer, self.inject_layer + len(self.per_layer_abs)))

    @property
    def final_ratio(self) -> float:
        return self.per_layer_ratio[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path: str | Path, metadata: Mapping | None = None) -> None:
        meta = {"scale": self.scale, "draws": self.draws, "n_examples": self.n_examples, "skipped": self.skipped}
        meta.update(metadata or {})
        with open(path, "w", newline="") as fh:
            for k, v in meta.items():
                fh.write(f"# {k}: {v}\n")
            w = csv.writer(fh)
            w.writerow(["layer_index", "abs_norm", "ratio"])
            for layer, a, r in zip(self.layers, self.per_layer_abs, self.per_layer_ratio):
                w.writerow([layer, repr(a), repr(r)])


def read_probe_csv(path: str | Path) -> tuple[dict, list[tuple[int, float, float]]]:
    meta: dict[str, str] = {}
    rows = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            meta[key.strip()] = val.strip()
        else:
            body.append(line)
    for rec in csv.DictReader(body):
        rows.append((int(rec["layer_index"]), float(rec["abs_norm"]), float(rec["ratio"])))
    return meta, rows


def _norm(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Frobenius norm over real positions; x is (..., T, d), mask (T,)."""
    sel = x[..., mask, :]
    return np.sqrt((sel * sel).sum(axis=(-2, -1)))


def probe_example(model, params, tokens: np.ndarray, inject_layer: int, scale: float,
                  rng: np.random.Generator, draws: int = 8) -> tuple[np.ndarray, np.ndarray] | None:
    """Mean (abs, ratio) arrays over ``draws`` noise draws for one sequence.

    Returns None when the clean output at the injection layer has zero norm.
    """
    batch = Batch.from_sequences([np.asarray(tokens)])
    mask = batch.mask[0]
    clean = model.forward(params, batch)
    if inject_layer == 0:
        h = dc.value_of(clean.embedding)
    else:
        h = dc.value_of(clean.layer(inject_layer))
    base_norm = _norm(h[0], mask)
    if not base_norm > 0:
        return None
    noise = rng.standard_normal((draws,) + h.shape[1:])
    noise[:, ~mask, :] = 0.0
    noise *= (scale * base_norm / _norm(noise, mask))[:, None, None]
    pert_in = h + noise

    abs_rows = [_norm(pert_in - h, mask)]
    ratio_rows = [abs_rows[0] / base_norm]
    if inject_layer < model.num_layers:
        pert = model.forward_from(params, pert_in, inject_layer + 1, Batch(
            np.repeat(batch.tokens, draws, axis=0), np.repeat(batch.mask, draws, axis=0)))
        for r in range(inject_layer + 1, model.num_layers + 1):
            c = dc.value_of(clean.layer(r))
            p = dc.value_of(pert.layer(r))
            a = _norm(p - c, mask)
            abs_rows.append(a)
            ratio_rows.append(a / _norm(c[0], mask))
    abs_mat = np.stack(abs_rows, axis=1)  # (draws, layers)
    ratio_mat = np.stack(ratio_rows, axis=1)
    return abs_mat, ratio_mat


def run_probe(model, params, examples: Sequence, inject_layer: int, scale: float = 0.05,
              rng: np.random.Generator | None = None, draws: int = 8) -> ProbeCurve:
    """Average noise-attenuation curve over examples and noise draws.

    ``model`` provides ``num_layers``, ``forward(params, batch)`` and
    ``forward_from(params, layer_input, b, batch)``. ``examples`` is a
    sequence of token arrays.
    """
    if not 0 <= inject_layer <= model.num_layers:
        raise ValueError(f"inject_layer {inject_layer} outside 0..{model.num_layers}")
    if not scale > 0:
        raise ValueError("scale must be positive")
    if len(examples) == 0:
        raise ValueError("probe needs at least one example")
    if draws < 1:
        raise ValueError("draws must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)

    abs_sum = None
    ratio_sum = None
    inj = []
    used = skipped = 0
    for tokens in examples:
        res = probe_example(model, params, tokens, inject_layer, scale, rng, draws)
        if res is None:
            skipped += 1
            continue
        abs_mat, ratio_mat = res
        inj.extend(ratio_mat[:, 0].tolist())
        a = abs_mat.mean(axis=0)
        r = ratio_mat.mean(axis=0)
        abs_sum = a if abs_sum is None else abs_sum + a
        ratio_sum = r if ratio_sum is None else ratio_sum + r
        used += 1
    if skipped:
        warnings.warn(f"probe skipped {skipped} example(s) with zero-norm output", RuntimeWarning, stacklevel=2)
    if used == 0:
        raise ValueError("every example had a zero-norm output at the injection layer")
    return ProbeCurve(
        inject_layer=inject_layer,
        per_layer_abs=(abs_sum / used).tolist(),
        per_layer_ratio=(ratio_sum / used).tolist(),
        n_examples=used,
        scale=scale,
        draws=draws,
        skipped=skipped,
        injection_ratios=inj,
    )


__all__ = ["ProbeCurve", "run_probe", "probe_example", "read_probe_csv"]
