"""Surrogate masked-token pre-training that produces the body anchor."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..encoder import MASK, NUM_SPECIAL, EncoderConfig, Parameters, forward, init_params
from .config import PretrainSettings
from .data import make_corpus
from .optim import Adam, warmup_lr, warmup_steps

_LM_W = "lm.w"
_LM_B = "lm.b"


@dataclass
class PretrainResult:
    params: Parameters
    steps: int
    final_loss: float
    heldout_accuracy: float
    chance: float
    converged: bool
    losses: list[float]

    @property
    def quality(self) -> str:
        return "converged" if self.converged else "plateau"

    def summary(self) -> dict:
        return {
            "steps": self.steps,
            "final_loss": self.final_loss,
            "heldout_masked_accuracy": self.heldout_accuracy,
            "chance": self.chance,
            "quality": self.quality,
        }


def _mask_batch(seqs: np.ndarray, mask_prob: float, rng: np.random.Generator):
    """Choose content positions to mask; at least one per sequence."""
    pick = rng.random(seqs.shape) < mask_prob
    pick[:, 0] = False
    none = ~pick.any(axis=1)
    if none.any():
        cols = rng.integers(1, seqs.shape[1], size=none.sum())
        pick[np.flatnonzero(none), cols] = True
    inputs = np.where(pick, MASK, seqs)
    return inputs, pick


def _mlm_loss(params: Parameters, lm_w, lm_b, inputs, pick, targets):
    trace = forward(params, inputs)
    hidden = dc.getitem(trace.outputs[-1], np.nonzero(pick))
    logits = dc.matmul(hidden, lm_w) + lm_b
    return dc.cross_entropy(logits, targets[pick]), logits


def masked_accuracy(params: Parameters, lm: dict, corpus: list[np.ndarray], mask_prob: float, seed: int) -> float:
    rng = np.random.default_rng([seed, 31337])
    seqs = np.stack(corpus)
    inputs, pick = _mask_batch(seqs, mask_prob, rng)
    _, logits = _mlm_loss(params, lm[_LM_W], lm[_LM_B], inputs, pick, seqs)
    return float(np.mean(np.asarray(logits).argmax(axis=-1) == seqs[pick]))


def pretrain_surrogate(config: EncoderConfig, settings: PretrainSettings, corpus_size: int | None = None,
                       seed: int | None = None) -> PretrainResult:
    """Train the body on masked-token prediction over a Markov-chain corpus.

    Stops when the running loss drops below ``settings.loss_threshold`` or at
    ``settings.max_steps``. The LM head is discarded.
    """
    seed = settings.seed if seed is None else seed
    corpus_size = settings.corpus_size if corpus_size is None else corpus_size
    rng = np.random.default_rng([seed, 1])
    params = init_params(config, np.random.default_rng(seed))
    seq_len = min(config.max_seq_len, 16)
    corpus = make_corpus(corpus_size, config.vocab_size, seq_len, seed)
    heldout = make_corpus(max(64, corpus_size // 10), config.vocab_size, seq_len, seed, sample_seed=seed + 1)
    lm = {
        _LM_W: rng.normal(0.0, config.init_std, (config.d_model, config.vocab_size)),
        _LM_B: np.zeros(config.vocab_size),
    }
    data = np.stack(corpus)
    opt = Adam(bias_correction=True)
    n_warm = warmup_steps(settings.max_steps, 0.1)
    losses: list[float] = []
    running = math.inf
    step = 0
    while step < settings.max_steps:
        step += 1
        idx = rng.choice(len(data), settings.batch_size, replace=False)
        inputs, pick = _mask_batch(data[idx], settings.mask_prob, rng)
        tape = dc.Tape()
        p = params.on_tape(tape)
        lw, lb = tape.param(_LM_W, lm[_LM_W]), tape.param(_LM_B, lm[_LM_B])
        loss, _ = _mlm_loss(p, lw, lb, inputs, pick, data[idx])
        grads = dc.backward(tape, output=loss)
        loss_val = float(loss.value)
        tape.release()
        merged = dict(params.tensors)
        merged.update(lm)
        new = opt.step(merged, grads, warmup_lr(step, settings.learning_rate, n_warm))
        lm = {_LM_W: new.pop(_LM_W), _LM_B: new.pop(_LM_B)}
        params = Parameters(config, new)
        losses.append(loss_val)
        running = losses[-1] if step == 1 else 0.9 * running + 0.1 * losses[-1]
        if running < settings.loss_threshold:
            break
    acc = masked_accuracy(params, lm, heldout, settings.mask_prob, seed)
    # body only: the task head is re-initialized at fine-tuning time
    params = params.replace(**{n: np.zeros_like(params[n]) for n in params.head_names})
    return PretrainResult(
        params=params,
        steps=step,
        final_loss=running if losses else math.nan,
        heldout_accuracy=acc,
        chance=1.0 / (config.vocab_size - NUM_SPECIAL),
        converged=bool(losses) and running < settings.loss_threshold,
        losses=losses,
    )


@functools.lru_cache(maxsize=8)
def _cached(config: EncoderConfig, settings_key: tuple) -> PretrainResult:
    settings = PretrainSettings(*settings_key)
    return pretrain_surrogate(config, settings)


def pretrain_cached(config: EncoderConfig, settings: PretrainSettings) -> PretrainResult:
    from dataclasses import astuple

    return _cached(config, astuple(settings))


__all__ = ["PretrainResult", "pretrain_surrogate", "pretrain_cached", "masked_accuracy"]
