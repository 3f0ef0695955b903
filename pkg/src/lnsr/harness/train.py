"""Fine-tuning loop with LNSR and the comparison regularizers."""

from __future__ import annotations

import functools
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from .. import diffcore as dc
from ..encoder import EncoderConfig, EncoderModel, Parameters, forward, init_head, init_params, load_snapshot
from ..probe import run_probe
from ..regularizers import (
    L2SPConfig,
    LNSRConfig,
    MixoutConfig,
    NoiseOnlyConfig,
    l2sp_penalty,
    lnsr_penalty,
    mixout_mix,
    sample_noise,
)
from .config import TrainConfig
from .data import Dataset, TaskData, load_tsv, make_synthetic_task, subsample
from .metrics import metric as compute_metric
from .optim import Adam, warmup_lr, warmup_steps


class NumericalAbort(FloatingPointError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, step: int, task_loss: float, penalty: float, detail: str = ""):
        self.step = step
        self.task_loss = task_loss
        self.penalty = penalty
        self.detail = detail
        msg = f"non-finite objective at step {step}: task_loss={task_loss!r} penalty={penalty!r}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


class SeedStreams:
    """Independent generators per concern, all derived from one run seed."""

    NAMES = ("head", "shuffle", "noise", "mixout", "probe")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        for name, child in zip(self.NAMES, children):
            setattr(self, name, np.random.default_rng(child))


@dataclass
class StepResult:
    task_loss: float
    penalty: float
    grads: dict[str, np.ndarray]
    penalty_terms: list[float] = field(default_factory=list)


def objective_and_grads(model, params: Parameters, batch, reg, noise_rng: np.random.Generator,
                        mixout_rng: np.random.Generator | None = None) -> StepResult:
    """Mean over the batch of task loss plus penalty, and its gradient.

    For LNSR each example gets a fresh noise draw at the input of layer b;
    both the clean and the perturbed pass run through the same parameters.
    """
    tape = dc.Tape()
    p = params.on_tape(tape)
    if isinstance(reg, MixoutConfig):
        p = mixout_mix(p, reg, mixout_rng)

    try:
        clean = model.forward(p, batch)
        clean_loss = model.loss(clean, batch)
    except dc.NonFiniteError as exc:
        raise NumericalAbort(-1, math.nan, math.nan, str(exc)) from None
    task = clean_loss
    penalty = None
    terms: list[float] = []
    try:
        if isinstance(reg, LNSRConfig):
            xb = clean.layer_input(reg.inject_layer)
            eps = sample_noise(dc.value_of(xb).shape, reg.sigma, noise_rng)
            base = xb if reg.backprop_below else dc.detach(xb)
            perturbed = model.forward_from(p, base + eps, reg.inject_layer, batch)
            penalty, term_vars = lnsr_penalty(clean, perturbed, reg)
            terms = [float(dc.value_of(t)) for t in term_vars]
        elif isinstance(reg, NoiseOnlyConfig):
            xb = clean.layer_input(reg.inject_layer)
            eps = sample_noise(dc.value_of(xb).shape, reg.sigma, noise_rng)
            perturbed = model.forward_from(p, xb + eps, reg.inject_layer, batch)
            task = model.loss(perturbed, batch)
        elif isinstance(reg, L2SPConfig):
            penalty = l2sp_penalty(p, reg)
    except dc.NonFiniteError as exc:
        clean_val = float(dc.value_of(clean_loss))
        raise NumericalAbort(-1, clean_val, math.nan, str(exc)) from None

    total = task if penalty is None else task + penalty
    task_val = float(dc.value_of(task))
    pen_val = 0.0 if penalty is None else float(dc.value_of(penalty))
    if not (math.isfinite(task_val) and math.isfinite(pen_val)):
        raise NumericalAbort(-1, task_val, pen_val)
    grads = dc.backward(tape, output=total)
    tape.release()
    return StepResult(task_val, pen_val, grads, terms)


def resolve_regularizer(cfg: TrainConfig, anchor: Parameters | None):
    r = cfg.regularizer
    L = cfg.encoder.num_layers
    if r.kind == "none":
        return None
    if r.kind == "lnsr":
        weights = tuple(r.layer_weights) if r.layer_weights is not None else (1.0,) * (L - r.inject_layer + 1)
        reg = LNSRConfig(r.sigma, r.inject_layer, weights, backprop_below=r.backprop_below)
        reg.check(L)
        return reg
    if r.kind == "noise":
        return NoiseOnlyConfig(r.sigma, r.inject_layer)
    if r.kind == "l2sp":
        return L2SPConfig(r.alpha, r.beta, anchor)
    if r.kind == "mixout":
        return MixoutConfig(r.prob, anchor, rescale=r.rescale)
    raise ValueError(f"unknown regularizer {r.kind!r}")


# -- data and body preparation ----------------------------------------------

@functools.lru_cache(maxsize=16)
def _synthetic(kind: str, size: int, eval_size: int, vocab: int, seed: int, seq_len: int) -> TaskData:
    return make_synthetic_task(kind, size, vocab, seed, eval_size=eval_size, seq_len=seq_len)


def build_task(cfg: TrainConfig) -> TaskData:
    d = cfg.data
    if d.kind == "tsv":
        train = load_tsv(d.train_path, d.schema, d.label_kind, max_len=cfg.encoder.max_seq_len,
                         header=d.header, metric=d.metric, split="train")
        eval_ = load_tsv(d.eval_path, d.schema, d.label_kind, vocab=train.vocab, max_len=cfg.encoder.max_seq_len,
                         header=d.header, metric=d.metric, split="eval")
        task = TaskData(train, eval_)
    else:
        task = _synthetic(d.kind, d.train_size, d.eval_size, cfg.encoder.vocab_size, d.seed, d.seq_len)
        if d.metric:
            task = TaskData(replace(task.train, metric=d.metric), replace(task.eval, metric=d.metric),
                            task.baseline_score, task.attempts)
    if d.subsample_ratio < 1:
        sub = subsample(task.train, d.subsample_ratio, np.random.default_rng([d.seed, 77, int(d.subsample_ratio * 1e6)]))
        if len(sub) < cfg.batch_size:
            raise ValueError(f"subsample of {len(sub)} examples is smaller than batch_size {cfg.batch_size}")
        task = TaskData(sub, task.eval, task.baseline_score, task.attempts)
    return task


def resolve_encoder(cfg: TrainConfig, task: TaskData) -> EncoderConfig:
    enc = cfg.encoder
    vocab = max(enc.vocab_size, task.train.vocab_size)
    max_len = max(enc.max_seq_len, task.train.max_len, task.eval.max_len)
    if task.train.is_classification:
        n_labels = max(task.train.num_labels, task.eval.num_labels, 2)
        return replace(enc, vocab_size=vocab, max_seq_len=max_len, head_kind="classification", num_labels=n_labels)
    return replace(enc, vocab_size=vocab, max_seq_len=max_len, head_kind="regression")


def initial_body(cfg: TrainConfig, enc: EncoderConfig) -> tuple[Parameters, dict]:
    """Pre-trained anchor: loaded snapshot, surrogate pre-training, or plain init."""
    pt = cfg.pretrain
    if pt.snapshot:
        params, meta = load_snapshot(pt.snapshot)
        if params.config.d_model != enc.d_model or params.config.num_layers != enc.num_layers:
            raise ValueError("snapshot architecture does not match encoder config")
        return _adapt_head(params, enc), {"source": "snapshot", **meta}
    if not pt.enabled:
        return init_params(enc, np.random.default_rng(pt.seed)), {"source": "init"}
    from .pretrain import pretrain_cached

    res = pretrain_cached(enc, pt)
    return _adapt_head(res.params, enc), {"source": "surrogate", **res.summary()}


def _adapt_head(params: Parameters, enc: EncoderConfig) -> Parameters:
    """Rebuild a parameter set for ``enc`` keeping the body tensors."""
    shapes = init_params(enc, np.random.default_rng(0)).tensors
    tensors = {}
    for name, fresh in shapes.items():
        old = params.tensors.get(name)
        if old is not None and old.shape == fresh.shape:
            tensors[name] = old
        elif name.startswith("embed.") and old is not None and old.shape[1:] == fresh.shape[1:]:
            rows = min(old.shape[0], fresh.shape[0])
            new = np.zeros(fresh.shape)
            new[:rows] = old[:rows]
            tensors[name] = new
        else:
            tensors[name] = np.zeros(fresh.shape)
    return Parameters(enc, tensors)


# -- evaluation --------------------------------------------------------------

def evaluate_split(model: EncoderModel, params: Parameters, ds: Dataset, batch_size: int = 128) -> tuple[float, float]:
    """(metric, mean loss) with clean, deterministic forward passes."""
    preds = []
    loss_sum = 0.0
    for batch in ds.batches(range(len(ds)), batch_size):
        trace = forward(params, batch.tokens, batch.mask)
        preds.append(model.predict(trace))
        loss_sum += float(model.loss(trace, batch)) * len(batch)
    pred = np.concatenate(preds)
    labels = ds.labels.astype(np.int64) if ds.is_classification else ds.labels
    return compute_metric(ds.metric, pred, labels), loss_sum / len(ds)


# -- records -----------------------------------------------------------------

@dataclass
class RunRecord:
    seed: int
    config_hash: str
    config: dict
    metric: str
    epochs: list[dict]
    final: dict
    probe: dict | None
    steps: int
    warmup_steps: int
    body: dict
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def comparable(self) -> dict:
        d = self.to_dict()
        d.pop("wall_clock_s")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    @property
    def eval_metric(self) -> float:
        return self.final["eval_metric"]

    @property
    def train_metric(self) -> float:
        return self.final["train_metric"]


def train(cfg: TrainConfig, task: TaskData | None = None, body: tuple[Parameters, dict] | None = None,
          return_params: bool = False):
    """Fine-tune one seed and return its RunRecord (and final parameters if asked)."""
    cfg.validate()
    started = time.perf_counter()
    task = task if task is not None else build_task(cfg)
    enc = resolve_encoder(cfg, task)
    body_params, body_meta = body if body is not None else initial_body(cfg, enc)
    body_params = _adapt_head(body_params, enc)
    model = EncoderModel(enc)
    streams = SeedStreams(cfg.seed)

    params = init_head(body_params, streams.head)
    anchor = body_params
    reg = resolve_regularizer(cfg, anchor)
    opt = Adam(cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.eps, cfg.optimizer.bias_correction)

    n = len(task.train)
    per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    n_warm = warmup_steps(total_steps, cfg.warmup_fraction)

    step = 0
    epochs = []
    for epoch in range(1, cfg.epochs + 1):
        order = streams.shuffle.permutation(n)
        loss_acc = pen_acc = 0.0
        for batch in task.train.batches(order, cfg.batch_size):
            step += 1
            try:
                res = objective_and_grads(model, params, batch, reg, streams.noise, streams.mixout)
            except NumericalAbort as exc:
                raise NumericalAbort(step, exc.task_loss, exc.penalty, exc.detail) from None
            bad = [k for k, g in res.grads.items() if not np.all(np.isfinite(g))]
            if bad:
                raise NumericalAbort(step, res.task_loss, res.penalty, f"non-finite gradient in {bad[0]}")
            lr = warmup_lr(step, cfg.learning_rate, n_warm)
            params = Parameters(enc, opt.step(params.tensors, res.grads, lr))
            loss_acc += res.task_loss * len(batch)
            pen_acc += res.penalty * len(batch)
        train_metric, train_loss = evaluate_split(model, params, task.train)
        eval_metric, eval_loss = evaluate_split(model, params, task.eval)
        epochs.append({
            "epoch": epoch,
            "objective_task_loss": loss_acc / n,
            "objective_penalty": pen_acc / n,
            "train_loss": train_loss,
            "train_metric": train_metric,
            "eval_loss": eval_loss,
            "eval_metric": eval_metric,
        })

    last = epochs[-1]
    final = {k: last[k] for k in ("train_metric", "eval_metric", "train_loss", "eval_loss")}
    final["gap"] = final["train_metric"] - final["eval_metric"]
    final["n_train"] = n
    final["n_eval"] = len(task.eval)

    probe = None
    if cfg.probe.enabled:
        examples = task.eval.sequences
        if cfg.probe.max_examples is not None:
            examples = examples[: cfg.probe.max_examples]
        inject = max(cfg.regularizer.inject_layer - 1, 0)
        curve = run_probe(model, params, examples, inject, cfg.probe.scale, streams.probe, cfg.probe.draws)
        probe = curve.to_dict()
        probe.pop("injection_ratios")

    record = RunRecord(
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
        config=cfg.to_dict(),
        metric=task.eval.metric,
        epochs=epochs,
        final=final,
        probe=probe,
        steps=step,
        warmup_steps=n_warm,
        body={"digest": body_params.digest(), **_jsonable(body_meta)},
        wall_clock_s=time.perf_counter() - started,
    )
    if return_params:
        return record, params
    return record


def _jsonable(d: dict) -> dict[str, Any]:
    return json.loads(json.dumps(d, default=str))


__all__ = [
    "NumericalAbort",
    "SeedStreams",
    "StepResult",
    "RunRecord",
    "objective_and_grads",
    "resolve_regularizer",
    "build_task",
    "resolve_encoder",
    "initial_body",
    "evaluate_split",
    "train",
]
