"""Optimizer and the teacher-forced training loop with dev-BLEU selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import backward
from .data import Vocab, decode, encode, linearize
from .errors import NumericError
from .metrics import corpus_bleu
from .model import greedy_decode, make_batch, teacher_forced_loss
from .peft import AttachedModel

logger = logging.getLogger(__name__)


class Adam:
    """Adam without weight decay; updates tensors in place from ``.grad``."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainSettings:
    learning_rate: float
    max_steps: int = 2000
    batch_size: int = 8
    eval_every: int = 50
    max_decode_len: int = 64
    smooth_dev_bleu: bool = False
    stop_at_bleu: float | None = None


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    dev_bleu: list = field(default_factory=list)  # (step, bleu)
    best_bleu: float = -math.inf
    best_step: int = -1
    best_state: dict = field(default_factory=dict)
    failed: bool = False
    failed_step: int | None = None


def encode_pairs(instances, vocab: Vocab) -> tuple[list, list]:
    """One (source ids, target ids) pair per reference."""
    src, tgt = [], []
    for inst in instances:
        s = encode(linearize(inst), vocab)
        for ref in inst.references:
            src.append(s)
            tgt.append(encode(ref, vocab))
    return src, tgt


def generate(attached: AttachedModel, sources: Sequence[str], vocab: Vocab, max_len: int = 64,
             batch_size: int = 64) -> list:
    """Greedy-decode linearized source strings into text."""
    out = []
    for i in range(0, len(sources), batch_size):
        chunk = [encode(s, vocab) for s in sources[i:i + batch_size]]
        ids = greedy_decode(attached.backbone, chunk, attached.hooks, max_len)
        out += [decode(x, vocab) for x in ids]
    return out


def dev_bleu(attached: AttachedModel, instances, vocab: Vocab, max_len: int = 64, smooth: bool = False) -> float:
    if not instances:
        return 0.0
    hyps = generate(attached, [linearize(i) for i in instances], vocab, max_len)
    return corpus_bleu(hyps, [i.references for i in instances], smooth=smooth)


def snapshot(attached: AttachedModel) -> dict:
    return {n: p.data.copy() for n, p in attached.trainable_tensors().items()}


def restore(attached: AttachedModel, state: dict) -> None:
    tensors = attached.trainable_tensors()
    for n, arr in state.items():
        tensors[n].data = arr.copy()


def fit(attached: AttachedModel, train_instances, dev_instances, vocab: Vocab, settings: TrainSettings,
        rng: np.random.Generator) -> TrainHistory:
    """Train the attached method's tensors and keep the best-dev-BLEU state.

    Dev BLEU is measured at step 0 and every ``eval_every`` steps (and at
    the last step). On return the attached model holds the best state.
    """
    src, tgt = encode_pairs(train_instances, vocab)
    if not src:
        raise ValueError("fit: no training pairs")
    params = list(attached.trainable_tensors().values())
    opt = Adam(params, settings.learning_rate)
    hist = TrainHistory()

    def evaluate(step):
        score = dev_bleu(attached, dev_instances, vocab, settings.max_decode_len, settings.smooth_dev_bleu)
        hist.dev_bleu.append((step, score))
        if score > hist.best_bleu:
            hist.best_bleu, hist.best_step = score, step
            hist.best_state = snapshot(attached)
        return score

    evaluate(0)
    order = rng.permutation(len(src))
    cursor = 0
    for step in range(1, settings.max_steps + 1):
        if cursor + settings.batch_size > len(order):
            order = rng.permutation(len(src))
            cursor = 0
        idx = order[cursor:cursor + settings.batch_size]
        cursor += settings.batch_size
        batch = make_batch([src[i] for i in idx], [tgt[i] for i in idx])
        opt.zero_grad()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss = teacher_forced_loss(attached.backbone, batch, attached.hooks)
                value = float(loss.data)
                if math.isfinite(value):
                    backward(loss)
                    opt.step()
        except NumericError:
            value = math.nan  # NaN activations inside the forward pass
        if not math.isfinite(value):
            hist.losses.append(value)
            hist.failed, hist.failed_step = True, step
            logger.warning("non-finite loss at step %d; run marked failed", step)
            break
        hist.losses.append(value)
        if step % settings.eval_every == 0 or step == settings.max_steps:
            try:
                score = evaluate(step)
            except NumericError:
                hist.failed, hist.failed_step = True, step
                logger.warning("non-finite activations while decoding at step %d; run marked failed", step)
                break
            logger.debug("step %d loss %.4f dev BLEU %.2f", step, value, score)
            if settings.stop_at_bleu is not None and score >= settings.stop_at_bleu:
                break
    if hist.best_state:
        restore(attached, hist.best_state)
    return hist


def pretrain(model, pairs, vocab: Vocab, steps: int, lr: float = 1e-3, batch_size: int = 16,
             rng: np.random.Generator | int = 0, log_every: int = 200) -> list:
    """Full-model teacher-forced training on raw ``(source, target)`` text pairs.

    Leaves every backbone tensor frozen afterwards. Returns the loss trace.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    src = [encode(a, vocab) for a, _ in pairs]
    tgt = [encode(b, vocab) for _, b in pairs]
    if not src:
        raise ValueError("pretrain: no pairs")
    model.set_trainable(True)
    opt = Adam(list(model.params.values()), lr)
    losses = []
    for step in range(1, steps + 1):
        idx = rng.integers(len(src), size=batch_size)
        opt.zero_grad()
        loss = teacher_forced_loss(model, make_batch([src[i] for i in idx], [tgt[i] for i in idx]))
        value = float(loss.data)
        losses.append(value)
        if not math.isfinite(value):
            raise NumericError(f"pretrain: non-finite loss at step {step}")
        backward(loss)
        opt.step()
        if log_every and step % log_every == 0:
            logger.info("pretrain step %d loss %.4f", step, value)
    opt.zero_grad()
    model.set_trainable(False)
    return losses
