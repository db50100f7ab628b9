"""scikit-learn style wrappers around the linearizer and the tuning loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, Instance, SlotValue, Triple, build_vocab, corpus_texts, linearize
from .errors import ContractError
from .metrics import corpus_bleu
from .model import Seq2SeqModel, resolve_dims
from .peft import attach, config_from_dict, default_learning_rate
from .training import TrainSettings, fit, generate


def _as_instances(X, y=None, split: str = "train") -> list:
    """Coerce ``X`` (Instances or payload tuples) and optional ``y`` into Instances."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__iter__"):
        raise ContractError("X must be a sequence of Instances or structured payloads")
    X = list(X)
    if y is not None and len(y) != len(X):
        raise ContractError(f"X has {len(X)} items but y has {len(y)}")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, Instance):
            inst = item
            if y is not None:
                inst = Instance(inst.id, inst.payload, inst.stratum, _refs(y[i]), inst.split)
        else:
            payload = tuple(item)
            if not payload or not all(isinstance(p, (Triple, SlotValue)) for p in payload):
                raise ContractError(f"X[{i}] is neither an Instance nor a sequence of Triple/SlotValue")
            refs = _refs(y[i]) if y is not None else []
            # payloads without references can only be inputs to prediction
            inst = Instance(f"x{i:06d}", payload, "", refs, split if refs else "test")
        out.append(inst)
    return out


def _refs(target) -> list:
    return [target] if isinstance(target, str) else list(target)


class StructuredLinearizer(TransformerMixin, BaseEstimator):
    """Map structured payloads (or Instances) to delimiter-marked strings.

    Stateless; ``fit`` only records the number of items seen.
    """

    def fit(self, X, y=None):
        self.n_features_in_ = 1
        self.n_seen_ = len(_as_instances(X))
        return self

    def transform(self, X) -> list:
        check_is_fitted(self, "n_seen_")
        return [linearize(i) for i in _as_instances(X)]


class PeftGenerator(BaseEstimator):
    """Data-to-text generator trained with one PEFT method on a toy backbone.

    Parameters
    ----------
    peft : dict
        PEFT config mapping, e.g. ``{"method": "scaled_prompt_tuning", "k": 50}``.
    dims : str or dict
        Architecture preset or explicit dims; vocab size is taken from the data.
    learning_rate : float, optional
        Defaults to the method's standard rate.
    max_steps, batch_size, eval_every, max_decode_len : int
        Training loop settings.
    random_state : int
        Seeds backbone init, method init and batch order.
    backbone : Seq2SeqModel, optional
        Pre-built (for instance pretrained) backbone; its vocabulary must be
        passed as ``vocab``.
    vocab : Vocab, optional
        Fixed vocabulary; built from the training data otherwise.
    """

    def __init__(self, peft=None, dims="toy", learning_rate=None, max_steps=2000, batch_size=8, eval_every=50,
                 max_decode_len=64, random_state=0, backbone=None, vocab=None):
        self.peft = peft
        self.dims = dims
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.max_decode_len = max_decode_len
        self.random_state = random_state
        self.backbone = backbone
        self.vocab = vocab

    def _config(self):
        return config_from_dict(self.peft or {"method": "scaled_prompt_tuning"})

    def fit(self, X, y=None, eval_set=None):
        """Train on ``X`` (with references from ``y`` or the Instances).

        ``eval_set`` is ``(X_dev, y_dev)`` or a list of Instances used for
        best-BLEU checkpoint selection; the training data is used when omitted.
        """
        train = _as_instances(X, y)
        if not train or any(not i.references for i in train):
            raise ContractError("fit needs at least one instance, each with a reference")
        if eval_set is None:
            dev = train
        elif isinstance(eval_set, tuple) and len(eval_set) == 2:
            dev = _as_instances(eval_set[0], eval_set[1], "dev")
        else:
            dev = _as_instances(eval_set, split="dev")
        cfg = self._config()
        lr = self.learning_rate if self.learning_rate is not None else default_learning_rate(cfg)
        if lr <= 0:
            raise ContractError(f"learning_rate must be > 0, got {lr}")
        if self.vocab is not None:
            vocab = self.vocab
        else:
            vocab = build_vocab(corpus_texts(Dataset(train + dev)))
        rng = np.random.default_rng(self.random_state)
        if self.backbone is not None:
            model = self.backbone
        else:
            model = Seq2SeqModel(resolve_dims(self.dims, len(vocab)), seed=int(rng.integers(2**31)))
        self.attached_ = attach(model, cfg, rng)
        settings = TrainSettings(lr, self.max_steps, self.batch_size, self.eval_every, self.max_decode_len)
        self.history_ = fit(self.attached_, train, dev, vocab, settings, rng)
        self.vocab_ = vocab
        self.n_features_in_ = 1
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "attached_")
        sources = [linearize(i) for i in _as_instances(X)]
        return generate(self.attached_, sources, self.vocab_, self.max_decode_len)

    def score(self, X, y=None) -> float:
        """Corpus BLEU of the predictions against ``y`` (or the Instances' references)."""
        insts = _as_instances(X, y)
        return corpus_bleu(self.predict(insts), [i.references for i in insts])
