"""A small T5-topology encoder-decoder transformer.

Pre-RMS-norm residual blocks, relative position bias computed in the first
self-attention of each stack and shared by the layers below it, no biases
in projections, and one embedding table shared by encoder, decoder and the
output projection.

PEFT methods hook into the forward pass through a mapping from attachment
point name to callable (see ``ATTACHMENT_POINTS``). The model never needs to
know which method is attached.
"""

from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

_MASK_VALUE = -1e9

# Hook signatures, keyed by attachment point:
#   embedding    (x_e, mask) -> (x, mask)                 encoder input rows
#   attn.proj    (module, which, x, out, mask) -> out     which in q/k/v/o
#   attn.kv      (module, k, v) -> (k, v)                 projected keys/values
#   attn.prefix  (module, x, mask) -> (pk, pv) | None     rows prepended to K/V
#   attn.output  (layer, x, y, mask) -> y                 self-attention sublayer output
#   ffn.inner    (layer, h) -> h                          FFN activations pre-projection
#   ffn.output   (layer, x, y, mask) -> y                 FFN sublayer output
ATTACHMENT_POINTS = frozenset(
    {"embedding", "attn.proj", "attn.kv", "attn.prefix", "attn.output", "ffn.inner", "ffn.output"}
)

Hooks = Mapping[str, Callable]


@dataclass(frozen=True)
class ArchitectureDims:
    """Encoder-decoder hyperparameters.

    ``n_heads * d_kv`` is the attention inner width, decoupled from
    ``d_model`` as in T5. ``max_seq_len`` bounds encoder length including
    any soft prompt.
    """

    d_model: int
    d_ff: int
    n_heads: int
    d_kv: int
    n_enc_layers: int
    n_dec_layers: int
    vocab_size: int
    rel_buckets: int = 32
    max_rel_distance: int = 128
    max_seq_len: int = 512

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"ArchitectureDims.{f.name} must be an integer >= 1, got {value!r}")

    @property
    def inner_dim(self) -> int:
        return self.n_heads * self.d_kv

    def replace(self, **changes) -> "ArchitectureDims":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureDims":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown ArchitectureDims fields: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "t5-large": ArchitectureDims(
        d_model=1024, d_ff=4096, n_heads=16, d_kv=64, n_enc_layers=24, n_dec_layers=24, vocab_size=32128
    ),
    "toy": ArchitectureDims(d_model=64, d_ff=256, n_heads=4, d_kv=16, n_enc_layers=2, n_dec_layers=2, vocab_size=512),
    "tiny": ArchitectureDims(
        d_model=8, d_ff=16, n_heads=2, d_kv=4, n_enc_layers=1, n_dec_layers=1, vocab_size=12, rel_buckets=8,
        max_rel_distance=16,
    ),
}


def resolve_dims(dims, vocab_size: int | None = None) -> ArchitectureDims:
    """Accept a preset name, a mapping, or an ``ArchitectureDims``."""
    if isinstance(dims, str):
        if dims not in PRESETS:
            raise ConfigurationError(f"unknown dims preset {dims!r}; choose from {sorted(PRESETS)}")
        dims = PRESETS[dims]
    elif isinstance(dims, Mapping):
        dims = ArchitectureDims.from_dict(dims)
    if vocab_size is not None:
        dims = dims.replace(vocab_size=vocab_size)
    return dims


@dataclass
class TokenBatch:
    """Padded id matrices for one teacher-forced step.

    ``dec_in`` is the target shifted right behind the begin id; masks are
    true on real tokens.
    """

    enc_ids: np.ndarray
    enc_mask: np.ndarray
    dec_in: np.ndarray
    dec_target: np.ndarray
    dec_mask: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.enc_ids.shape[0]

    def validate(self, vocab_size: int) -> None:
        for name in ("enc_ids", "dec_in", "dec_target"):
            ids = getattr(self, name)
            if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
                raise ContractError(f"TokenBatch.{name}: ids must lie in [0, {vocab_size})")
        if self.enc_mask.shape != self.enc_ids.shape or self.dec_mask.shape != self.dec_target.shape:
            raise ContractError("TokenBatch: masks must align with id matrices")


def _pad(seqs: Sequence[Sequence[int]], width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(s) for s in seqs), default=0) if width is None else width
    ids = np.full((len(seqs), max(width, 1)), PAD_ID, dtype=np.int64)
    mask = np.zeros(ids.shape, dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def make_batch(sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]] | None = None,
               enc_width: int | None = None, dec_width: int | None = None) -> TokenBatch:
    """Pad encoder sources and build shifted decoder inputs from targets.

    Each target gets the end id appended; the decoder input is the
    begin id followed by the target without its last token.
    """
    enc_ids, enc_mask = _pad(sources, enc_width)
    if targets is None:
        targets = [[] for _ in sources]
    full = [list(t) + [EOS_ID] for t in targets]
    dec_target, dec_mask = _pad(full, dec_width)
    dec_in = np.full_like(dec_target, PAD_ID)
    dec_in[:, 0] = BOS_ID
    dec_in[:, 1:] = np.where(dec_mask[:, :-1], dec_target[:, :-1], PAD_ID)
    return TokenBatch(enc_ids, enc_mask, dec_in, dec_target, dec_mask)


def relative_position_bucket(relative: np.ndarray, bidirectional: bool, num_buckets: int, max_distance: int) -> np.ndarray:
    """T5 bucketing: exact buckets for small offsets, log-spaced beyond."""
    ret = np.zeros_like(relative)
    n = -relative
    if bidirectional:
        num_buckets //= 2
        ret += (n < 0).astype(np.int64) * num_buckets
        n = np.abs(n)
    else:
        n = np.maximum(n, 0)
    max_exact = max(num_buckets // 2, 1)
    is_small = n < max_exact
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(n, 1) / max_exact) / math.log(max(max_distance / max_exact, 1 + 1e-9)) * (num_buckets - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, num_buckets - 1)
    return ret + np.where(is_small, n, large)


class Seq2SeqModel:
    """Parameter container plus the encoder-decoder forward pass.

    Parameters are stored in ``self.params`` under unique hierarchical
    names such as ``enc.0.attn.q`` or ``dec.1.ffn.w2``. Projection weights
    are ``[d_out, d_in]`` and applied as ``x @ W.T``.
    """

    def __init__(self, dims: ArchitectureDims, seed: int | np.random.Generator = 0, init: str = "normal"):
        self.dims = dims
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        d, inner, ff = dims.d_model, dims.inner_dim, dims.d_ff

        def new(name, shape, std=None, fill=None):
            if fill is not None:
                data = np.full(shape, fill)
            else:
                data = rng.normal(0.0, std, size=shape)
            self.params[name] = Tensor(data, trainable=True, name=name)

        new("shared.embed", (dims.vocab_size, d), std=1.0)

        def attention(prefix, bias):
            new(f"{prefix}.q", (inner, d), std=d**-0.5)
            new(f"{prefix}.k", (inner, d), std=d**-0.5)
            new(f"{prefix}.v", (inner, d), std=d**-0.5)
            new(f"{prefix}.o", (d, inner), std=inner**-0.5)
            if bias:
                new(f"{prefix}.rel_bias", (dims.rel_buckets, dims.n_heads), std=0.1)

        def ffn(prefix):
            new(f"{prefix}.w1", (ff, d), std=d**-0.5)
            new(f"{prefix}.w2", (d, ff), std=ff**-0.5)

        for i in range(dims.n_enc_layers):
            new(f"enc.{i}.attn_norm", (d,), fill=1.0)
            attention(f"enc.{i}.attn", bias=i == 0)
            new(f"enc.{i}.ffn_norm", (d,), fill=1.0)
            ffn(f"enc.{i}.ffn")
        new("enc.final_norm", (d,), fill=1.0)
        for i in range(dims.n_dec_layers):
            new(f"dec.{i}.self_norm", (d,), fill=1.0)
            attention(f"dec.{i}.self_attn", bias=i == 0)
            new(f"dec.{i}.cross_norm", (d,), fill=1.0)
            attention(f"dec.{i}.cross_attn", bias=False)
            new(f"dec.{i}.ffn_norm", (d,), fill=1.0)
            ffn(f"dec.{i}.ffn")
        new("dec.final_norm", (d,), fill=1.0)

    # -- structure ---------------------------------------------------------
    def attention_modules(self) -> list[str]:
        dims = self.dims
        mods = [f"enc.{i}.attn" for i in range(dims.n_enc_layers)]
        for i in range(dims.n_dec_layers):
            mods += [f"dec.{i}.self_attn", f"dec.{i}.cross_attn"]
        return mods

    def ffn_layers(self) -> list[str]:
        return [f"enc.{i}.ffn" for i in range(self.dims.n_enc_layers)] + [
            f"dec.{i}.ffn" for i in range(self.dims.n_dec_layers)
        ]

    def self_attention_modules(self) -> list[str]:
        return [m for m in self.attention_modules() if not m.endswith("cross_attn")]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.trainable = flag
            p._needs_grad = flag
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].shape != tuple(np.shape(v)):
                raise ContractError(f"shape mismatch for {k}: {self.params[k].shape} vs {np.shape(v)}")
            self.params[k].data = np.array(v, dtype=self.params[k].data.dtype, order="C")

    def astype(self, dtype) -> "Seq2SeqModel":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    # -- forward pieces ------------------------------------------------------
    def _proj(self, module, which, x, hooks, mask):
        out = x @ self.params[f"{module}.{which}"].T
        fn = hooks.get("attn.proj")
        if fn is not None:
            out = fn(module, which, x, out, mask)
        return out

    def _position_bias(self, module: str, tq: int, tk: int, bidirectional: bool, q_offset: int = 0) -> Tensor:
        dims = self.dims
        ctx = np.arange(tq)[:, None] + q_offset
        mem = np.arange(tk)[None, :]
        buckets = relative_position_bucket(mem - ctx, bidirectional, dims.rel_buckets, dims.max_rel_distance)
        bias = ad.embedding_lookup(self.params[f"{module}.rel_bias"], buckets)  # [tq, tk, H]
        return ad.transpose(bias, (2, 0, 1)).reshape(1, dims.n_heads, tq, tk)

    def _attention(self, module, x_q, x_kv, q_mask, kv_mask, pos_bias, causal, hooks):
        dims = self.dims
        B, tq, _ = x_q.shape
        q = self._proj(module, "q", x_q, hooks, q_mask)
        k = self._proj(module, "k", x_kv, hooks, kv_mask)
        v = self._proj(module, "v", x_kv, hooks, kv_mask)
        kv_fn = hooks.get("attn.kv")
        if kv_fn is not None:
            k, v = kv_fn(module, k, v)
        tk = k.shape[1]
        key_ok = kv_mask
        n_prefix = 0
        prefix_fn = hooks.get("attn.prefix")
        if prefix_fn is not None:
            pre = prefix_fn(module, x_q, q_mask)
            if pre is not None:
                pk, pv = pre
                n_prefix = pk.shape[1]
                k = ad.concat([pk, k], axis=1)
                v = ad.concat([pv, v], axis=1)
                key_ok = np.concatenate([np.ones((B, n_prefix), dtype=bool), kv_mask], axis=1)
        allowed = np.broadcast_to(key_ok[:, None, :], (B, tq, n_prefix + tk))
        if causal:
            tri = np.tril(np.ones((tq, tk), dtype=bool))
            tri = np.concatenate([np.ones((tq, n_prefix), dtype=bool), tri], axis=1)
            allowed = allowed & tri[None]
        bias = np.where(allowed, 0.0, _MASK_VALUE).astype(x_q.data.dtype)[:, None, :, :]

        H, dk = dims.n_heads, dims.d_kv
        qh = ad.transpose(q.reshape(B, tq, H, dk), (0, 2, 1, 3))
        kh = ad.transpose(k.reshape(B, n_prefix + tk, H, dk), (0, 2, 3, 1))
        vh = ad.transpose(v.reshape(B, n_prefix + tk, H, dk), (0, 2, 1, 3))
        scores = (qh @ kh) * (1.0 / math.sqrt(dk))
        if pos_bias is not None:
            if n_prefix:
                zeros = Tensor(np.zeros((1, H, tq, n_prefix)), dtype=x_q.data.dtype)
                pos_bias = ad.concat([zeros, pos_bias], axis=-1)
            scores = scores + pos_bias
        scores = scores + Tensor(bias, dtype=bias.dtype)
        weights = ad.softmax_rows(scores)
        ctx = ad.transpose(weights @ vh, (0, 2, 1, 3)).reshape(B, tq, H * dk)
        return self._proj(module, "o", ctx, hooks, q_mask)

    def _ffn(self, layer, x, hooks):
        h = ad.relu(x @ self.params[f"{layer}.w1"].T)
        fn = hooks.get("ffn.inner")
        if fn is not None:
            h = fn(layer, h)
        return h @ self.params[f"{layer}.w2"].T

    def _sublayer_out(self, point, name, x, y, mask, hooks):
        fn = hooks.get(point)
        return y if fn is None else fn(name, x, y, mask)

    @staticmethod
    def _check_hooks(hooks):
        hooks = {} if hooks is None else dict(hooks)
        unknown = set(hooks) - ATTACHMENT_POINTS
        if unknown:
            raise ConfigurationError(f"hooks declared for nonexistent attachment points: {sorted(unknown)}")
        return hooks

    def encode(self, enc_ids: np.ndarray, enc_mask: np.ndarray, hooks: Hooks | None = None):
        """Run the encoder; returns ``(states, mask)`` after any prompt hook."""
        hooks = self._check_hooks(hooks)
        p = self.params
        x = ad.embedding_lookup(p["shared.embed"], enc_ids)
        mask = np.asarray(enc_mask, dtype=bool)
        emb_fn = hooks.get("embedding")
        if emb_fn is not None:
            x, mask = emb_fn(x, mask)
        T = x.shape[1]
        if T > self.dims.max_seq_len:
            raise ConfigurationError(f"encoder length {T} exceeds positional capacity {self.dims.max_seq_len}")
        pos = None
        for i in range(self.dims.n_enc_layers):
            name = f"enc.{i}.attn"
            if i == 0:
                pos = self._position_bias(name, T, T, bidirectional=True)
            h = ad.rms_norm(x, p[f"enc.{i}.attn_norm"])
            y = self._attention(name, h, h, mask, mask, pos, False, hooks)
            y = self._sublayer_out("attn.output", name, h, y, mask, hooks)
            x = x + y
            h = ad.rms_norm(x, p[f"enc.{i}.ffn_norm"])
            y = self._ffn(f"enc.{i}.ffn", h, hooks)
            y = self._sublayer_out("ffn.output", f"enc.{i}.ffn", h, y, mask, hooks)
            x = x + y
        return ad.rms_norm(x, p["enc.final_norm"]), mask

    def decode_states(self, dec_in: np.ndarray, dec_mask: np.ndarray, memory: Tensor, mem_mask: np.ndarray,
                      hooks: Hooks | None = None) -> Tensor:
        hooks = self._check_hooks(hooks)
        p = self.params
        x = ad.embedding_lookup(p["shared.embed"], dec_in)
        T = x.shape[1]
        mask = np.asarray(dec_mask, dtype=bool)
        pos = None
        for i in range(self.dims.n_dec_layers):
            name = f"dec.{i}.self_attn"
            if i == 0:
                pos = self._position_bias(name, T, T, bidirectional=False)
            h = ad.rms_norm(x, p[f"dec.{i}.self_norm"])
            y = self._attention(name, h, h, mask, mask, pos, True, hooks)
            y = self._sublayer_out("attn.output", name, h, y, mask, hooks)
            x = x + y
            h = ad.rms_norm(x, p[f"dec.{i}.cross_norm"])
            x = x + self._attention(f"dec.{i}.cross_attn", h, memory, mask, mem_mask, None, False, hooks)
            h = ad.rms_norm(x, p[f"dec.{i}.ffn_norm"])
            y = self._ffn(f"dec.{i}.ffn", h, hooks)
            y = self._sublayer_out("ffn.output", f"dec.{i}.ffn", h, y, mask, hooks)
            x = x + y
        return ad.rms_norm(x, p["dec.final_norm"])

    def logits_from_states(self, states: Tensor) -> Tensor:
        return (states @ self.params["shared.embed"].T) * (self.dims.d_model**-0.5)


def forward_logits(model: Seq2SeqModel, batch: TokenBatch, hooks: Hooks | None = None) -> Tensor:
    """Decoder logits ``[batch, l_dec, vocab]`` with hooks applied."""
    batch.validate(model.dims.vocab_size)
    memory, mem_mask = model.encode(batch.enc_ids, batch.enc_mask, hooks)
    states = model.decode_states(batch.dec_in, batch.dec_mask, memory, mem_mask, hooks)
    return model.logits_from_states(states)


def teacher_forced_loss(model: Seq2SeqModel, batch: TokenBatch, hooks: Hooks | None = None) -> Tensor:
    """Mean cross-entropy over non-padding decoder targets."""
    if not batch.dec_mask.any():
        raise ContractError("teacher_forced_loss: all-padding target")
    logits = forward_logits(model, batch, hooks)
    return ad.cross_entropy_from_logits(logits, batch.dec_target, batch.dec_mask)


def greedy_decode(model: Seq2SeqModel, enc_tokens, hooks: Hooks | None = None, max_len: int = 64) -> list:
    """Argmax decoding from the begin id until the end id or ``max_len``.

    ``enc_tokens`` is one id sequence or a list of them; the return value
    mirrors that. Ties go to the lowest token id.
    """
    if max_len < 1:
        raise ContractError("greedy_decode: max_len must be >= 1")
    single = len(enc_tokens) == 0 or np.isscalar(enc_tokens[0])
    seqs = [list(enc_tokens)] if single else [list(s) for s in enc_tokens]
    enc_ids, enc_mask = _pad(seqs)
    with ad.no_grad():
        memory, mem_mask = model.encode(enc_ids, enc_mask, hooks)
        B = len(seqs)
        out = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        dec = np.full((B, 1), BOS_ID, dtype=np.int64)
        for _ in range(max_len):
            states = model.decode_states(dec, np.ones(dec.shape, dtype=bool), memory, mem_mask, hooks)
            last = model.logits_from_states(states[:, -1:, :]).data[:, 0, :]
            nxt = np.argmax(last, axis=-1)
            for b in range(B):
                if done[b]:
                    continue
                if nxt[b] == EOS_ID:
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]))
            if done.all():
                break
            dec = np.concatenate([dec, nxt[:, None]], axis=1)
    return out[0] if single else out
