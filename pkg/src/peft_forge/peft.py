"""Parameter-efficient tuning methods behind one attachment interface.

``attach(model, config, rng)`` allocates the method's tensors, freezes the
backbone (except for full fine-tuning) and returns an ``AttachedModel``
whose ``hooks`` plug into ``Seq2SeqModel``'s attachment points.

The standalone functions (``compose_prompt``, ``lora_apply``,
``phm_linear`` ...) are the math each hook runs; they are usable and tested
on their own.
"""

from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, ClassVar, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ShapeError
from .model import ArchitectureDims, Seq2SeqModel

# --------------------------------------------------------------------------
# configurations
# --------------------------------------------------------------------------

PREFIX_PLACEMENTS = ("all_attention", "encoder_only", "enc_and_dec_self")
ADAPTER_PLACEMENTS = ("after_ffn", "after_attn_and_ffn")
SCALE_SHAPES = ("vector", "scalar", "matrix")


def _positive(obj, *names):
    for n in names:
        v = getattr(obj, n)
        if not isinstance(v, (int, np.integer)) or v < 1:
            raise ConfigurationError(f"{type(obj).__name__}.{n} must be an integer >= 1, got {v!r}")


def _choice(obj, name, options):
    if getattr(obj, name) not in options:
        raise ConfigurationError(f"{type(obj).__name__}.{name} must be one of {options}, got {getattr(obj, name)!r}")


@dataclass(frozen=True)
class PeftConfig:
    """Base of the method configurations; ``method`` tags the JSON form."""

    method: ClassVar[str] = ""

    def validate(self) -> None:
        pass

    def to_dict(self) -> dict:
        d = {"method": self.method}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class FineTune(PeftConfig):
    method: ClassVar[str] = "fine_tune"


@dataclass(frozen=True)
class PromptTuning(PeftConfig):
    method: ClassVar[str] = "prompt_tuning"
    k: int = 50

    def validate(self):
        _positive(self, "k")


@dataclass(frozen=True)
class ScaledPromptTuning(PeftConfig):
    """Soft prompt whose rows are rescaled by a trainable scale (``vector`` is SPT proper)."""

    method: ClassVar[str] = "scaled_prompt_tuning"
    k: int = 50
    scale_shape: str = "vector"

    def validate(self):
        _positive(self, "k")
        _choice(self, "scale_shape", SCALE_SHAPES)


@dataclass(frozen=True)
class PrefixTuning(PeftConfig):
    method: ClassVar[str] = "prefix_tuning"
    len: int = 5
    placement: str = "all_attention"

    def validate(self):
        _positive(self, "len")
        _choice(self, "placement", PREFIX_PLACEMENTS)


@dataclass(frozen=True)
class LoRA(PeftConfig):
    method: ClassVar[str] = "lora"
    rank: int = 8
    targets: tuple = ("query", "value")
    scaling: float = 1.0

    def validate(self):
        _positive(self, "rank")
        bad = set(self.targets) - set(_TARGET_KEYS)
        if bad or not self.targets:
            raise ConfigurationError(f"LoRA.targets must be a non-empty subset of {tuple(_TARGET_KEYS)}")


@dataclass(frozen=True)
class BottleneckAdapter(PeftConfig):
    method: ClassVar[str] = "bottleneck_adapter"
    r: int = 16
    placement: str = "after_ffn"

    def validate(self):
        _positive(self, "r")
        _choice(self, "placement", ADAPTER_PLACEMENTS)


@dataclass(frozen=True)
class Compacter(PeftConfig):
    """Bottleneck adapter whose two projections are PHM layers."""

    method: ClassVar[str] = "compacter"
    phm_n: int = 8
    r: int = 16
    factor_rank: int = 1
    share_slow: bool = True
    placement: str = "after_ffn"

    def validate(self):
        _positive(self, "phm_n", "r", "factor_rank")
        _choice(self, "placement", ADAPTER_PLACEMENTS)


@dataclass(frozen=True)
class IA3(PeftConfig):
    method: ClassVar[str] = "ia3"


@dataclass(frozen=True)
class UniPELT(PeftConfig):
    method: ClassVar[str] = "unipelt"
    adapter_r: int = 16
    lora_rank: int = 8
    prefix_len: int = 5
    prefix_placement: str = "enc_and_dec_self"

    def validate(self):
        _positive(self, "adapter_r", "lora_rank", "prefix_len")
        _choice(self, "prefix_placement", PREFIX_PLACEMENTS)


_TARGET_KEYS = {"query": "q", "key": "k", "value": "v", "output": "o"}

CONFIG_TYPES = {
    cls.method: cls
    for cls in (FineTune, PromptTuning, ScaledPromptTuning, PrefixTuning, LoRA, BottleneckAdapter, Compacter, IA3, UniPELT)
}

# learning rates per method; the second entry is the DART setting where it differs
LEARNING_RATES = {
    "fine_tune": (1e-4, 1e-4),
    "prompt_tuning": (5e-1, 5e-1),
    "scaled_prompt_tuning": (5e-1, 5e-1),
    "bottleneck_adapter": (1e-4, 1e-4),
    "lora": (1e-4, 5e-4),
    "compacter": (3e-3, 3e-3),
    "prefix_tuning": (5e-2, 1e-1),
    "ia3": (3e-3, 3e-3),
    "unipelt": (1e-4, 1e-3),
}


def default_learning_rate(config: PeftConfig, dataset: str = "webnlg") -> float:
    pair = LEARNING_RATES[config.method]
    return pair[1] if dataset.lower() == "dart" else pair[0]


def config_from_dict(d: Mapping[str, Any]) -> PeftConfig:
    d = dict(d)
    try:
        cls = CONFIG_TYPES[d.pop("method")]
    except KeyError as exc:
        raise ConfigurationError(f"unknown or missing PEFT method: {exc}") from None
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigurationError(f"{cls.__name__}: unknown fields {sorted(unknown)}")
    if "targets" in d:
        d["targets"] = tuple(d["targets"])
    cfg = cls(**d)
    cfg.validate()
    return cfg


def standard_configs(dims: ArchitectureDims | None = None) -> list[PeftConfig]:
    """The standard configuration roster; PHM order shrinks to fit small dims."""
    phm_n = 8
    if dims is not None:
        bottleneck = dims.d_model // 16
        while phm_n > 1 and (bottleneck % phm_n or dims.d_model % phm_n):
            phm_n //= 2
    return [
        FineTune(),
        PromptTuning(k=50),
        ScaledPromptTuning(k=50),
        BottleneckAdapter(r=16),
        LoRA(rank=8),
        Compacter(phm_n=phm_n, r=16),
        PrefixTuning(len=5),
        PrefixTuning(len=10),
        IA3(),
        UniPELT(prefix_len=5),
        UniPELT(prefix_len=10),
    ]


# --------------------------------------------------------------------------
# method math
# --------------------------------------------------------------------------


def compose_prompt(x_p: Tensor, x_e: Tensor) -> Tensor:
    """``[X_p; X_e]``: prompt rows first, then the input embeddings.

    ``x_e`` may carry a leading batch axis, in which case the prompt is
    broadcast over it.
    """
    if x_p.ndim != 2 or x_p.shape[1] != x_e.shape[-1]:
        raise ShapeError(f"compose_prompt: prompt {x_p.shape} and embeddings {x_e.shape} differ in width")
    if x_e.ndim == 3:
        x_p = ad.expand(x_p, (x_e.shape[0],) + x_p.shape)
    return ad.concat_rows(x_p, x_e)


def scale_prompt(x_p: Tensor, s: Tensor) -> Tensor:
    """``s ⊙ X_p`` for a ``[k,1]`` vector, ``[1,1]`` scalar or ``[k,n_e]`` matrix ``s``."""
    k, n = x_p.shape
    if s.shape == (k, 1):
        return ad.row_scale(x_p, s)
    if s.shape == (1, 1) or s.shape == (k, n):
        return ad.mul(x_p, s)
    raise ShapeError(f"scale_prompt: scale {s.shape} does not fit prompt {x_p.shape}")


def compose_scaled_prompt(x_p: Tensor, s: Tensor, x_e: Tensor) -> Tensor:
    """``[s ⊙ X_p; X_e]``."""
    return compose_prompt(scale_prompt(x_p, s), x_e)


def prefix_kv_extend(keys: Tensor, values: Tensor, prefix_k: Tensor, prefix_v: Tensor):
    """Prepend prefix rows to keys and values (row axis is second to last)."""
    if keys.shape[-1] != prefix_k.shape[-1] or values.shape[-1] != prefix_v.shape[-1]:
        raise ShapeError(f"prefix_kv_extend: widths {keys.shape[-1]} vs {prefix_k.shape[-1]}")
    if prefix_k.shape[-2] != prefix_v.shape[-2]:
        raise ShapeError("prefix_kv_extend: prefix keys and values differ in length")
    if keys.ndim == 3 and prefix_k.ndim == 2:
        B = keys.shape[0]
        prefix_k = ad.expand(prefix_k, (B,) + prefix_k.shape)
        prefix_v = ad.expand(prefix_v, (B,) + prefix_v.shape)
    return ad.concat_rows(prefix_k, keys), ad.concat_rows(prefix_v, values)


def lora_delta(x: Tensor, a: Tensor, b: Tensor, scaling: float = 1.0) -> Tensor:
    """Row-major ``(B·A·x)``: ``x @ A.T @ B.T`` for ``x`` of shape ``[..., d_in]``."""
    if a.shape[0] != b.shape[1]:
        raise ShapeError(f"lora: rank of A {a.shape} and B {b.shape} disagree")
    if a.shape[1] != x.shape[-1]:
        raise ShapeError(f"lora: A {a.shape} does not accept input width {x.shape[-1]}")
    out = (x @ a.T) @ b.T
    return out if scaling == 1.0 else out * scaling


def lora_apply(w: Tensor, a: Tensor, b: Tensor, x: Tensor, scaling: float = 1.0) -> Tensor:
    """``W·x + B·(A·x)`` with ``x`` as rows; only ``A`` and ``B`` are meant to train."""
    if b.shape[0] != w.shape[0]:
        raise ShapeError(f"lora: B {b.shape} does not match W {w.shape}")
    return x @ w.T + lora_delta(x, a, b, scaling)


def lora_merge(w, a, b, scaling: float = 1.0) -> np.ndarray:
    """``W + B·A`` as a plain array (accepts tensors or arrays)."""
    w, a, b = (t.data if isinstance(t, Tensor) else np.asarray(t) for t in (w, a, b))
    if a.shape[0] != b.shape[1] or b.shape[0] != w.shape[0] or a.shape[1] != w.shape[1]:
        raise ShapeError(f"lora_merge: inconsistent shapes W{w.shape} A{a.shape} B{b.shape}")
    return w + scaling * (b @ a)


def bottleneck_forward(h: Tensor, w_down: Tensor, b_down: Tensor, w_up: Tensor, b_up: Tensor) -> Tensor:
    """Residual bottleneck ``h + relu(h·W_down + b_down)·W_up + b_up``."""
    return h + bottleneck_delta(h, w_down, b_down, w_up, b_up)


def bottleneck_delta(h, w_down, b_down, w_up, b_up) -> Tensor:
    if w_down.shape[0] != h.shape[-1] or w_up.shape != (w_down.shape[1], h.shape[-1]):
        raise ShapeError(f"bottleneck: W_down {w_down.shape} / W_up {w_up.shape} vs width {h.shape[-1]}")
    return ad.relu(h @ w_down + b_down) @ w_up + b_up


def phm_weight(a: Tensor, b_factors) -> Tensor:
    """``Σ_i kron(A_i, B_i)``.

    ``a`` is ``[n, n, n]``. ``b_factors`` is either a ``[n, d_out/n, d_in/n]``
    tensor or a pair ``(s, t)`` of ``[n, d_out/n, rank]`` and
    ``[n, d_in/n, rank]`` low-rank factors with ``B_i = s_i t_iᵀ``.
    """
    n = a.shape[0]
    if a.shape != (n, n, n):
        raise ShapeError(f"phm: slow weights must be [n,n,n], got {a.shape}")
    total = None
    for i in range(n):
        if isinstance(b_factors, tuple):
            s, t = b_factors
            b_i = s[i] @ t[i].T
        else:
            b_i = b_factors[i]
        term = ad.kron(a[i], b_i)
        total = term if total is None else total + term
    return total


def phm_linear(x: Tensor, a: Tensor, b_factors, bias: Tensor | None = None) -> Tensor:
    """Linear layer with ``W = Σ_i kron(A_i, B_i)``; ``W`` is ``[d_out, d_in]``."""
    w = phm_weight(a, b_factors)
    if w.shape[1] != x.shape[-1]:
        raise ShapeError(f"phm_linear: weight {w.shape} does not accept width {x.shape[-1]}")
    out = x @ w.T
    return out if bias is None else out + bias


def phm_dims_check(n: int, d_in: int, d_out: int) -> None:
    if d_in % n or d_out % n:
        raise ConfigurationError(f"PHM order {n} must divide both d_in={d_in} and d_out={d_out}")


def ia3_rescale(stream: Tensor, l_vec: Tensor) -> Tensor:
    """Multiply every column ``j`` of ``stream`` by ``l_vec[j]`` (``l_vec`` is ``[width, 1]``)."""
    if l_vec.ndim != 2 or l_vec.shape[1] != 1 or l_vec.shape[0] != stream.shape[-1]:
        raise ShapeError(f"ia3_rescale: vector {l_vec.shape} does not match stream width {stream.shape[-1]}")
    return ad.mul(stream, ad.reshape(l_vec, (stream.shape[-1],)))


def masked_mean_pool(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Mean over the position axis of ``[B, T, d]`` using only unmasked rows."""
    if mask is None:
        return ad.mean(x, axis=1)
    m = np.asarray(mask, dtype=x.data.dtype)[:, :, None]
    counts = np.maximum(m.sum(axis=1), 1.0)
    return ad.sum(x * m, axis=1) * (1.0 / counts)


def gate_value(w_g: Tensor, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """``σ(w_gᵀ · meanpool(x))`` per batch row, shaped ``[B, 1, 1]``."""
    pooled = masked_mean_pool(x, mask)  # [B, d]
    return ad.sigmoid(pooled @ w_g).reshape(x.shape[0], 1, 1)


def unipelt_gated_combine(base: Tensor, contributions: Mapping[str, Tensor], gates: Mapping[str, Tensor]) -> Tensor:
    """``base + Σ_m gate_m · contribution_m`` over the three sub-methods."""
    missing = {"adapter", "lora", "prefix"} - set(gates)
    if missing:
        raise ConfigurationError(f"UniPELT: missing sub-method gates {sorted(missing)}")
    out = base
    for name, c in contributions.items():
        out = out + gates[name] * c
    return out


# --------------------------------------------------------------------------
# attachment
# --------------------------------------------------------------------------


class AttachedModel:
    """A backbone plus one method's tensors and hooks.

    Attributes
    ----------
    backbone : Seq2SeqModel
    config : PeftConfig
    params : OrderedDict[str, Tensor]
        Method tensors, always trainable.
    hooks : dict
        Attachment point -> callable, passed to the model's forward.
    """

    def __init__(self, backbone: Seq2SeqModel, config: PeftConfig):
        self.backbone = backbone
        self.config = config
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.hooks: dict = {}

    @property
    def freezing_mask(self) -> set:
        """Backbone parameter names left trainable (all of them only under FineTune)."""
        return {n for n, p in self.backbone.params.items() if p.trainable}

    def add_param(self, name: str, data) -> Tensor:
        if name in self.params or name in self.backbone.params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = Tensor(data, trainable=True, name=name, dtype=self.backbone.params["shared.embed"].data.dtype)
        self.params[name] = t
        return t

    def trainable_tensors(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict((n, p) for n, p in self.backbone.params.items() if p.trainable)
        out.update(self.params)
        return out

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"unknown method parameter {k!r}")
            if self.params[k].shape != tuple(np.shape(v)):
                raise ShapeError(f"shape mismatch for {k}: {self.params[k].shape} vs {np.shape(v)}")
            self.params[k].data = np.array(v, dtype=self.params[k].data.dtype, order="C")

    def zero_grad(self) -> None:
        for p in self.trainable_tensors().values():
            p.grad = None


def trainable_parameter_ids(attached: AttachedModel) -> set:
    """Names of every tensor the optimizer updates."""
    return set(attached.trainable_tensors())


def trainable_count(attached: AttachedModel) -> int:
    return int(np.sum([p.size for p in attached.trainable_tensors().values()], dtype=np.int64))


def _prefix_modules(model: Seq2SeqModel, placement: str) -> list[str]:
    if placement == "all_attention":
        return model.attention_modules()
    if placement == "encoder_only":
        return [m for m in model.attention_modules() if m.startswith("enc.")]
    return model.self_attention_modules()


def _adapter_sites(model: Seq2SeqModel, placement: str) -> list[tuple[str, str]]:
    """(attachment point, sublayer name) pairs receiving an adapter."""
    sites = [("ffn.output", f) for f in model.ffn_layers()]
    if placement == "after_attn_and_ffn":
        sites = [("attn.output", m) for m in model.self_attention_modules()] + sites
    return sites


def _sorted_sites(sites):
    # interleave by layer order for stable naming
    return sorted(sites, key=lambda s: (s[1].split(".")[0] != "enc", int(s[1].split(".")[1]), s[0] != "attn.output"))


def attach(model: Seq2SeqModel, config: PeftConfig, rng: int | np.random.Generator = 0) -> AttachedModel:
    """Allocate ``config``'s tensors on ``model`` and build its hooks.

    The backbone is frozen unless ``config`` is ``FineTune``. Initial
    values make every method start at (or, for prompts/prefixes, next to)
    the frozen backbone: ones scales, zero LoRA ``B``, zero adapter
    up-projections, ones IA3 vectors, zero gate weights.
    """
    config.validate()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    dims = model.dims
    attached = AttachedModel(model, config)
    model.set_trainable(isinstance(config, FineTune))
    builder = _BUILDERS[type(config)]
    builder(attached, config, dims, rng)
    return attached


def _build_fine_tune(att, cfg, dims, rng):
    pass


def _init_prompt(att, k, dims, rng):
    if k >= dims.max_seq_len:
        raise ConfigurationError(f"prompt length {k} leaves no room within positional capacity {dims.max_seq_len}")
    table = att.backbone.params["shared.embed"].data
    rows = rng.choice(table.shape[0], size=k, replace=k > table.shape[0])
    return att.add_param("soft_prompt", table[rows])


def _prompt_hook(prompt: Tensor, scale: Tensor | None):
    def embedding(x_e, mask):
        p = prompt if scale is None else scale_prompt(prompt, scale)
        x = compose_prompt(p, x_e)
        ones = np.ones((mask.shape[0], p.shape[0]), dtype=bool)
        return x, np.concatenate([ones, mask], axis=1)

    return embedding


def _build_prompt(att, cfg, dims, rng):
    prompt = _init_prompt(att, cfg.k, dims, rng)
    att.hooks["embedding"] = _prompt_hook(prompt, None)


def _build_scaled_prompt(att, cfg, dims, rng):
    prompt = _init_prompt(att, cfg.k, dims, rng)
    shape = {"vector": (cfg.k, 1), "scalar": (1, 1), "matrix": (cfg.k, dims.d_model)}[cfg.scale_shape]
    scale = att.add_param("scaling_vector", np.ones(shape))
    att.hooks["embedding"] = _prompt_hook(prompt, scale)


def _alloc_prefix(att, modules, length, dims, rng):
    table = {}
    for m in modules:
        pk = att.add_param(f"prefix.{m}.k", rng.normal(0.0, 1.0, size=(length, dims.inner_dim)))
        pv = att.add_param(f"prefix.{m}.v", rng.normal(0.0, 1.0, size=(length, dims.inner_dim)))
        table[m] = (pk, pv)
    return table


def _build_prefix(att, cfg, dims, rng):
    table = _alloc_prefix(att, _prefix_modules(att.backbone, cfg.placement), cfg.len, dims, rng)
    att.hooks["attn.prefix"] = make_prefix_hook(table)


def make_prefix_hook(table: Mapping[str, tuple], gates: Mapping[str, Tensor] | None = None):
    """Hook returning per-module prefix rows, optionally gated from the module input."""

    def prefix(module, x, mask):
        if module not in table:
            return None
        pk, pv = table[module]
        B = x.shape[0]
        pk = ad.expand(pk, (B,) + pk.shape)
        pv = ad.expand(pv, (B,) + pv.shape)
        if gates is not None:
            g = gate_value(gates[module], x, mask)
            pk, pv = pk * g, pv * g
        return pk, pv

    return prefix


def _alloc_lora(att, modules, targets, rank, dims, rng):
    table = {}
    d, inner = dims.d_model, dims.inner_dim
    for m in modules:
        for t in targets:
            which = _TARGET_KEYS[t]
            d_out, d_in = (d, inner) if which == "o" else (inner, d)
            a = att.add_param(f"lora.{m}.{which}.A", rng.normal(0.0, d_in**-0.5, size=(rank, d_in)))
            b = att.add_param(f"lora.{m}.{which}.B", np.zeros((d_out, rank)))
            table[(m, which)] = (a, b)
    return table


def make_lora_hook(table, scaling: float = 1.0, gates: Mapping[str, Tensor] | None = None):
    def proj(module, which, x, out, mask):
        ab = table.get((module, which))
        if ab is None:
            return out
        delta = lora_delta(x, ab[0], ab[1], scaling)
        if gates is not None:
            delta = delta * gate_value(gates[module], x, mask)
        return out + delta

    return proj


def _build_lora(att, cfg, dims, rng):
    table = _alloc_lora(att, att.backbone.attention_modules(), cfg.targets, cfg.rank, dims, rng)
    att.hooks["attn.proj"] = make_lora_hook(table, cfg.scaling)


def _alloc_adapters(att, sites, r, dims, rng):
    d = dims.d_model
    if d % r:
        raise ConfigurationError(f"reduction factor {r} does not divide d_model={d}")
    b = d // r
    table = {}
    for point, name in sites:
        tag = "attn" if point == "attn.output" else "ffn"
        base = f"adapter.{name}" if tag == "ffn" else f"adapter.{name}"
        table[(point, name)] = (
            att.add_param(f"{base}.down", rng.normal(0.0, d**-0.5, size=(d, b))),
            att.add_param(f"{base}.down_bias", np.zeros((b,))),
            att.add_param(f"{base}.up", np.zeros((b, d))),
            att.add_param(f"{base}.up_bias", np.zeros((d,))),
        )
    return table


def make_adapter_hooks(table, delta_fn, gates: Mapping[str, Tensor] | None = None) -> dict:
    def for_point(point):
        def hook(name, x, y, mask):
            params = table.get((point, name))
            if params is None:
                return y
            delta = delta_fn(y, params)
            if gates is not None:
                delta = delta * gate_value(gates[name], x, mask)
            return y + delta

        return hook

    points = {p for p, _ in table}
    return {p: for_point(p) for p in points}


def _build_adapter(att, cfg, dims, rng):
    table = _alloc_adapters(att, _sorted_sites(_adapter_sites(att.backbone, cfg.placement)), cfg.r, dims, rng)
    att.hooks.update(make_adapter_hooks(table, lambda y, p: bottleneck_delta(y, *p)))


def _build_compacter(att, cfg, dims, rng):
    d = dims.d_model
    if d % cfg.r:
        raise ConfigurationError(f"reduction factor {cfg.r} does not divide d_model={d}")
    b = d // cfg.r
    n, rank = cfg.phm_n, cfg.factor_rank
    phm_dims_check(n, d, b)

    def slow(name):
        return att.add_param(name, rng.normal(0.0, 0.1, size=(n, n, n)) + np.eye(n)[None] * (1.0 / n))

    shared = slow("phm.shared.A") if cfg.share_slow else None
    table = {}
    for point, name in _sorted_sites(_adapter_sites(att.backbone, cfg.placement)):
        base = f"compacter.{name}"
        layers = []
        for part, d_in, d_out, zero_t in (("down", d, b, False), ("up", b, d, True)):
            a = shared if shared is not None else slow(f"{base}.{part}.A")
            s = att.add_param(f"{base}.{part}.s", rng.normal(0.0, 1.0, size=(n, d_out // n, rank)))
            t_init = np.zeros((n, d_in // n, rank)) if zero_t else rng.normal(0.0, d_in**-0.5, size=(n, d_in // n, rank))
            t = att.add_param(f"{base}.{part}.t", t_init)
            bias = att.add_param(f"{base}.{part}.bias", np.zeros((d_out,)))
            layers.append((a, s, t, bias))
        table[(point, name)] = tuple(layers)

    def delta(y, layers):
        (a1, s1, t1, b1), (a2, s2, t2, b2) = layers
        h = ad.relu(phm_linear(y, a1, (s1, t1), b1))
        return phm_linear(h, a2, (s2, t2), b2)

    att.hooks.update(make_adapter_hooks(table, delta))


def _build_ia3(att, cfg, dims, rng):
    kv = {}
    inner = {}
    for m in att.backbone.attention_modules():
        kv[m] = (
            att.add_param(f"ia3.{m}.k", np.ones((dims.inner_dim, 1))),
            att.add_param(f"ia3.{m}.v", np.ones((dims.inner_dim, 1))),
        )
    for f in att.backbone.ffn_layers():
        inner[f] = att.add_param(f"ia3.{f}.inner", np.ones((dims.d_ff, 1)))

    def kv_hook(module, k, v):
        lk, lv = kv[module]
        return ia3_rescale(k, lk), ia3_rescale(v, lv)

    att.hooks["attn.kv"] = kv_hook
    att.hooks["ffn.inner"] = lambda layer, h: ia3_rescale(h, inner[layer])


def _build_unipelt(att, cfg, dims, rng):
    model = att.backbone
    d = dims.d_model
    adapters = _alloc_adapters(att, _adapter_sites(model, "after_ffn"), cfg.adapter_r, dims, rng)
    lora = _alloc_lora(att, model.attention_modules(), ("query", "value"), cfg.lora_rank, dims, rng)
    prefix_mods = _prefix_modules(model, cfg.prefix_placement)
    prefixes = _alloc_prefix(att, prefix_mods, cfg.prefix_len, dims, rng)
    gate_adapter = {f: att.add_param(f"gate.adapter.{f}", np.zeros((d, 1))) for f in model.ffn_layers()}
    gate_lora = {m: att.add_param(f"gate.lora.{m}", np.zeros((d, 1))) for m in model.attention_modules()}
    gate_prefix = {m: att.add_param(f"gate.prefix.{m}", np.zeros((d, 1))) for m in prefix_mods}
    att.hooks.update(make_adapter_hooks(adapters, lambda y, p: bottleneck_delta(y, *p), gates=gate_adapter))
    att.hooks["attn.proj"] = make_lora_hook(lora, 1.0, gates=gate_lora)
    att.hooks["attn.prefix"] = make_prefix_hook(prefixes, gates=gate_prefix)


_BUILDERS = {
    FineTune: _build_fine_tune,
    PromptTuning: _build_prompt,
    ScaledPromptTuning: _build_scaled_prompt,
    PrefixTuning: _build_prefix,
    LoRA: _build_lora,
    BottleneckAdapter: _build_adapter,
    Compacter: _build_compacter,
    IA3: _build_ia3,
    UniPELT: _build_unipelt,
}
