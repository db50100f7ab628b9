"""Closed-form trainable-parameter counts.

The formulas here are written from the architecture description alone and
never instantiate a model, so they double as an independent check on what
``peft.attach`` allocates.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .model import PRESETS, ArchitectureDims
from .peft import (
    IA3,
    BottleneckAdapter,
    Compacter,
    FineTune,
    LoRA,
    PeftConfig,
    PrefixTuning,
    PromptTuning,
    ScaledPromptTuning,
    UniPELT,
    _TARGET_KEYS,
)

T5_LARGE_BASE_TOTAL = 770_000_000

# reported percentages, shown next to computed ones
PUBLISHED_PERCENT = {
    "fine_tune": "100.0",
    "prompt_tuning": "0.007",
    "scaled_prompt_tuning": "0.007",
    "bottleneck_adapter": "0.824",
    "lora": "0.306",
    "compacter": "0.053",
    "prefix_tuning/5": "0.096",
    "prefix_tuning/10": "0.192",
    "ia3": "0.045",
    "unipelt/5": "1.194",
    "unipelt/10": "1.258",
}


@dataclass
class CountBreakdown:
    points: "OrderedDict[str, int]" = field(default_factory=OrderedDict)
    total: int = 0
    percent: float = 0.0
    base_total: int = 0

    def to_dict(self) -> dict:
        return {"points": dict(self.points), "total": self.total, "percent": self.percent, "base_total": self.base_total}


def backbone_count(dims: ArchitectureDims) -> int:
    """Parameters of the T5-style backbone with tied embeddings."""
    d, inner, ff, H = dims.d_model, dims.inner_dim, dims.d_ff, dims.n_heads
    attn = 4 * d * inner
    ffn = 2 * d * ff
    enc = dims.n_enc_layers * (attn + ffn + 2 * d)
    dec = dims.n_dec_layers * (2 * attn + ffn + 3 * d)
    rel = 2 * dims.rel_buckets * H
    return dims.vocab_size * d + enc + dec + rel + 2 * d


def _n_attention(dims: ArchitectureDims, placement: str = "all_attention") -> int:
    if placement == "all_attention":
        return dims.n_enc_layers + 2 * dims.n_dec_layers
    if placement == "encoder_only":
        return dims.n_enc_layers
    return dims.n_enc_layers + dims.n_dec_layers


def _n_adapter_sites(dims: ArchitectureDims, placement: str) -> int:
    n_ffn = dims.n_enc_layers + dims.n_dec_layers
    return n_ffn if placement == "after_ffn" else 2 * n_ffn


def _adapter_size(d: int, r: int) -> int:
    if d % r:
        raise ConfigurationError(f"reduction factor {r} does not divide d_model={d}")
    b = d // r
    return d * b + b + b * d + d


def _lora_module_size(dims: ArchitectureDims, targets, rank: int) -> int:
    total = 0
    for t in targets:
        which = _TARGET_KEYS[t]
        d_in = dims.inner_dim if which == "o" else dims.d_model
        d_out = dims.d_model if which == "o" else dims.inner_dim
        total += rank * (d_in + d_out)
    return total


def _points(config: PeftConfig, dims: ArchitectureDims) -> "OrderedDict[str, int]":
    d = dims.d_model
    pts: "OrderedDict[str, int]" = OrderedDict()
    if isinstance(config, FineTune):
        pts["backbone"] = backbone_count(dims)
    elif isinstance(config, PromptTuning):
        pts["soft_prompt"] = config.k * d
    elif isinstance(config, ScaledPromptTuning):
        pts["soft_prompt"] = config.k * d
        pts["scaling_vector"] = {"vector": config.k, "scalar": 1, "matrix": config.k * d}[config.scale_shape]
    elif isinstance(config, PrefixTuning):
        pts["prefix"] = _n_attention(dims, config.placement) * config.len * dims.inner_dim * 2
    elif isinstance(config, LoRA):
        pts["lora"] = _n_attention(dims) * _lora_module_size(dims, config.targets, config.rank)
    elif isinstance(config, BottleneckAdapter):
        pts["adapter"] = _n_adapter_sites(dims, config.placement) * _adapter_size(d, config.r)
    elif isinstance(config, Compacter):
        if d % config.r:
            raise ConfigurationError(f"reduction factor {config.r} does not divide d_model={d}")
        b, n, rk = d // config.r, config.phm_n, config.factor_rank
        if d % n or b % n:
            raise ConfigurationError(f"PHM order {n} must divide d_model={d} and bottleneck={b}")
        sites = _n_adapter_sites(dims, config.placement)
        fast = 2 * n * rk * (d // n + b // n)  # s and t factors of both PHM layers
        pts["phm_fast"] = sites * fast
        pts["phm_bias"] = sites * (b + d)
        pts["phm_slow"] = n**3 if config.share_slow else sites * 2 * n**3
    elif isinstance(config, IA3):
        inner, ff = dims.inner_dim, dims.d_ff
        pts["ia3_kv"] = _n_attention(dims) * 2 * inner
        pts["ia3_ffn"] = (dims.n_enc_layers + dims.n_dec_layers) * ff
    elif isinstance(config, UniPELT):
        n_ffn = dims.n_enc_layers + dims.n_dec_layers
        pts["adapter"] = n_ffn * _adapter_size(d, config.adapter_r)
        pts["lora"] = _n_attention(dims) * _lora_module_size(dims, ("query", "value"), config.lora_rank)
        n_prefix = _n_attention(dims, config.prefix_placement)
        pts["prefix"] = n_prefix * config.prefix_len * dims.inner_dim * 2
        pts["gates"] = (n_ffn + _n_attention(dims) + n_prefix) * d
    else:
        raise ConfigurationError(f"no count formula for {type(config).__name__}")
    return pts


def count_trainable(config: PeftConfig, dims: ArchitectureDims, base_total: int | None = None) -> CountBreakdown:
    """Closed-form trainable count and percentage of ``base_total``.

    ``base_total`` defaults to 770e6 for the T5-large preset and to the
    backbone's own size for any other dims. Fine-tuning trains the whole
    model, so its percentage is 100 by definition whatever base is supplied.
    """
    config.validate()
    if base_total is None:
        base_total = T5_LARGE_BASE_TOTAL if dims == PRESETS["t5-large"] else backbone_count(dims)
    base = int(base_total)
    if base <= 0:
        raise ConfigurationError("base_total must be positive")
    pts = _points(config, dims)
    total = int(sum(pts.values()))
    percent = 100.0 if isinstance(config, FineTune) else round(total / base * 100.0, 3)
    return CountBreakdown(points=pts, total=total, percent=percent, base_total=base)


def published_key(config: PeftConfig) -> str:
    if isinstance(config, PrefixTuning):
        return f"prefix_tuning/{config.len}"
    if isinstance(config, UniPELT):
        return f"unipelt/{config.prefix_len}"
    return config.method


def audit_report(configs, dims: ArchitectureDims, base_total: int | None = None) -> dict:
    """Published-budget comparison as ``{"rows": [...], "text": str}``.

    Consecutive configs of the same method (e.g. two prefix lengths)
    share one row.
    """
    configs = list(configs)
    if not configs:
        raise ConfigurationError("audit_report: need at least one config")
    rows = []
    for cfg in configs:
        br = count_trainable(cfg, dims, base_total)
        setting = {
            "config": cfg.to_dict(),
            "trainable": br.total,
            "percent": br.percent,
            "reported": PUBLISHED_PERCENT.get(published_key(cfg)),
            "points": dict(br.points),
        }
        if isinstance(cfg, UniPELT):
            setting["percent_without_gates"] = round((br.total - br.points["gates"]) / br.base_total * 100.0, 3)
        if rows and rows[-1]["method"] == cfg.method:
            rows[-1]["settings"].append(setting)
        else:
            rows.append({"method": cfg.method, "settings": [setting]})

    def fmt(method, pct):
        return f"{pct:.1f}" if method == "fine_tune" else f"{pct:.3f}"

    header = f"{'method':<22} {'trainable':>22} {'%':>14} {'reported':>14}  config"
    lines = [header, "-" * 100]
    for r in rows:
        st = r["settings"]
        trainable = ", ".join(f"{s['trainable']:,}" for s in st)
        pct = ", ".join(fmt(r["method"], s["percent"]) for s in st)
        reported = ", ".join(s["reported"] or "-" for s in st)
        config = " | ".join(describe_dict(s["config"]) for s in st)
        lines.append(f"{r['method']:<22} {trainable:>22} {pct:>14} {reported:>14}  {config}")
    return {"rows": rows, "text": "\n".join(lines)}


def describe_dict(d: dict) -> str:
    return ", ".join(f"{k}={v}" for k, v in d.items() if k != "method") or "-"


def audit_json(configs, dims, base_total=None) -> str:
    return json.dumps(audit_report(configs, dims, base_total)["rows"], indent=2)
