"""Structured-data import, linearization, strata, few-shot sampling, vocab."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ParseError
from .model import BOS_ID, EOS_ID, PAD_ID, UNK_ID

logger = logging.getLogger(__name__)

DELIMITERS = ("<S>", "<P>", "<O>", "<V>")
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
SCHEMES = ("category", "slot_count", "source")
SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class Triple:
    subject: str
    predicate: str
    object: str

    def __post_init__(self):
        if not self.subject or not self.predicate:
            raise ContractError("Triple: subject and predicate must be non-empty")


@dataclass(frozen=True)
class SlotValue:
    slot: str
    value: str

    def __post_init__(self):
        if not self.slot:
            raise ContractError("SlotValue: slot must be non-empty")


@dataclass
class Instance:
    id: str
    payload: tuple
    stratum: str
    references: list
    split: str = "train"

    def __post_init__(self):
        self.payload = tuple(self.payload)
        if not self.payload:
            raise ContractError(f"Instance {self.id}: empty payload")
        kinds = {type(p) for p in self.payload}
        if kinds not in ({Triple}, {SlotValue}):
            raise ContractError(f"Instance {self.id}: payload must be all triples or all slot-value pairs")
        if self.split not in SPLITS:
            raise ContractError(f"Instance {self.id}: unknown split {self.split!r}")
        if self.split in ("train", "dev") and not self.references:
            raise ContractError(f"Instance {self.id}: {self.split} instances need references")

    @property
    def payload_kind(self) -> str:
        return "triples" if isinstance(self.payload[0], Triple) else "pairs"


@dataclass
class Dataset:
    instances: list = field(default_factory=list)
    name: str = ""

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def split(self, name: str) -> list:
        return [i for i in self.instances if i.split == name]

    def strata(self) -> list:
        return sorted({i.stratum for i in self.instances})


# -- linearization -----------------------------------------------------------


def _norm(text: str) -> str:
    return " ".join(str(text).split())


def linearize_triples(triples: Sequence[Triple]) -> str:
    """``<S> subj <P> pred <O> obj`` per triple, in input order."""
    if not triples:
        raise ContractError("linearize_triples: empty triple list")
    parts = []
    for t in triples:
        parts += ["<S>", _norm(t.subject), "<P>", _norm(t.predicate), "<O>", _norm(t.object)]
    return " ".join(p for p in parts if p)


def linearize_mr(pairs: Sequence[SlotValue]) -> str:
    """``<S> slot <V> value`` per pair, in input order."""
    if not pairs:
        raise ContractError("linearize_mr: empty slot-value list")
    parts = []
    for p in pairs:
        parts += ["<S>", _norm(p.slot), "<V>", _norm(p.value)]
    return " ".join(p for p in parts if p)


def linearize(instance: Instance) -> str:
    if instance.payload_kind == "triples":
        return linearize_triples(instance.payload)
    return linearize_mr(instance.payload)


def derive_stratum(instance: Instance, scheme: str) -> str:
    if scheme not in SCHEMES:
        raise ContractError(f"unknown stratum scheme {scheme!r}")
    if scheme == "slot_count":
        if instance.payload_kind != "pairs":
            raise ContractError("slot_count strata need slot-value payloads")
        return str(len(instance.payload))
    return instance.stratum


# -- sampling --------------------------------------------------------------------


def sample_few_shot(dataset, n: int, rng_seed: int, scheme: str | None = None) -> list:
    """Draw ``n`` train instances per stratum, uniformly without replacement.

    Strata with fewer than ``n`` instances contribute all of them and log a
    shortfall warning. The result is sorted by ``(stratum, id)``.
    """
    instances = list(dataset)
    if not instances:
        raise ContractError("sample_few_shot: empty dataset")
    train = [i for i in instances if i.split == "train"]
    groups: dict = {}
    for inst in train:
        key = inst.stratum if scheme is None else derive_stratum(inst, scheme)
        groups.setdefault(key, []).append(inst)
    rng = np.random.default_rng(rng_seed)
    picked = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda i: i.id)
        if len(members) < n:
            logger.warning("stratum %r has %d train instances, fewer than %d shots", key, len(members), n)
            chosen = members
        else:
            idx = rng.choice(len(members), size=n, replace=False)
            chosen = [members[i] for i in sorted(idx)]
        picked += [(key, m) for m in chosen]
    picked.sort(key=lambda km: (km[0], km[1].id))
    return [m for _, m in picked]


# -- canonical JSON ------------------------------------------------------------------


def _check_field(text: str, where: str) -> str:
    if not isinstance(text, str):
        raise ParseError(f"{where}: expected a string, got {type(text).__name__}")
    for d in DELIMITERS:
        if d in text:
            raise ParseError(f"{where}: field contains reserved delimiter {d}")
    return text


def instance_to_dict(inst: Instance) -> dict:
    d = {"id": inst.id, "payload_kind": inst.payload_kind}
    if inst.payload_kind == "triples":
        d["triples"] = [[t.subject, t.predicate, t.object] for t in inst.payload]
    else:
        d["pairs"] = [[p.slot, p.value] for p in inst.payload]
    d.update(stratum=inst.stratum, references=list(inst.references), split=inst.split)
    return d


def instance_from_dict(rec: dict, where: str = "record") -> Instance:
    try:
        kind = rec["payload_kind"]
        if kind == "triples":
            payload = []
            for j, t in enumerate(rec["triples"]):
                if len(t) != 3:
                    raise ParseError(f"{where}: triple {j} must have 3 fields")
                payload.append(Triple(*(_check_field(x, f"{where} triple {j}") for x in t)))
        elif kind == "pairs":
            payload = []
            for j, p in enumerate(rec["pairs"]):
                if len(p) != 2:
                    raise ParseError(f"{where}: pair {j} must have 2 fields")
                payload.append(SlotValue(*(_check_field(x, f"{where} pair {j}") for x in p)))
        else:
            raise ParseError(f"{where}: unknown payload_kind {kind!r}")
        refs = rec.get("references", [])
        if not isinstance(refs, list) or not all(isinstance(r, str) for r in refs):
            raise ParseError(f"{where}: references must be a list of strings")
        return Instance(str(rec["id"]), tuple(payload), str(rec["stratum"]), list(refs), rec.get("split", "train"))
    except KeyError as exc:
        raise ParseError(f"{where}: missing field {exc}") from None
    except ContractError as exc:
        raise ParseError(f"{where}: {exc}") from None


def import_canonical_json(path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("instances"), list):
        raise ParseError(f"{path}: expected an object with an 'instances' list")
    insts = [instance_from_dict(r, f"{path} instance {i}") for i, r in enumerate(doc["instances"])]
    return Dataset(insts, name=path.stem)


def export_canonical_json(dataset: Dataset, path) -> None:
    doc = {"instances": [instance_to_dict(i) for i in dataset]}
    Path(path).write_text(json.dumps(doc, indent=1, ensure_ascii=False), encoding="utf-8")


# -- E2E CSV ------------------------------------------------------------------------

_MR_ITEM = re.compile(r"\s*([^\[\],]+?)\s*\[([^\]]*)\]\s*(?:,|$)")


def parse_mr(text: str, where: str = "mr") -> tuple:
    """Parse ``slot[value], slot[value]`` into ``SlotValue`` pairs."""
    pairs = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _MR_ITEM.match(text, pos)
        if not m:
            raise ParseError(f"{where}: cannot parse MR near {text[pos:pos + 20]!r}")
        slot = _check_field(m.group(1).strip(), where)
        value = _check_field(m.group(2).strip(), where)
        pairs.append(SlotValue(slot, value))
        pos = m.end()
    if not pairs:
        raise ParseError(f"{where}: empty MR")
    return tuple(pairs)


def import_e2e_csv(path, split: str = "train") -> Dataset:
    """Read an E2E ``mr,ref`` CSV; identical MRs merge into one instance."""
    path = Path(path)
    grouped: "OrderedDict[str, list]" = OrderedDict()
    payloads = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["mr", "ref"]:
            raise ParseError(f"{path} line 1: expected header 'mr,ref'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 1 or (split != "test" and len(row) < 2):
                raise ParseError(f"{path} line {lineno}: expected two columns")
            mr = " ".join(row[0].split())
            payloads.setdefault(mr, parse_mr(mr, f"{path} line {lineno}"))
            refs = grouped.setdefault(mr, [])
            if len(row) > 1 and row[1].strip():
                refs.append(row[1].strip())
    insts = [
        Instance(f"e2e-{split}-{i:05d}", payloads[mr], str(len(payloads[mr])), refs, split)
        for i, (mr, refs) in enumerate(grouped.items())
    ]
    return Dataset(insts, name=path.stem)


def merge_datasets(*datasets: Dataset) -> Dataset:
    out = Dataset(name="+".join(d.name for d in datasets))
    for d in datasets:
        out.instances.extend(d.instances)
    return out


# -- vocabulary ---------------------------------------------------------------------


class Vocab:
    """Whitespace word vocabulary with reserved specials and delimiters."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list = list(SPECIALS) + list(DELIMITERS)
        for t in tokens:
            if t not in self.itos:
                self.itos.append(t)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        assert self.stoi["<pad>"] == PAD_ID and self.stoi["<bos>"] == BOS_ID
        assert self.stoi["<eos>"] == EOS_ID and self.stoi["<unk>"] == UNK_ID

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def to_list(self) -> list:
        return list(self.itos)

    @classmethod
    def from_list(cls, items: Sequence[str]) -> "Vocab":
        head = list(SPECIALS) + list(DELIMITERS)
        if list(items[: len(head)]) != head:
            raise ParseError("vocab list must start with the reserved tokens")
        return cls(items[len(head):])


def build_vocab(texts: Iterable[str], min_count: int = 1) -> Vocab:
    texts = list(texts)
    if not texts:
        raise ContractError("build_vocab: empty corpus")
    counts = Counter(tok for t in texts for tok in t.split())
    kept = sorted(t for t, c in counts.items() if c >= min_count)
    return Vocab(kept)


def encode(text: str, vocab: Vocab) -> list:
    return [vocab.id(t) for t in text.split()]


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i in (PAD_ID, BOS_ID):
            continue
        if i == EOS_ID:
            break
        words.append(vocab.itos[i] if 0 <= i < len(vocab) else "<unk>")
    return " ".join(words)


def corpus_texts(dataset: Dataset) -> list:
    out = []
    for inst in dataset:
        out.append(linearize(inst))
        out.extend(inst.references)
    return out
