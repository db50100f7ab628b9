"""Templated data-to-text corpora for tests, demos and learnability checks.

``make_mr_corpus`` mimics E2E: meaning representations with 3-8 slot-value
pairs (six slot-count strata). ``make_kg_corpus`` mimics WebNLG/DART:
1-3 triples per instance drawn from per-category predicates. References are
produced by fixed templates, so a model that learns the mapping can score
near-perfect BLEU on unseen value combinations.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset, Instance, SlotValue, Triple, linearize

NAMES = ["Aromi", "Bibimbap", "Cotto", "Zizzi", "Alimentum", "Wildwood", "Giraffe", "Strada", "Loch Fyne",
         "Fitzbillies", "Clowns", "Cocum", "Midsummer", "Browns", "Taste", "Vaults"]
MR_SLOTS = {
    "eatType": ["restaurant", "pub", "coffee shop"],
    "food": ["French", "Italian", "Chinese", "Indian", "English", "Japanese"],
    "area": ["riverside", "city centre"],
    "priceRange": ["cheap", "moderate", "high"],
    "customer rating": ["low", "average", "high"],
    "familyFriendly": ["yes", "no"],
    "near": ["Cafe Sicilia", "The Bakers", "Burger King", "Raja"],
}
_MR_TEMPLATES = {
    "eatType": "is a {}",
    "food": "serves {} food",
    "area": "is in the {}",
    "priceRange": "has {} prices",
    "customer rating": "has a {} rating",
    "near": "is near {}",
}

KG_CATEGORIES = {
    "Airport": {"location": "is located in {}", "runwayLength": "has a runway of {} metres", "operator": "is operated by {}"},
    "City": {"country": "is in {}", "leader": "is led by {}", "population": "has {} inhabitants"},
    "Food": {"ingredient": "contains {}", "origin": "comes from {}", "course": "is served as {}"},
    "Building": {"architect": "was designed by {}", "floorCount": "has {} floors", "address": "stands at {}"},
    "Astronaut": {"birthPlace": "was born in {}", "mission": "flew on {}", "nationality": "is from {}"},
    "SportsTeam": {"ground": "plays at {}", "manager": "is managed by {}", "league": "competes in {}"},
}
KG_SUBJECTS = ["Alpha", "Bravo", "Cedar", "Delta", "Echo", "Falcon", "Granite", "Harbor", "Iris", "Juniper"]
KG_OBJECTS = ["Aarhus", "Texas", "Rome", "rice", "bacon", "Apollo", "Gemini", "Madrid", "Lima", "Oslo", "3000",
              "12", "45", "Smith", "Jones", "Premier League", "dessert", "Main Street", "India", "Spain"]


def mr_reference(pairs) -> str:
    d = dict((p.slot, p.value) for p in pairs)
    clauses = []
    for slot, _ in ((p.slot, p.value) for p in pairs):
        if slot == "name":
            continue
        if slot == "familyFriendly":
            clauses.append("is family friendly" if d[slot] == "yes" else "is not family friendly")
        else:
            clauses.append(_MR_TEMPLATES[slot].format(d[slot]))
    return f"{d['name']} " + " , ".join(clauses) + " ."


def _sample_mr(rng) -> tuple:
    n_extra = int(rng.integers(2, 8))  # 3..8 pairs including name
    slots = [s for s in MR_SLOTS if True]
    chosen = sorted(rng.choice(len(slots), size=n_extra, replace=False))
    pairs = [SlotValue("name", NAMES[int(rng.integers(len(NAMES)))])]
    for i in chosen:
        s = slots[i]
        pairs.append(SlotValue(s, MR_SLOTS[s][int(rng.integers(len(MR_SLOTS[s])))]))
    return tuple(pairs)


def _unique(sampler, rng, count, seen):
    out = []
    while len(out) < count:
        p = sampler(rng)
        if p in seen:
            continue
        seen.add(p)
        out.append(p)
    return out


def make_mr_corpus(n_train: int = 200, n_dev: int = 40, n_test: int = 60, seed: int = 0) -> Dataset:
    """E2E-like corpus; strata are slot counts ``"3"``..``"8"``; splits never share an MR."""
    rng = np.random.default_rng(seed)
    seen: set = set()
    insts = []
    for split, count in (("train", n_train), ("dev", n_dev), ("test", n_test)):
        for j, payload in enumerate(_unique(_sample_mr, rng, count, seen)):
            insts.append(Instance(f"mr-{split}-{j:04d}", payload, str(len(payload)), [mr_reference(payload)], split))
    return Dataset(insts, name="synthetic-mr")


def kg_reference(triples) -> str:
    sentences = []
    for t in triples:
        for preds in KG_CATEGORIES.values():
            if t.predicate in preds:
                sentences.append(f"{t.subject} {preds[t.predicate].format(t.object)} .")
                break
    return " ".join(sentences)


def _sample_kg(rng, category):
    preds = list(KG_CATEGORIES[category])
    n = int(rng.integers(1, 4))
    subj = KG_SUBJECTS[int(rng.integers(len(KG_SUBJECTS)))]
    chosen = sorted(rng.choice(len(preds), size=n, replace=False))
    return tuple(Triple(subj, preds[i], KG_OBJECTS[int(rng.integers(len(KG_OBJECTS)))]) for i in chosen)


def make_kg_corpus(per_category: int = 20, n_dev: int = 4, n_test: int = 6, seed: int = 0,
                   categories=None) -> Dataset:
    """WebNLG-like corpus; strata are category names."""
    rng = np.random.default_rng(seed)
    seen: set = set()
    insts = []
    for cat in categories or list(KG_CATEGORIES):
        for split, count in (("train", per_category), ("dev", n_dev), ("test", n_test)):
            for j, payload in enumerate(_unique(lambda r: _sample_kg(r, cat), rng, count, seen)):
                insts.append(Instance(f"kg-{cat}-{split}-{j:04d}", payload, cat, [kg_reference(payload)], split))
    return Dataset(insts, name="synthetic-kg")


def make_stratified_fixture(n_strata: int, per_stratum: int, seed: int = 0, kind: str = "triples") -> Dataset:
    """Minimal dataset with ``n_strata`` labelled strata, for sampling tests."""
    rng = np.random.default_rng(seed)
    insts = []
    for s in range(n_strata):
        for j in range(per_stratum):
            v = f"v{int(rng.integers(10**6))}"
            if kind == "triples":
                payload = (Triple(f"s{s}", "p", v),)
            else:
                payload = (SlotValue("name", v),)
            insts.append(Instance(f"f{s:02d}-{j:04d}", payload, f"stratum{s:02d}", [f"ref {v}"], "train"))
    return Dataset(insts, name=f"fixture-{n_strata}")


TASK_TAGS = {"describe": "describe :", "verbalize": "verbalize :", "copy": "copy :"}


def make_pretraining_pairs(n_mr: int = 1500, n_kg_per_category: int = 100, seed: int = 101,
                           exclude=()) -> list:
    """Tagged multi-task (source, target) text pairs for backbone pretraining.

    Tasks: ``describe :`` MR -> templated text, ``verbalize :`` triples ->
    templated text, and ``copy :`` linearized input -> itself. Payloads in
    ``exclude`` (e.g. a target corpus's dev/test payloads) are never drawn.
    """
    blocked = {tuple(p) for p in exclude}
    pairs = []
    mr = make_mr_corpus(n_mr + len(blocked), 0, 0, seed=seed)
    kept = [i for i in mr if i.payload not in blocked][:n_mr]
    kg = make_kg_corpus(n_kg_per_category, 0, 0, seed=seed + 1)
    for inst, tag in [(i, "describe") for i in kept] + [(i, "verbalize") for i in kg if i.payload not in blocked]:
        src = linearize(inst)
        pairs.append((f"{TASK_TAGS[tag]} {src}", inst.references[0]))
        pairs.append((f"{TASK_TAGS['copy']} {src}", src))
    return pairs
