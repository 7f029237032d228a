"""Synthetic admission-note corpora with planted class signatures.

Each note is Zipf-distributed pseudo-word noise with one or more of its
class's signature phrases dropped in at random positions. The notes carry
section headers so they go through the same cleaning path as real ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from notedx.errors import ConfigError
from notedx.textprep import CLINICAL_ALIAS_GROUPS

# the ten diagnoses and their relative sizes in the reference cohort
REFERENCE_CLASSES = (
    ("coronary artery disease", 3193),
    ("hemorrhage", 1955),
    ("pneumonia", 1634),
    ("myocardial infarction", 1229),
    ("gastrointestinal bleeding", 1158),
    ("fracture", 1047),
    ("aortic stenosis", 934),
    ("cardiac failure", 927),
    ("prematurity", 559),
    ("stroke", 504),
)

CLINICAL_SIGNATURES = {
    "coronary artery disease": ("exertional chest pressure", "three vessel disease", "positive stress test"),
    "hemorrhage": ("subarachnoid blood seen", "acute intraparenchymal hematoma", "sudden thunderclap headache"),
    "pneumonia": ("productive cough fevers", "lobar consolidation noted", "sputum culture pending"),
    "myocardial infarction": ("troponin leak", "inferior st elevations", "crushing substernal pain"),
    "gastrointestinal bleeding": ("coffee ground emesis", "melena for days", "guaiac positive stools"),
    "fracture": ("mechanical fall", "shortened externally rotated leg", "radius deformity"),
    "aortic stenosis": ("harsh systolic murmur", "valve area small", "presyncope climbing stairs"),
    "cardiac failure": ("bilateral leg edema", "worsening orthopnea", "elevated bnp level"),
    "prematurity": ("preterm labor delivery", "apgars assigned", "nicu admission requested"),
    "stroke": ("left facial droop", "right sided weakness", "slurred speech onset"),
}

# word pairs whose meaning depends on order; reversed copies serve as noise
ORDER_PAIRS = (
    ("renal", "failure"),
    ("heart", "block"),
    ("lung", "mass"),
    ("bowel", "obstruction"),
    ("liver", "injury"),
    ("spinal", "stenosis"),
)

_ONSETS = ("b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "gr", "pl", "st")
_VOWELS = ("a", "e", "i", "o", "u", "ae", "io")

_ALIASES = {canonical: aliases for canonical, aliases in CLINICAL_ALIAS_GROUPS}


@dataclass
class SyntheticSpec:
    classes: list[str]
    class_sizes: list[int]
    signatures: list[list[str]]
    noise_vocab: int = 2000
    zipf_exponent: float = 1.1
    length_mean: float = 60.0
    length_sd: float = 20.0
    min_length: int = 12
    phrases_per_doc: tuple[int, int] = (1, 2)
    cross_rate: float = 0.0  # chance of also planting another class's phrase
    order_dependent: bool = False
    placeholder_rate: float = 0.02
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def validate(self) -> "SyntheticSpec":
        k = len(self.classes)
        if k < 1 or len(self.class_sizes) != k or len(self.signatures) != k:
            raise ConfigError("classes, class_sizes and signatures must have one entry per class")
        if len(set(self.classes)) != k:
            raise ConfigError("class names must be distinct")
        if any(n < 0 for n in self.class_sizes) or sum(self.class_sizes) < 1:
            raise ConfigError("class sizes must be non-negative with at least one document")
        phrases = [p for sigs in self.signatures for p in sigs]
        if any(not sigs for sigs in self.signatures) or any(not p.split() for p in phrases):
            raise ConfigError("every class needs at least one non-empty signature phrase")
        if len(set(phrases)) != len(phrases):
            raise ConfigError("signature phrases must be pairwise distinct across classes")
        if self.order_dependent and any(len(p.split()) < 2 for p in phrases):
            raise ConfigError("order-dependent signatures need at least two tokens")
        lo, hi = self.phrases_per_doc
        if not 1 <= lo <= hi:
            raise ConfigError(f"phrases_per_doc must satisfy 1 <= lo <= hi, got {self.phrases_per_doc}")
        if self.noise_vocab < 1 or self.min_length < 1 or self.length_mean <= 0 or self.length_sd < 0:
            raise ConfigError("noise vocabulary and length parameters must be positive")
        if not 0.0 <= self.cross_rate <= 1.0 or not 0.0 <= self.placeholder_rate <= 1.0:
            raise ConfigError("rates must lie in [0, 1]")
        return self


def largest_remainder(weights, total: int) -> list[int]:
    """Integer counts summing to ``total`` in proportion to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    exact = w / w.sum() * total
    counts = np.floor(exact).astype(int)
    short = total - counts.sum()
    order = sorted(range(len(w)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts.tolist()


def reference_spec(n_docs: int = 13140, seed: int = 0, **overrides) -> SyntheticSpec:
    """Ten clinical classes with the reference class imbalance."""
    classes = [c for c, _ in REFERENCE_CLASSES]
    sizes = largest_remainder([n for _, n in REFERENCE_CLASSES], n_docs)
    sigs = [list(CLINICAL_SIGNATURES[c]) for c in classes]
    return SyntheticSpec(classes, sizes, sigs, seed=seed, **overrides)


def keyword_spec(n_classes: int = 3, docs_per_class: int = 100, seed: int = 0, **overrides) -> SyntheticSpec:
    classes = [c for c, _ in REFERENCE_CLASSES[:n_classes]]
    if len(classes) < n_classes:
        raise ConfigError(f"at most {len(REFERENCE_CLASSES)} keyword classes are available")
    sigs = [list(CLINICAL_SIGNATURES[c]) for c in classes]
    return SyntheticSpec(classes, [docs_per_class] * n_classes, sigs, seed=seed, **overrides)


def order_spec(n_classes: int = 4, docs_per_class: int = 150, seed: int = 0, **overrides) -> SyntheticSpec:
    """Classes told apart only by word order: class k carries ``a_k b_k`` and
    every other class carries the reversed ``b_k a_k``."""
    if n_classes > len(ORDER_PAIRS):
        raise ConfigError(f"at most {len(ORDER_PAIRS)} order-dependent classes are available")
    pairs = ORDER_PAIRS[:n_classes]
    classes = [f"{a} {b}" for a, b in pairs]
    opts = dict(order_dependent=True, phrases_per_doc=(1, 1), seed=seed)
    opts.update(overrides)
    return SyntheticSpec(classes, [docs_per_class] * n_classes, [[c] for c in classes], **opts)


def noise_words(n: int, reserved, rng) -> list[str]:
    words = []
    seen = set(reserved)
    while len(words) < n:
        n_syl = int(rng.integers(2, 5))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n_syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _place(noise: list[str], units: list[list[str]], rng) -> list[str]:
    """Insert each phrase unit between noise tokens at random slots."""
    slots = np.sort(rng.integers(0, len(noise) + 1, size=len(units)))
    order = rng.permutation(len(units))
    out: list[str] = []
    prev = 0
    for slot, u in zip(slots, order):
        out.extend(noise[prev:slot])
        out.extend(units[u])
        prev = slot
    out.extend(noise[prev:])
    return out


def _to_text(tokens: list[str], label: str, rng) -> str:
    cut = min(len(tokens), int(rng.integers(3, 7)))
    aliases = (label,) + tuple(_ALIASES.get(label, ()))
    alias = aliases[rng.integers(len(aliases))]
    return (
        f"Chief Complaint: {' '.join(tokens[:cut])}\n"
        f"History of Present Illness: {' '.join(tokens[cut:])}\n"
        f"Discharge Diagnosis: {alias}\n"
    )


def generate_notes(spec: SyntheticSpec) -> list[dict]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    reserved = {t for sigs in spec.signatures for p in sigs for t in p.split()}
    vocab = noise_words(spec.noise_vocab, reserved, rng)
    ranks = np.arange(1, spec.noise_vocab + 1, dtype=np.float64)
    probs = ranks**-spec.zipf_exponent
    probs /= probs.sum()
    labels = np.repeat(np.arange(len(spec.classes)), spec.class_sizes)
    labels = labels[rng.permutation(labels.size)]
    lo, hi = spec.phrases_per_doc
    width = len(str(labels.size))
    notes = []
    for i, k in enumerate(labels):
        sigs = spec.signatures[k]
        units = [sigs[j].split() for j in rng.integers(0, len(sigs), size=int(rng.integers(lo, hi + 1)))]
        if spec.order_dependent:
            units += [p.split()[::-1] for j, other in enumerate(spec.signatures) if j != k for p in other]
        if spec.cross_rate and len(spec.classes) > 1 and rng.random() < spec.cross_rate:
            j = int(rng.integers(len(spec.classes) - 1))
            j += j >= k
            other = spec.signatures[j]
            units.append(other[rng.integers(len(other))].split())
        n_planted = sum(len(u) for u in units)
        length = max(spec.min_length, int(round(rng.normal(spec.length_mean, spec.length_sd))))
        noise = [vocab[j] for j in rng.choice(spec.noise_vocab, size=max(length - n_planted, 0), p=probs)]
        for j in np.flatnonzero(rng.random(len(noise)) < spec.placeholder_rate):
            noise[j] = str(rng.integers(1, 400)) if rng.random() < 0.5 else "[**2101-3-4**]"
        tokens = _place(noise, units, rng)
        label = spec.classes[k]
        notes.append({"id": f"syn-{i:0{width}d}", "text": _to_text(tokens, label, rng), "label": label})
    return notes


def write_notes(notes, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for note in notes:
            fh.write(json.dumps(note, sort_keys=True) + "\n")


def generate_synthetic(spec: SyntheticSpec, path) -> int:
    notes = generate_notes(spec)
    write_notes(notes, path)
    return len(notes)
