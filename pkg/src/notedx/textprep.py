"""Clinical-note preprocessing: cleaning, diagnosis extraction, alias
resolution, truncation, label filtering and train/validation/test splits."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from notedx.errors import EmptyCorpusError, InputError

PLACEHOLDER = "***"

DEFAULT_DIAGNOSIS_HEADERS = ("discharge diagnosis", "primary diagnosis", "diagnosis")

DEFAULT_ADMISSION_SECTIONS = (
    "chief complaint",
    "history of present illness",
    "past medical history",
    "past surgical history",
    "social history",
    "family history",
    "allergies",
    "medications on admission",
    "admission labs",
)

DEFAULT_SPLIT_RATIOS = (0.70, 0.15, 0.15)

_DEID = re.compile(r"\[\*\*.*?\*\*\]", re.DOTALL)
_TOKEN = re.compile(r"[a-z0-9*]+|\S")
_NUMBER = re.compile(r"[0-9]+")
_SECTION_HEADER = re.compile(r"^[ \t]*([A-Za-z][A-Za-z0-9 /&(),'-]*?)[ \t]*:", re.MULTILINE)
_BULLET = re.compile(r"^(?:\d+[.)]|[-*•])\s*")
_WS = re.compile(r"\s+")


@dataclass
class RawNote:
    id: str
    text: str
    sections: dict[str, str] | None = None
    label: str | None = None


@dataclass
class Document:
    id: str
    tokens: list[str]
    label: str | None = None

    def __len__(self):
        return len(self.tokens)


@dataclass
class CorpusSplit:
    train: list[Document]
    validation: list[Document]
    test: list[Document]
    seed: int
    ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS


def normalize_name(name: str) -> str:
    """Lowercase and collapse internal whitespace."""
    return _WS.sub(" ", name).strip().lower()


def split_sections(text: str) -> list[tuple[str, str]]:
    """Segment ``text`` at lines that look like ``Header:``.

    Text preceding the first header is returned under the empty name.
    """
    out = []
    matches = list(_SECTION_HEADER.finditer(text))
    if not matches:
        return [("", text)] if text else []
    if matches[0].start() > 0:
        out.append(("", text[: matches[0].start()]))
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        out.append((normalize_name(m.group(1)), text[m.end() : end]))
    return out


def tokenize(text: str) -> list[str]:
    text = _DEID.sub(f" {PLACEHOLDER} ", text).lower()
    return [PLACEHOLDER if _NUMBER.fullmatch(tok) else tok for tok in _TOKEN.findall(text)]


def clean_note(raw: RawNote | str, admission_sections: Iterable[str] | None = None) -> str:
    """Return the note as one normalized line of space-separated tokens.

    With ``admission_sections`` set, only those sections survive: taken from
    ``raw.sections`` when present, otherwise found by header matching in the
    text. De-identification spans and bare numbers become ``***``.
    """
    if isinstance(raw, str):
        raw = RawNote(id="", text=raw)
    if admission_sections is None:
        parts = [raw.text]
    else:
        wanted = {normalize_name(s) for s in admission_sections}
        if raw.sections is not None:
            items = raw.sections.items()
        else:
            items = split_sections(raw.text)
        parts = [body for name, body in items if normalize_name(name) in wanted]
    return " ".join(tok for part in parts for tok in tokenize(part))


def _header_pattern(headers: Sequence[str]) -> re.Pattern:
    alts = []
    for h in sorted({normalize_name(h) for h in headers}, key=len, reverse=True):
        esc = r"\s+".join(re.escape(w) for w in h.split(" "))
        if esc.endswith("is"):
            esc = esc[:-2] + "(?:is|es)"
        alts.append(esc)
    return re.compile(r"^[ \t]*(?:" + "|".join(alts) + r")[ \t]*:", re.IGNORECASE | re.MULTILINE)


def extract_primary_diagnosis(
    raw: RawNote | str,
    headers: Sequence[str] = DEFAULT_DIAGNOSIS_HEADERS,
    delimiters: str = ",;",
) -> str | None:
    """First disease listed under the earliest diagnosis header, or None."""
    text = raw if isinstance(raw, str) else raw.text
    m = _header_pattern(headers).search(text)
    if m is None:
        return None
    split_re = re.compile("[" + re.escape(delimiters) + "]") if delimiters else None
    for line in text[m.end() :].split("\n"):
        line = line.strip()
        if not line:
            continue
        if _SECTION_HEADER.fullmatch(line):
            return None
        line = _BULLET.sub("", line)
        item = split_re.split(line, maxsplit=1)[0] if split_re else line
        item = normalize_name(item)
        return item or None
    return None


class AliasMap:
    """Manual coreference groups: every alias maps to its canonical name."""

    def __init__(self, groups: Iterable[tuple[str, Iterable[str]]] = ()):
        self.groups: list[tuple[str, frozenset[str]]] = []
        self._lookup: dict[str, str] = {}
        for canonical, aliases in groups:
            canonical = normalize_name(canonical)
            members = frozenset({canonical} | {normalize_name(a) for a in aliases})
            for alias in members:
                if alias in self._lookup:
                    raise InputError(
                        f"alias {alias!r} appears in groups {self._lookup[alias]!r} and {canonical!r}"
                    )
                self._lookup[alias] = canonical
            self.groups.append((canonical, members))

    def __contains__(self, name):
        return normalize_name(name) in self._lookup

    def __len__(self):
        return len(self.groups)

    def resolve(self, raw_label: str) -> str:
        key = normalize_name(raw_label)
        return self._lookup.get(key, key)

    @classmethod
    def parse(cls, lines: Iterable[str]) -> "AliasMap":
        groups = []
        for line in lines:
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = [f for f in line.split("\t") if f.strip()]
            groups.append((fields[0], fields[1:]))
        return cls(groups)

    @classmethod
    def from_file(cls, path) -> "AliasMap":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh)

    def dumps(self) -> str:
        lines = []
        for canonical, members in self.groups:
            others = sorted(members - {canonical})
            lines.append("\t".join([canonical, *others]))
        return "\n".join(lines) + ("\n" if lines else "")


STEMI_GROUP = (
    "st segment elevation myocardial infarction",
    (
        "segment elevation myocardial infarction",
        "stents elevation myocardial infarction",
        "st-elevation myocardial infarction",
        "st elevation myocardial infarction",
        "st elevated myocardial infarction",
        "st elevation mi",
        "st-elevation mi",
        "stemi",
    ),
)

# Illustrative surface variants for the ten most frequent diseases; real
# deployments supply their own map file.
CLINICAL_ALIAS_GROUPS = (
    ("coronary artery disease", ("cad", "coronary disease", "coronary artery dz", "coronary atherosclerosis")),
    ("hemorrhage", ("haemorrhage", "hemorrhages", "bleed", "hemmorhage")),
    ("pneumonia", ("pna", "pneumonias", "pnuemonia", "community acquired pneumonia")),
    ("myocardial infarction", ("mi", "nstemi", "heart attack", "myocardial infarct")),
    ("gastrointestinal bleeding", ("gi bleed", "gib", "gi bleeding", "gastrointestinal bleed", "ugib")),
    ("fracture", ("fx", "fractures", "fracutre")),
    ("aortic stenosis", ("as", "critical aortic stenosis", "aortic valve stenosis")),
    ("cardiac failure", ("chf", "heart failure", "congestive heart failure", "chf exacerbation")),
    ("prematurity", ("premature infant", "preterm infant", "prematurity of infant")),
    ("stroke", ("cva", "cerebrovascular accident", "ischemic stroke", "stroke nos")),
)


def default_alias_map() -> AliasMap:
    return AliasMap([STEMI_GROUP, *CLINICAL_ALIAS_GROUPS])


def resolve_alias(raw_label: str, alias_map: AliasMap) -> str:
    return alias_map.resolve(raw_label)


def compute_truncation_length(corpus: Sequence[Document] | Sequence[int]) -> int:
    """Nearest-rank 90th percentile of document lengths."""
    if len(corpus) == 0:
        raise EmptyCorpusError("cannot compute a truncation length for an empty corpus")
    lengths = sorted(d if isinstance(d, (int, np.integer)) else len(d) for d in corpus)
    rank = (9 * len(lengths) + 9) // 10  # ceil(0.9 n) in integers
    return int(lengths[rank - 1])


def truncate(doc: Document, max_len: int) -> Document:
    if max_len < 1:
        raise InputError(f"truncation length must be >= 1, got {max_len}")
    if len(doc.tokens) <= max_len:
        return doc
    return Document(doc.id, doc.tokens[:max_len], doc.label)


def rank_labels(labels: Iterable[str]) -> list[tuple[str, int]]:
    """Labels with counts, by descending count then lexicographically."""
    return sorted(Counter(labels).items(), key=lambda kv: (-kv[1], kv[0]))


def filter_top_k_labels(corpus: Sequence[Document], k: int) -> tuple[list[Document], list[str]]:
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    if any(d.label is None for d in corpus):
        raise InputError("every document needs a label before label filtering")
    ranked = rank_labels(d.label for d in corpus)
    if len(ranked) < k:
        raise InputError(f"only {len(ranked)} distinct labels, cannot keep the top {k}")
    keep = [label for label, _ in ranked[:k]]
    kept = set(keep)
    return [d for d in corpus if d.label in kept], keep


def split_dataset(
    corpus: Sequence[Document], seed: int, ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS
) -> CorpusSplit:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InputError(f"split ratios must be three positive fractions summing to 1, got {ratios}")
    n = len(corpus)
    # the epsilon absorbs binary representation error in e.g. 0.7 * 13140
    cut1 = math.floor(ratios[0] * n + 1e-9)
    cut2 = math.floor((ratios[0] + ratios[1]) * n + 1e-9)
    if cut1 == 0 or cut2 == cut1 or cut2 == n:
        raise InputError(f"a corpus of {n} documents leaves an empty split at ratios {ratios}")
    order = np.random.default_rng(seed).permutation(n)
    docs = [corpus[i] for i in order]
    return CorpusSplit(docs[:cut1], docs[cut1:cut2], docs[cut2:], seed, ratios)


@dataclass
class PreprocessResult:
    documents: list[Document]
    labels: list[str]
    max_len: int
    dropped_unlabeled: int = 0
    label_counts: dict[str, int] = field(default_factory=dict)


def preprocess_corpus(
    notes: Sequence[RawNote],
    alias_map: AliasMap | None = None,
    admission_sections: Iterable[str] | None = DEFAULT_ADMISSION_SECTIONS,
    diagnosis_headers: Sequence[str] = DEFAULT_DIAGNOSIS_HEADERS,
    top_k: int = 10,
) -> PreprocessResult:
    """Clean, label, truncate at the 90th percentile, then keep the top-k labels."""
    if not notes:
        raise EmptyCorpusError("no notes to preprocess")
    alias_map = alias_map if alias_map is not None else AliasMap()
    docs = []
    dropped = 0
    for note in notes:
        raw_label = note.label if note.label else extract_primary_diagnosis(note, diagnosis_headers)
        if raw_label is None:
            dropped += 1
            continue
        tokens = clean_note(note, admission_sections).split()
        docs.append(Document(note.id, tokens, alias_map.resolve(raw_label)))
    if not docs:
        raise EmptyCorpusError("no note carried a recognizable diagnosis")
    max_len = max(1, compute_truncation_length(docs))
    docs = [truncate(d, max_len) for d in docs]
    docs, labels = filter_top_k_labels(docs, top_k)
    counts = dict(rank_labels(d.label for d in docs))
    return PreprocessResult(docs, labels, max_len, dropped, counts)


def read_raw_notes(path) -> list[RawNote]:
    notes = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            note_id = obj.get("id")
            if not isinstance(note_id, str) or not note_id:
                raise InputError(f"{path}:{lineno}: missing or empty id")
            if note_id in seen:
                raise InputError(f"{path}:{lineno}: duplicate id {note_id!r}")
            seen.add(note_id)
            notes.append(RawNote(note_id, obj.get("text") or "", obj.get("sections"), obj.get("label")))
    return notes


def write_documents(path, docs: Iterable[Document]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"id": d.id, "tokens": d.tokens, "label": d.label}, ensure_ascii=False))
            fh.write("\n")


def read_documents(path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                docs.append(Document(obj["id"], list(obj["tokens"]), obj.get("label")))
    return docs
