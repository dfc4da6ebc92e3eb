"""Deterministic synthetic longitudinal chest-film corpus.

Each patient has a chain of visits. Findings are rendered as small geometric
primitives at fixed per-finding sites of a 32x32 image. Every patient also
carries static "mimics": blobs drawn from the same renderer at some finding
sites that never change and never count as findings. A single image cannot
tell a lesion from a mimic; a prior image can, because lesions change between
visits and mimics do not.

Reports are produced from a closed sentence grammar, so :func:`rule_label`
recovers the gold labels exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import load_raw, save_raw
from .text import words

FINDINGS = (
    "atelectasis", "cardiomegaly", "consolidation", "edema", "effusion", "emphysema",
    "fibrosis", "fracture", "hernia", "infiltration", "mass", "nodule", "pneumonia",
    "pneumothorax",
)
ATTRIBUTES = ("blank", "positive", "negative", "uncertain")
PROGRESSIONS = ("new", "resolved", "increased", "decreased", "unchanged")
# findings whose absence is always stated
ALWAYS_REPORTED = ("consolidation", "edema", "effusion", "pneumothorax")

IMAGE_SIZE = 32
NOISE_SIGMA = 0.02
RADII = (1.5, 2.5, 3.5)
SHAPES = ("disk", "bar", "ring")

_CELLS = [(r, c) for r in range(4) for c in range(4) if (r, c) not in ((0, 0), (3, 3))]
SITES = tuple((4 + 8 * r, 4 + 8 * c) for r, c in _CELLS)


@dataclass(frozen=True)
class SynthParams:
    mimic_prob: float = 0.35
    initial_prob: float = 0.2
    new_prob: float = 0.06
    resolve_prob: float = 0.25
    increase_prob: float = 0.3
    decrease_prob: float = 0.3
    intensity: float = 0.35
    background: float = 0.15
    field_amplitude: float = 0.05


@dataclass
class StudyRecord:
    study_id: str
    patient_id: str
    visit: int
    image: np.ndarray
    report: str
    labels: tuple[str, ...]
    prior_study_id: str | None = None
    prior_image: np.ndarray | None = None
    prior_report: str | None = None
    prior_labels: tuple[str, ...] | None = None
    progression: dict[str, str] = field(default_factory=dict)

    @property
    def has_prior(self) -> bool:
        return self.prior_image is not None


@dataclass
class Corpus:
    records: list[StudyRecord]
    seed: int
    prior_fraction: float
    # images/reports of visits referenced only as priors
    extra_images: dict[str, np.ndarray] = field(default_factory=dict)
    extra_reports: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def n_with_prior(self) -> int:
        return sum(r.has_prior for r in self.records)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_YY, _XX = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)


def render_primitive(shape: str, center: tuple[int, int], radius: float, intensity: float) -> np.ndarray:
    cy, cx = center
    dy, dx = _YY - cy + 0.5, _XX - cx + 0.5
    if shape == "disk":
        mask = np.clip(radius + 0.5 - np.hypot(dy, dx), 0, 1)
    elif shape == "ring":
        mask = np.clip(1.0 - np.abs(np.hypot(dy, dx) - radius), 0, 1)
    elif shape == "bar":
        mask = np.clip(radius + 0.5 - np.abs(dx), 0, 1) * np.clip(1.5 - np.abs(dy), 0, 1)
    else:
        raise ValueError(f"unknown primitive {shape!r}")
    return intensity * mask


def finding_shape(k: int) -> str:
    return SHAPES[k % len(SHAPES)]


def _patient_field(rng: np.random.Generator, params: SynthParams) -> np.ndarray:
    img = np.full((IMAGE_SIZE, IMAGE_SIZE), params.background)
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img += params.field_amplitude * np.cos(2 * np.pi * (fy * _YY + fx * _XX) / IMAGE_SIZE + phase)
    return img


def _render(base: np.ndarray, lesions: dict[int, int], rng: np.random.Generator,
            params: SynthParams) -> np.ndarray:
    img = base.copy()
    for k, level in lesions.items():
        img += render_primitive(finding_shape(k), SITES[k], RADII[level], params.intensity)
    img += rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def compose_report(lesions: dict[int, int], has_prior: bool, progression: dict[str, str]) -> tuple[str, tuple[str, ...]]:
    """Report text and gold attributes for one visit."""
    sentences: list[str] = []
    labels = ["blank"] * len(FINDINGS)
    for k, name in enumerate(FINDINGS):
        tag = progression.get(name)
        if k in lesions:
            if has_prior:
                labels[k] = "positive"
                sentences.append({
                    "new": f"new {name} .",
                    "increased": f"{name} has increased .",
                    "decreased": f"{name} has decreased .",
                    "unchanged": f"{name} is unchanged .",
                }[tag])
            elif lesions[k] == 0:
                labels[k] = "uncertain"
                sentences.append(f"possible {name} .")
            else:
                labels[k] = "positive"
                sentences.append(f"{name} is present .")
        elif tag == "resolved":
            labels[k] = "negative"
            sentences.append(f"{name} has resolved .")
        elif name in ALWAYS_REPORTED:
            labels[k] = "negative"
            sentences.append(f"no {name} .")
    if not any(lab in ("positive", "uncertain") for lab in labels):
        sentences.insert(0, "no acute findings .")
    return " ".join(sentences), tuple(labels)


def rule_label(report: str) -> tuple[str, ...]:
    """Keyword/negation labeller for the template grammar.

    Unmentioned -> blank; a sentence opening with "no" or containing
    "resolved" -> negative; containing "possible" -> uncertain; else positive.
    """
    labels = ["blank"] * len(FINDINGS)
    index = {name: k for k, name in enumerate(FINDINGS)}
    sentence: list[str] = []
    for tok in words(report) + ["."]:
        if tok != ".":
            sentence.append(tok)
            continue
        if sentence:
            if sentence[0] == "no" or "resolved" in sentence:
                attr = "negative"
            elif "possible" in sentence:
                attr = "uncertain"
            else:
                attr = "positive"
            for tok_ in sentence:
                if tok_ in index:
                    labels[index[tok_]] = attr
        sentence = []
    return tuple(labels)


def template_tokens() -> list[str]:
    """Every word the report grammar can emit, in a fixed order."""
    fixed = ["no", "acute", "findings", ".", "new", "has", "increased", "decreased",
             "resolved", "is", "unchanged", "present", "possible"]
    return fixed + list(FINDINGS)


# ---------------------------------------------------------------------------
# chain simulation
# ---------------------------------------------------------------------------

@dataclass
class _Visit:
    lesions: dict[int, int]
    progression: dict[str, str]
    image: np.ndarray


def _step(lesions: dict[int, int], mimics: set[int], rng: np.random.Generator,
          params: SynthParams) -> tuple[dict[int, int], dict[str, str]]:
    nxt: dict[int, int] = {}
    tags: dict[str, str] = {}
    for k, name in enumerate(FINDINGS):
        if k in mimics:
            continue
        if k in lesions:
            level = lesions[k]
            u = rng.random()
            if u < params.resolve_prob:
                tags[name] = "resolved"
                continue
            u = rng.random()
            if level < len(RADII) - 1 and u < params.increase_prob:
                nxt[k], tags[name] = level + 1, "increased"
            elif level > 0 and u > 1 - params.decrease_prob:
                nxt[k], tags[name] = level - 1, "decreased"
            else:
                nxt[k], tags[name] = level, "unchanged"
        elif rng.random() < params.new_prob:
            nxt[k], tags[name] = int(rng.integers(0, 2)), "new"
    return nxt, tags


def _simulate_patient(seed: int, patient: int, n_visits: int, params: SynthParams) -> list[_Visit]:
    rng = np.random.default_rng([seed, patient])
    base = _patient_field(rng, params)
    mimics = {k for k in range(len(FINDINGS)) if rng.random() < params.mimic_prob}
    for k in sorted(mimics):
        base += render_primitive(finding_shape(k), SITES[k], RADII[int(rng.integers(0, len(RADII)))],
                                 params.intensity)
    lesions = {k: int(rng.integers(0, len(RADII))) for k in range(len(FINDINGS))
               if k not in mimics and rng.random() < params.initial_prob}
    visits = [_Visit(lesions, {}, _render(base, lesions, rng, params))]
    for _ in range(n_visits - 1):
        lesions, tags = _step(lesions, mimics, rng, params)
        visits.append(_Visit(lesions, tags, _render(base, lesions, rng, params)))
    return visits


def generate_corpus(seed: int, n_patients: int, visits_per_patient: int, prior_fraction: float,
                    params: SynthParams | None = None) -> Corpus:
    """Generate ``n_patients * visits_per_patient`` records.

    Exactly ``round(prior_fraction * R)`` records carry a prior. Below the
    natural fraction some later visits have their prior withheld; above it,
    some patients get an extra unreported earlier visit that serves as the
    prior of their first reported visit.
    """
    if not 0.0 <= prior_fraction <= 1.0:
        raise ValueError(f"prior_fraction must lie in [0, 1], got {prior_fraction}")
    if n_patients < 1 or visits_per_patient < 1:
        raise ValueError("need at least one patient and one visit")
    params = params or SynthParams()
    total = n_patients * visits_per_patient
    target = int(round(prior_fraction * total))
    natural = n_patients * (visits_per_patient - 1)
    alloc = np.random.default_rng([seed, 104729])
    with_history = set(alloc.permutation(n_patients)[: max(0, target - natural)].tolist())

    chains = []
    for p in range(n_patients):
        hist = p in with_history
        chains.append((hist, _simulate_patient(seed, p, visits_per_patient + hist, params)))

    # reported visits (patient, chain position) with a predecessor in the chain
    later = [(p, j) for p, (hist, chain) in enumerate(chains) for j in range(1, len(chain))]
    keep = len(later) if target >= natural else target
    keep_set = {later[i] for i in alloc.permutation(len(later))[:keep]} if keep < len(later) else set(later)

    records: list[StudyRecord] = []
    extra_images: dict[str, np.ndarray] = {}
    extra_reports: dict[str, str] = {}
    for p, (hist, chain) in enumerate(chains):
        pid = f"s{seed}-p{p:05d}"
        reports: list[tuple[str, tuple[str, ...]]] = []
        for j, visit in enumerate(chain):
            has_prior = (p, j) in keep_set
            reports.append(compose_report(visit.lesions, has_prior, visit.progression if has_prior else {}))
        for j, visit in enumerate(chain):
            sid = f"{pid}-v{j + 1}"
            if hist and j == 0:
                extra_images[sid] = visit.image
                extra_reports[sid] = reports[0][0]
                continue
            has_prior = (p, j) in keep_set
            text, labels = reports[j]
            rec = StudyRecord(study_id=sid, patient_id=pid, visit=j + 1, image=visit.image,
                              report=text, labels=labels)
            if has_prior:
                prev = chain[j - 1]
                rec.prior_study_id = f"{pid}-v{j}"
                rec.prior_image = prev.image
                rec.prior_report = reports[j - 1][0]
                rec.prior_labels = reports[j - 1][1]
                rec.progression = dict(visit.progression)
            records.append(rec)
    return Corpus(records, seed, prior_fraction, extra_images, extra_reports)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def select_split(records: Sequence[StudyRecord], split: str) -> list[StudyRecord]:
    """``all`` | ``no-prior`` | ``with-prior`` | ``fraction=<f>``.

    ``fraction=f`` keeps the largest prefix-ordered subset whose share of
    with-prior records is ``f``.
    """
    records = list(records)
    no_prior = [r for r in records if not r.has_prior]
    with_prior = [r for r in records if r.has_prior]
    if split == "all":
        out = records
    elif split == "no-prior":
        out = no_prior
    elif split == "with-prior":
        out = with_prior
    elif split.startswith("fraction="):
        f = float(split.split("=", 1)[1])
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"fraction must lie in [0, 1], got {f}")
        if f == 0.0:
            out = no_prior
        elif f == 1.0:
            out = with_prior
        else:
            k1 = min(len(with_prior), int(round(f / (1 - f) * len(no_prior))))
            k0 = min(len(no_prior), int(round((1 - f) / f * k1)))
            keep = {r.study_id for r in no_prior[:k0] + with_prior[:k1]}
            out = [r for r in records if r.study_id in keep]
    else:
        raise ValueError(f"unknown split {split!r}")
    if not out:
        raise ValueError(f"split {split!r} is empty")
    return out


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, root) -> Path:
    """``manifest.jsonl`` + ``images/<study>.ddtr`` + ``reports/<study>.txt``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "reports").mkdir(parents=True, exist_ok=True)
    images = dict(corpus.extra_images)
    reports = dict(corpus.extra_reports)
    for r in corpus.records:
        images[r.study_id] = r.image
        reports[r.study_id] = r.report
        if r.prior_study_id:
            images.setdefault(r.prior_study_id, r.prior_image)
            reports.setdefault(r.prior_study_id, r.prior_report)
    for sid in sorted(images):
        save_raw(root / "images" / f"{sid}.ddtr", images[sid])
        (root / "reports" / f"{sid}.txt").write_text(reports[sid] + "\n", encoding="utf-8")
    lines = []
    for r in corpus.records:
        entry = {
            "study_id": r.study_id, "patient_id": r.patient_id, "visit": r.visit,
            "image": f"images/{r.study_id}.ddtr", "report": f"reports/{r.study_id}.txt",
            "labels": list(r.labels),
            "prior_study_id": r.prior_study_id,
            "prior_image": f"images/{r.prior_study_id}.ddtr" if r.prior_study_id else None,
            "prior_report": f"reports/{r.prior_study_id}.txt" if r.prior_study_id else None,
            "prior_labels": list(r.prior_labels) if r.prior_labels else None,
            "progression": dict(sorted(r.progression.items())),
        }
        lines.append(json.dumps(entry, sort_keys=True))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {"seed": corpus.seed, "prior_fraction": corpus.prior_fraction,
            "n_records": len(corpus), "n_with_prior": corpus.n_with_prior,
            "findings": list(FINDINGS)}
    (root / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def load_corpus(root) -> Corpus:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest}")
    meta = json.loads((root / "corpus.json").read_text(encoding="utf-8"))
    records = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        e = json.loads(line)
        rec = StudyRecord(
            study_id=e["study_id"], patient_id=e["patient_id"], visit=e["visit"],
            image=load_raw(root / e["image"]),
            report=(root / e["report"]).read_text(encoding="utf-8").strip(),
            labels=tuple(e["labels"]),
        )
        if e["prior_study_id"]:
            rec.prior_study_id = e["prior_study_id"]
            rec.prior_image = load_raw(root / e["prior_image"])
            rec.prior_report = (root / e["prior_report"]).read_text(encoding="utf-8").strip()
            rec.prior_labels = tuple(e["prior_labels"])
            rec.progression = dict(e["progression"])
        records.append(rec)
    return Corpus(records, meta["seed"], meta["prior_fraction"])
