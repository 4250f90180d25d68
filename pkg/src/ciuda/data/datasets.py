"""Folder ingestion, manifests, step streams, source batches and the access audit.

Layout: ``<root>/<domain>/<class_folder>/<file>``. Target ground truth is
kept behind :class:`TaintedLabel`; only stream construction and evaluation
may unwrap it.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from ..encoders.preprocessing import Preprocessing, file_digest, read_image
from ..errors import ContractViolation, IngestionError
from .schedules import StepSchedule

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp", ".npy"}


class TaintedLabel:
    """Ground-truth label of a target example. Refuses implicit use as a number."""

    __slots__ = ("_value",)

    def __init__(self, value: int):
        self._value = int(value)

    def reveal_for_evaluation(self) -> int:
        return self._value

    def __index__(self):
        raise ContractViolation("target labels may not enter training")

    __int__ = __index__

    def __repr__(self):
        return "TaintedLabel(<hidden>)"


@dataclass
class LabeledExample:
    example_id: str
    ref: str
    label: int
    domain: str


@dataclass
class UnlabeledExample:
    example_id: str
    ref: str
    domain: str
    step: int
    true_label: TaintedLabel = field(repr=False)


@dataclass
class Manifest:
    root: str
    domain: str
    entries: list[dict]
    missing_classes: list[str] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def counts(self) -> Counter:
        return Counter(e["class_folder"] for e in self.entries)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.__dict__, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        d = json.loads(Path(path).read_text())
        if d.get("version") != MANIFEST_VERSION:
            raise IngestionError(f"manifest version mismatch: expected {MANIFEST_VERSION}, got {d.get('version')}")
        return cls(**d)


def build_manifest(root, domain: str, schedule: StepSchedule, hash_files: bool = True) -> Manifest:
    """Freeze the file list of one domain; classes without a folder are recorded and warned about."""
    base = Path(root) / domain
    if not base.is_dir():
        raise IngestionError(f"domain folder {base} does not exist")
    entries, missing = [], []
    for label, folder in enumerate(schedule.folder_names):
        cdir = base / folder
        if not cdir.is_dir():
            missing.append(folder)
            continue
        for f in sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            entries.append({
                "id": f"{domain}/{folder}/{f.name}",
                "path": str(f.relative_to(root)),
                "class_folder": folder,
                "label": label,
                "sha256": file_digest(f) if hash_files else None,
            })
    if missing:
        log.warning("%s: %d class folders missing: %s", domain, len(missing), ", ".join(missing))
    return Manifest(str(root), domain, entries, missing)


class AccessRecord(NamedTuple):
    purpose: str
    domain: str
    example_id: str
    example_step: int | None
    current_step: int | None
    stage: str


class AccessLog:
    """Records every example read with its purpose and the step in progress."""

    def __init__(self):
        self.records: list[AccessRecord] = []
        self.current_step: int | None = None
        self.stage = "joint"

    def record(self, purpose: str, domain: str, example_id: str, example_step: int | None):
        self.records.append(AccessRecord(purpose, domain, example_id, example_step, self.current_step, self.stage))

    def count(self, purpose: str | None = None, domain: str | None = None, stage: str | None = None) -> int:
        return sum(
            1
            for r in self.records
            if (purpose is None or r.purpose == purpose) and (domain is None or r.domain == domain) and (stage is None or r.stage == stage)
        )

    def rehearsal_violations(self) -> list[AccessRecord]:
        """Non-evaluation reads of target data from a step earlier than the one in progress."""
        return [
            r
            for r in self.records
            if r.purpose != "eval" and r.domain == "target" and r.example_step is not None and r.current_step is not None and r.example_step < r.current_step
        ]


class ExampleStore:
    """Decodes example references into pixel arrays, logging each read.

    ``memory`` maps references to arrays already held in memory (synthetic
    data); decoded ``.npy`` files are kept there too.
    """

    def __init__(self, root=None, preprocessing: Preprocessing | None = None, access_log: AccessLog | None = None, memory: dict | None = None):
        self.root = Path(root) if root is not None else None
        self.preprocessing = preprocessing or Preprocessing()
        self.log = access_log or AccessLog()
        self.memory = memory if memory is not None else {}

    def touch(self, example, purpose: str):
        """Log a use of ``example`` whose decoded form the caller already holds."""
        domain = "target" if isinstance(example, UnlabeledExample) else "source"
        self.log.record(purpose, domain, example.example_id, getattr(example, "step", None))

    def read(self, example, purpose: str) -> np.ndarray:
        self.touch(example, purpose)
        if example.ref in self.memory:
            return self.memory[example.ref]
        if self.root is None:
            raise IngestionError(f"no data root to read {example.ref}")
        arr = read_image(self.root / example.ref, self.preprocessing)
        if Path(example.ref).suffix == ".npy":
            self.memory[example.ref] = arr
        return arr

    def read_batch(self, examples, purpose: str) -> np.ndarray:
        return np.stack([self.read(e, purpose) for e in examples])


def _seeded_order(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)


def target_examples(schedule: StepSchedule, manifest: Manifest) -> list[UnlabeledExample]:
    step_of = schedule.step_of_class()
    return [
        UnlabeledExample(e["id"], e["path"], manifest.domain, step_of[e["label"]], TaintedLabel(e["label"]))
        for e in manifest.entries
        if e["label"] in step_of
    ]


def make_step_stream(schedule: StepSchedule, step_index: int, manifest: Manifest, seed: int | None = None) -> list[UnlabeledExample]:
    """Target examples whose ground-truth class belongs to ``step_index``.

    Returned as a list (possibly empty); shuffled deterministically when ``seed`` is given.
    """
    if not 0 <= step_index < schedule.T:
        raise ContractViolation(f"step {step_index} outside schedule of {schedule.T} steps")
    wanted = set(schedule.steps[step_index])
    absent = [schedule.folder_names[c] for c in wanted if schedule.folder_names[c] in manifest.missing_classes]
    if absent:
        log.warning("step %d: no folder for %s", step_index, ", ".join(absent))
    out = [ex for ex in target_examples(schedule, manifest) if ex.step == step_index]
    if seed is not None:
        out = [out[i] for i in _seeded_order(len(out), seed)]
    return out


def source_examples(manifest: Manifest) -> list[LabeledExample]:
    return [LabeledExample(e["id"], e["path"], e["label"], manifest.domain) for e in manifest.entries]


def make_source_loader(examples: list[LabeledExample], batch_size: int, seed: int, epoch: int = 0) -> Iterator[list[LabeledExample]]:
    """One epoch of source batches; every example appears exactly once, the last batch may be short."""
    order = _seeded_order(len(examples), seed * 100003 + epoch)
    for i in range(0, len(order), batch_size):
        yield [examples[j] for j in order[i : i + batch_size]]


class CyclingSourceLoader:
    """Endless source batches, reshuffled each pass."""

    def __init__(self, examples: list[LabeledExample], batch_size: int, seed: int):
        self.examples, self.batch_size, self.seed = examples, batch_size, seed
        self.epoch = 0
        self._it = iter(())

    def next_batch(self) -> list[LabeledExample]:
        for _ in range(2):
            try:
                return next(self._it)
            except StopIteration:
                self._it = make_source_loader(self.examples, self.batch_size, self.seed, self.epoch)
                self.epoch += 1
        raise ContractViolation("source loader is empty")

    def state(self) -> dict:
        return {"epoch": self.epoch}
