"""Dataset manifests and annotation-budget splits."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

ABSENT = "-"


@dataclass(frozen=True)
class ManifestSample:
    seq_id: str
    events: Path
    frame: Path | None = None
    mask: Path | None = None
    label: Path | None = None


@dataclass
class DatasetManifest:
    samples: list[ManifestSample]

    def __len__(self) -> int:
        return len(self.samples)

    def sequences(self) -> dict[str, list[int]]:
        """Sample indices per sequence, in manifest order."""
        out: dict[str, list[int]] = {}
        for i, s in enumerate(self.samples):
            out.setdefault(s.seq_id, []).append(i)
        return out


@dataclass
class BudgetSplit:
    fraction: float
    labeled: list[int]
    unlabeled: list[int]


def parse_manifest(text: str, base: Path | None = None, check: bool = True) -> DatasetManifest:
    """Parse ``seq_id evt_path [frame_path] [mask_path] [label_path]`` lines; ``-`` = absent."""
    base = Path(".") if base is None else Path(base)
    samples = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2 or len(parts) > 5:
            raise ValueError(f"manifest line {lineno}: expected 2-5 fields")
        parts += [ABSENT] * (5 - len(parts))
        seq, *paths = parts
        if paths[0] == ABSENT:
            raise ValueError(f"manifest line {lineno}: event file is required")
        resolved = [None if p == ABSENT else base / p for p in paths]
        if check:
            for p in resolved:
                if p is not None and not p.exists():
                    raise FileNotFoundError(f"manifest line {lineno}: {p} does not exist")
        samples.append(ManifestSample(seq, *resolved))
    return DatasetManifest(samples)


def read_manifest(path, check: bool = True) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(path.read_text(), path.parent, check)


def format_manifest(manifest: DatasetManifest, base: Path | None = None) -> str:
    def rel(p):
        if p is None:
            return ABSENT
        return str(Path(p).relative_to(base)) if base is not None else str(p)

    return "".join(f"{s.seq_id} {rel(s.events)} {rel(s.frame)} {rel(s.mask)} {rel(s.label)}\n"
                   for s in manifest.samples)


def split_sequences(seq_ids, fraction: float) -> BudgetSplit:
    """Label the first ceil(fraction * n) samples of every sequence.

    ``seq_ids`` gives the sequence of each sample in dataset order.
    """
    if not 0 < fraction <= 1:
        raise ValueError("budget fraction must be in (0, 1]")
    groups: dict[str, list[int]] = {}
    for i, seq in enumerate(seq_ids):
        groups.setdefault(seq, []).append(i)
    if not groups:
        raise ValueError("empty manifest")
    labeled, unlabeled = [], []
    for idx in groups.values():
        # tolerate float noise such as 0.07 * 100 = 7.000000000000001
        k = min(len(idx), math.ceil(round(fraction * len(idx), 9)))
        labeled.extend(idx[:k])
        unlabeled.extend(idx[k:])
    return BudgetSplit(fraction, sorted(labeled), sorted(unlabeled))


def split_budget(manifest: DatasetManifest, fraction: float) -> BudgetSplit:
    return split_sequences([s.seq_id for s in manifest.samples], fraction)
