"""Fixed-size replay memories mixed into incremental-step batches.

Two populations are supported: an episodic bank sampled from past training
data (a single total capacity, split as evenly as possible across the old
classes) and an external bank ingested from a manifest of retrieved images
(one class per row).  Memory items carry image-level label sets over old
classes only; during training they contribute solely to the localizer's
classification loss, acting as negatives for the new classes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import netpbm


@dataclass(frozen=True)
class MemoryEntry:
    image: np.ndarray            # (H, W, 3) uint8
    labels: frozenset            # non-empty, subset of old foreground classes
    source: str                  # "episodic" | "external"


@dataclass
class MemoryBank:
    capacity: int
    entries: list = field(default_factory=list)

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if len(self.entries) > self.capacity:
            raise ValueError("bank holds more entries than its capacity")
        for e in self.entries:
            if not e.labels:
                raise ValueError("memory entries need a non-empty label set")

    def __len__(self):
        return len(self.entries)


def _class_quotas(capacity, classes):
    base, extra = divmod(capacity, len(classes))
    return {name: base + (1 if i < extra else 0) for i, name in enumerate(classes)}


def populate_episodic(past_samples, old_classes, registry, capacity, seed):
    """Per-class balanced uniform draw from past data, labels from dense masks.

    The capacity is split as evenly as possible across the old classes with
    the remainder going to the lowest-index classes; a sample drawn for one
    class leaves the pools of the others.  Classes whose pools run short
    simply contribute fewer entries.
    """
    past_samples = list(past_samples)
    if not past_samples:
        raise ValueError("episodic memory needs a non-empty past stream")
    old_classes = list(old_classes)
    old_indices = {registry.index_of(n): n for n in old_classes}
    rng = np.random.default_rng(seed)
    quotas = _class_quotas(capacity, old_classes)
    taken = set()
    entries = []
    for name in old_classes:
        idx = registry.index_of(name)
        pool = [
            i for i, s in enumerate(past_samples)
            if i not in taken and idx in s.present_indices()
        ]
        want = min(quotas[name], len(pool))
        if want == 0:
            continue
        picks = rng.choice(len(pool), size=want, replace=False)
        for p in sorted(int(v) for v in picks):
            sample = past_samples[pool[p]]
            taken.add(pool[p])
            labels = frozenset(
                old_indices[j] for j in sample.present_indices() if j in old_indices
            )
            entries.append(MemoryEntry(sample.image, labels, "episodic"))
    return MemoryBank(capacity=capacity, entries=entries)


def ingest_external(manifest_path, registry):
    """Read 'class_name<TAB>image_path' rows into an external bank."""
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    entries = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(
                    f"{manifest_path}:{lineno}: expected 'class<TAB>path'"
                )
            name, rel = parts
            if name not in registry:
                raise ValueError(
                    f"{manifest_path}:{lineno}: unknown class {name!r}"
                )
            path = rel if os.path.isabs(rel) else os.path.join(root, rel)
            if not os.path.exists(path):
                raise ValueError(f"{manifest_path}:{lineno}: unreadable image {rel!r}")
            image = netpbm.read_ppm(path)
            entries.append(MemoryEntry(image, frozenset([name]), "external"))
    return MemoryBank(capacity=max(len(entries), 1), entries=entries)


def export_bank(bank, outdir):
    """Write bank images plus a manifest; multi-label entries get a sidecar."""
    img_dir = os.path.join(outdir, "memory_images")
    os.makedirs(img_dir, exist_ok=True)
    rows = []
    sidecar = {}
    for i, entry in enumerate(bank.entries):
        rel = os.path.join("memory_images", f"mem_{i:05d}.ppm")
        netpbm.write_ppm(os.path.join(outdir, rel), entry.image)
        labels = sorted(entry.labels)
        rows.append(f"{labels[0]}\t{rel}")
        if len(labels) > 1:
            sidecar[rel] = labels
    manifest_path = os.path.join(outdir, "memory_manifest.tsv")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + ("\n" if rows else ""))
    sidecar_path = None
    if sidecar:
        sidecar_path = os.path.join(outdir, "memory_labels.json")
        with open(sidecar_path, "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=1)
            fh.write("\n")
    return manifest_path, sidecar_path


def mix_batch(current, bank, ratio, rng):
    """Replace floor(ratio * B) batch items with uniform draws from the bank.

    Draws are without replacement inside a batch (when the bank allows) and
    independent across calls.  ratio 0 returns the batch unchanged without
    touching the generator, so a memory-free pipeline stays bitwise intact.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    batch = list(current)
    k = int(ratio * len(batch))
    if ratio > 0 and (bank is None or len(bank) == 0):
        raise ValueError("memory ratio is positive but the bank is empty")
    if k == 0:
        return batch
    replace = len(bank) < k
    picks = rng.choice(len(bank), size=k, replace=replace)
    for slot, p in enumerate(int(v) for v in picks):
        batch[len(batch) - k + slot] = bank.entries[p]
    return batch
