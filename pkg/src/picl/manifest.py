"""Problem manifests: which 10-item sets a run decodes and evaluates.

A manifest either points at a toy-world file (items resolved locally) or
declares its items bridge-resolved (an external scorer server knows them).
Validation is strict and happens entirely at load time so a bad file never
fails mid-run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .core import Caption, RefGameContext, Vocabulary
from .speakers import ToyWorld, world_from_json

MANIFEST_FORMAT = "manifest/v1"


@dataclass(frozen=True)
class ManifestSet:
    set_id: str
    items: tuple[str, ...]
    target: str
    reference_caption: tuple[str, ...]


@dataclass(frozen=True)
class ProblemManifest:
    split: str
    item_source: dict
    sets: tuple[ManifestSet, ...]

    @property
    def bridge_resolved(self) -> bool:
        return self.item_source.get("type") == "bridge"

    def contexts(self) -> list[RefGameContext]:
        return [
            RefGameContext(
                target=s.target,
                distractors=tuple(i for i in s.items if i != s.target),
            )
            for s in self.sets
        ]

    def reference_captions(self, vocab: Vocabulary) -> list[Caption]:
        return [vocab.caption(list(s.reference_caption)) for s in self.sets]

    def set_ids(self) -> list[str]:
        return [s.set_id for s in self.sets]


def _validate_set(entry: dict, index: int) -> ManifestSet:
    where = f"sets[{index}]"
    if not isinstance(entry, dict):
        raise ValueError(f"{where}: expected an object")
    set_id = entry.get("set_id")
    if not isinstance(set_id, str) or not set_id:
        raise ValueError(f"{where}: set_id must be a non-empty string")
    where = f"set {set_id}"
    items = entry.get("items")
    if not isinstance(items, list) or len(items) != 10:
        n = len(items) if isinstance(items, list) else "no"
        raise ValueError(f"{where}: expected exactly 10 items, got {n}")
    if len(set(items)) != 10:
        raise ValueError(f"{where}: item ids must be distinct")
    target = entry.get("target")
    if target not in items:
        raise ValueError(f"{where}: target {target!r} is not among the items")
    caption = entry.get("reference_caption")
    if not isinstance(caption, list) or not caption or not all(
        isinstance(w, str) for w in caption
    ):
        raise ValueError(f"{where}: reference_caption must be a non-empty word list")
    return ManifestSet(
        set_id=set_id,
        items=tuple(items),
        target=target,
        reference_caption=tuple(caption),
    )


def manifest_from_data(data: dict) -> ProblemManifest:
    if data.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"not a {MANIFEST_FORMAT} file")
    item_source = data.get("item_source")
    if not isinstance(item_source, dict) or item_source.get("type") not in ("toy_world", "bridge"):
        raise ValueError("item_source.type must be 'toy_world' or 'bridge'")
    if item_source["type"] == "toy_world" and not item_source.get("path"):
        raise ValueError("item_source of type toy_world needs a path")
    raw_sets = data.get("sets")
    if not isinstance(raw_sets, list) or not raw_sets:
        raise ValueError("manifest needs a non-empty sets list")
    sets = [_validate_set(entry, i) for i, entry in enumerate(raw_sets)]
    ids = [s.set_id for s in sets]
    dupes = {i for i in ids if ids.count(i) > 1}
    if dupes:
        raise ValueError(f"duplicate set ids: {sorted(dupes)}")
    return ProblemManifest(
        split=str(data.get("split", "all")),
        item_source=item_source,
        sets=tuple(sets),
    )


def manifest_from_world(world: ToyWorld, indices, split: str,
                        world_path: str) -> ProblemManifest:
    vocab = world.vocabulary
    sets = []
    for i in indices:
        ctx = world.problem_sets[i]
        cap = world.reference_captions[ctx.target]
        sets.append(
            ManifestSet(
                set_id=world.set_ids[i],
                items=tuple(sorted(ctx.items)),
                target=ctx.target,
                reference_caption=tuple(
                    vocab.words[t] for t in cap.tokens if t != vocab.eos_id
                ),
            )
        )
    return ProblemManifest(
        split=split,
        item_source={"type": "toy_world", "path": world_path},
        sets=tuple(sets),
    )


def manifest_to_json(manifest: ProblemManifest) -> dict:
    return {
        "format": MANIFEST_FORMAT,
        "split": manifest.split,
        "item_source": manifest.item_source,
        "sets": [
            {
                "set_id": s.set_id,
                "items": list(s.items),
                "target": s.target,
                "reference_caption": list(s.reference_caption),
            }
            for s in manifest.sets
        ],
    }


def load_manifest(path: str | Path) -> ProblemManifest:
    """Load a manifest file; a toy-world file is accepted and wrapped."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    if data.get("format") == "toy-world/v1":
        world = world_from_json(data)
        return manifest_from_world(world, range(len(world.problem_sets)), "all", str(path))
    try:
        return manifest_from_data(data)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def save_manifest(manifest: ProblemManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest_to_json(manifest), indent=2, sort_keys=True))
