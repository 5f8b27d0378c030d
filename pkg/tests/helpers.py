"""Hand-built micro worlds for unit-level checks."""

from __future__ import annotations

from picl.speakers import ToyWorld


def manual_world(item_attrs: dict[str, set[str]], attributes: tuple[str, ...],
                 fillers: tuple[str, ...] = ()) -> ToyWorld:
    """World with explicit items and no problem sets."""
    items = {
        name: tuple(1 if a in attrs else 0 for a in attributes)
        for name, attrs in item_attrs.items()
    }
    return ToyWorld(
        attributes=attributes,
        fillers=fillers,
        items=items,
        set_ids=(),
        problem_sets=(),
        reference_captions={},
        overlap_min=0,
        seed=0,
    )
