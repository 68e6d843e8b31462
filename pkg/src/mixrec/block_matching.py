"""Block matching between a generative transformer and an alternating local/global one.

The feed-forward branch has ``n_pi3`` blocks alternating local (even index)
and global (odd index). Every global block is paired with a generative block
(kind ``C``); leftover generative blocks are paired order-preservingly with a
local block (kind ``B``); remaining local blocks run alone (kind ``A``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

from .errors import Infeasible

__all__ = ["BlockEntry", "BlockMatchConfig", "match_blocks", "validate_config", "render_diagram"]


class BlockEntry(NamedTuple):
    kind: str
    t_index: int | None
    p_index: int


@dataclass(frozen=True)
class BlockMatchConfig:
    n_trellis: int
    n_pi3: int
    entries: tuple[BlockEntry, ...]

    @property
    def by_t_index(self) -> list[BlockEntry]:
        return sorted((e for e in self.entries if e.t_index is not None), key=lambda e: e.t_index)

    def pairs(self, kind: str) -> list[tuple[int, int]]:
        return [(e.t_index, e.p_index) for e in self.entries if e.kind == kind]

    def to_json(self) -> dict:
        return {
            "n_trellis": self.n_trellis,
            "n_pi3": self.n_pi3,
            "entries": [{"kind": e.kind, "t": e.t_index, "p": e.p_index} for e in self.entries],
        }

    @classmethod
    def from_json(cls, d: dict) -> "BlockMatchConfig":
        entries = tuple(BlockEntry(e["kind"], e["t"], e["p"]) for e in d["entries"])
        return cls(d["n_trellis"], d["n_pi3"], entries)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def match_blocks(n_trellis: int, n_pi3: int) -> BlockMatchConfig:
    if n_pi3 < 2 or n_pi3 % 2:
        raise Infeasible(f"n_pi3 must be a positive even number, got {n_pi3}")
    G = n_pi3 // 2
    if n_trellis < G:
        raise Infeasible(f"{G} global blocks cannot inject into {n_trellis} generative blocks")
    # global g (index 2g+1) -> floor(g * n_T / G); the last global is pinned to n_T - 1
    c_t = [g * n_trellis // G for g in range(G - 1)] + [n_trellis - 1]
    c_pairs = {2 * g + 1: t for g, t in enumerate(c_t)}

    b_pairs: dict[int, int] = {}
    anchors = [(-1, -1)] + [(t, 2 * g + 1) for g, t in enumerate(c_t)]
    for (t_lo, p_lo), (t_hi, p_hi) in zip(anchors, anchors[1:]):
        free_t = list(range(t_lo + 1, t_hi))
        free_p = [p for p in range(p_lo + 1, p_hi) if p % 2 == 0]
        if len(free_t) > len(free_p):
            raise Infeasible(
                f"generative blocks {free_t} have only local blocks {free_p} between "
                f"P{p_lo} and P{p_hi}"
            )
        for t, p in zip(free_t, free_p):
            b_pairs[p] = t

    entries = []
    for p in range(n_pi3):
        if p in c_pairs:
            entries.append(BlockEntry("C", c_pairs[p], p))
        elif p in b_pairs:
            entries.append(BlockEntry("B", b_pairs[p], p))
        else:
            entries.append(BlockEntry("A", None, p))
    return BlockMatchConfig(n_trellis, n_pi3, tuple(entries))


def validate_config(cfg: BlockMatchConfig) -> dict[str, bool]:
    """Check every structural invariant of a matching; one flag per invariant."""
    ps = [e.p_index for e in cfg.entries]
    ts = [e.t_index for e in cfg.entries if e.kind in "BC"]
    matched = sorted((e for e in cfg.entries if e.kind in "BC"), key=lambda e: e.p_index)
    t_seq = [e.t_index for e in matched]
    return {
        "p_indices_unique_and_complete": sorted(ps) == list(range(cfg.n_pi3)),
        "t_indices_unique_and_complete": sorted(t for t in ts if t is not None) == list(range(cfg.n_trellis))
        and None not in ts,
        "kinds_valid": all(e.kind in ("A", "B", "C") for e in cfg.entries),
        "a_entries_unmatched": all(e.t_index is None for e in cfg.entries if e.kind == "A"),
        "c_pairs_global": all(e.p_index % 2 == 1 for e in cfg.entries if e.kind == "C"),
        "b_pairs_local": all(e.p_index % 2 == 0 for e in cfg.entries if e.kind == "B"),
        "order_preserving": None not in t_seq and all(a < b for a, b in zip(t_seq, t_seq[1:])),
    }


def render_diagram(cfg: BlockMatchConfig) -> str:
    """Two aligned rows, one column per feed-forward block."""
    width = max(4, len(f"T{cfg.n_trellis - 1}") + 1, len(f"P{cfg.n_pi3 - 1}") + 1)
    top, mid, bot = ["T: "], ["   "], ["P: "]
    for e in cfg.entries:
        top.append((f"T{e.t_index}" if e.t_index is not None else ".").ljust(width))
        mid.append(e.kind.ljust(width))
        bot.append(f"P{e.p_index}".ljust(width))
    return "\n".join("".join(r).rstrip() for r in (top, mid, bot))
