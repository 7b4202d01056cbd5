"""Episode accounting audit over the store and the committed snapshot chain."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from fleetrl.fleet.coordinator import check_snapshot_chain, read_current
from fleetrl.fleet.store import EpisodeStore


@dataclass
class AuditReport:
    completed: int
    committed: int
    missing: list[str] = field(default_factory=list)       # complete but never committed
    duplicated: list[str] = field(default_factory=list)    # listed more than once
    invalid: list[str] = field(default_factory=list)       # committed without a verified upload
    chain_problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.missing or self.duplicated or self.invalid or self.chain_problems)

    @property
    def accounted_fraction(self) -> float:
        if self.completed == 0:
            return 1.0
        return (self.completed - len(self.missing)) / self.completed

    def to_dict(self) -> dict:
        return {"ok": self.ok, "completed": self.completed, "committed": self.committed,
                "accounted_fraction": self.accounted_fraction, "missing": self.missing,
                "duplicated": self.duplicated, "invalid": self.invalid,
                "chain_problems": self.chain_problems}


def audit(root, store: EpisodeStore) -> AuditReport:
    """Every marked upload must appear in exactly one committed version, with a valid marker."""
    snap = read_current(root)
    counts = Counter(snap.records)
    completed = store.complete_ids()
    rep = AuditReport(len(completed), len(counts))
    rep.missing = sorted(set(completed) - set(counts))
    rep.duplicated = sorted(k for k, c in counts.items() if c > 1)
    rep.invalid = sorted(k for k in set(completed) | set(counts) if not store.verify(k))
    rep.chain_problems = check_snapshot_chain(root)
    return rep
