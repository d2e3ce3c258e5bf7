from __future__ import annotations

from dataclasses import dataclass

from .draft import DraftTree
from .verify import VerifyOutcome


@dataclass(frozen=True)
class VerifyRequest:
    session: int
    seq: int
    tree: DraftTree
    arrival_ms: float = 0.0

    @property
    def padded_len(self) -> int:
        return self.tree.base_context_len + len(self.tree)


@dataclass(frozen=True)
class VerifyResponse:
    session: int
    seq: int
    outcome: VerifyOutcome | None
    error: str | None = None
    service_ms: float = 0.0
