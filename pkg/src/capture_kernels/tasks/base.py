"""Common instance record shared by all task generators."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GENERATOR_VERSION = "1"
KINDS = ("induction", "sort", "string_match", "cfg", "spp", "mincut")


@dataclass
class TaskInstance:
    kind: str
    T: int
    payload: dict
    label: object
    seed: object = None
    embedding: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")

    def to_record(self):
        return {
            "kind": self.kind,
            "T": int(self.T),
            "payload": self.payload,
            "label": self.label,
            "seed": self.seed,
            "generator_version": GENERATOR_VERSION,
        }

    @classmethod
    def from_record(cls, rec):
        return cls(rec["kind"], rec["T"], rec["payload"], rec["label"], rec.get("seed"))
