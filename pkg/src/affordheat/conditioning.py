"""Prompt triplets and the condition encoder.

The text tower is a learned per-slot embedding table over the closed
(surgery, tool, action) vocabulary, followed by a two-layer projection MLP
into the shared conditioning space.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .data_model import TOOL_ACTION_PAIRS

PROMPT_TEMPLATE = (
    "surgery: {surgery}; tool: {tool}; action: {action}; "
    "objective: predict the safe tissue interaction region."
)

CONDITION_MODES = ("full", "no_language", "no_tool", "no_action")


class VocabularyError(KeyError):
    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0])


@dataclass(frozen=True)
class PromptTriplet:
    surgery: str
    tool: str
    action: str

    def validate(self, check_pairs: bool = True) -> None:
        for name in ("surgery", "tool", "action"):
            if not getattr(self, name):
                raise ValueError(f"prompt triplet has empty {name}")
        if check_pairs and (self.tool, self.action) not in TOOL_ACTION_PAIRS:
            raise ValueError(f"({self.tool}, {self.action}) is not a known tool-action pair")


def render_prompt(triplet: PromptTriplet) -> str:
    triplet.validate(check_pairs=False)
    return PROMPT_TEMPLATE.format(
        surgery=triplet.surgery, tool=triplet.tool, action=triplet.action
    )


@dataclass(frozen=True)
class Vocabulary:
    surgeries: tuple[str, ...]
    tools: tuple[str, ...]
    actions: tuple[str, ...]

    @classmethod
    def from_triplets(cls, triplets) -> "Vocabulary":
        triplets = list(triplets)
        return cls(
            tuple(sorted({t[0] for t in triplets})),
            tuple(sorted({t[1] for t in triplets})),
            tuple(sorted({t[2] for t in triplets})),
        )

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls.from_triplets(("cholecystectomy", t, a) for t, a in TOOL_ACTION_PAIRS)

    def index(self, triplet: PromptTriplet) -> tuple[int, int, int]:
        out = []
        for slot, table, value in (
            ("surgery", self.surgeries, triplet.surgery),
            ("tool", self.tools, triplet.tool),
            ("action", self.actions, triplet.action),
        ):
            if value not in table:
                raise VocabularyError(
                    f"unknown {slot} token {value!r}; known: {', '.join(table)}"
                )
            out.append(table.index(value))
        return tuple(out)


def load_vocabulary(path) -> list[PromptTriplet]:
    """One triplet per line, ``surgery<TAB>tool<TAB>action``."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
        out.append(PromptTriplet(*parts))
    return out


def save_vocabulary(triplets, path) -> None:
    lines = [f"{t.surgery}\t{t.tool}\t{t.action}" for t in triplets]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class ConditionEncoder(nn.Module):
    """Slot embeddings -> concat -> Linear/SiLU/Linear -> condition vector.

    Each slot table carries one extra row, the learned null token, used by the
    ``no_tool`` / ``no_action`` ablations. ``no_language`` bypasses the tables
    entirely and returns a learned constant vector.
    """

    def __init__(self, vocab: Vocabulary, slot_dim: int = 32, hidden_dim: int = 64,
                 cond_dim: int = 64, mode: str = "full", zero_init_output: bool = False):
        super().__init__()
        if mode not in CONDITION_MODES:
            raise ValueError(f"unknown conditioning mode {mode!r}")
        self.vocab = vocab
        self.mode = mode
        self.cond_dim = cond_dim
        self.surgery_emb = nn.Embedding(len(vocab.surgeries) + 1, slot_dim)
        self.tool_emb = nn.Embedding(len(vocab.tools) + 1, slot_dim)
        self.action_emb = nn.Embedding(len(vocab.actions) + 1, slot_dim)
        self.mlp = nn.Sequential(
            nn.Linear(3 * slot_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, cond_dim),
        )
        self.constant = nn.Parameter(torch.zeros(cond_dim))
        nn.init.normal_(self.surgery_emb.weight, std=1.0)
        nn.init.normal_(self.tool_emb.weight, std=1.0)
        nn.init.normal_(self.action_emb.weight, std=1.0)
        nn.init.normal_(self.constant, std=1.0)
        if zero_init_output:
            nn.init.zeros_(self.mlp[2].weight)
            nn.init.zeros_(self.mlp[2].bias)

    def indices(self, triplets) -> torch.Tensor:
        idx = torch.tensor([self.vocab.index(t) for t in triplets], dtype=torch.long)
        if self.mode == "no_tool":
            idx[:, 1] = len(self.vocab.tools)
        elif self.mode == "no_action":
            idx[:, 2] = len(self.vocab.actions)
        return idx

    def forward_indices(self, idx: torch.Tensor) -> torch.Tensor:
        if self.mode == "no_language":
            return self.constant.unsqueeze(0).expand(idx.shape[0], -1)
        emb = torch.cat(
            [self.surgery_emb(idx[:, 0]), self.tool_emb(idx[:, 1]), self.action_emb(idx[:, 2])],
            dim=-1,
        )
        return self.mlp(emb)

    def forward(self, triplets) -> torch.Tensor:
        return self.forward_indices(self.indices(triplets))


def encode_condition(triplet: PromptTriplet, encoder: ConditionEncoder) -> torch.Tensor:
    """Condition vector (cond_dim,) for a single triplet."""
    triplet.validate(check_pairs=False)
    return encoder([triplet])[0]
