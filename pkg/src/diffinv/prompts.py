"""Full prompts: an anchor prompt followed by signed Difference Tokens."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch


@dataclass
class FullPrompt:
    embeddings: torch.Tensor
    parts: list[tuple[str, range]] = field(default_factory=list)
    truncated: bool = False

    def part(self, name: str) -> torch.Tensor:
        for source, rows in self.parts:
            if source == name:
                return self.embeddings[rows.start : rows.stop]
        raise KeyError(name)


def assemble_full_prompt(
    prompt: torch.Tensor,
    diff: Optional[torch.Tensor],
    sign: int = 1,
    max_length: Optional[int] = None,
    prompt_name: str = "prompt",
) -> FullPrompt:
    """Concatenate ``prompt`` rows with ``sign * diff`` rows.

    When the result would exceed ``max_length`` rows the prompt is cut from the
    end; the difference rows are never dropped.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if diff is None:
        diff = prompt.new_zeros((0, prompt.shape[1]))
    if prompt.ndim != 2 or diff.ndim != 2 or prompt.shape[1] != diff.shape[1]:
        raise ValueError(f"width mismatch: prompt {tuple(prompt.shape)} vs diff {tuple(diff.shape)}")
    n = diff.shape[0]
    m = prompt.shape[0]
    truncated = False
    if max_length is not None and m + n > max_length:
        if n > max_length:
            raise ValueError(f"{n} difference tokens exceed max sequence length {max_length}")
        m = max_length - n
        truncated = True
    signed = diff if sign == 1 else -diff
    rows = torch.cat([prompt[:m], signed.to(prompt.dtype)], dim=0)
    parts = [(prompt_name, range(0, m))]
    if n:
        parts.append(("diff" if sign == 1 else "-diff", range(m, m + n)))
    return FullPrompt(rows, parts, truncated)
