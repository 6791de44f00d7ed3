from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

MODEL_CALLS = (
    "encode_image", "encode_text", "tokenize", "encode_caption", "caption",
    "encode_latent", "decode_latent", "add_noise", "predict_noise",
    "invert", "denoise", "sample",
)


@dataclass
class CallRecord:
    method: str
    args: tuple
    kwargs: dict


@dataclass
class TracingBackend:
    """Proxy that records every model-role call made on a wrapped backend.

    Used to prove properties like "no call ever saw X" or "a resumed run made
    zero calls". Non-call attributes pass straight through.
    """

    inner: Any
    calls: list[CallRecord] = field(default_factory=list)

    def __getattr__(self, name):
        attr = getattr(self.inner, name)
        if name not in MODEL_CALLS:
            return attr

        def traced(*args, **kwargs):
            self.calls.append(CallRecord(name, args, kwargs))
            return attr(*args, **kwargs)

        return traced

    def count(self, method: str | None = None) -> int:
        if method is None:
            return len(self.calls)
        return sum(1 for c in self.calls if c.method == method)

    def string_arguments(self) -> list[str]:
        out = []
        for c in self.calls:
            for v in list(c.args) + list(c.kwargs.values()):
                if isinstance(v, str):
                    out.append(v)
        return out
