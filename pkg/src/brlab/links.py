"""Link functions f (return gap -> preference probability) and link-losses F = L o f."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logit

from .errors import ParameterError


@dataclass(frozen=True)
class LinkFunction:
    """Monotone increasing map from a return difference to [0, 1].

    ``sigmoid`` gives the Bradley-Terry model. ``linear`` is
    ``slope * x + offset`` clamped to [0, 1].
    """

    kind: str = "sigmoid"
    slope: float = 1.0
    offset: float = 0.5

    def __post_init__(self):
        if self.kind not in ("sigmoid", "linear"):
            raise ParameterError(f"unknown link kind {self.kind!r}")
        if self.kind == "linear" and self.slope <= 0:
            raise ParameterError("linear link needs a positive slope")

    def __call__(self, x):
        return self.evaluate(x)[0]

    def evaluate(self, x):
        """Return ``(p, clamped)``; ``clamped`` flags linear outputs cut to [0, 1]."""
        x = np.asarray(x, dtype=float)
        if self.kind == "sigmoid":
            p = expit(x)
            clamped = np.zeros(p.shape, dtype=bool)
        else:
            raw = self.slope * x + self.offset
            p = np.clip(raw, 0.0, 1.0)
            clamped = raw != p
        if p.ndim == 0:
            return float(p), bool(clamped)
        return p, clamped

    def inverse(self, p):
        """Return gap realising probability ``p`` (p strictly inside (0, 1) for sigmoid)."""
        p = np.asarray(p, dtype=float)
        out = logit(p) if self.kind == "sigmoid" else (p - self.offset) / self.slope
        return float(out) if out.ndim == 0 else out

    def to_json(self) -> dict:
        if self.kind == "sigmoid":
            return {"kind": "sigmoid"}
        return {"kind": "linear", "slope": self.slope, "offset": self.offset}

    @classmethod
    def from_json(cls, doc: dict) -> "LinkFunction":
        if doc.get("kind", "sigmoid") == "sigmoid":
            return cls("sigmoid")
        return cls("linear", float(doc["slope"]), float(doc["offset"]))


def link_eval(link: LinkFunction, x: float) -> tuple[float, bool]:
    return link.evaluate(x)


@dataclass(frozen=True)
class LinkLossFunction:
    """Composite F(x) = loss(link(x)), decreasing in the return gap x.

    Registered forms:

    ``sigmoid_nll``
        -log sigmoid(x), the Bradley-Terry negative log-likelihood.
    ``linear``
        1 - (slope * x + offset); the link is left unclamped so F is affine.
    ``sigmoid_one_minus``
        1 - sigmoid(x).

    ``scale`` multiplies F. A negative scale flips monotonicity, which is
    only useful as a negative control.
    """

    kind: str = "sigmoid_nll"
    slope: float = 1.0
    offset: float = 0.5
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in LINK_LOSS_KINDS:
            raise ParameterError(f"unknown link-loss kind {self.kind!r}")

    @property
    def link(self) -> LinkFunction:
        if self.kind == "linear":
            return LinkFunction("linear", self.slope, self.offset)
        return LinkFunction("sigmoid")

    @property
    def is_decreasing(self) -> bool:
        return self.scale > 0 and (self.kind != "linear" or self.slope > 0)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "sigmoid_nll":
            out = -log_expit(x)
        elif self.kind == "linear":
            out = 1.0 - (self.slope * x + self.offset)
        else:
            out = 1.0 - expit(x)
        out = self.scale * out
        return float(out) if out.ndim == 0 else out

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "sigmoid_nll":
            out = -expit(-x)
        elif self.kind == "linear":
            out = np.full(x.shape, -self.slope)
        else:
            out = -expit(x) * expit(-x)
        out = self.scale * out
        return float(out) if out.ndim == 0 else out

    def negated(self) -> "LinkLossFunction":
        return LinkLossFunction(self.kind, self.slope, self.offset, -self.scale)

    def to_json(self) -> dict:
        return {"kind": self.kind, "slope": self.slope, "offset": self.offset, "scale": self.scale}


LINK_LOSS_KINDS = ("sigmoid_nll", "linear", "sigmoid_one_minus")


def link_loss_registry() -> dict[str, LinkLossFunction]:
    """The link-losses every equivalence check is run against."""
    return {
        "sigmoid_nll": LinkLossFunction("sigmoid_nll"),
        "linear": LinkLossFunction("linear", slope=1.0 / 80.0, offset=0.5),
        "sigmoid_one_minus": LinkLossFunction("sigmoid_one_minus"),
    }


def is_monotone_decreasing(F: LinkLossFunction, lo=-50.0, hi=50.0, samples=2001) -> bool:
    xs = np.linspace(lo, hi, samples)
    return bool(np.all(np.diff(F(xs)) <= 0))
