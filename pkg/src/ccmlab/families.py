"""Physical family axes: endpoints, supports, evaluation regimes, coordinates."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources

ROLES = ("support", "endpoint-low", "endpoint-high", "interpolation", "ood-low", "ood-high")
GROUPS = ("train", "validation", "eval")
FAMILIES = ("diffreact", "ns2d", "rdb")


class FamilyError(ValueError):
    pass


@dataclass(frozen=True)
class RegimeTask:
    lam: float
    role: str
    s: float
    seeds: tuple
    group: str = "eval"
    label: str = ""  # free-form tag such as "medium"

    def __post_init__(self):
        if self.role not in ROLES:
            raise FamilyError(f"unknown role {self.role!r}")
        if self.group not in GROUPS:
            raise FamilyError(f"unknown group {self.group!r}")
        if (self.role == "endpoint-low") != (self.s == -1.0):
            raise FamilyError(f"endpoint-low must sit at s=-1 (got role {self.role}, s={self.s})")
        if (self.role == "endpoint-high") != (self.s == 1.0):
            raise FamilyError(f"endpoint-high must sit at s=+1 (got role {self.role}, s={self.s})")
        if self.role == "interpolation" and abs(self.s) > 1:
            raise FamilyError("interpolation regimes need |s| <= 1")
        if self.role.startswith("ood") and abs(self.s) <= 1:
            raise FamilyError("OOD regimes need |s| > 1")

    @property
    def name(self) -> str:
        return f"{self.group}_{self.role}_{self.lam:.6g}"


@dataclass(frozen=True)
class FamilySpec:
    """A one-dimensional physical family.

    ``lam_low``/``lam_high`` are fixed first; ``support`` regimes train the
    anchor, the endpoints train the experts, and ``evaluation`` holds
    ``{"lam": ..., "group": "eval" | "validation", "label": ...}`` entries.
    ``center`` switches on the piecewise coordinate when the two half-gaps
    around it differ.
    """

    family: str
    axis: str
    lam_low: float
    lam_high: float
    support: tuple
    evaluation: tuple = ()
    fixed: dict = field(default_factory=dict)
    grid: int = 32
    T: int = 20
    time: dict = field(default_factory=dict)
    center: float | None = None
    train_seeds: tuple = tuple(range(16))
    eval_seeds: tuple = tuple(range(1000, 1004))

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise FamilyError(f"unknown family {self.family!r}")
        if not self.lam_low < self.lam_high:
            if self.lam_low == self.lam_high:
                raise FamilyError("degenerate axis: lam_low == lam_high")
            raise FamilyError("lam_low must be below lam_high")
        object.__setattr__(self, "support", tuple(float(x) for x in self.support))
        object.__setattr__(self, "evaluation", tuple(dict(e) for e in self.evaluation))
        object.__setattr__(self, "train_seeds", tuple(int(x) for x in self.train_seeds))
        object.__setattr__(self, "eval_seeds", tuple(int(x) for x in self.eval_seeds))
        if self.family == "rdb":
            for lam in self.all_lambdas():
                if not lam > 1.0:
                    raise FamilyError(f"rdb inner height {lam} must exceed the outer height 1.0")
        if self.family in ("diffreact", "ns2d"):
            for lam in self.all_lambdas():
                if not lam > 0:
                    raise FamilyError(f"{self.axis} must be positive, got {lam}")

    def all_lambdas(self):
        return [self.lam_low, self.lam_high, *self.support, *(e["lam"] for e in self.evaluation)]

    @property
    def lam_mid(self) -> float:
        return 0.5 * (self.lam_low + self.lam_high)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["support"] = list(self.support)
        d["evaluation"] = [dict(e) for e in self.evaluation]
        d["train_seeds"] = list(self.train_seeds)
        d["eval_seeds"] = list(self.eval_seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FamilySpec":
        d = dict(d)
        for key in ("train_seeds", "eval_seeds"):
            if isinstance(d.get(key), dict):  # {"start": a, "count": n}
                d[key] = tuple(range(d[key]["start"], d[key]["start"] + d[key]["count"]))
        return cls(**d)

    def lam_at(self, alpha: float) -> float:
        """Inverse of the symmetric coordinate: lam_mid + alpha * half-gap."""
        return self.lam_mid + alpha * 0.5 * (self.lam_high - self.lam_low)

    def tasks(self, samples_per_regime: int | None = None) -> list[RegimeTask]:
        """Endpoint, support and evaluation tasks in construction order."""
        tr = self.train_seeds if samples_per_regime is None else tuple(range(samples_per_regime))
        ev = self.eval_seeds if samples_per_regime is None else tuple(range(1000, 1000 + samples_per_regime))
        out = [RegimeTask(self.lam_low, "endpoint-low", -1.0, tr, "train"),
               RegimeTask(self.lam_high, "endpoint-high", 1.0, tr, "train")]
        for lam in self.support:
            s = normalize_coordinate(lam, self)
            if s in (-1.0, 1.0):
                raise FamilyError("support regimes must differ from the endpoints")
            out.append(RegimeTask(lam, "support", s, tr, "train"))
        for e in self.evaluation:
            lam = float(e["lam"])
            s = normalize_coordinate(lam, self)
            out.append(RegimeTask(lam, role_for(s), s, ev, e.get("group", "eval"), e.get("label", "")))
        names = [t.name for t in out]
        if len(set(names)) != len(names):
            raise FamilyError("duplicate regimes in family spec")
        return out


def role_for(s: float) -> str:
    if s == -1.0:
        return "endpoint-low"
    if s == 1.0:
        return "endpoint-high"
    if abs(s) <= 1.0:
        return "interpolation"
    return "ood-low" if s < 0 else "ood-high"


def normalize_coordinate(lam: float, spec: FamilySpec) -> float:
    """Map a physical parameter to the axis on which the endpoints sit at -1 and +1.

    Symmetric axes use ``2 (lam - mid) / (high - low)``, written so both
    endpoints land on +-1 exactly. With an off-center ``spec.center`` each
    side is scaled by its own half-gap.
    """
    lo, hi = spec.lam_low, spec.lam_high
    if hi == lo:
        raise FamilyError("degenerate axis: lam_low == lam_high")
    c = spec.center
    if c is not None and (c - lo) != (hi - c):
        if lam >= c:
            return (lam - c) / (hi - c)
        return -(c - lam) / (c - lo)
    return ((lam - lo) - (hi - lam)) / (hi - lo)


def load_preset(name: str) -> dict:
    """Full experiment configuration shipped with the package."""
    text = resources.files("ccmlab.presets").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("ccmlab.presets").iterdir() if p.name.endswith(".json"))
