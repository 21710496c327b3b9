"""
Event Model

Kinematic types of one synthetic collision: four-vectors, tau candidates with
their detector images, and labeled events. See EVENT_MODEL.md.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple
import math

import numpy as np

TAU_MASS = 1.777
IMAGE_SIZE = 16
PT_OFFSET = 0.1


class UnphysicalError(ValueError):
    """Raised for four-momenta with E^2 < |p|^2 or negative pt/mass."""


@dataclass
class FourVector:
    """A momentum in collider coordinates (pt [GeV], eta, phi [rad], m [GeV])."""
    pt: float
    eta: float
    phi: float
    m: float = 0.0

    def __post_init__(self):
        if self.pt < 0:
            raise UnphysicalError(f"pt must be non-negative, got {self.pt}")
        if self.m < 0:
            raise UnphysicalError(f"mass must be non-negative, got {self.m}")
        if not (-math.pi < self.phi <= math.pi):
            raise UnphysicalError(f"phi must be in (-pi, pi], got {self.phi}")

    def to_cartesian(self) -> Tuple[float, float, float, float]:
        """(E, px, py, pz)."""
        px = self.pt * math.cos(self.phi)
        py = self.pt * math.sin(self.phi)
        pz = self.pt * math.sinh(self.eta)
        energy = math.sqrt(px * px + py * py + pz * pz + self.m * self.m)
        return energy, px, py, pz

    @classmethod
    def from_cartesian(cls, energy: float, px: float, py: float, pz: float) -> 'FourVector':
        p2 = px * px + py * py + pz * pz
        m2 = energy * energy - p2
        if m2 < -1e-9 * max(energy * energy, 1.0):
            raise UnphysicalError(f"E^2 < |p|^2: E={energy}, |p|={math.sqrt(p2)}")
        pt = math.hypot(px, py)
        if pt == 0:
            raise UnphysicalError("pseudorapidity undefined for a vector along the beam axis")
        phi = math.atan2(py, px)
        if phi == -math.pi:
            phi = math.pi
        return cls(pt=pt, eta=math.asinh(pz / pt), phi=phi, m=math.sqrt(max(m2, 0.0)))

    def to_array(self) -> np.ndarray:
        return np.array([self.pt, self.eta, self.phi, self.m])

    def to_dict(self) -> Dict[str, float]:
        return {"pt": self.pt, "eta": self.eta, "phi": self.phi, "m": self.m}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'FourVector':
        return cls(pt=data["pt"], eta=data["eta"], phi=data["phi"], m=data.get("m", 0.0))


def wrap_phi(phi):
    """Map angles into (-pi, pi]."""
    wrapped = np.mod(np.asarray(phi) + np.pi, 2 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


def invariant_mass(vectors: Sequence[Sequence[float]]) -> float:
    """System mass of Cartesian four-momenta (E, px, py, pz)."""
    total = np.sum(np.asarray(vectors, dtype=np.float64).reshape(-1, 4), axis=0)
    m2 = total[0] ** 2 - total[1] ** 2 - total[2] ** 2 - total[3] ** 2
    if m2 < -1e-9 * max(total[0] ** 2, 1.0):
        raise UnphysicalError(f"Negative squared system mass {m2}")
    return math.sqrt(max(m2, 0.0))


def normalize_pt(pt):
    """pt -> log(0.1 + pt)."""
    values = np.asarray(pt, dtype=np.float64)
    if np.any(values < 0):
        raise UnphysicalError(f"pt must be non-negative for normalization, got min {values.min()}")
    out = np.log(PT_OFFSET + values)
    return float(out) if out.ndim == 0 else out


def denormalize_pt(x):
    out = np.exp(np.asarray(x, dtype=np.float64)) - PT_OFFSET
    return float(out) if out.ndim == 0 else out


@dataclass
class TauCandidate:
    """Reconstructed tau jet, its tracker/EM/hadronic images and the true tau direction."""
    jet: FourVector
    images: np.ndarray  # (3, 16, 16): tracker pT, EM ET, hadronic ET
    truth: Tuple[float, float, float]  # (pt, eta, phi)
    decay_mode: int = 0
    visible_pt: float = 0.0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"images must have shape (3, {IMAGE_SIZE}, {IMAGE_SIZE}), got {self.images.shape}")
        if np.any(self.images < 0):
            raise ValueError("image deposits must be non-negative")
        if self.truth[0] <= 0:
            raise UnphysicalError(f"truth pt must be positive, got {self.truth[0]}")

    def truth_vector(self) -> FourVector:
        return FourVector(pt=self.truth[0], eta=self.truth[1], phi=self.truth[2], m=TAU_MASS)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "jet": self.jet.to_dict(),
            "images": self.images.tolist(),
            "truth": list(self.truth),
            "decay_mode": self.decay_mode,
            "visible_pt": self.visible_pt,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TauCandidate':
        return cls(
            jet=FourVector.from_dict(data["jet"]),
            images=np.asarray(data["images"]),
            truth=tuple(data["truth"]),
            decay_mode=data.get("decay_mode", 0),
            visible_pt=data.get("visible_pt", 0.0),
        )


@dataclass
class Event:
    """One collision: H (label 1) or Z (label 0) decaying to two tau candidates."""
    label: int
    parent_mass: float
    taus: List[TauCandidate] = field(default_factory=list)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if len(self.taus) != 2:
            raise ValueError(f"an event has exactly two tau candidates, got {len(self.taus)}")
        if self.taus[0].jet.pt < self.taus[1].jet.pt:
            raise ValueError("tau candidates must be ordered by descending jet pt")

    def truth_mass(self) -> float:
        return invariant_mass([tau.truth_vector().to_cartesian() for tau in self.taus])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "parent_mass": self.parent_mass,
            "taus": [tau.to_dict() for tau in self.taus],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Event':
        return cls(
            label=data["label"],
            parent_mass=data["parent_mass"],
            taus=[TauCandidate.from_dict(t) for t in data["taus"]],
        )
