#!/usr/bin/env python3
"""
Synthetic H/Z -> tau tau Event Generator

Generates labeled collision events with reconstructed tau jets, truth tau
momenta and 16x16 tracker/EM/hadronic images around each jet axis:

- parent mass: fixed for H, truncated Cauchy line shape for Z
- parent kinematics: truncated exponential pT, uniform rapidity
- isotropic two-body decay to taus, boosted to the lab frame
- hadronic tau decay: decay mode, visible momentum fraction, smeared jet
- images: charged constituents deposit in the tracker and hadronic
  calorimeter, neutral pions in the EM calorimeter, plus pixel noise

Event i depends only on (seed, i), so generation order does not matter.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Any, Dict, List, Optional, Tuple
import logging
import math

import numpy as np

from dataset_store import write_dataset
from event import (Event, FourVector, TauCandidate, denormalize_pt, normalize_pt,
                   wrap_phi, IMAGE_SIZE)

logger = logging.getLogger(__name__)


class GeneratorError(RuntimeError):
    """Raised when an event cannot be produced within the retry budget."""


@dataclass
class GeneratorConfig:
    """Physics and detector constants of the synthetic generator."""
    n_events: int = 10000
    seed: int = 0
    higgs_mass: float = 125.0
    z_mass: float = 91.19
    z_width: float = 2.5
    z_mass_range: Tuple[float, float] = (60.0, 120.0)
    tau_mass: float = 1.777
    parent_pt_mean: float = 40.0
    parent_pt_max: float = 250.0
    rapidity_max: float = 2.0
    decay_mode_probs: Tuple[float, ...] = (0.4, 0.4, 0.2)
    visible_beta: Tuple[Tuple[float, float], ...] = ((80.0, 20.0), (74.0, 26.0), (77.0, 23.0))
    em_fraction: Tuple[float, ...] = (0.05, 0.50, 0.10)
    charged_multiplicity: Tuple[int, ...] = (1, 1, 3)
    jet_pt_smear: float = 0.03
    angular_smear: float = 0.02
    jet_mass_mean: float = 1.0
    jet_mass_sigma: float = 0.3
    jet_mass_min: float = 0.1
    image_window: float = 0.8
    constituent_sigma: float = 0.1
    em_pixel_sigma: float = 1.0
    had_pixel_sigma: float = 2.0
    noise_sigma: float = 0.1
    split_fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    max_abs_eta: float = 4.0
    max_retries: int = 100

    def __post_init__(self):
        self.z_mass_range = tuple(self.z_mass_range)
        self.decay_mode_probs = tuple(self.decay_mode_probs)
        self.visible_beta = tuple(tuple(p) for p in self.visible_beta)
        self.em_fraction = tuple(self.em_fraction)
        self.charged_multiplicity = tuple(int(n) for n in self.charged_multiplicity)
        self.split_fractions = tuple(self.split_fractions)

        if self.n_events < 1:
            raise ValueError(f"n_events must be positive, got {self.n_events}")
        if abs(sum(self.decay_mode_probs) - 1.0) > 1e-9:
            raise ValueError(f"Decay mode probabilities must sum to 1, got {sum(self.decay_mode_probs)}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"Split fractions must sum to 1, got {sum(self.split_fractions)}")
        n_modes = len(self.decay_mode_probs)
        if not (len(self.visible_beta) == len(self.em_fraction) == len(self.charged_multiplicity) == n_modes):
            raise ValueError("Per-mode parameter lists must all have one entry per decay mode")
        sigmas = {
            "z_width": self.z_width, "jet_pt_smear": self.jet_pt_smear,
            "angular_smear": self.angular_smear, "jet_mass_sigma": self.jet_mass_sigma,
            "constituent_sigma": self.constituent_sigma, "em_pixel_sigma": self.em_pixel_sigma,
            "had_pixel_sigma": self.had_pixel_sigma, "noise_sigma": self.noise_sigma,
        }
        for name, value in sigmas.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        lo, hi = self.z_mass_range
        if not (0 < lo < hi):
            raise ValueError(f"Invalid Z mass range {self.z_mass_range}")
        if 2 * self.tau_mass >= lo:
            raise ValueError("Parent masses must exceed twice the tau mass")
        if any(a <= 0 or b <= 0 for a, b in self.visible_beta):
            raise ValueError(f"Beta parameters must be positive, got {self.visible_beta}")

    @property
    def pixel_size(self) -> float:
        return 2 * self.image_window / IMAGE_SIZE

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = [list(v) if isinstance(v, tuple) else v for v in value]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GeneratorConfig':
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown generator settings: {sorted(unknown)}")
        return cls(**data)


def event_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for event `index`."""
    return np.random.default_rng([seed, index])


def sample_parent_mass(rng: np.random.Generator, cfg: GeneratorConfig, label: int) -> float:
    if label == 1:
        return cfg.higgs_mass
    # inverse CDF of the Cauchy restricted to the mass window
    lo, hi = cfg.z_mass_range
    cdf = lambda x: 0.5 + math.atan((x - cfg.z_mass) / cfg.z_width) / math.pi
    u = rng.uniform(cdf(lo), cdf(hi))
    return cfg.z_mass + cfg.z_width * math.tan(math.pi * (u - 0.5))


def sample_truncated_exponential(rng: np.random.Generator, mean: float, upper: float) -> float:
    u = rng.uniform()
    return -mean * math.log1p(-u * (1.0 - math.exp(-upper / mean)))


def boost(momentum: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Lorentz-boost a Cartesian four-momentum (E, px, py, pz) by velocity beta."""
    b2 = float(beta @ beta)
    if b2 == 0.0:
        return momentum.copy()
    gamma = 1.0 / math.sqrt(1.0 - b2)
    energy, p = momentum[0], momentum[1:]
    bp = float(beta @ p)
    boosted_p = p + ((gamma - 1.0) * bp / b2 + gamma * energy) * beta
    return np.concatenate([[gamma * (energy + bp)], boosted_p])


def two_body_decay(rng: np.random.Generator, parent: np.ndarray, mass: float,
                   daughter_mass: float) -> Tuple[np.ndarray, np.ndarray]:
    """Isotropic decay to two equal-mass daughters, returned in the lab frame."""
    energy = mass / 2.0
    p = math.sqrt(max(energy * energy - daughter_mass * daughter_mass, 0.0))
    cos_theta = rng.uniform(-1.0, 1.0)
    sin_theta = math.sqrt(max(1.0 - cos_theta * cos_theta, 0.0))
    phi = rng.uniform(-math.pi, math.pi)
    direction = np.array([sin_theta * math.cos(phi), sin_theta * math.sin(phi), cos_theta])
    beta = parent[1:] / parent[0]
    first = boost(np.concatenate([[energy], p * direction]), beta)
    second = boost(np.concatenate([[energy], -p * direction]), beta)
    return first, second


def deposit_kernel(eta_px: float, phi_px: float, sigma_px: float) -> np.ndarray:
    """Gaussian spread around a position in pixel units, normalized over the grid."""
    centres = np.arange(IMAGE_SIZE, dtype=np.float64)
    weights_eta = np.exp(-0.5 * ((centres - eta_px) / sigma_px) ** 2)
    weights_phi = np.exp(-0.5 * ((centres - phi_px) / sigma_px) ** 2)
    kernel = np.outer(weights_eta, weights_phi)
    total = kernel.sum()
    if total <= 0.0:
        # far outside the window: collapse onto the nearest pixel
        kernel = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
        i = int(np.clip(round(eta_px), 0, IMAGE_SIZE - 1))
        j = int(np.clip(round(phi_px), 0, IMAGE_SIZE - 1))
        kernel[i, j] = 1.0
        return kernel
    return kernel / total


def _to_pixel(offset: float, cfg: GeneratorConfig) -> float:
    """Offset from the jet axis -> continuous pixel coordinate (pixel centres at integers)."""
    return (offset + cfg.image_window) / cfg.pixel_size - 0.5


def render_images(rng: np.random.Generator, cfg: GeneratorConfig, mode: int,
                  visible_pt: float) -> np.ndarray:
    """Tracker, EM and hadronic images (3, 16, 16) in GeV, eta-major."""
    images = np.zeros((3, IMAGE_SIZE, IMAGE_SIZE))
    n_charged = cfg.charged_multiplicity[mode]
    em_share = cfg.em_fraction[mode] * visible_pt
    charged_share = visible_pt - em_share

    parts = rng.dirichlet(np.ones(2 * n_charged)) * charged_share
    offsets = rng.normal(0.0, cfg.constituent_sigma, size=(n_charged, 2))
    for k in range(n_charged):
        eta_px = _to_pixel(offsets[k, 0], cfg)
        phi_px = _to_pixel(offsets[k, 1], cfg)
        i = int(np.clip(math.floor(eta_px + 0.5), 0, IMAGE_SIZE - 1))
        j = int(np.clip(math.floor(phi_px + 0.5), 0, IMAGE_SIZE - 1))
        images[0, i, j] += parts[k]
        images[2] += parts[n_charged + k] * deposit_kernel(eta_px, phi_px, cfg.had_pixel_sigma)

    neutral = rng.normal(0.0, cfg.constituent_sigma, size=2)
    images[1] += em_share * deposit_kernel(_to_pixel(neutral[0], cfg), _to_pixel(neutral[1], cfg),
                                           cfg.em_pixel_sigma)
    images += np.abs(rng.normal(0.0, cfg.noise_sigma, size=images.shape))
    return images


def _decay_tau(rng: np.random.Generator, cfg: GeneratorConfig,
               tau: FourVector) -> Optional[TauCandidate]:
    """Hadronic decay of one tau; None when the draw has to be repeated."""
    mode = int(rng.choice(len(cfg.decay_mode_probs), p=cfg.decay_mode_probs))
    a, b = cfg.visible_beta[mode]
    fraction = float(rng.beta(a, b))
    if not (0.0 < fraction < 1.0):
        return None
    visible_pt = fraction * tau.pt
    eta = tau.eta + rng.normal(0.0, cfg.angular_smear)
    phi = wrap_phi(tau.phi + rng.normal(0.0, cfg.angular_smear))
    jet_pt = visible_pt * rng.normal(1.0, cfg.jet_pt_smear)
    jet_mass = max(cfg.jet_mass_min, float(rng.normal(cfg.jet_mass_mean, cfg.jet_mass_sigma)))
    if jet_pt <= 0.0 or abs(eta) > cfg.max_abs_eta:
        return None
    images = render_images(rng, cfg, mode, visible_pt)
    return TauCandidate(
        jet=FourVector(pt=jet_pt, eta=eta, phi=phi, m=jet_mass),
        images=images,
        truth=(tau.pt, tau.eta, tau.phi),
        decay_mode=mode,
        visible_pt=visible_pt,
    )


def sample_event(rng: np.random.Generator, cfg: GeneratorConfig, label: int) -> Event:
    """Draw one event of the given label."""
    mass = sample_parent_mass(rng, cfg, label)
    for attempt in range(cfg.max_retries):
        pt = sample_truncated_exponential(rng, cfg.parent_pt_mean, cfg.parent_pt_max)
        rapidity = rng.uniform(-cfg.rapidity_max, cfg.rapidity_max)
        phi = rng.uniform(-math.pi, math.pi)
        mt = math.sqrt(mass * mass + pt * pt)
        parent = np.array([mt * math.cosh(rapidity), pt * math.cos(phi),
                           pt * math.sin(phi), mt * math.sinh(rapidity)])
        daughters = two_body_decay(rng, parent, mass, cfg.tau_mass)
        try:
            taus = [FourVector.from_cartesian(*d) for d in daughters]
        except ValueError:
            continue
        if any(abs(t.eta) > cfg.max_abs_eta or t.pt <= 0.0 for t in taus):
            continue
        candidates = [_decay_tau(rng, cfg, t) for t in taus]
        if any(c is None for c in candidates):
            continue
        candidates.sort(key=lambda c: c.jet.pt, reverse=True)
        return Event(label=label, parent_mass=mass, taus=candidates)
    raise GeneratorError(f"No valid event after {cfg.max_retries} attempts (label={label}, mass={mass:.3f})")


def event_label(index: int) -> int:
    """Alternating labels keep H and Z exactly balanced."""
    return 1 if index % 2 == 0 else 0


def generate_events(cfg: GeneratorConfig, start: int = 0, stop: Optional[int] = None) -> List[Event]:
    stop = cfg.n_events if stop is None else stop
    return [sample_event(event_rng(cfg.seed, i), cfg, event_label(i)) for i in range(start, stop)]


def generate_dataset(cfg: GeneratorConfig, out_dir: str, workers: int = 1):
    """Generate cfg.n_events events and write them as a dataset directory."""
    logger.info(f"Generating {cfg.n_events} events (seed={cfg.seed}) into {out_dir}")
    if workers > 1:
        chunk = math.ceil(cfg.n_events / workers)
        bounds = [(s, min(s + chunk, cfg.n_events)) for s in range(0, cfg.n_events, chunk)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: generate_events(cfg, *b), bounds))
        events = [e for part in parts for e in part]
    else:
        events = generate_events(cfg)
    n_higgs = sum(e.label for e in events)
    logger.info(f"Generated {len(events)} events: {n_higgs} H, {len(events) - n_higgs} Z")
    return write_dataset(events, cfg, out_dir)


def normalize_features(event: Event) -> Dict[str, np.ndarray]:
    """Model-ready arrays for one event.

    jets (2, 4) and truth (2, 3) carry log(0.1 + pt); eta, phi and m pass
    through; images stay in GeV.
    """
    jets = np.array([tau.jet.to_array() for tau in event.taus])
    truth = np.array([tau.truth for tau in event.taus], dtype=np.float64)
    jets[:, 0] = normalize_pt(jets[:, 0])
    truth[:, 0] = normalize_pt(truth[:, 0])
    return {
        "jets": jets,
        "images": np.stack([tau.images for tau in event.taus]),
        "truth": truth,
        "label": np.array(float(event.label)),
    }


def denormalize_kinematics(values: np.ndarray) -> np.ndarray:
    """Inverse of the pt normalization on the last axis (pt first)."""
    out = np.array(values, dtype=np.float64, copy=True)
    out[..., 0] = denormalize_pt(out[..., 0])
    return out
