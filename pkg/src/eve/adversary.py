"""Attack injection for exercising detection: falsified meter readings,
corrupted consensus messages, withheld messages and physics-consistent
(stealth) perturbations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import AdversaryError, NotANeighbor, UnknownSensor
from .grid.regions import CommunicationGraph, RegionMatrices

log = logging.getLogger(__name__)

MODES = ("measurement", "message", "silent", "stealth")


@dataclass(frozen=True)
class AttackSpec:
    attacker: int
    mode: str = "message"
    scale: float = 1.0
    targets: tuple[int, ...] = ()       # global variable indices (measurement / stealth)
    offsets: tuple[float, ...] = ()     # per-target offsets (measurement)
    edges: tuple[int, ...] = ()         # receivers to corrupt; empty means every neighbour
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise AdversaryError(f"unknown attack mode {self.mode!r}")
        if not self.scale >= 0:
            raise AdversaryError("attack magnitude must be non-negative")
        if self.offsets and len(self.offsets) != len(self.targets):
            raise AdversaryError("one offset per target sensor is required")

    @classmethod
    def from_dict(cls, obj: dict) -> AttackSpec:
        obj = dict(obj)
        for key in ("targets", "offsets", "edges"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)

    def to_dict(self) -> dict:
        return {"attacker": self.attacker, "mode": self.mode, "scale": self.scale,
                "targets": list(self.targets), "offsets": list(self.offsets),
                "edges": list(self.edges), "seed": self.seed}

    @classmethod
    def parse(cls, text: str) -> AttackSpec | None:
        """``none`` or ``mode:attacker[:key=value,...]``, e.g. ``message:3:scale=2,seed=7``."""
        text = text.strip()
        if text.lower() in ("", "none"):
            return None
        parts = text.split(":")
        if len(parts) < 2:
            raise AdversaryError(f"attack spec {text!r} needs mode:attacker")
        kw: dict = {"mode": parts[0], "attacker": int(parts[1])}
        if len(parts) > 2 and parts[2]:
            for item in parts[2].split(","):
                key, _, val = item.partition("=")
                if key in ("scale",):
                    kw[key] = float(val)
                elif key in ("seed",):
                    kw[key] = int(val)
                elif key in ("targets", "edges"):
                    kw[key] = tuple(int(v) for v in val.split("/") if v)
                elif key == "offsets":
                    kw[key] = tuple(float(v) for v in val.split("/") if v)
                else:
                    raise AdversaryError(f"unknown attack option {key!r}")
        return cls(**kw)


def perturb_measurements(z: np.ndarray, meas_idx, spec: AttackSpec) -> np.ndarray:
    """Add offsets to the readings of the targeted meters.

    ``z`` is (m, T) in the order of ``meas_idx`` (global variable indices).
    """
    z = np.array(z, dtype=float, copy=True)
    meas_idx = list(np.asarray(meas_idx).tolist())
    for j, tgt in enumerate(spec.targets):
        if tgt not in meas_idx:
            raise UnknownSensor(f"variable {tgt} is not metered by aggregator {spec.attacker}")
        off = spec.offsets[j] if spec.offsets else 1.0
        z[meas_idx.index(tgt)] += spec.scale * off
    return z


def message_noise(shape, spec: AttackSpec, k: int, sender: int, receiver: int) -> np.ndarray:
    """Seeded random perturbation with column norm 0.5 sqrt(slice length)."""
    shape = tuple(shape)
    n = shape[0]
    rng = np.random.default_rng([spec.seed, k, sender, receiver])
    a = rng.standard_normal(shape)
    if n == 0:
        return a
    norms = np.linalg.norm(a, axis=0, keepdims=True)
    return a / norms * (0.5 * np.sqrt(n) * spec.scale)


def perturb_message(msg: np.ndarray, spec: AttackSpec, k: int, receiver: int,
                    graph: CommunicationGraph | None = None) -> np.ndarray:
    """Corrupt the shared slice the attacker sends to ``receiver`` at round ``k``.

    A fresh direction is drawn every round; each column (interval) gets
    exactly the prescribed 2-norm.
    """
    if graph is not None and receiver not in graph.neighbors(spec.attacker):
        raise NotANeighbor(f"{receiver} is not a neighbour of aggregator {spec.attacker}")
    msg = np.asarray(msg, dtype=float)
    if spec.scale == 0:
        return msg.copy()
    return msg + message_noise(msg.shape, spec, k, spec.attacker, receiver)


def message_hook(spec: AttackSpec | None, graph: CommunicationGraph | None = None):
    """Adapter for the verification exchange: corrupts or withholds the
    attacker's outgoing messages and passes everything else through."""
    if spec is None or spec.mode not in ("message", "silent"):
        return None
    if graph is not None:
        for m in spec.edges:
            if m not in graph.neighbors(spec.attacker):
                raise NotANeighbor(f"{m} is not a neighbour of aggregator {spec.attacker}")

    def hook(sender, receiver, k, msg):
        if sender != spec.attacker or (spec.edges and receiver not in spec.edges):
            return msg
        if spec.mode == "silent":
            return None
        return perturb_message(msg, spec, k, receiver)

    return hook


def build_stealth_attack(rm: RegionMatrices, tol: float = 1e-10,
                         H_global: np.ndarray | None = None) -> np.ndarray | None:
    """Unit meter-space vector ``a`` with ``H S_A^T a = 0``, or None.

    With ``H_global`` the direction must also leave every physics row of the
    whole feeder unchanged, not just the rows the region can evaluate.
    Among null directions the one carrying most weight on real-power
    injection meters is returned, so the attack moves billed quantities.
    """
    A = rm.H @ rm.S_A.T if H_global is None else H_global @ rm.S.T @ rm.S_A.T
    m = A.shape[1]
    if m == 0:
        return None
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    rank = int(np.sum(s > tol * max(1.0, s[0] if len(s) else 0.0)))
    N = Vt[rank:].T
    if N.shape[1] == 0:
        return None
    p_pos = set(rm.var_idx[rm.p_local()].tolist())
    u = np.array([1.0 if g in p_pos else 0.0 for g in rm.meas_idx])
    a = N @ (N.T @ u)
    if np.linalg.norm(a) < 1e-9:
        a = N[:, 0]
    return a / np.linalg.norm(a)
