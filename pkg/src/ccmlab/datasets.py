"""Seeded trajectory datasets per regime, and their on-disk layout.

Trajectory file (little-endian)::

    magic  8 bytes b"CCMTRAJ\\0"
    version u32
    dims    4 x u32  (T+1, H, W, C)
    data    float64, row-major
"""
from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .families import FamilySpec, RegimeTask
from .simulators import (DOMAIN, SimulationError, ns2d_forcing, sample_initial_condition,
                         simulate_diffreact, simulate_ns2d, simulate_rdb)

TRAJ_MAGIC = b"CCMTRAJ\0"
TRAJ_VERSION = 1

CHANNEL_NAMES = {"diffreact": ("u", "v"), "ns2d": ("vorticity",), "rdb": ("h",)}


class DatasetError(ValueError):
    pass


@dataclass
class TrajectoryDataset:
    task: RegimeTask
    family: str
    seeds: list
    trajectories: list  # (T+1, H, W, C) arrays, one per seed

    def __post_init__(self):
        shapes = {t.shape for t in self.trajectories}
        if len(shapes) > 1:
            raise DatasetError(f"trajectories in {self.task.name} have mixed shapes {shapes}")
        if len(self.seeds) != len(self.trajectories):
            raise DatasetError("one trajectory per seed")

    @property
    def channels(self):
        return CHANNEL_NAMES[self.family]

    def stacked(self) -> np.ndarray:
        return np.stack(self.trajectories)

    def manifest(self, spec: FamilySpec | None = None) -> dict:
        T1, H, W, C = self.trajectories[0].shape
        m = {"family": self.family, "regime": self.task.name, "lam": self.task.lam,
             "s": self.task.s, "role": self.task.role, "group": self.task.group,
             "label": self.task.label, "seeds": list(self.seeds), "grid": [H, W],
             "T": T1 - 1, "channels": list(self.channels)}
        if spec is not None:
            m["axis"] = spec.axis
            m["fixed"] = dict(spec.fixed)
            m["time"] = dict(spec.time)
        return m


def simulate_regime(spec: FamilySpec, lam: float, seed: int) -> np.ndarray:
    """Ground-truth trajectory ``(T+1, H, W, C)`` for one (regime, seed)."""
    tp = spec.time
    if spec.family == "diffreact":
        coeffs = {"D_u": 1e-3, "D_v": 5e-3, "k": 5e-3, **spec.fixed, spec.axis: lam}
        ic = sample_initial_condition("diffreact", seed, spec.grid)
        return simulate_diffreact(coeffs["D_u"], coeffs["D_v"], coeffs["k"], ic, spec.T,
                                  frame_dt=tp.get("frame_dt", 0.25), dt=tp.get("dt", 0.005))
    if spec.family == "ns2d":
        ic = sample_initial_condition("ns2d", seed, spec.grid)
        amp = spec.fixed.get("forcing_amplitude", 0.1)
        forcing = ns2d_forcing(spec.grid, DOMAIN["ns2d"], amp)
        return simulate_ns2d(lam, ic, spec.T, forcing=forcing,
                             frame_dt=tp.get("frame_dt", 0.5), dt=tp.get("dt", 0.01))
    return simulate_rdb(lam, spec.T, seed=seed, grid=spec.grid,
                        frame_dt=tp.get("frame_dt", 0.05), cfl=tp.get("cfl", 0.4))


def _run_one(args):
    spec, task, seed = args
    try:
        return simulate_regime(spec, task.lam, seed)
    except SimulationError as exc:
        raise SimulationError(f"regime {task.name} seed {seed}: {exc}") from exc


def build_family(spec: FamilySpec, samples_per_regime: int | None = None, jobs: int = 1,
                 tasks: list[RegimeTask] | None = None) -> dict[str, TrajectoryDataset]:
    """Simulate every regime of ``spec``; keyed by regime name, in task order."""
    tasks = spec.tasks(samples_per_regime) if tasks is None else tasks
    work = [(spec, t, s) for t in tasks for s in t.seeds]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        results = [_run_one(w) for w in work]
    out, i = {}, 0
    for t in tasks:
        n = len(t.seeds)
        out[t.name] = TrajectoryDataset(t, spec.family, list(t.seeds), results[i:i + n])
        i += n
    return out


# --------------------------------------------------------------------------
# on-disk format


def write_trajectory(path, traj: np.ndarray) -> None:
    traj = np.ascontiguousarray(traj, dtype="<f8")
    if traj.ndim != 4:
        raise DatasetError("trajectory must be (T+1, H, W, C)")
    with open(path, "wb") as f:
        f.write(TRAJ_MAGIC + struct.pack("<I", TRAJ_VERSION) + struct.pack("<4I", *traj.shape))
        f.write(traj.tobytes())


def read_trajectory(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != TRAJ_MAGIC:
        raise DatasetError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != TRAJ_VERSION:
        raise DatasetError(f"{path}: version {version}, expected {TRAJ_VERSION}")
    dims = struct.unpack_from("<4I", blob, 12)
    n = int(np.prod(dims))
    if len(blob) != 28 + 8 * n:
        raise DatasetError(f"{path}: truncated ({len(blob)} bytes for dims {dims})")
    return np.frombuffer(blob, dtype="<f8", offset=28).reshape(dims).astype(np.float64)


def write_dataset(ds: TrajectoryDataset, directory, spec: FamilySpec | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    for seed, traj in zip(ds.seeds, ds.trajectories):
        write_trajectory(os.path.join(directory, f"sample_{seed}.traj"), traj)
    m = ds.manifest(spec)
    m["task"] = {"lam": ds.task.lam, "role": ds.task.role, "s": ds.task.s,
                 "seeds": list(ds.task.seeds), "group": ds.task.group, "label": ds.task.label}
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(m, f, indent=1, sort_keys=True)


def read_dataset(directory) -> TrajectoryDataset:
    with open(os.path.join(directory, "manifest.json")) as f:
        m = json.load(f)
    t = m["task"]
    task = RegimeTask(t["lam"], t["role"], t["s"], tuple(t["seeds"]), t["group"], t["label"])
    trajs = [read_trajectory(os.path.join(directory, f"sample_{s}.traj")) for s in m["seeds"]]
    return TrajectoryDataset(task, m["family"], list(m["seeds"]), trajs)
