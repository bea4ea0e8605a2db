"""Explicit 1D elastoplastic bar-chain solver.

Units are SI throughout (m, s, kg, N).  Element ``e`` joins nodes
``elements[e, 0]`` and ``elements[e, 1]``; for a plain chain that is
``(e, e + 1)``.  Element tension is positive.

The integrator is the explicit central-difference scheme in its usual
velocity-staggered form: the stored velocity is the half-step velocity
leading into the current configuration.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "IntegrationDiverged",
    "PartitionError",
    "MeshModel",
    "PlasticState",
    "SolverState",
    "LoadCase",
    "TimeSeriesRecord",
    "make_chain",
    "critical_dt",
    "internal_forces",
    "section_forces",
    "initial_state",
    "step",
    "run_full",
    "truncate_model",
    "run_replay",
]

DT_SAFETY_LIMIT = 0.9


class IntegrationDiverged(RuntimeError):
    def __init__(self, step_index: int, message: str = "non-finite solver state"):
        super().__init__(f"{message} at step {step_index}")
        self.step_index = step_index


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class MeshModel:
    """Lumped-mass bar network plus its FEMIN partition.

    ``replaced`` lists the node ids (in this model's own numbering) that a
    surrogate will stand in for.  ``boundary`` is derived: retained nodes
    sharing an element with a replaced node.  Truncated models keep
    ``boundary_dirs`` (+1 when the removed neighbour lies at larger x) and
    ``origin_ids`` (node ids of the parent model).
    """

    x0: np.ndarray
    masses: np.ndarray
    elements: np.ndarray
    stiffness: np.ndarray
    yield_force: np.ndarray
    hardening: np.ndarray
    replaced: tuple = ()
    boundary_override: Optional[tuple] = None
    boundary_dirs: Optional[tuple] = None
    origin_ids: Optional[tuple] = None

    def __post_init__(self):
        n = len(self.masses)
        if len(self.x0) != n:
            raise ValueError("x0 and masses differ in length")
        if np.any(self.masses <= 0):
            raise ValueError("nodal masses must be positive")
        if np.any(self.stiffness <= 0):
            raise ValueError("element stiffness must be positive")
        ne = len(self.elements)
        for name in ("stiffness", "yield_force", "hardening"):
            if len(getattr(self, name)) != ne:
                raise ValueError(f"{name} needs one entry per element")
        if ne and (self.elements.min() < 0 or self.elements.max() >= n):
            raise ValueError("element connectivity references unknown nodes")
        if any(r < 0 or r >= n for r in self.replaced):
            raise PartitionError("replaced node outside the mesh")

    @property
    def n_nodes(self) -> int:
        return len(self.masses)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def retained(self) -> tuple:
        rep = set(self.replaced)
        return tuple(i for i in range(self.n_nodes) if i not in rep)

    @property
    def boundary(self) -> tuple:
        if self.boundary_override is not None:
            return self.boundary_override
        rep = set(self.replaced)
        out = set()
        for i, j in self.elements:
            if (i in rep) != (j in rep):
                out.add(int(j) if i in rep else int(i))
        return tuple(sorted(out))

    def interface_elements(self) -> tuple:
        """One (element, direction) pair per boundary node.

        Direction is +1 when the replaced neighbour sits at larger x.
        """
        rep = set(self.replaced)
        pairs = []
        for b in self.boundary:
            hits = [
                e for e, (i, j) in enumerate(self.elements)
                if (i == b and j in rep) or (j == b and i in rep)
            ]
            if len(hits) != 1:
                raise PartitionError(
                    f"boundary node {b} must touch exactly one replaced element, found {len(hits)}"
                )
            e = hits[0]
            other = self.elements[e, 1] if self.elements[e, 0] == b else self.elements[e, 0]
            pairs.append((e, 1 if self.x0[other] > self.x0[b] else -1))
        return tuple(pairs)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x0, self.masses, self.elements, self.stiffness, self.yield_force, self.hardening):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(json.dumps([list(self.replaced), self.boundary_override, self.boundary_dirs]).encode())
        return h.hexdigest()[:16]


def make_chain(
    n_elements: int,
    length: float,
    stiffness,
    element_mass,
    yield_force,
    hardening,
    replaced: Sequence[int] = (),
    end_mass: float = 0.0,
) -> MeshModel:
    """Uniform-geometry chain with lumped masses (half an element per end).

    Per-element quantities may be scalars or arrays of length ``n_elements``.
    ``end_mass`` is an extra lumped mass on the last node.
    """
    ne = n_elements
    k = np.broadcast_to(np.asarray(stiffness, float), (ne,)).copy()
    me = np.broadcast_to(np.asarray(element_mass, float), (ne,)).copy()
    fy = np.broadcast_to(np.asarray(yield_force, float), (ne,)).copy()
    hh = np.broadcast_to(np.asarray(hardening, float), (ne,)).copy()
    masses = np.zeros(ne + 1)
    masses[:-1] += 0.5 * me
    masses[1:] += 0.5 * me
    masses[-1] += end_mass
    elements = np.stack([np.arange(ne), np.arange(1, ne + 1)], axis=1)
    return MeshModel(
        x0=np.arange(ne + 1) * float(length),
        masses=masses,
        elements=elements,
        stiffness=k,
        yield_force=fy,
        hardening=hh,
        replaced=tuple(int(r) for r in replaced),
    )


def critical_dt(model: MeshModel, ground_stiffness: Optional[np.ndarray] = None) -> float:
    """Element-by-element stability bound ``min 2/omega_e``.

    Each node's mass is shared evenly between the elements attached to it,
    so every element frequency bounds the global maximum frequency from above
    (for two isolated nodes this is exactly ``sqrt(k (1/m_i + 1/m_j))``).
    ``ground_stiffness`` adds per-node springs to ground, e.g. a contact
    penalty.
    """
    counts = np.zeros(model.n_nodes)
    np.add.at(counts, model.elements.ravel(), 1.0)
    g = np.zeros(model.n_nodes) if ground_stiffness is None else np.asarray(ground_stiffness, float)
    counts += g > 0
    share = model.masses / np.maximum(counts, 1.0)
    i, j = model.elements[:, 0], model.elements[:, 1]
    omegas = list(np.sqrt(model.stiffness * (1.0 / share[i] + 1.0 / share[j])))
    omegas += list(np.sqrt(g[g > 0] / share[g > 0]))
    if not omegas:
        return math.inf
    return 2.0 / max(omegas)


@dataclass
class PlasticState:
    offset: np.ndarray  # plastic elongation per element (m)
    flow: np.ndarray  # accumulated plastic flow per element (m)

    @classmethod
    def zeros(cls, n_elements: int) -> "PlasticState":
        return cls(np.zeros(n_elements), np.zeros(n_elements))

    def copy(self) -> "PlasticState":
        return PlasticState(self.offset.copy(), self.flow.copy())


def element_forces(model: MeshModel, d: np.ndarray, plastic: PlasticState):
    """Return-mapped element tensions and the updated plastic state."""
    i, j = model.elements[:, 0], model.elements[:, 1]
    k = model.stiffness
    trial = k * ((d[j] - d[i]) - plastic.offset)
    radius = model.yield_force + model.hardening * plastic.flow
    excess = np.abs(trial) - radius
    yielding = excess > 0
    if not yielding.any():
        return trial, plastic
    sign = np.sign(trial)
    dgamma = np.where(yielding, excess / (k + model.hardening), 0.0)
    offset = plastic.offset + sign * dgamma
    flow = plastic.flow + dgamma
    force = np.where(yielding, sign * (model.yield_force + model.hardening * flow), trial)
    return force, PlasticState(offset, flow)


def assemble(model: MeshModel, tension: np.ndarray) -> np.ndarray:
    f_int = np.zeros(model.n_nodes)
    np.add.at(f_int, model.elements[:, 0], -tension)
    np.add.at(f_int, model.elements[:, 1], tension)
    return f_int


def internal_forces(model: MeshModel, d: np.ndarray, plastic: PlasticState):
    """Nodal internal (resisting) forces and the updated plastic state."""
    tension, plastic = element_forces(model, d, plastic)
    return assemble(model, tension), plastic


def section_forces(model: MeshModel, tension: np.ndarray) -> np.ndarray:
    """Tension of each interface element, one value per boundary node."""
    return np.array([tension[e] for e, _ in model.interface_elements()], dtype=float)


@dataclass(frozen=True)
class LoadCase:
    """Boundary/initial conditions of one analog load case.

    ``kind`` is ``"BI"`` (free chain thrown at a rigid wall on the -x side of
    node 0) or ``"TCT"`` (node ``clamp_node`` fixed, node ``drive_node``
    follows ``amplitude * sin(2 pi frequency t)``).
    """

    kind: str
    v_init: float = 0.0
    wall_gap: float = 0.0
    penalty: float = 0.0
    frequency: float = 0.0
    amplitude: float = 0.0
    clamp_node: int = 0
    drive_node: int = -1
    p: tuple = ()

    def __post_init__(self):
        if self.kind == "BI":
            if not self.v_init < 0:
                raise ValueError("BI load case needs v_init < 0 (towards the wall)")
            if not self.penalty > 0:
                raise ValueError("BI load case needs a positive penalty stiffness")
        elif self.kind == "TCT":
            if not self.frequency > 0:
                raise ValueError("TCT load case needs a positive frequency")
        else:
            raise ValueError(f"unknown load case kind {self.kind!r}")

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "v_init": self.v_init,
            "wall_gap": self.wall_gap,
            "penalty": self.penalty,
            "frequency": self.frequency,
            "amplitude": self.amplitude,
            "clamp_node": self.clamp_node,
            "drive_node": self.drive_node,
            "p": list(self.p),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LoadCase":
        data = dict(data)
        data["p"] = tuple(data.get("p", ()))
        return cls(**data)


@dataclass
class SolverState:
    t: int
    d: np.ndarray
    v: np.ndarray
    a: np.ndarray
    plastic: PlasticState
    dt: float

    def copy(self) -> "SolverState":
        return SolverState(self.t, self.d.copy(), self.v.copy(), self.a.copy(), self.plastic.copy(), self.dt)


@dataclass
class _Constraints:
    """Nodes whose motion is prescribed, in the numbering of the model being run."""

    clamp: Optional[int] = None
    drive: Optional[int] = None
    amplitude: float = 0.0
    omega: float = 0.0
    wall_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    wall_x: float = 0.0
    penalty: float = 0.0

    def drive_position(self, t: int, dt: float) -> float:
        return self.amplitude * math.sin(self.omega * t * dt)


def _constraints_for(model: MeshModel, load_case: LoadCase) -> _Constraints:
    ids = model.origin_ids if model.origin_ids is not None else tuple(range(model.n_nodes))
    local = {orig: k for k, orig in enumerate(ids)}
    n_parent = (max(ids) + 1) if ids else 0
    if load_case.kind == "BI":
        # the wall only sees nodes still present in this model
        wall_nodes = np.array([local[0]] if 0 in local else [], dtype=int)
        return _Constraints(
            wall_nodes=wall_nodes, wall_x=-load_case.wall_gap, penalty=load_case.penalty
        )
    clamp = load_case.clamp_node % n_parent if n_parent else None
    drive = load_case.drive_node % n_parent if n_parent else None
    return _Constraints(
        clamp=local.get(clamp),
        drive=local.get(drive),
        amplitude=load_case.amplitude,
        omega=2.0 * math.pi * load_case.frequency,
    )


def initial_state(model: MeshModel, load_case: LoadCase, dt: float) -> SolverState:
    n = model.n_nodes
    v = np.full(n, load_case.v_init) if load_case.kind == "BI" else np.zeros(n)
    return SolverState(0, np.zeros(n), v, np.zeros(n), PlasticState.zeros(model.n_elements), dt)


def _check_dt(model: MeshModel, dt: float, cons: _Constraints):
    ground = None
    if len(cons.wall_nodes):
        ground = np.zeros(model.n_nodes)
        ground[cons.wall_nodes] = cons.penalty
    bound = critical_dt(model, ground)
    if not (0 < dt <= DT_SAFETY_LIMIT * bound):
        raise ValueError(f"time step {dt:.3e} s exceeds {DT_SAFETY_LIMIT} x stability bound {bound:.3e} s")


def _advance(model, state, f_ext, cons: _Constraints):
    """One central-difference step; returns (new_state, element tensions at t)."""
    tension, plastic = element_forces(model, state.d, state.plastic)
    f_int = assemble(model, tension)
    f_contact = np.zeros(model.n_nodes)
    if len(cons.wall_nodes):
        gap = (model.x0[cons.wall_nodes] + state.d[cons.wall_nodes]) - cons.wall_x
        f_contact[cons.wall_nodes] = cons.penalty * np.maximum(-gap, 0.0)
    a = (f_ext + f_contact - f_int) / model.masses
    v = state.v + a * state.dt
    d = state.d + v * state.dt
    t1 = state.t + 1
    if cons.clamp is not None:
        d[cons.clamp] = 0.0
        v[cons.clamp] = 0.0
    if cons.drive is not None:
        new = cons.drive_position(t1, state.dt)
        v[cons.drive] = (new - state.d[cons.drive]) / state.dt
        d[cons.drive] = new
    if not (np.isfinite(d).all() and np.isfinite(v).all()):
        raise IntegrationDiverged(state.t)
    return SolverState(t1, d, v, a, plastic, state.dt), tension


def step(model: MeshModel, state: SolverState, f_ext: np.ndarray, load_case: Optional[LoadCase] = None) -> SolverState:
    """Advance ``state`` by one time step under external nodal forces ``f_ext``."""
    cons = _constraints_for(model, load_case) if load_case is not None else _Constraints()
    if not (np.isfinite(state.d).all() and np.isfinite(state.v).all()):
        raise IntegrationDiverged(state.t)
    return _advance(model, state, np.asarray(f_ext, float), cons)[0]


@dataclass
class TimeSeriesRecord:
    """Boundary history of one design, arrays shaped ``[T, n_B]``."""

    d_B: np.ndarray
    v_B: np.ndarray
    f_B: np.ndarray
    p: tuple
    dt: float
    load_case: Optional[LoadCase] = None
    mesh_hash: str = ""
    max_plastic_flow: float = 0.0

    @property
    def T(self) -> int:
        return len(self.d_B)

    @property
    def n_b(self) -> int:
        return self.d_B.shape[1]

    def observations(self) -> np.ndarray:
        """``[T, 3 n_B]`` rows laid out as (d, v, f)."""
        return np.concatenate([self.d_B, self.v_B, self.f_B], axis=1)

    def to_csv(self, path) -> None:
        nb = self.n_b
        header = ["t"] + [f"d_B{i}" for i in range(nb)] + [f"v_B{i}" for i in range(nb)] + [f"f_B{i}" for i in range(nb)]
        table = np.column_stack([np.arange(self.T), self.d_B, self.v_B, self.f_B]) if self.T else np.zeros((0, 1 + 3 * nb))
        np.savetxt(path, table, delimiter=",", header=",".join(header), comments="", fmt="%.17g")

    def sidecar(self) -> dict:
        return {
            "p": list(self.p),
            "dt": self.dt,
            "T": self.T,
            "n_B": self.n_b,
            "load_case": self.load_case.describe() if self.load_case else None,
            "mesh_hash": self.mesh_hash,
            "max_plastic_flow": self.max_plastic_flow,
        }

    @classmethod
    def from_files(cls, csv_path, meta: dict) -> "TimeSeriesRecord":
        nb = int(meta["n_B"])
        table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        if table.size == 0:
            table = np.zeros((0, 1 + 3 * nb))
        lc = LoadCase.from_dict(meta["load_case"]) if meta.get("load_case") else None
        return cls(
            d_B=table[:, 1:1 + nb].copy(),
            v_B=table[:, 1 + nb:1 + 2 * nb].copy(),
            f_B=table[:, 1 + 2 * nb:1 + 3 * nb].copy(),
            p=tuple(meta["p"]),
            dt=float(meta["dt"]),
            load_case=lc,
            mesh_hash=meta.get("mesh_hash", ""),
            max_plastic_flow=float(meta.get("max_plastic_flow", 0.0)),
        )


def run_full(model: MeshModel, load_case: LoadCase, T: int, dt: float, return_state: bool = False):
    """Run the complete mesh and record boundary kinematics and section forces.

    Row ``t`` holds the configuration at step ``t`` together with the section
    force acting during the update ``t -> t+1``.
    """
    cons = _constraints_for(model, load_case)
    _check_dt(model, dt, cons)
    bnodes = list(model.boundary)
    iface = [e for e, _ in model.interface_elements()]
    nb = len(bnodes)
    d_B, v_B, f_B = np.zeros((T, nb)), np.zeros((T, nb)), np.zeros((T, nb))
    state = initial_state(model, load_case, dt)
    f_ext = np.zeros(model.n_nodes)
    for t in range(T):
        new, tension = _advance(model, state, f_ext, cons)
        d_B[t] = state.d[bnodes]
        v_B[t] = state.v[bnodes]
        f_B[t] = tension[iface]
        state = new
    rec = TimeSeriesRecord(
        d_B, v_B, f_B, tuple(load_case.p), dt, load_case, model.digest(),
        float(state.plastic.flow.max()) if model.n_elements else 0.0,
    )
    return (rec, state) if return_state else rec


def truncate_model(model: MeshModel) -> MeshModel:
    """Drop replaced nodes and every element touching them.

    Boundary nodes keep their full lumped mass; the removed interface
    element is represented by an external force slot at each boundary node.
    """
    if not model.replaced:
        return model
    bnodes = model.boundary
    if not bnodes:
        raise PartitionError("replaced region has no boundary with the retained mesh")
    pairs = model.interface_elements()
    keep = model.retained
    local = {old: new for new, old in enumerate(keep)}
    rep = set(model.replaced)
    elem_keep = [e for e, (i, j) in enumerate(model.elements) if i not in rep and j not in rep]
    parent_ids = model.origin_ids if model.origin_ids is not None else tuple(range(model.n_nodes))
    elements = np.array([[local[i], local[j]] for i, j in model.elements[elem_keep]], dtype=int).reshape(-1, 2)
    return MeshModel(
        x0=model.x0[list(keep)].copy(),
        masses=model.masses[list(keep)].copy(),
        elements=elements,
        stiffness=model.stiffness[elem_keep].copy(),
        yield_force=model.yield_force[elem_keep].copy(),
        hardening=model.hardening[elem_keep].copy(),
        replaced=(),
        boundary_override=tuple(local[b] for b in bnodes),
        boundary_dirs=tuple(dirn for _, dirn in pairs),
        origin_ids=tuple(parent_ids[k] for k in keep),
    )


class BoundaryDriver:
    """Steps a truncated model one increment at a time under boundary forces.

    Used by replay and by the surrogate-coupled run, so both share one code
    path.
    """

    def __init__(self, truncated: MeshModel, load_case: LoadCase, dt: float):
        if truncated.boundary_dirs is None:
            raise PartitionError("model is not a truncated FEMIN model")
        self.model = truncated
        self.cons = _constraints_for(truncated, load_case)
        _check_dt(truncated, dt, self.cons)
        self.bnodes = list(truncated.boundary)
        self.dirs = np.asarray(truncated.boundary_dirs, float)
        self.state = initial_state(truncated, load_case, dt)

    @property
    def d_B(self) -> np.ndarray:
        return self.state.d[self.bnodes].copy()

    @property
    def v_B(self) -> np.ndarray:
        return self.state.v[self.bnodes].copy()

    def advance(self, f_B: np.ndarray) -> None:
        f_ext = np.zeros(self.model.n_nodes)
        f_ext[self.bnodes] = self.dirs * np.asarray(f_B, float)
        self.state = _advance(self.model, self.state, f_ext, self.cons)[0]


def run_replay(truncated: MeshModel, load_case: LoadCase, f_B: np.ndarray, T: int, dt: float):
    """Drive the truncated model with recorded section forces.

    Returns ``(d_B, v_B)`` arrays shaped ``[T, n_B]``.
    """
    f_B = np.asarray(f_B, float)
    if f_B.ndim == 1:
        f_B = f_B[:, None]
    if len(f_B) != T:
        raise ValueError(f"recorded force has {len(f_B)} steps, expected {T}")
    drv = BoundaryDriver(truncated, load_case, dt)
    nb = len(drv.bnodes)
    d_B, v_B = np.zeros((T, nb)), np.zeros((T, nb))
    for t in range(T):
        d_B[t] = drv.d_B
        v_B[t] = drv.v_B
        drv.advance(f_B[t])
    return d_B, v_B
