"""Molecules as (coordinates, atom types, bond table), the .mol3d text format,
and a seeded generator of small synthetic molecules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ELEMENTS: tuple[str, ...] = ("H", "C", "N", "O", "F", "S", "Cl", "P", "Br", "I")
ELEMENT_INDEX = {s: i for i, s in enumerate(ELEMENTS)}
BOND_ORDERS = (1, 2, 3, 4)  # 4 = aromatic; 0 ("none") is never stored


class Mol3DParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class MolValidationError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MolGraph:
    coords: np.ndarray  # (N, 3) Angstrom
    atom_types: np.ndarray  # (N,) indices into ELEMENTS
    bonds: tuple[tuple[int, int, int], ...] = ()
    labels: dict[str, float] = field(default_factory=dict)
    forces: np.ndarray | None = None  # (N, 3) eV/A

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64).reshape(-1, 3)
        coords.setflags(write=False)
        types = np.array(self.atom_types, dtype=np.int64).reshape(-1)
        types.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "atom_types", types)
        canon = []
        for i, j, order in self.bonds:
            i, j, order = int(i), int(j), int(order)
            canon.append((min(i, j), max(i, j), order))
        object.__setattr__(self, "bonds", tuple(sorted(canon)))
        if self.forces is not None:
            f = np.array(self.forces, dtype=np.float64).reshape(-1, 3)
            f.setflags(write=False)
            object.__setattr__(self, "forces", f)

    @property
    def n_atoms(self) -> int:
        return len(self.atom_types)

    def distances(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff ** 2).sum(-1))

    def bond_matrix(self) -> np.ndarray:
        """N x N integer matrix of bond orders (0 = no bond)."""
        m = np.zeros((self.n_atoms, self.n_atoms), dtype=np.int64)
        for i, j, order in self.bonds:
            m[i, j] = m[j, i] = order
        return m

    def with_coords(self, coords: np.ndarray) -> "MolGraph":
        return MolGraph(coords, self.atom_types, self.bonds, dict(self.labels), self.forces)

    def subgraph(self, keep: Sequence[int]) -> "MolGraph":
        """Atoms ``keep`` (in the given order) with the bonds among them, reindexed."""
        keep = [int(k) for k in keep]
        pos = {old: new for new, old in enumerate(keep)}
        bonds = [(pos[i], pos[j], o) for i, j, o in self.bonds if i in pos and j in pos]
        return MolGraph(self.coords[keep], self.atom_types[keep], tuple(bonds))

    def permuted(self, perm: Sequence[int]) -> "MolGraph":
        """Relabel atoms so that new atom ``perm[i]`` is old atom ``i``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        bonds = [(int(perm[i]), int(perm[j]), o) for i, j, o in self.bonds]
        forces = None if self.forces is None else self.forces[inv]
        return MolGraph(self.coords[inv], self.atom_types[inv], tuple(bonds), dict(self.labels), forces)


@dataclass(frozen=True, eq=False)
class MaskPlan:
    """Masked atom indices plus the coordinate noise applied to unmasked atoms."""

    n_atoms: int
    masked: tuple[int, ...]
    noise: np.ndarray  # (N, 3), zero rows at masked indices
    seed: int = 0

    def __post_init__(self):
        masked = tuple(sorted(int(i) for i in self.masked))
        if len(set(masked)) != len(masked) or any(not 0 <= i < self.n_atoms for i in masked):
            raise ValueError(f"masked indices {masked} invalid for {self.n_atoms} atoms")
        if not 1 <= len(masked) <= self.n_atoms - 1:
            raise ValueError("need 1 <= |masked| <= N-1")
        noise = np.array(self.noise, dtype=np.float64).reshape(self.n_atoms, 3)
        if not np.all(np.isfinite(noise)):
            raise ValueError("non-finite coordinate noise")
        noise[list(masked)] = 0.0
        noise.setflags(write=False)
        object.__setattr__(self, "masked", masked)
        object.__setattr__(self, "noise", noise)

    @property
    def unmasked(self) -> tuple[int, ...]:
        m = set(self.masked)
        return tuple(i for i in range(self.n_atoms) if i not in m)


def element_index(symbol: str) -> int:
    try:
        return ELEMENT_INDEX[symbol]
    except KeyError:
        raise VocabularyError(f"unknown element symbol {symbol!r}") from None


def validate(g: MolGraph) -> list[str]:
    """Return the list of invariant violations (empty means valid)."""
    out: list[str] = []
    n = g.n_atoms
    if n < 1:
        out.append("empty molecule")
    if g.coords.shape != (n, 3):
        out.append(f"coords shape {g.coords.shape} != ({n}, 3)")
        return out
    if np.any((g.atom_types < 0) | (g.atom_types >= len(ELEMENTS))):
        out.append("atom type outside vocabulary")
    if not np.all(np.isfinite(g.coords)):
        out.append("non-finite coordinate")
    seen = set()
    for i, j, order in g.bonds:
        if i == j:
            out.append(f"self-bond at atom {i}")
        if not (0 <= i < n and 0 <= j < n):
            out.append(f"bond ({i}, {j}) out of range")
        if order not in BOND_ORDERS:
            out.append(f"bond ({i}, {j}) has invalid order {order}")
        key = (min(i, j), max(i, j))
        if key in seen:
            out.append(f"duplicate bond {key}")
        seen.add(key)
    if n > 1 and np.all(np.isfinite(g.coords)):
        d = g.distances()
        iu = np.triu_indices(n, 1)
        zero = np.argwhere(d[iu] <= 0.0)
        for z in zero[:, 0]:
            out.append(f"zero distance between atoms {iu[0][z]} and {iu[1][z]}")
    if g.forces is not None and g.forces.shape != (n, 3):
        out.append("forces shape mismatch")
    return out


def check(g: MolGraph) -> MolGraph:
    problems = validate(g)
    if problems:
        raise MolValidationError("; ".join(problems))
    return g


# .mol3d -------------------------------------------------------------------

def _float(tok: str, lineno: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise Mol3DParseError(lineno, f"bad number {tok!r}") from None
    if not math.isfinite(v):
        raise Mol3DParseError(lineno, f"non-finite number {tok!r}")
    return v


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise Mol3DParseError(lineno, f"bad integer {tok!r}") from None


def parse_mol3d(text: str) -> list[MolGraph]:
    mols: list[MolGraph] = []
    rec: dict | None = None

    def finish(lineno: int):
        nonlocal rec
        if rec is None:
            return
        n = rec["natoms"]
        if n is None:
            raise Mol3DParseError(lineno, "record without natoms line")
        if len(rec["atoms"]) != n:
            raise Mol3DParseError(lineno, f"expected {n} atoms, found {len(rec['atoms'])}")
        seen = set()
        for i, j, order, ln in rec["bonds"]:
            if not (0 <= i < n and 0 <= j < n):
                raise MolValidationError(f"line {ln}: bond index out of range for {n} atoms")
            if i == j:
                raise MolValidationError(f"line {ln}: self-bond at atom {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise MolValidationError(f"line {ln}: duplicate bond {key}")
            seen.add(key)
        forces = None
        if rec["forces"]:
            if len(rec["forces"]) != n or sorted(rec["forces"]) != list(range(n)):
                raise Mol3DParseError(lineno, "force lines must cover every atom exactly once")
            forces = np.array([rec["forces"][i] for i in range(n)])
        g = MolGraph(
            np.array([a[1] for a in rec["atoms"]]).reshape(-1, 3),
            np.array([a[0] for a in rec["atoms"]], dtype=np.int64),
            tuple((i, j, o) for i, j, o, _ in rec["bonds"]),
            rec["labels"],
            forces,
        )
        problems = validate(g)
        if problems:
            raise MolValidationError(f"record ending at line {lineno}: " + "; ".join(problems))
        mols.append(g)
        rec = None

    lines = text.splitlines()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            finish(lineno)
            continue
        tok = line.split()
        key = tok[0]
        if key == "#mol3d":
            finish(lineno)
            if len(tok) != 2:
                raise Mol3DParseError(lineno, "header must be '#mol3d <index>'")
            _int(tok[1], lineno)
            rec = {"natoms": None, "atoms": [], "bonds": [], "labels": {}, "forces": {}}
            continue
        if rec is None:
            raise Mol3DParseError(lineno, f"{key!r} outside a record")
        if key == "natoms" and len(tok) == 2:
            n = _int(tok[1], lineno)
            if n < 1:
                raise Mol3DParseError(lineno, "natoms must be >= 1")
            rec["natoms"] = n
        elif key == "atom" and len(tok) == 5:
            sym = tok[1]
            try:
                t = element_index(sym)
            except VocabularyError as e:
                raise VocabularyError(f"line {lineno}: {e}") from None
            rec["atoms"].append((t, [_float(x, lineno) for x in tok[2:5]]))
        elif key == "bond" and len(tok) == 4:
            i, j, order = (_int(x, lineno) for x in tok[1:4])
            if order not in BOND_ORDERS:
                raise Mol3DParseError(lineno, f"bond order {order} not in {BOND_ORDERS}")
            rec["bonds"].append((i, j, order, lineno))
        elif key == "label" and len(tok) == 3:
            rec["labels"][tok[1]] = _float(tok[2], lineno)
        elif key == "force" and len(tok) == 5:
            i = _int(tok[1], lineno)
            if i in rec["forces"]:
                raise Mol3DParseError(lineno, f"duplicate force line for atom {i}")
            rec["forces"][i] = [_float(x, lineno) for x in tok[2:5]]
        else:
            raise Mol3DParseError(lineno, f"malformed line {line!r}")
    finish(len(lines) + 1)
    return mols


def _num(v) -> str:
    return repr(float(v))


def write_mol3d(mols: Iterable[MolGraph]) -> str:
    out: list[str] = []
    for k, g in enumerate(mols):
        out.append(f"#mol3d {k}")
        out.append(f"natoms {g.n_atoms}")
        for t, (x, y, z) in zip(g.atom_types, g.coords):
            out.append(f"atom {ELEMENTS[t]} {_num(x)} {_num(y)} {_num(z)}")
        for i, j, order in g.bonds:
            out.append(f"bond {i} {j} {order}")
        for name, v in g.labels.items():
            out.append(f"label {name} {_num(v)}")
        if g.forces is not None:
            for i, (fx, fy, fz) in enumerate(g.forces):
                out.append(f"force {i} {_num(fx)} {_num(fy)} {_num(fz)}")
        out.append("")
    return "\n".join(out) + ("\n" if out else "")


def read_mol3d(path) -> list[MolGraph]:
    with open(path, encoding="utf-8") as fh:
        return parse_mol3d(fh.read())


def save_mol3d(path, mols: Iterable[MolGraph]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(write_mol3d(mols))


# synthetic corpus -----------------------------------------------------------

MIN_SEPARATION = 0.8
_HEAVY = (ELEMENT_INDEX["C"], ELEMENT_INDEX["N"], ELEMENT_INDEX["O"])
_MAX_ATTEMPTS = 1000


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _clear(pos: np.ndarray, placed: list[np.ndarray], skip: int | None = None) -> bool:
    for k, p in enumerate(placed):
        if k != skip and np.linalg.norm(pos - p) < MIN_SEPARATION:
            return False
    return True


def _ring(rng: np.random.Generator, n: int) -> list[np.ndarray]:
    # regular polygon with a small out-of-plane pucker; bond lengths stay in [1.0, 1.6]
    b = rng.uniform(1.15, 1.45)
    radius = b / (2 * math.sin(math.pi / n))
    basis = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    pts = []
    for k in range(n):
        ang = 2 * math.pi * k / n
        local = np.array([radius * math.cos(ang), radius * math.sin(ang), 0.08 * (-1) ** k])
        pts.append(basis @ local)
    return pts


def _chain(rng: np.random.Generator, n: int, attempts: list[int]) -> list[np.ndarray]:
    pts = [np.zeros(3)]
    prev_dir = _random_unit(rng)
    while len(pts) < n:
        attempts[0] += 1
        if attempts[0] > _MAX_ATTEMPTS:
            raise GenerationError("could not place chain atoms")
        b = rng.uniform(1.0, 1.6)
        # bend by roughly a tetrahedral/trigonal angle relative to the previous bond
        bend = math.radians(rng.uniform(50.0, 80.0))
        perp = np.cross(prev_dir, _random_unit(rng))
        perp /= np.linalg.norm(perp)
        d = math.cos(bend) * prev_dir + math.sin(bend) * perp
        cand = pts[-1] + b * d
        if _clear(cand, pts, skip=len(pts) - 1):
            pts.append(cand)
            prev_dir = d
    return pts


def generate_synthetic(seed: int, count: int, natoms: tuple[int, int] = (5, 12)) -> list[MolGraph]:
    """Chains and rings of C/N/O with hydrogen decorations, centered at the origin.

    Atom counts are drawn uniformly from the inclusive range ``natoms``.
    """
    lo, hi = natoms
    if not (3 <= lo <= hi <= 32):
        raise ValueError("natoms range must lie within [3, 32]")
    rng = np.random.default_rng(seed)
    mols = []
    for _ in range(count):
        mols.append(_one_molecule(rng, int(rng.integers(lo, hi + 1))))
    return mols


def _one_molecule(rng: np.random.Generator, n: int) -> MolGraph:
    attempts = [0]
    n_heavy = max(2, int(round(n * rng.uniform(0.45, 0.8))))
    n_heavy = min(n_heavy, n)
    ring = n_heavy >= 5 and rng.random() < 0.4
    if ring:
        pts = _ring(rng, n_heavy)
        bonds = []
        aromatic = rng.random() < 0.5
        for k in range(n_heavy):
            order = 4 if aromatic else int(rng.choice([1, 2], p=[0.7, 0.3]))
            bonds.append((k, (k + 1) % n_heavy, order))
    else:
        pts = _chain(rng, n_heavy, attempts)
        bonds = [(k, k + 1, int(rng.choice([1, 2, 3], p=[0.6, 0.3, 0.1]))) for k in range(n_heavy - 1)]
    types = [int(rng.choice(_HEAVY, p=[0.6, 0.25, 0.15])) for _ in range(n_heavy)]
    while len(pts) < n:
        attempts[0] += 1
        if attempts[0] > _MAX_ATTEMPTS:
            raise GenerationError(f"infeasible hydrogen placement after {_MAX_ATTEMPTS} attempts")
        host = int(rng.integers(n_heavy))
        cand = pts[host] + rng.uniform(1.0, 1.2) * _random_unit(rng)
        if _clear(cand, pts):
            bonds.append((host, len(pts), 1))
            pts.append(cand)
            types.append(ELEMENT_INDEX["H"])
    coords = np.array(pts)
    coords -= coords.mean(axis=0)
    g = MolGraph(coords, np.array(types), tuple(bonds))
    problems = validate(g)
    if problems:
        raise GenerationError("; ".join(problems))
    return g


def attach_count_labels(mols: Sequence[MolGraph], seed: int, name: str = "y") -> list[MolGraph]:
    """Label each molecule with a random linear function of its per-element atom counts."""
    rng = np.random.default_rng(seed)
    coef = rng.normal(size=len(ELEMENTS))
    out = []
    for g in mols:
        counts = np.bincount(g.atom_types, minlength=len(ELEMENTS))
        labels = dict(g.labels)
        labels[name] = float(counts @ coef)
        out.append(MolGraph(g.coords, g.atom_types, g.bonds, labels, g.forces))
    return out


def harmonic_energy(coords: np.ndarray, g: MolGraph, k_bond: float = 2.0, r0: float = 1.3,
                    k_rep: float = 0.1) -> tuple[float, np.ndarray]:
    """Toy potential: harmonic bonds plus a soft pair repulsion. Returns (E, forces)."""
    n = len(coords)
    energy = 0.0
    grad = np.zeros_like(coords)
    bonded = set()
    for i, j, _ in g.bonds:
        bonded.add((i, j))
        d = coords[i] - coords[j]
        r = np.linalg.norm(d)
        energy += k_bond * (r - r0) ** 2
        gr = 2 * k_bond * (r - r0) * d / r
        grad[i] += gr
        grad[j] -= gr
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) in bonded:
                continue
            d = coords[i] - coords[j]
            r2 = float(d @ d)
            energy += k_rep / r2
            gr = -2 * k_rep / r2 ** 2 * d
            grad[i] += gr
            grad[j] -= gr
    return energy, -grad


def attach_harmonic_labels(mols: Sequence[MolGraph], name: str = "energy") -> list[MolGraph]:
    out = []
    for g in mols:
        e, f = harmonic_energy(g.coords, g)
        labels = dict(g.labels)
        labels[name] = float(e)
        out.append(MolGraph(g.coords, g.atom_types, g.bonds, labels, f))
    return out
