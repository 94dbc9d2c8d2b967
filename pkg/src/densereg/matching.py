"""Global correspondence selection across scored point pairs.

Scored pairs are filtered (overlap, similarity threshold), min-max
normalized in one global pass, reduced to mutual top-N partners, and then
pruned to a geometrically consistent subset: the principal eigenvector of
a pairwise compatibility matrix ranks candidates, and a greedy sweep with
one-to-one conflict suppression picks the final set. All steps are
deterministic; ties never depend on dict or insertion order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .alignment import AlignmentEstimate
from .geometry import wrap180
from .sampling import SamplePoint

__all__ = [
    "CandidateCorrespondence",
    "CorrespondenceSet",
    "select_candidates",
    "build_compatibility",
    "spectral_select",
    "match_candidates",
    "correspondences_to_tsv",
    "correspondences_from_tsv",
]

SIM_TAU_COARSE = 0.5
SIM_TAU_PRECISE = 0.0
MUTUAL_TOP_N = 4


@dataclass
class CandidateCorrespondence:
    latent: SamplePoint
    rolled: SamplePoint
    adjusted: SamplePoint
    estimate: AlignmentEstimate
    raw_similarity: float
    norm_similarity: float = 0.0


@dataclass
class CorrespondenceSet:
    candidates: list
    selected: list
    total_score: float
    eigenvector: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def selected_candidates(self) -> list:
        return [self.candidates[i] for i in self.selected]

    def control_points(self):
        """(latent, rolled) position arrays of the selected subset, using
        the alignment-adjusted latent positions."""
        sel = self.selected_candidates()
        src = np.array([[c.adjusted.x, c.adjusted.y] for c in sel], dtype=np.float64)
        dst = np.array([[c.rolled.x, c.rolled.y] for c in sel], dtype=np.float64)
        return src.reshape(-1, 2), dst.reshape(-1, 2)


def select_candidates(scored, tau: float, top_n: int = MUTUAL_TOP_N) -> list:
    """Filter scored pairs down to mutual top-N candidates.

    Pairs flagged insufficient-overlap are dropped before anything else and
    never participate in normalization. Survivors below tau (raw) are
    dropped next; the rest get min-max normalized similarities in a single
    global pass (a lone survivor, or a degenerate max == min, normalizes
    to 1.0). A pair is kept only if each endpoint ranks the other within
    its top N by normalized similarity, ties broken by partner id.
    Output is sorted by (latent id, rolled id).
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    alive = [c for c in scored if not c.estimate.insufficient_overlap]
    alive = [c for c in alive if c.raw_similarity >= tau]
    if not alive:
        return []
    raw = np.array([c.raw_similarity for c in alive], dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    norm = np.ones_like(raw) if hi - lo <= 0.0 else (raw - lo) / (hi - lo)
    alive = [replace(c, norm_similarity=float(s)) for c, s in zip(alive, norm)]
    alive.sort(key=lambda c: (c.latent.id, c.rolled.id))

    def top_partners(key_id, partner_id):
        best: dict[int, list] = {}
        for c in alive:
            best.setdefault(key_id(c), []).append(c)
        keep = set()
        for k, group in best.items():
            group.sort(key=lambda c: (-c.norm_similarity, partner_id(c)))
            for c in group[:top_n]:
                keep.add((c.latent.id, c.rolled.id))
        return keep

    by_latent = top_partners(lambda c: c.latent.id, lambda c: c.rolled.id)
    by_rolled = top_partners(lambda c: c.rolled.id, lambda c: c.latent.id)
    mutual = by_latent & by_rolled
    return [c for c in alive if (c.latent.id, c.rolled.id) in mutual]


def _candidate_rotation(c: CandidateCorrespondence) -> float:
    if c.rolled.direction is not None and c.adjusted.direction is not None:
        return float(wrap180(c.rolled.direction - c.adjusted.direction))
    return float(wrap180(c.estimate.da))


def build_compatibility(cands, sigma_d: float = 15.0, sigma_a: float = 15.0,
                        gate_d: float = 30.0, gate_a: float = 30.0) -> np.ndarray:
    """Pairwise geometric consistency matrix, diagonal = normalized
    similarity. Off-diagonal entries compare the preserved distance between
    the adjusted latent positions vs. the rolled positions, and the
    agreement of the two implied rotations; both are Gaussian-weighted and
    hard-gated. Candidates sharing a point are incompatible (entry 0)."""
    n = len(cands)
    m = np.zeros((n, n), dtype=np.float64)
    if n == 0:
        return m
    lat = np.array([[c.adjusted.x, c.adjusted.y] for c in cands], dtype=np.float64)
    rol = np.array([[c.rolled.x, c.rolled.y] for c in cands], dtype=np.float64)
    rot = np.array([_candidate_rotation(c) for c in cands], dtype=np.float64)
    lat_ids = np.array([c.latent.id for c in cands])
    rol_ids = np.array([c.rolled.id for c in cands])
    d_lat = np.linalg.norm(lat[:, None, :] - lat[None, :, :], axis=2)
    d_rol = np.linalg.norm(rol[:, None, :] - rol[None, :, :], axis=2)
    dd = np.abs(d_lat - d_rol)
    da = np.abs(wrap180(rot[:, None] - rot[None, :]))
    ok = (dd <= gate_d) & (da <= gate_a)
    ok &= (lat_ids[:, None] != lat_ids[None, :]) & (rol_ids[:, None] != rol_ids[None, :])
    m = np.where(ok, np.exp(-(dd / sigma_d) ** 2 - (da / sigma_a) ** 2), 0.0)
    np.fill_diagonal(m, [c.norm_similarity for c in cands])
    return m


def spectral_select(m: np.ndarray, ids, keep_fraction: float = 0.05,
                    max_iter: int = 200, tol: float = 1e-9):
    """Principal-eigenvector ranking with greedy one-to-one extraction.

    ids is one (latent_id, rolled_id) per row of m. Power iteration starts
    from the uniform positive vector; a zero product keeps the current
    iterate. Greedy extraction repeatedly takes the highest-scoring
    remaining candidate (first index on ties), zeroes everything sharing a
    point with it, and stops once the best remainder falls below
    keep_fraction of the initial maximum. Returns (selected_indices,
    total_score, eigenvector) with total_score = x' M x over the indicator
    of the selection.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("compatibility matrix must be square")
    n = m.shape[0]
    pairs = [(int(a), int(b)) for a, b in ids]
    if len(pairs) != n:
        raise ValueError("ids must supply one (latent, rolled) pair per row")
    if n == 0:
        return [], 0.0, np.zeros(0)
    u = np.full(n, 1.0 / np.sqrt(n))
    for _ in range(max_iter):
        v = m @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            break
        v = v / nv
        if np.linalg.norm(v - u) < tol:
            u = v
            break
        u = v
    work = u.copy()
    umax = work.max()
    selected: list[int] = []
    if umax > 0.0:
        floor = keep_fraction * umax
        lat_ids = np.array([p[0] for p in pairs])
        rol_ids = np.array([p[1] for p in pairs])
        while True:
            i = int(np.argmax(work))
            if work[i] <= 0.0 or work[i] < floor:
                break
            selected.append(i)
            clash = (lat_ids == lat_ids[i]) | (rol_ids == rol_ids[i])
            work[clash] = 0.0
    selected.sort()
    x = np.zeros(n)
    x[selected] = 1.0
    total = float(x @ m @ x)
    return selected, total, u


def match_candidates(scored, tau: float, top_n: int = MUTUAL_TOP_N,
                     sigma_d: float = 15.0, sigma_a: float = 15.0,
                     gate_d: float = 30.0, gate_a: float = 30.0) -> CorrespondenceSet:
    """Full selection chain: filter, normalize, mutual top-N, spectral."""
    cands = select_candidates(scored, tau, top_n)
    m = build_compatibility(cands, sigma_d, sigma_a, gate_d, gate_a)
    ids = [(c.latent.id, c.rolled.id) for c in cands]
    selected, total, u = spectral_select(m, ids)
    return CorrespondenceSet(cands, selected, total, u)


_TSV_HEADER = ("latent_id\trolled_id\tlatent_x\tlatent_y\tadjusted_x\tadjusted_y"
               "\trolled_x\trolled_y\traw_similarity\tnorm_similarity\tselected")


def correspondences_to_tsv(cset: CorrespondenceSet) -> str:
    rows = [_TSV_HEADER]
    chosen = set(cset.selected)
    for i, c in enumerate(cset.candidates):
        rows.append("\t".join([
            str(c.latent.id), str(c.rolled.id),
            repr(float(c.latent.x)), repr(float(c.latent.y)),
            repr(float(c.adjusted.x)), repr(float(c.adjusted.y)),
            repr(float(c.rolled.x)), repr(float(c.rolled.y)),
            repr(float(c.raw_similarity)), repr(float(c.norm_similarity)),
            "1" if i in chosen else "0",
        ]))
    return "\n".join(rows) + "\n"


def correspondences_from_tsv(text: str):
    """Parse rows back into plain dict records (id and coordinate fields);
    used for inspection and round-trip checks, not to rebuild full state."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _TSV_HEADER:
        raise ValueError("unrecognized correspondence table header")
    names = _TSV_HEADER.split("\t")
    out = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != len(names):
            raise ValueError("malformed correspondence row")
        rec = dict(zip(names, parts))
        out.append({
            "latent_id": int(rec["latent_id"]),
            "rolled_id": int(rec["rolled_id"]),
            "latent": (float(rec["latent_x"]), float(rec["latent_y"])),
            "adjusted": (float(rec["adjusted_x"]), float(rec["adjusted_y"])),
            "rolled": (float(rec["rolled_x"]), float(rec["rolled_y"])),
            "raw_similarity": float(rec["raw_similarity"]),
            "norm_similarity": float(rec["norm_similarity"]),
            "selected": rec["selected"] == "1",
        })
    return out
