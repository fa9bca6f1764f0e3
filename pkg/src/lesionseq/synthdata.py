"""Procedural longitudinal phantom generator.

Each case is a registered (prior, current) volume pair with soft-edged
ellipsoidal lesions on a shared band-limited background texture. The prior
background is additionally warped by a small smooth displacement field to
mimic imperfect registration, and each timepoint gets independent Gaussian
noise. Scenarios control lesion dynamics and the paired BI-RADS labels:

  stable          same lesions at both visits, scores (3, 3)
  new-lesion      lesions only at the current visit, scores (2 or 3) -> 4
  growing-lesion  radii scaled up at the current visit, scores 3 -> 4 or 4 -> 5
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import lvol

SCENARIOS = ("stable", "new-lesion", "growing-lesion")
DEFAULT_MIX = {"stable": 0.34, "new-lesion": 0.33, "growing-lesion": 0.33}
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class PhantomSpec:
    extents: tuple[int, int, int] = (16, 32, 32)
    spacing: tuple[float, float, float] = (2.0, 0.7, 0.7)
    lesion_count: tuple[int, int] = (1, 2)
    lesion_radius: tuple[float, float] = (2.0, 4.5)      # voxels
    lesion_contrast: tuple[float, float] = (1.5, 3.0)
    texture_scale: float = 8.0                            # voxels per texture knot
    texture_amplitude: float = 0.6
    noise_sigma: float = 0.25
    growth_range: tuple[float, float] = (1.25, 1.6)
    warp_amplitude: float = 0.5                           # voxels
    growth_birads_factor: float = 1.2
    seed: int = 0

    def __post_init__(self):
        if self.lesion_radius[0] < 1.0:
            raise ValueError(f"lesion radii must be >= 1 voxel, got {self.lesion_radius}")
        if self.lesion_contrast[0] <= self.noise_sigma:
            raise ValueError("lesion contrast must exceed the noise sigma to be detectable")
        if self.growth_range[0] < 1.0:
            raise ValueError(f"growth factors must be >= 1, got {self.growth_range}")
        if min(self.extents) < 4:
            raise ValueError(f"extents too small: {self.extents}")


@dataclass
class CasePair:
    case_id: str
    patient_id: str
    x_prior: np.ndarray        # (1, D, H, W) float32
    x_curr: np.ndarray         # (1, D, H, W) float32
    mask_curr: np.ndarray      # (D, H, W) uint8
    birads_prior: int
    birads_curr: int
    scenario: str
    split: str = ""
    spacing: tuple[float, float, float] = (2.0, 0.7, 0.7)


@dataclass(frozen=True)
class _Lesion:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    contrast: float


def _trilinear_sample(vol: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample vol at fractional (3, ...) coordinates with clamped borders."""
    out_shape = coords.shape[1:]
    res = np.zeros(out_shape, dtype=np.float64)
    idx = []
    for ax in range(3):
        c = np.clip(coords[ax], 0.0, vol.shape[ax] - 1.0)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, vol.shape[ax] - 1)
        idx.append((lo, hi, c - lo))
    for dz in (0, 1):
        wz = idx[0][2] if dz else 1.0 - idx[0][2]
        for dy in (0, 1):
            wy = idx[1][2] if dy else 1.0 - idx[1][2]
            for dx in (0, 1):
                wx = idx[2][2] if dx else 1.0 - idx[2][2]
                res += wz * wy * wx * vol[idx[0][dz], idx[1][dy], idx[2][dx]]
    return res


def _grid_coords(extents: tuple[int, int, int]) -> np.ndarray:
    axes = [np.arange(e, dtype=np.float64) for e in extents]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=0)


def _value_noise(rng: np.random.Generator, extents, scale: float, amplitude: float) -> np.ndarray:
    """Band-limited texture: a coarse Gaussian knot grid upsampled trilinearly."""
    knots = tuple(max(2, int(np.ceil(e / scale)) + 1) for e in extents)
    grid = rng.normal(0.0, 1.0, size=knots)
    coords = _grid_coords(extents)
    for ax in range(3):
        coords[ax] *= (knots[ax] - 1) / max(extents[ax] - 1, 1)
    return amplitude * _trilinear_sample(grid, coords)


def _smooth_warp(rng: np.random.Generator, extents, amplitude: float) -> np.ndarray:
    """Per-axis smooth displacement field (3, D, H, W) in voxel units."""
    disp = np.stack([_value_noise(rng, extents, scale=max(extents) / 2.0, amplitude=amplitude)
                     for _ in range(3)], axis=0)
    return disp


def _lesion_field(lesions: list[_Lesion], extents, radius_scale: float = 1.0) -> np.ndarray:
    """Sum of Gaussian-falloff ellipsoids: contrast * exp(-rho^2)."""
    field_sum = np.zeros(extents, dtype=np.float64)
    coords = _grid_coords(extents)
    for les in lesions:
        rho2 = np.zeros(extents, dtype=np.float64)
        for ax in range(3):
            r = les.radii[ax] * radius_scale
            rho2 += ((coords[ax] - les.center[ax]) / r) ** 2
        field_sum += les.contrast * np.exp(-rho2)
    return field_sum


def _lesion_mask(lesions: list[_Lesion], extents, radius_scale: float = 1.0) -> np.ndarray:
    """Binary mask of voxels inside the nominal (rho <= 1) ellipsoids."""
    mask = np.zeros(extents, dtype=bool)
    coords = _grid_coords(extents)
    for les in lesions:
        rho2 = np.zeros(extents, dtype=np.float64)
        for ax in range(3):
            r = les.radii[ax] * radius_scale
            rho2 += ((coords[ax] - les.center[ax]) / r) ** 2
        mask |= rho2 <= 1.0
    return mask


def _sample_lesions(rng: np.random.Generator, spec: PhantomSpec) -> list[_Lesion]:
    lo, hi = spec.lesion_count
    count = int(rng.integers(lo, hi + 1))
    lesions = []
    for _ in range(count):
        radii = []
        base = rng.uniform(*spec.lesion_radius)
        for ax, extent in enumerate(spec.extents):
            # anisotropic voxels: shrink the radius along coarse axes so the
            # physical lesion stays roughly isotropic
            aspect = spec.spacing[1] / spec.spacing[ax] if spec.spacing[ax] else 1.0
            r = max(1.0, base * min(1.0, aspect) * rng.uniform(0.8, 1.2))
            max_grown = r * spec.growth_range[1]
            if 2 * max_grown + 2 > extent:
                raise ValueError(
                    f"lesion radius {r:.1f} (grown {max_grown:.1f}) does not fit axis "
                    f"{ax} of extent {extent}")
            radii.append(r)
        margin = [ri * spec.growth_range[1] + 1 for ri in radii]
        center = tuple(float(rng.uniform(m, e - 1 - m)) for m, e in zip(margin, spec.extents))
        lesions.append(_Lesion(center=center, radii=tuple(radii),
                               contrast=float(rng.uniform(*spec.lesion_contrast))))
    return lesions


def _assign_birads(rng: np.random.Generator, scenario: str) -> tuple[int, int]:
    if scenario == "stable":
        return 3, 3
    if scenario == "new-lesion":
        return int(rng.integers(2, 4)), 4
    prior = int(rng.integers(3, 5))
    return prior, prior + 1


def generate_case(spec: PhantomSpec, scenario: str, seed: int) -> CasePair:
    """Build one deterministic longitudinal pair for the given scenario seed."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}, expected one of {SCENARIOS}")
    rng = np.random.default_rng(seed)
    extents = spec.extents

    background = _value_noise(rng, extents, spec.texture_scale, spec.texture_amplitude)
    if spec.warp_amplitude > 0:
        warp = _smooth_warp(rng, extents, spec.warp_amplitude)
        bg_prior = _trilinear_sample(background, _grid_coords(extents) + warp)
    else:
        _ = _smooth_warp(rng, extents, 0.0)  # keep the RNG stream scenario-independent
        bg_prior = background.copy()

    lesions = _sample_lesions(rng, spec)
    growth = float(rng.uniform(*spec.growth_range))
    birads_prior, birads_curr = _assign_birads(rng, scenario)

    if scenario == "stable":
        field_curr = _lesion_field(lesions, extents)
        field_prior = field_curr
        mask = _lesion_mask(lesions, extents)
    elif scenario == "new-lesion":
        field_curr = _lesion_field(lesions, extents)
        field_prior = np.zeros(extents, dtype=np.float64)
        mask = _lesion_mask(lesions, extents)
    else:
        field_curr = _lesion_field(lesions, extents, radius_scale=growth)
        field_prior = _lesion_field(lesions, extents)
        mask = _lesion_mask(lesions, extents, radius_scale=growth)

    if spec.noise_sigma > 0:
        noise_curr = rng.normal(0.0, spec.noise_sigma, size=extents)
        noise_prior = rng.normal(0.0, spec.noise_sigma, size=extents)
    else:
        noise_curr = noise_prior = np.zeros(extents, dtype=np.float64)

    x_curr = (background + field_curr + noise_curr).astype(np.float32)[None]
    x_prior = (bg_prior + field_prior + noise_prior).astype(np.float32)[None]

    return CasePair(case_id=f"case_{seed:06d}", patient_id=f"patient_{seed:06d}",
                    x_prior=x_prior, x_curr=x_curr, mask_curr=mask.astype(np.uint8),
                    birads_prior=birads_prior, birads_curr=birads_curr,
                    scenario=scenario, spacing=spec.spacing)


def _scenario_plan(mix: dict[str, float], n_cases: int) -> list[str]:
    """Deterministic largest-remainder allocation of scenarios to case slots."""
    for s in mix:
        if s not in SCENARIOS:
            raise ValueError(f"unknown scenario {s!r} in mix")
    total = sum(mix.values())
    shares = {s: mix[s] / total * n_cases for s in mix}
    counts = {s: int(np.floor(v)) for s, v in shares.items()}
    leftover = n_cases - sum(counts.values())
    by_frac = sorted(mix, key=lambda s: (-(shares[s] - counts[s]), s))
    for s in by_frac[:leftover]:
        counts[s] += 1
    plan = []
    for s in sorted(counts):
        plan.extend([s] * counts[s])
    return plan


def _split_plan(rng: np.random.Generator, n: int, splits: dict[str, float]) -> list[str]:
    total = sum(splits.values())
    names = list(splits)
    counts = {s: int(np.floor(splits[s] / total * n)) for s in names}
    leftover = n - sum(counts.values())
    for s in names[:leftover]:
        counts[s] += 1
    labels = []
    for s in names:
        labels.extend([s] * counts[s])
    order = rng.permutation(n)
    return [labels[i] for i in order]


def generate_dataset(spec: PhantomSpec, out_dir, n_cases: int,
                     mix: dict[str, float] | None = None, seed: int = 0,
                     splits: dict[str, float] | None = None) -> str:
    """Write n_cases volume triplets plus a JSON-lines manifest; returns its path.

    Split assignment is by patient (one longitudinal pair per patient here),
    deterministic for a given spec/seed.
    """
    mix = dict(mix or DEFAULT_MIX)
    splits = dict(splits or {"train": 0.8, "val": 0.2})
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    scenario_of = _scenario_plan(mix, n_cases)
    rng.shuffle(scenario_of)
    split_of = _split_plan(rng, n_cases, splits)

    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    rows = []
    for i in range(n_cases):
        case = generate_case(spec, scenario_of[i], seed=seed * 1_000_000 + i)
        case.split = split_of[i]
        cid = f"case_{i:04d}"
        names = {"current": f"{cid}_t1.lvol", "prior": f"{cid}_t0.lvol",
                 "mask": f"{cid}_mask.lvol"}
        lvol.write_volume(os.path.join(out_dir, names["current"]), case.x_curr, spec.spacing)
        lvol.write_volume(os.path.join(out_dir, names["prior"]), case.x_prior, spec.spacing)
        lvol.write_volume(os.path.join(out_dir, names["mask"]), case.mask_curr, spec.spacing)
        rows.append({"patient_id": f"patient_{i:04d}", "case_id": cid,
                     "current": names["current"], "prior": names["prior"],
                     "mask": names["mask"], "birads_t": case.birads_curr,
                     "birads_prev": case.birads_prior, "split": case.split,
                     "scenario": case.scenario})
    with open(manifest_path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def load_case_arrays(manifest_path, row: dict) -> dict:
    """Load the three volumes referenced by a manifest row."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    curr, spacing = lvol.read_volume(os.path.join(base, row["current"]))
    prior, _ = lvol.read_volume(os.path.join(base, row["prior"]))
    mask, _ = lvol.read_volume(os.path.join(base, row["mask"]))
    return {"current": curr, "prior": prior, "mask": mask, "spacing": spacing,
            "birads_t": int(row["birads_t"]), "birads_prev": int(row["birads_prev"]),
            "case_id": row["case_id"], "patient_id": row["patient_id"]}


def manifest_digest(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
