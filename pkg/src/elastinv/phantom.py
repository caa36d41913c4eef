"""Synthetic lesion phantoms and the simulated measurement dataset."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, InvalidInputError, PlacementError, SingularSystemError
from .fem import LoadSpec, MeshModel, apply_load, forward_solve
from .metrics_io import atomic_write_text, dofs_to_grid, read_egrid, write_egrid
from .noise import MeasurementSet, NoiseSpec, realized_snr_db, sample_measurements, snr_to_sigma
from .seeding import derive_seed

log = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class PhantomSpec:
    rows: int = 32
    cols: int = 32
    lesion_count: tuple[int, int] = (1, 3)
    # ellipse geometry as fractions of the domain side
    center_range: tuple[float, float] = (0.15, 0.85)
    axis_range: tuple[float, float] = (0.08, 0.22)
    rotation_range: tuple[float, float] = (0.0, np.pi)
    background_range: tuple[float, float] = (0.1, 0.15)
    lesion_range: tuple[float, float] = (0.3, 0.8)
    seed: int = 0

    def __post_init__(self):
        for name in ("background_range", "lesion_range", "axis_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise DomainError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if self.lesion_range[0] / self.background_range[1] < 2:
            raise DomainError("lesion/background ratio must be at least 2")
        if self.lesion_range[1] / self.background_range[0] > 8:
            raise DomainError("lesion/background ratio must be at most 8")
        lo, hi = self.lesion_count
        if not 0 <= lo <= hi:
            raise DomainError(f"bad lesion_count range {self.lesion_count}")


def _ellipse_mask(spec: PhantomSpec, cy, cx, a, b, theta) -> np.ndarray:
    y = np.linspace(0.0, 1.0, spec.rows)[:, None]
    x = np.linspace(0.0, 1.0, spec.cols)[None, :]
    dx, dy = x - cx, y - cy
    c, s = np.cos(theta), np.sin(theta)
    return ((dx * c + dy * s) / a) ** 2 + ((-dx * s + dy * c) / b) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec, with_mask: bool = False):
    """Piecewise-constant elasticity image of shape (rows, cols)."""
    rng = np.random.default_rng(spec.seed)
    background = rng.uniform(*spec.background_range)
    x = np.full((spec.rows, spec.cols), background)
    occupied = np.zeros(x.shape, dtype=bool)
    n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    for k in range(n_lesions):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            a, b = rng.uniform(*spec.axis_range, size=2)
            theta = rng.uniform(*spec.rotation_range)
            cy, cx = rng.uniform(*spec.center_range, size=2)
            half_w = np.hypot(a * np.cos(theta), b * np.sin(theta))
            half_h = np.hypot(a * np.sin(theta), b * np.cos(theta))
            if cx - half_w < 0 or cx + half_w > 1 or cy - half_h < 0 or cy + half_h > 1:
                continue
            mask = _ellipse_mask(spec, cy, cx, a, b, theta)
            if mask.any() and not (mask & occupied).any():
                break
        else:
            raise PlacementError(
                f"could not place lesion {k + 1}/{n_lesions} after {MAX_PLACEMENT_ATTEMPTS} attempts")
        x[mask] = rng.uniform(*spec.lesion_range)
        occupied |= mask
    return (x, occupied) if with_mask else x


def lesion_mask(x, background_max: float = 0.15) -> np.ndarray:
    return np.asarray(x) > background_max


def ingest_mask(path, background: float, lesion: float) -> np.ndarray:
    if background <= 0 or lesion <= 0:
        raise DomainError("elasticity levels must be positive")
    grid = read_egrid(path)
    if grid.shape[2] != 1:
        raise FormatError(f"mask must have one channel, got {grid.shape[2]}")
    mask = grid[:, :, 0] >= 0.5
    return np.where(mask, lesion, background).astype(np.float64)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def simulate_item(mesh: MeshModel, x, load: LoadSpec, snr_db: float,
                  force_snr_db: float, seed: int) -> MeasurementSet:
    f_clean = apply_load(mesh, load)
    u = forward_solve(mesh, x, f_clean)
    spec = NoiseSpec(sigma_w=snr_to_sigma(mesh, f_clean, force_snr_db),
                     sigma_n=snr_to_sigma(mesh, u, snr_db), seed=seed)
    return sample_measurements(mesh, x, f_clean, spec)


def make_dataset(spec: PhantomSpec, count: int, mesh: MeshModel, load: LoadSpec = LoadSpec(),
                 snr_db: float = 35.0, force_snr_db: float = 40.0, out_dir=None,
                 skip_failures: bool = False):
    """Simulate ``count`` (phantom, measurement) pairs; optionally write them.

    Per-item seeds derive from ``spec.seed``. On disk the layout is
    ``truth/NNNN.egrid``, ``u_m/NNNN.egrid``, ``f/NNNN.egrid`` plus
    ``manifest.json``. With ``skip_failures`` an item that cannot be placed
    or solved is logged and left as ``None`` so later ids stay stable.
    """
    if (spec.rows, spec.cols) != (mesh.rows, mesh.cols):
        raise InvalidInputError("phantom and mesh sizes differ")
    items = []
    for i in range(count):
        pspec = PhantomSpec(**{**asdict(spec), "seed": derive_seed(spec.seed, f"phantom/{i}")})
        try:
            x = generate_phantom(pspec)
            meas = simulate_item(mesh, x, load, snr_db, force_snr_db,
                                 derive_seed(spec.seed, f"noise/{i}"))
        except (PlacementError, SingularSystemError) as exc:
            if not skip_failures:
                raise
            log.error("item %04d skipped: %s", i, exc)
            items.append(None)
            continue
        items.append((x, meas))
    if out_dir is not None:
        write_dataset(out_dir, mesh, items)
    return items


def write_dataset(out_dir, mesh: MeshModel, items) -> dict:
    out = Path(out_dir)
    records = []
    for i, item in enumerate(items):
        if item is None:
            continue
        x, meas = item
        name = f"{i:04d}"
        files = {}
        for kind, grid in [("truth", np.asarray(x).reshape(mesh.rows, mesh.cols)),
                           ("u_m", dofs_to_grid(meas.u_m, mesh.rows, mesh.cols)),
                           ("f", dofs_to_grid(meas.f, mesh.rows, mesh.cols))]:
            path = out / kind / f"{name}.egrid"
            write_egrid(path, grid)
            files[kind] = {"path": f"{kind}/{name}.egrid", "sha256": _sha256(path)}
        rec = {"id": name, "sigma_n": meas.noise.sigma_n, "sigma_w": meas.noise.sigma_w,
               "noise_seed": meas.noise.seed, "files": files}
        if meas.u_clean is not None and meas.noise.sigma_n > 0:
            rec["realized_snr_db"] = realized_snr_db(meas.u_clean, meas.u_m)
        records.append(rec)
    manifest = {"format": "elastinv-dataset", "version": 1,
                "mesh": {"rows": mesh.rows, "cols": mesh.cols,
                         "element_size": mesh.element_size, "poisson_ratio": mesh.poisson_ratio},
                "items": records}
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2))
    return manifest


def load_dataset(data_dir, verify: bool = False):
    """Yield ``(id, x_true, MeasurementSet)`` for every manifest entry."""
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    for rec in manifest["items"]:
        if verify:
            for kind, meta in rec["files"].items():
                if _sha256(root / meta["path"]) != meta["sha256"]:
                    raise FormatError(f"checksum mismatch for {meta['path']}")
        x = read_egrid(root / rec["files"]["truth"]["path"])[:, :, 0].astype(np.float64)
        u_m = read_egrid(root / rec["files"]["u_m"]["path"]).astype(np.float64).ravel()
        f = read_egrid(root / rec["files"]["f"]["path"]).astype(np.float64).ravel()
        noise = NoiseSpec(sigma_w=rec["sigma_w"], sigma_n=rec["sigma_n"], seed=rec["noise_seed"])
        yield rec["id"], x, MeasurementSet(f=f, u_m=u_m, noise=noise, ground_truth=x.ravel())


def mesh_from_manifest(data_dir) -> MeshModel:
    m = json.loads((Path(data_dir) / "manifest.json").read_text())["mesh"]
    return MeshModel(rows=m["rows"], cols=m["cols"], element_size=m["element_size"],
                     poisson_ratio=m["poisson_ratio"])
