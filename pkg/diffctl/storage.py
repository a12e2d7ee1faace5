"""CSV and JSON storage for diffctl runs.

Floats are written with repr(), the shortest decimal that round-trips, so
every tabular output carries full precision and identical runs produce
identical bytes.
"""

import csv
import hashlib
import json
import shutil
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .config import DATASET_DIR, MANIFEST_FILE, PARAMS_FILE, SNAPSHOTS_FILE, TRAJECTORY_FILE
from .models import MlpParams, RunManifest, SamplingStrategy, SysIdDataset, Trajectory


def ensure_dirs(output_dir: Path, overwrite: bool = False) -> Path:
    """
    Create a run directory.

    Raises:
        FileExistsError: the directory is non-empty and overwrite is False
    """
    output_dir = Path(output_dir)
    if output_dir.exists() and any(output_dir.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{output_dir} is not empty; pass --overwrite to replace it")
        shutil.rmtree(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    return output_dir


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


# ============ CSV ============

def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return Path(path)


def read_csv(path: Path) -> Tuple[List[str], np.ndarray]:
    """Header and a float matrix of the rows."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def save_trajectory(output_dir: Path, trajectory: Trajectory, name: str = TRAJECTORY_FILE) -> Path:
    """Columns t, x_0..x_{D-1}, u_0..u_{M-1}."""
    return write_csv(Path(output_dir) / name, trajectory.header(), trajectory.rows())


def load_trajectory(path: Path) -> Trajectory:
    header, table = read_csv(path)
    x_cols = [i for i, h in enumerate(header) if h.startswith("x_")]
    u_cols = [i for i, h in enumerate(header) if h.startswith("u_")]
    return Trajectory(table[:, 0], table[:, x_cols], table[:, u_cols])


def save_snapshots(output_dir: Path, snapshots: Sequence[Tuple[int, Trajectory]],
                   name: str = SNAPSHOTS_FILE) -> Path:
    """Stacked trajectories keyed by the iteration they were taken at."""
    if not snapshots:
        raise ValueError("no snapshots to write")
    header = ["iteration"] + snapshots[0][1].header()
    rows = [[iteration] + row for iteration, traj in snapshots for row in traj.rows()]
    return write_csv(Path(output_dir) / name, header, rows)


# ============ Parameters ============

def save_params(output_dir: Path, params: MlpParams, name: str = PARAMS_FILE) -> Path:
    path = Path(output_dir) / name
    with open(path, "w") as f:
        json.dump(params.to_dict(), f, indent=2)
    return path


def load_params(path: Path) -> MlpParams:
    with open(path) as f:
        return MlpParams.from_dict(json.load(f))


# ============ Datasets ============

def save_dataset(output_dir: Path, dataset: SysIdDataset, name: str = DATASET_DIR) -> Path:
    """A manifest plus one CSV per episode (t, states, controls)."""
    root = Path(output_dir) / name
    root.mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST_FILE, "w") as f:
        json.dump(dataset.to_dict(), f, indent=2)
    for k, (controls, states) in enumerate(dataset.episodes):
        save_trajectory(root, Trajectory(dataset.grid, states, controls), f"episode_{k:03d}.csv")
    return root


def load_dataset(root: Path) -> SysIdDataset:
    root = Path(root)
    with open(root / MANIFEST_FILE) as f:
        meta = json.load(f)
    episodes = []
    grid = np.array(meta["grid"], dtype=float)
    for k in range(meta["n_episodes"]):
        traj = load_trajectory(root / f"episode_{k:03d}.csv")
        episodes.append((traj.controls, traj.states))
    return SysIdDataset(
        episodes=episodes,
        grid=grid,
        noise_sigma=meta["noise_sigma"],
        strategy=SamplingStrategy(meta["strategy"]),
        seed=meta.get("seed"),
        system=meta.get("system", ""),
    )


# ============ Manifest ============

def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(output_dir: Path, manifest: RunManifest) -> Path:
    """Fill in the file list and checksums from the directory, then write the manifest."""
    output_dir = Path(output_dir)
    files = sorted(
        p.relative_to(output_dir).as_posix()
        for p in output_dir.rglob("*")
        if p.is_file() and p != output_dir / MANIFEST_FILE
    )
    manifest.files = sorted(files + [MANIFEST_FILE])
    manifest.checksums = {name: _sha256(output_dir / name) for name in files}
    path = output_dir / MANIFEST_FILE
    with open(path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=2)
    return path


def load_manifest(output_dir: Path) -> Dict[str, Any]:
    with open(Path(output_dir) / MANIFEST_FILE) as f:
        return json.load(f)
