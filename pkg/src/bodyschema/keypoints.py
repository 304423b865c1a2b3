"""Oracle keypoint detector, observation datasets and kinematic feature maps.

The oracle stands in for a trained keypoint network: it reports the projections
of ground-truth virtual joints, optionally corrupted by Gaussian noise.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import BehindCameraError, CameraModel, project_chain, project_ee
from .grad import GradientRecord
from .kinematics import KinematicChain, as_phi
from .scene import JointSampler


class SamplingError(RuntimeError):
    pass


def _offset_pattern(theta: np.ndarray, k: int) -> np.ndarray:
    # smooth but fast-varying function of the pose; unit amplitude
    a = 3.0 * theta[0] + 2.0 * theta[-1] + 2.5 * theta[len(theta) // 2] + 1.7 * k
    b = 2.0 * theta[1] - 3.0 * theta[-2] + 0.9 * k
    return np.array([np.cos(a), np.sin(b), 0.0])


@dataclass
class OracleDetector:
    truth: np.ndarray
    pixel_noise_sigma: float = 0.0
    depth_noise_sigma: float = 0.0
    rng_seed: int = 0
    off_object_px: float = 0.0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.truth = as_phi(self.truth)
        if self.pixel_noise_sigma < 0 or self.depth_noise_sigma < 0 or self.off_object_px < 0:
            raise ValueError("noise levels must be non-negative")
        self.rng = np.random.default_rng(self.rng_seed)

    @property
    def K(self) -> int:
        return self.truth.shape[0]

    def spawn(self, seed: int, **changes) -> OracleDetector:
        """Copy with a fresh stream; ``changes`` override fields."""
        params = dict(truth=self.truth, pixel_noise_sigma=self.pixel_noise_sigma,
                      depth_noise_sigma=self.depth_noise_sigma, off_object_px=self.off_object_px)
        params.update(changes)
        return OracleDetector(rng_seed=seed, **params)

    def bias(self, theta) -> np.ndarray:
        """Systematic pose-dependent pixel offset of an off-object detector."""
        if self.off_object_px == 0.0:
            return np.zeros((self.K, 3))
        theta = np.asarray(theta, dtype=float)
        return self.off_object_px * np.stack([_offset_pattern(theta, k) for k in range(self.K)])


def observe(det: OracleDetector, cam: CameraModel, chain: KinematicChain, theta) -> np.ndarray:
    """Noisy keypoints (K, 3) for joint angles ``theta``."""
    z = project_chain(cam, chain, theta, det.truth) + det.bias(theta)
    noise = det.rng.standard_normal(z.shape)
    z[:, :2] += det.pixel_noise_sigma * noise[:, :2]
    z[:, 2] += det.depth_noise_sigma * noise[:, 2]
    return z


@dataclass
class ObservationDataset:
    thetas: np.ndarray     # (N, dof)
    keypoints: np.ndarray  # (N, K, 3)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        kp = np.asarray(self.keypoints, dtype=float)
        if kp.ndim != 3:
            kp = kp.reshape(len(self.thetas), -1, 3)
        if kp.shape[0] != self.thetas.shape[0]:
            raise ValueError("thetas and keypoints disagree on record count")
        self.keypoints = kp
        if np.any(self.keypoints[..., 2] <= 0):
            raise ValueError("keypoint depths must be positive")

    def __len__(self) -> int:
        return self.thetas.shape[0]

    @property
    def K(self) -> int:
        return self.keypoints.shape[1]

    @property
    def dof(self) -> int:
        return self.thetas.shape[1]

    def subset(self, idx) -> ObservationDataset:
        return ObservationDataset(self.thetas[idx], self.keypoints[idx], dict(self.metadata))


def gen_dataset(det: OracleDetector, cam: CameraModel, chain: KinematicChain,
                n_configs: int, sampler: JointSampler, seed: int | None = None) -> ObservationDataset:
    """``n_configs`` in-view configurations with their observed keypoints.

    Configurations come from a generator seeded by ``seed`` (defaults to the
    detector seed); noise comes from the detector's own stream.
    """
    rng = np.random.default_rng(det.rng_seed if seed is None else seed)
    thetas, kps = [], []
    budget = max(1, n_configs) * sampler.max_oversampling
    draws = 0
    while len(thetas) < n_configs:
        if draws >= budget:
            raise SamplingError(
                f"only {len(thetas)}/{n_configs} in-view configurations after {draws} draws; "
                f"sampler range too wide: {sampler.describe()}")
        draws += 1
        theta = sampler.draw(rng)
        try:
            exact = project_chain(cam, chain, theta, det.truth)
            ee = project_ee(cam, chain, theta)
        except BehindCameraError:
            continue
        if not sampler.accepts(cam, np.vstack([exact, ee])):
            continue
        thetas.append(theta)
        kps.append(observe(det, cam, chain, theta))
    meta = {
        "seed": det.rng_seed if seed is None else seed,
        "pixel_noise_sigma": det.pixel_noise_sigma,
        "depth_noise_sigma": det.depth_noise_sigma,
        "off_object_px": det.off_object_px,
        "chain": chain.name,
        "draws": draws,
    }
    if not thetas:
        return ObservationDataset(np.zeros((0, chain.dof)), np.zeros((0, det.K, 3)), meta)
    return ObservationDataset(np.array(thetas), np.array(kps), meta)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dataset_header(dof: int, K: int) -> list[str]:
    cols = ["t"] + [f"theta_{i}" for i in range(dof)]
    for k in range(K):
        cols += [f"kp{k}_x", f"kp{k}_y", f"kp{k}_d"]
    return cols


def dataset_to_csv(ds: ObservationDataset) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps(ds.metadata, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(dataset_header(ds.dof, ds.K))
    for t in range(len(ds)):
        writer.writerow([str(t)] + [_fmt(v) for v in ds.thetas[t]]
                        + [_fmt(v) for v in ds.keypoints[t].reshape(-1)])
    return buf.getvalue()


def dataset_from_csv(text: str) -> ObservationDataset:
    lines = text.splitlines()
    meta: dict = {}
    body = []
    for line in lines:
        if line.startswith("#"):
            try:
                meta.update(json.loads(line[1:].strip()))
            except json.JSONDecodeError:
                pass
        elif line.strip():
            body.append(line)
    if not body:
        raise ValueError("dataset CSV has no header row")
    rows = list(csv.reader(body))
    header = rows[0]
    dof = sum(1 for c in header if c.startswith("theta_"))
    K = sum(1 for c in header if c.endswith("_d") and c.startswith("kp"))
    if header != dataset_header(dof, K):
        raise ValueError(f"unexpected dataset header: {header}")
    data = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(-1, dof + 3 * K)
    return ObservationDataset(data[:, :dof], data[:, dof:].reshape(-1, K, 3), meta)


def save_dataset(ds: ObservationDataset, path) -> None:
    Path(path).write_text(dataset_to_csv(ds), encoding="utf-8", newline="\n")


def load_dataset(path) -> ObservationDataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return dataset_from_csv(path.read_text(encoding="utf-8"))


@dataclass
class Heatmap:
    grid: np.ndarray  # (height, width)
    peak: np.ndarray  # (x, y, depth) the blob was generated from
    outside: bool = False

    @property
    def peak_pixel(self) -> tuple[int, int]:
        return rasterize(self.peak)


def rasterize(point) -> tuple[int, int]:
    """Nearest pixel (column, row) of a continuous image point."""
    return int(np.floor(point[0] + 0.5)), int(np.floor(point[1] + 0.5))


def kinematic_heatmap(center, sigma: float = 5.0, size: tuple[int, int] = (640, 480)) -> Heatmap:
    """Gaussian blob with unit peak on the pixel nearest to ``center``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    w, h = size
    cu, cv = rasterize(center)
    u = np.arange(w) - cu
    v = np.arange(h) - cv
    grid = np.exp(-(v[:, None] ** 2 + u[None, :] ** 2) / (2.0 * sigma**2))
    outside = not (0 <= cu < w and 0 <= cv < h)
    peak = np.zeros(3)
    c = np.asarray(center, dtype=float).reshape(-1)
    peak[: c.size] = c[:3]
    return Heatmap(grid, peak, outside)


def kinematic_feature_map(cam: CameraModel, chain: KinematicChain, theta,
                          sigma: float = 5.0) -> Heatmap:
    return kinematic_heatmap(project_ee(cam, chain, theta), sigma, (cam.width, cam.height))


def fuse_feature_maps(visual, kin) -> np.ndarray:
    a = visual.grid if isinstance(visual, Heatmap) else np.asarray(visual, dtype=float)
    b = kin.grid if isinstance(kin, Heatmap) else np.asarray(kin, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"feature map size mismatch: {a.shape} vs {b.shape}")
    return a + b


def kinematic_consistency_loss(keypoints, ee, weights=(1.0, 1.0, 1.0)) -> float:
    return kinematic_consistency_grad(keypoints, ee, weights).value


def kinematic_consistency_grad(keypoints, ee, weights=(1.0, 1.0, 1.0)) -> GradientRecord:
    """Sum over keypoints of weighted squared (x, y, depth) distance to the
    end-effector observation, with gradients w.r.t. both arguments."""
    z = np.asarray(keypoints, dtype=float).reshape(-1, 3)
    ee = np.asarray(ee, dtype=float).reshape(3)
    w = np.asarray(weights, dtype=float)
    r = z - ee
    g = 2.0 * w * r
    return GradientRecord(float(np.sum(w * r * r)), {"keypoints": g, "ee": -g.sum(axis=0)})
