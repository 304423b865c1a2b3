"""Black-box keypoint dynamics baselines: a small MLP ``s[t+1] = g(s[t], u[t])``.

The network is trained with hand-written backpropagation on one-step
transitions collected along sinusoidal joint motions, then rolled out
autoregressively to compare long-horizon prediction against the kinematic model.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraModel, project_chain
from .control import MpcConfig, descend
from .grad import GradientRecord
from .keypoints import OracleDetector, observe
from .kinematics import KinematicChain

CHECKPOINT_FORMAT = "bodyschema-mlp"
CHECKPOINT_VERSION = 1


class TrainingDivergence(FloatingPointError):
    pass


# -- data -------------------------------------------------------------------

@dataclass
class DynDataset:
    thetas: np.ndarray     # (N+1, dof)
    actions: np.ndarray    # (N, dof)
    keypoints: np.ndarray  # (N+1, K, 3)
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def dof(self) -> int:
        return self.thetas.shape[1]

    @property
    def K(self) -> int:
        return self.keypoints.shape[1]


def gen_sine_data(chain: KinematicChain, cam: CameraModel, det: OracleDetector, n: int,
                  center, amplitude, freq_range=(0.05, 0.2), dt: float = 0.2,
                  seed: int = 0) -> DynDataset:
    """Transitions along per-joint sinusoids around ``center``.

    Frequencies (Hz) and phases are drawn per joint from ``seed``; joint angles
    are integrated as ``theta[t+1] = theta[t] + u[t]`` so the relation is exact.
    """
    rng = np.random.default_rng(seed)
    center = chain.check_theta(center)
    amp = np.broadcast_to(np.asarray(amplitude, dtype=float), center.shape)
    freq = rng.uniform(*freq_range, size=center.shape)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=center.shape)
    t = np.arange(n + 1)[:, None] * dt
    target = center + amp * np.sin(2.0 * np.pi * freq * t + phase)
    thetas = np.empty_like(target)
    actions = np.empty((n, chain.dof))
    thetas[0] = target[0]
    for i in range(n):
        actions[i] = target[i + 1] - thetas[i]
        thetas[i + 1] = thetas[i] + actions[i]
    kps = np.array([observe(det, cam, chain, th) for th in thetas])
    meta = {"seed": seed, "n": n, "dt": dt, "amplitude": amp.tolist(), "freq": freq.tolist(),
            "pixel_noise_sigma": det.pixel_noise_sigma, "off_object_px": det.off_object_px}
    return DynDataset(thetas, actions, kps, meta)


def dyn_dataset_to_csv(data: DynDataset) -> str:
    """One row per time step; the action columns of the final row are empty."""
    buf = io.StringIO()
    buf.write("# " + json.dumps(data.metadata, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    cols = ["t"] + [f"theta_{i}" for i in range(data.dof)] + [f"u_{i}" for i in range(data.dof)]
    for k in range(data.K):
        cols += [f"kp{k}_x", f"kp{k}_y", f"kp{k}_d"]
    w.writerow(cols)
    for t in range(len(data) + 1):
        u = [format(v, ".17g") for v in data.actions[t]] if t < len(data) else [""] * data.dof
        w.writerow([str(t)] + [format(v, ".17g") for v in data.thetas[t]] + u
                   + [format(v, ".17g") for v in data.keypoints[t].reshape(-1)])
    return buf.getvalue()


def dyn_dataset_from_csv(text: str) -> DynDataset:
    meta: dict = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            meta.update(json.loads(line[1:].strip()))
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(body))
    header, rows = rows[0], rows[1:]
    dof = sum(1 for c in header if c.startswith("theta_"))
    thetas = np.array([[float(v) for v in r[1:1 + dof]] for r in rows])
    actions = np.array([[float(v) for v in r[1 + dof:1 + 2 * dof]] for r in rows[:-1]])
    kps = np.array([[float(v) for v in r[1 + 2 * dof:]] for r in rows])
    return DynDataset(thetas, actions.reshape(-1, dof), kps.reshape(len(rows), -1, 3), meta)


def state_vector(theta, z, dims: int) -> np.ndarray:
    """Flatten ``[theta, z]`` keeping ``dims`` (2 or 3) keypoint components."""
    z = np.asarray(z, dtype=float)
    return np.concatenate([np.asarray(theta, dtype=float), z[..., :dims].reshape(-1)])


def transitions(data: DynDataset, dims: int) -> tuple[np.ndarray, np.ndarray]:
    """Inputs ``[s_t, u_t]`` and targets ``s_{t+1} - s_t``."""
    S = np.stack([state_vector(th, z, dims) for th, z in zip(data.thetas, data.keypoints)])
    X = np.hstack([S[:-1], data.actions])
    Y = S[1:] - S[:-1]
    return X, Y


# -- network ----------------------------------------------------------------

def _act(name: str):
    if name == "tanh":
        return np.tanh, lambda a: 1.0 - a * a
    if name == "relu":
        return lambda z: np.maximum(z, 0.0), lambda a: (a > 0).astype(float)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class MlpModel:
    sizes: list[int]
    weights: np.ndarray
    activation: str = "tanh"
    in_mean: np.ndarray | None = None
    in_std: np.ndarray | None = None
    out_mean: np.ndarray | None = None
    out_std: np.ndarray | None = None
    dims: int = 3

    def __post_init__(self):
        self.sizes = [int(s) for s in self.sizes]
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        n = sum((a + 1) * b for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (n,):
            raise ValueError(f"expected {n} weights for sizes {self.sizes}, got {self.weights.shape}")
        d_in, d_out = self.sizes[0], self.sizes[-1]
        self.in_mean = np.zeros(d_in) if self.in_mean is None else np.asarray(self.in_mean, float)
        self.in_std = np.ones(d_in) if self.in_std is None else np.asarray(self.in_std, float)
        self.out_mean = np.zeros(d_out) if self.out_mean is None else np.asarray(self.out_mean, float)
        self.out_std = np.ones(d_out) if self.out_std is None else np.asarray(self.out_std, float)
        for s in (self.in_std, self.out_std):
            if not (np.all(np.isfinite(s)) and np.all(s > 0)):
                raise ValueError("normalization std must be finite and positive")
        _act(self.activation)

    def layers(self, weights=None) -> list[tuple[np.ndarray, np.ndarray]]:
        w = self.weights if weights is None else weights
        out, i = [], 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            W = w[i:i + a * b].reshape(a, b)
            i += a * b
            out.append((W, w[i:i + b]))
            i += b
        return out

    def normalize(self, X):
        return (X - self.in_mean) / self.in_std

    def denormalize(self, Xn):
        return Xn * self.in_std + self.in_mean

    def forward(self, Xn, weights=None):
        """Normalized outputs and the activations needed for backprop."""
        f, _ = _act(self.activation)
        acts = [Xn]
        h = Xn
        layers = self.layers(weights)
        for W, b in layers[:-1]:
            h = f(h @ W + b)
            acts.append(h)
        W, b = layers[-1]
        return h @ W + b, acts

    def backward(self, dY, acts, weights=None):
        """Gradients w.r.t. the flat weights and the normalized inputs."""
        _, df = _act(self.activation)
        layers = self.layers(weights)
        grads = []
        g = dY
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            a = acts[li]
            grads.append((a.T @ g, g.sum(axis=0)))
            g = g @ W.T
            if li > 0:
                g = g * df(a)
        flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
        return flat, g

    def predict(self, X) -> np.ndarray:
        Yn, _ = self.forward(self.normalize(np.atleast_2d(X)))
        return Yn * self.out_std + self.out_mean

    def step(self, state, u) -> np.ndarray:
        """Next state from a single ``state`` and action ``u``."""
        x = np.concatenate([state, u])
        return state + self.predict(x)[0]


def init_weights(sizes, rng: np.random.Generator, zeros: bool = False) -> np.ndarray:
    parts = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        W = np.zeros((a, b)) if zeros else rng.normal(0.0, np.sqrt(1.0 / a), size=(a, b))
        parts += [W.ravel(), np.zeros(b)]
    return np.concatenate(parts)


def nmse(pred, target) -> float:
    """Mean over output features of MSE divided by the target variance."""
    var = np.var(target, axis=0)
    var = np.where(var > 1e-12, var, 1.0)
    return float(np.mean(np.mean((pred - target) ** 2, axis=0) / var))


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    train_nmse: list[float] = field(default_factory=list)
    test_nmse: list[float] = field(default_factory=list)


def _sgd_epoch(model, w, vel, Xn, Yn, order, batch, lr, momentum):
    for start in range(0, len(order), batch):
        idx = order[start:start + batch]
        out, acts = model.forward(Xn[idx], w)
        dY = 2.0 * (out - Yn[idx]) / (len(idx) * Yn.shape[1])
        g, _ = model.backward(dY, acts, w)
        vel = momentum * vel - lr * g
        w = w + vel
    return w, vel


def fit_mlp(X, Y, hidden=(64, 64), activation: str = "tanh", epochs: int = 2000,
            lr: float = 1e-3, momentum: float = 0.9, batch: int = 64, seed: int = 0,
            test_fraction: float = 0.2, zero_init: bool = False, normalize: bool = True,
            log_every: int = 1, dims: int = 3) -> tuple[MlpModel, TrainHistory]:
    """Mini-batch SGD with momentum on the mean squared error of normalized targets.

    The last ``test_fraction`` of the rows (a contiguous block) is held out.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n_train = int(round(len(X) * (1.0 - test_fraction)))
    Xtr, Ytr, Xte, Yte = X[:n_train], Y[:n_train], X[n_train:], Y[n_train:]
    rng = np.random.default_rng(seed)
    sizes = [X.shape[1], *hidden, Y.shape[1]]

    def stats(A):
        if not normalize:
            return np.zeros(A.shape[1]), np.ones(A.shape[1])
        s = A.std(axis=0)
        return A.mean(axis=0), np.where(s > 1e-12, s, 1.0)

    im, isd = stats(Xtr)
    om, osd = stats(Ytr)
    model = MlpModel(sizes, init_weights(sizes, rng, zero_init), activation, im, isd, om, osd, dims)
    Xn = model.normalize(Xtr)
    Yn = (Ytr - om) / osd
    w = model.weights.copy()
    vel = np.zeros_like(w)
    hist = TrainHistory()
    for epoch in range(epochs):
        with np.errstate(over="ignore", invalid="ignore"):
            w, vel = _sgd_epoch(model, w, vel, Xn, Yn, rng.permutation(n_train), batch, lr, momentum)
        if not np.all(np.isfinite(w)):
            raise TrainingDivergence(f"weights became non-finite in epoch {epoch}")
        if (epoch + 1) % log_every == 0 or epoch == epochs - 1:
            model.weights = w
            hist.epochs.append(epoch + 1)
            with np.errstate(over="ignore", invalid="ignore"):
                hist.train_nmse.append(nmse(model.predict(Xtr), Ytr))
                hist.test_nmse.append(nmse(model.predict(Xte), Yte) if len(Xte) else float("nan"))
    model.weights = w
    return model, hist


def train_dynamics(data: DynDataset, dims: int = 3, hidden=(64, 64), activation: str = "tanh",
                   epochs: int = 2000, lr: float = 1e-3, momentum: float = 0.9,
                   batch: int = 64, seed: int = 0, log_every: int = 10
                   ) -> tuple[MlpModel, TrainHistory]:
    X, Y = transitions(data, dims)
    return fit_mlp(X, Y, hidden, activation, epochs, lr, momentum, batch, seed,
                   log_every=log_every, dims=dims)


def held_out_nmse(model: MlpModel, data: DynDataset, test_fraction: float = 0.2) -> float:
    X, Y = transitions(data, model.dims)
    n_train = int(round(len(X) * (1.0 - test_fraction)))
    return nmse(model.predict(X[n_train:]), Y[n_train:])


# -- rollouts ---------------------------------------------------------------

@dataclass
class HorizonPrediction:
    states: np.ndarray  # (T'+1, state_dim), T' <= T
    truncated: bool


def predict_horizon(model: MlpModel, theta0, z0, u) -> HorizonPrediction:
    """Autoregressive rollout feeding each prediction back as the next input."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    s = state_vector(theta0, z0, model.dims)
    states = [s]
    for ut in u:
        s = model.step(s, ut)
        if not np.all(np.isfinite(s)):
            return HorizonPrediction(np.array(states), True)
        states.append(s)
    return HorizonPrediction(np.array(states), False)


def split_state(states, dof: int, dims: int) -> tuple[np.ndarray, np.ndarray]:
    states = np.atleast_2d(states)
    return states[:, :dof], states[:, dof:].reshape(states.shape[0], -1, dims)


def keypoint_error_px(z_pred, z_true) -> np.ndarray:
    """Mean Euclidean pixel distance over keypoints, per time step."""
    d = np.asarray(z_pred)[..., :2] - np.asarray(z_true)[..., :2]
    return np.mean(np.sqrt(np.sum(d * d, axis=-1)), axis=-1)


def mlp_rollout_cost(model: MlpModel, theta0, z0, u, z_goal, weights=(1.0, 1.0, 1.0)
                     ) -> GradientRecord:
    """Final-state keypoint cost of an MLP rollout and its gradient w.r.t. ``u``
    by backpropagation through time."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    dof = len(theta0)
    d = model.dims
    s = state_vector(theta0, z0, d)
    caches = []
    for ut in u:
        x = np.concatenate([s, ut])
        out, acts = model.forward(model.normalize(x[None, :]))
        caches.append(acts)
        s = s + (out[0] * model.out_std + model.out_mean)
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("MLP rollout diverged")
    w = np.asarray(weights, dtype=float)[:d]
    zT = s[dof:].reshape(-1, d)
    r = zT - np.asarray(z_goal, dtype=float)[:, :d]
    value = float(np.sum(w * r * r))
    gs = np.concatenate([np.zeros(dof), (2.0 * w * r).reshape(-1)])
    grad_u = np.zeros_like(u)
    n_state = len(s)
    for t in range(len(u) - 1, -1, -1):
        # s_{t+1} = s_t + out_std * net(normalize([s_t, u_t])) + out_mean
        dY = (gs * model.out_std)[None, :]
        _, gxn = model.backward(dY, caches[t])
        gx = gxn[0] / model.in_std
        grad_u[t] = gx[n_state:]
        gs = gs + gx[:n_state]
    return GradientRecord(value, {"u": grad_u})


def mlp_optimize_actions(model: MlpModel, theta0, z0, z_goal, cfg: MpcConfig,
                         weights=(1.0, 1.0, 1.0)) -> np.ndarray:
    u0 = np.zeros((cfg.horizon, len(theta0)))
    u, _, _, _ = descend(lambda x: mlp_rollout_cost(model, theta0, z0, x, z_goal, weights), u0, cfg)
    return u


# -- long-horizon comparison ------------------------------------------------

@dataclass
class PredictorSpec:
    """A predictor and the detector that defines its keypoint space."""

    model_id: str
    detector: OracleDetector
    model: MlpModel | None = None
    phi: np.ndarray | None = None  # kinematic predictor when model is None


def true_keypoints(det: OracleDetector, cam: CameraModel, chain: KinematicChain, thetas) -> np.ndarray:
    return np.array([project_chain(cam, chain, th, det.truth) + det.bias(th) for th in thetas])


def compare_long_horizon(predictors: list[PredictorSpec], chain: KinematicChain, cam: CameraModel,
                         starts, sequences) -> list[tuple[int, str, float, float]]:
    """Mean and std (over sequences) of the keypoint prediction error per horizon step.

    Each predictor is scored against the noiseless output of its own detector.
    """
    rows = []
    for spec in predictors:
        errs = []
        for theta0, u in zip(starts, sequences):
            u = np.atleast_2d(u)
            thetas = np.asarray(theta0) + np.vstack([np.zeros(chain.dof), np.cumsum(u, axis=0)])
            z_true = true_keypoints(spec.detector, cam, chain, thetas)
            if spec.model is None:
                z_pred = np.array([project_chain(cam, chain, th, spec.phi) for th in thetas])
            else:
                pred = predict_horizon(spec.model, theta0, z_true[0], u)
                _, z_pred = split_state(pred.states, chain.dof, spec.model.dims)
                if pred.truncated:
                    pad = np.full((len(thetas) - len(z_pred),) + z_pred.shape[1:], np.inf)
                    z_pred = np.concatenate([z_pred, pad])
            errs.append(keypoint_error_px(z_pred, z_true))
        errs = np.array(errs)
        for t in range(errs.shape[1]):
            rows.append((t, spec.model_id, float(np.mean(errs[:, t])), float(np.std(errs[:, t]))))
    return rows


def error_table_csv(rows, header: str = "") -> str:
    buf = io.StringIO()
    buf.write("".join(f"# {line}\n" for line in header.splitlines()))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "model_id", "mean_err_px", "std_err_px"])
    for step, mid, mean, std in rows:
        w.writerow([step, mid, format(mean, ".17g"), format(std, ".17g")])
    return buf.getvalue()


# -- checkpoints ------------------------------------------------------------

def checkpoint_json(model: MlpModel, meta: dict | None = None) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "sizes": model.sizes,
        "activation": model.activation,
        "dims": model.dims,
        "in_mean": model.in_mean.tolist(),
        "in_std": model.in_std.tolist(),
        "out_mean": model.out_mean.tolist(),
        "out_std": model.out_std.tolist(),
        "weights": model.weights.tolist(),
    }
    return json.dumps(doc) + "\n"


def save_checkpoint(model: MlpModel, path, meta: dict | None = None) -> None:
    Path(path).write_text(checkpoint_json(model, meta), encoding="utf-8")


def load_checkpoint(path) -> MlpModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
    return MlpModel(doc["sizes"], np.array(doc["weights"]), doc["activation"],
                    np.array(doc["in_mean"]), np.array(doc["in_std"]),
                    np.array(doc["out_mean"]), np.array(doc["out_std"]), int(doc["dims"]))
