"""Spatio-temporal force regression on marker displacement features.

A 12-dimensional summary of the tracked marker field feeds a small gated
recurrent cell (hidden size 16) with a sigmoid output head; outputs are
denormalized through per-axis global force bounds. Training minimizes the
mean absolute error between normalized predictions and labels with SGD
(momentum 0.9, weight decay 5e-4), random prefix sub-sequence sampling, and
repeat-last-frame padding. Gradients are hand-derived backpropagation
through time and are verified against finite differences in the test suite.

Material-softness compensation rescales transferred force labels by the
ratio of target/source force-depth priors (degree-2 polynomials fitted per
loading/unloading phase).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .scenario import LOADING_PHASES, Phase

INPUT_DIM = 12
FEATURE_NAMES = [
    "mean_dx", "mean_dy", "mean_mag", "max_mag", "std_dx", "std_dy",
    "contact_fraction", "radial_divergence", "mean_log_radius_ratio",
    "d_mean_mag", "d_contact_fraction", "matched_fraction",
]
CONTACT_THRESHOLD_PX = 1.0


def extract_features(tracked, prev=None):
    """12 summary features of a tracked marker field.

    ``prev`` is the previous frame's feature vector (or None for the first
    frame); it only feeds the two delta features. Zero matches yield the
    all-zero vector (matched_fraction 0).
    """
    f = np.zeros(INPUT_DIM)
    n = tracked.n_matched
    if n == 0:
        return f
    d = tracked.displacement
    mag = np.linalg.norm(d, axis=1)
    f[0] = d[:, 0].mean()
    f[1] = d[:, 1].mean()
    f[2] = mag.mean()
    f[3] = mag.max()
    f[4] = d[:, 0].std()
    f[5] = d[:, 1].std()
    f[6] = float((mag > CONTACT_THRESHOLD_PX).mean())
    wsum = mag.sum()
    if wsum > 0:
        center = (mag[:, None] * tracked.ref_position).sum(axis=0) / wsum
        rad = tracked.ref_position - center
        rn = np.linalg.norm(rad, axis=1)
        ok = rn > 1e-9
        if ok.any():
            rhat = rad[ok] / rn[ok, None]
            f[7] = float((d[ok] * rhat).sum(axis=1).sum() / n)
    f[8] = float(np.log(np.clip(tracked.radius_ratio, 1e-6, 1e6)).mean())
    if prev is not None:
        f[9] = f[2] - prev[2]
        f[10] = f[6] - prev[6]
    f[11] = tracked.matched_fraction
    return f


def sequence_features(marker_sets, ref=None, max_track_dist=15.0):
    """Feature matrix (T, 12) for a frame sequence of MarkerSets.

    The reference defaults to the first frame (the rest state).
    """
    from .signals import track_markers

    ref = ref if ref is not None else marker_sets[0]
    feats = []
    prev = None
    for ms in marker_sets:
        tracked = track_markers(ref, ms, max_track_dist)
        prev = extract_features(tracked, prev)
        feats.append(prev)
    return np.array(feats)


@dataclass
class SequenceSample:
    features: np.ndarray   # (T, 12)
    forces: np.ndarray     # (T, 3) N
    depths: np.ndarray     # (T,) mm
    phases: list
    sensor_id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.forces = np.asarray(self.forces, dtype=float)
        self.depths = np.asarray(self.depths, dtype=float)
        T = self.features.shape[0]
        if T < 2:
            raise ValueError("sequences need at least two frames")
        if self.forces.shape != (T, 3) or self.depths.shape != (T,) \
                or len(self.phases) != T:
            raise ValueError("sequence field lengths disagree")

    def __len__(self):
        return self.features.shape[0]


_PARAM_NAMES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wc", "Uc", "bc", "Wo", "bo")


@dataclass
class ForceModel:
    Wz: np.ndarray
    Uz: np.ndarray
    bz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray
    br: np.ndarray
    Wc: np.ndarray
    Uc: np.ndarray
    bc: np.ndarray
    Wo: np.ndarray          # (3, H)
    bo: np.ndarray          # (3,)
    bounds: np.ndarray      # (3, 2) per-axis (min, max) N

    @property
    def hidden(self):
        return self.Wz.shape[0]

    def params(self):
        return [(n, getattr(self, n)) for n in _PARAM_NAMES]

    def copy(self):
        return ForceModel(**{n: getattr(self, n).copy() for n in _PARAM_NAMES},
                          bounds=self.bounds.copy())

    def to_vector(self):
        return np.concatenate([getattr(self, n).ravel() for n in _PARAM_NAMES])

    def from_vector(self, vec):
        i = 0
        for n in _PARAM_NAMES:
            arr = getattr(self, n)
            arr.flat[:] = vec[i:i + arr.size]
            i += arr.size
        return self


def init_model(hidden=16, input_dim=INPUT_DIM, seed=0, scale=0.3,
               bounds=None):
    rng = np.random.default_rng(seed)
    def w(*shape):
        return rng.normal(0.0, scale, size=shape)
    b = np.array([[0.0, 1.0]] * 3) if bounds is None else np.asarray(bounds, float)
    return ForceModel(
        Wz=w(hidden, input_dim), Uz=w(hidden, hidden), bz=np.zeros(hidden),
        Wr=w(hidden, input_dim), Ur=w(hidden, hidden), br=np.zeros(hidden),
        Wc=w(hidden, input_dim), Uc=w(hidden, hidden), bc=np.zeros(hidden),
        Wo=w(3, hidden), bo=np.zeros(3), bounds=b)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _forward_cached(model, X):
    """Run the cell over (T, d) features; cache gate activations for BPTT."""
    T = X.shape[0]
    H = model.hidden
    h = np.zeros(H)
    cache = {"h": np.zeros((T + 1, H)), "z": np.zeros((T, H)),
             "r": np.zeros((T, H)), "c": np.zeros((T, H)),
             "o": np.zeros((T, 3))}
    for t in range(T):
        x = X[t]
        z = _sigmoid(model.Wz @ x + model.Uz @ h + model.bz)
        r = _sigmoid(model.Wr @ x + model.Ur @ h + model.br)
        c = np.tanh(model.Wc @ x + model.Uc @ (r * h) + model.bc)
        h_new = (1.0 - z) * h + z * c
        cache["z"][t] = z
        cache["r"][t] = r
        cache["c"][t] = c
        cache["h"][t + 1] = h_new
        cache["o"][t] = _sigmoid(model.Wo @ h_new + model.bo)
        h = h_new
    return cache


def normalize_forces(model, forces):
    lo, hi = model.bounds[:, 0], model.bounds[:, 1]
    return (forces - lo) / (hi - lo)


def denormalize_forces(model, y):
    lo, hi = model.bounds[:, 0], model.bounds[:, 1]
    return lo + y * (hi - lo)


def model_forward(model, features):
    """Predict (T, 3) forces in N from a (T, 12) feature sequence."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty feature sequence")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite features")
    cache = _forward_cached(model, X)
    return denormalize_forces(model, cache["o"])


def model_forward_single(model, feature):
    """Single-frame prediction (fresh hidden state): the temporal ablation."""
    return model_forward(model, np.stack([feature, feature]))[-1]


def _zero_grads(model):
    return {n: np.zeros_like(getattr(model, n)) for n in _PARAM_NAMES}


def model_gradients(model, batch):
    """MAE loss (on normalized forces) and its gradients via full BPTT.

    Loss = mean over every frame and axis in the batch of |o - y| where o is
    the sigmoid output and y the normalized label. Raises on sequences
    shorter than two frames.
    """
    if not batch:
        raise ValueError("empty batch")
    for s in batch:
        if len(s) < 2:
            raise ValueError("sequences need at least two frames")
    grads = _zero_grads(model)
    n_total = 3 * sum(len(s) for s in batch)
    loss = 0.0
    for s in batch:
        X = s.features
        Y = normalize_forces(model, s.forces)
        cache = _forward_cached(model, X)
        o = cache["o"]
        err = o - Y
        loss += np.abs(err).sum()
        do = np.sign(err) / n_total
        T = X.shape[0]
        dh_next = np.zeros(model.hidden)
        for t in range(T - 1, -1, -1):
            ot = o[t]
            ds_o = do[t] * ot * (1.0 - ot)
            grads["Wo"] += np.outer(ds_o, cache["h"][t + 1])
            grads["bo"] += ds_o
            dh = dh_next + model.Wo.T @ ds_o
            z = cache["z"][t]
            r = cache["r"][t]
            c = cache["c"][t]
            h_prev = cache["h"][t]
            x = X[t]
            dz = dh * (c - h_prev)
            dc = dh * z
            dh_prev = dh * (1.0 - z)
            dsc = dc * (1.0 - c * c)
            grads["Wc"] += np.outer(dsc, x)
            grads["Uc"] += np.outer(dsc, r * h_prev)
            grads["bc"] += dsc
            drh = model.Uc.T @ dsc
            dr = drh * h_prev
            dh_prev = dh_prev + drh * r
            dsz = dz * z * (1.0 - z)
            grads["Wz"] += np.outer(dsz, x)
            grads["Uz"] += np.outer(dsz, h_prev)
            grads["bz"] += dsz
            dh_prev = dh_prev + model.Uz.T @ dsz
            dsr = dr * r * (1.0 - r)
            grads["Wr"] += np.outer(dsr, x)
            grads["Ur"] += np.outer(dsr, h_prev)
            grads["br"] += dsr
            dh_prev = dh_prev + model.Ur.T @ dsr
            dh_next = dh_prev
    return grads, loss / n_total


@dataclass
class TrainConfig:
    hidden: int = 16
    epochs: int = 240
    lr: float = 1e-2
    lr_decay: float = 0.1
    decay_at: float = 0.6       # fraction of epochs before the decay step
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    val_fraction: float = 0.1
    seed: int = 0
    init_scale: float = 0.3
    max_subseq: int | None = None  # 1 = single-frame ablation


def compute_bounds(dataset):
    allf = np.concatenate([s.forces for s in dataset], axis=0)
    lo = allf.min(axis=0)
    hi = allf.max(axis=0)
    flat = hi - lo < 1e-9
    lo[flat] -= 0.5
    hi[flat] += 0.5
    return np.stack([lo, hi], axis=1)


def _crop_pad(sample, L):
    """Prefix of length L, padded by repeating the last frame if short."""
    T = len(sample)
    if T >= L:
        return replace(sample, features=sample.features[:L],
                       forces=sample.forces[:L], depths=sample.depths[:L],
                       phases=sample.phases[:L])
    pad = L - T
    return replace(
        sample,
        features=np.concatenate([sample.features,
                                 np.repeat(sample.features[-1:], pad, axis=0)]),
        forces=np.concatenate([sample.forces,
                               np.repeat(sample.forces[-1:], pad, axis=0)]),
        depths=np.concatenate([sample.depths,
                               np.repeat(sample.depths[-1:], pad)]),
        phases=list(sample.phases) + [sample.phases[-1]] * pad)


def _single_frame_batch(batch, rng):
    """Ablation batch: one random frame per sequence, repeated to length 2."""
    out = []
    for s in batch:
        t = int(rng.integers(0, len(s)))
        out.append(SequenceSample(
            features=np.stack([s.features[t], s.features[t]]),
            forces=np.stack([s.forces[t], s.forces[t]]),
            depths=np.array([s.depths[t], s.depths[t]]),
            phases=[s.phases[t], s.phases[t]],
            sensor_id=s.sensor_id))
    return out


def validation_mae(model, dataset, single_frame=False):
    """Mean absolute error in N over full sequences (all axes pooled)."""
    errs = []
    for s in dataset:
        pred = _predict(model, s.features, single_frame)
        errs.append(np.abs(pred - s.forces))
    return float(np.concatenate(errs).mean())


def _predict(model, features, single_frame=False):
    if single_frame:
        return np.stack([model_forward_single(model, f) for f in features])
    return model_forward(model, features)


def train(dataset, cfg=None):
    """Train a ForceModel; returns the parameters with best validation MAE.

    Deterministic given cfg.seed. Per batch, a sub-sequence length is drawn
    in [2, longest-in-batch] and every sequence is prefix-cropped or padded
    (repeating its last frame) to that length.
    """
    cfg = cfg or TrainConfig()
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    bounds = compute_bounds(dataset)
    model = init_model(cfg.hidden, seed=cfg.seed, scale=cfg.init_scale,
                       bounds=bounds)
    order = rng.permutation(len(dataset))
    n_val = max(1, int(round(cfg.val_fraction * len(dataset)))) \
        if len(dataset) > 1 else 0
    val_ids = order[:n_val]
    train_ids = order[n_val:] if n_val else order
    train_set = [dataset[i] for i in train_ids]
    val_set = [dataset[i] for i in val_ids] or train_set

    momentum = {n: np.zeros_like(getattr(model, n)) for n in _PARAM_NAMES}
    single = cfg.max_subseq == 1
    best = model.copy()
    best_mae = validation_mae(model, val_set, single)
    decay_epoch = int(cfg.decay_at * cfg.epochs)
    lr = cfg.lr
    history = []
    for epoch in range(cfg.epochs):
        if epoch == decay_epoch:
            lr = cfg.lr * cfg.lr_decay
        perm = rng.permutation(len(train_set))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(perm), cfg.batch_size):
            batch = [train_set[i] for i in perm[start:start + cfg.batch_size]]
            if single:
                batch = _single_frame_batch(batch, rng)
            else:
                longest = max(len(s) for s in batch)
                L = int(rng.integers(2, longest + 1)) if longest > 2 else 2
                batch = [_crop_pad(s, L) for s in batch]
            grads, loss = model_gradients(model, batch)
            epoch_loss += loss
            n_batches += 1
            for n in _PARAM_NAMES:
                g = grads[n] + cfg.weight_decay * getattr(model, n)
                momentum[n] = cfg.momentum * momentum[n] + g
                getattr(model, n)[...] -= lr * momentum[n]
        history.append(epoch_loss / max(1, n_batches))
        mae = validation_mae(model, val_set, single)
        if mae < best_mae:
            best_mae = mae
            best = model.copy()
    best.training_history = history
    return best


@dataclass
class EvalReport:
    mae: np.ndarray              # (3,) N
    total_mae: float             # N, on force magnitudes
    r2: list                     # per axis, None when label variance is zero
    r2_total: object             # R^2 on magnitudes (or None)
    count: int


def _r2(pred, truth):
    var = ((truth - truth.mean()) ** 2).sum()
    if var < 1e-15:
        return None
    return float(1.0 - ((pred - truth) ** 2).sum() / var)


def evaluate(model, dataset, single_frame=False):
    """MAE / R^2 report over full sequences (no sub-sampling)."""
    preds, labels = [], []
    for s in dataset:
        preds.append(_predict(model, s.features, single_frame))
        labels.append(s.forces)
    pred = np.concatenate(preds, axis=0)
    truth = np.concatenate(labels, axis=0)
    mae = np.abs(pred - truth).mean(axis=0)
    mag_p = np.linalg.norm(pred, axis=1)
    mag_t = np.linalg.norm(truth, axis=1)
    total_mae = float(np.abs(mag_p - mag_t).mean())
    r2 = [_r2(pred[:, i], truth[:, i]) for i in range(3)]
    return EvalReport(mae=mae, total_mae=total_mae, r2=r2,
                      r2_total=_r2(mag_p, mag_t), count=pred.shape[0])


# ---------------------------------------------------------------------------
# Material priors and label compensation
# ---------------------------------------------------------------------------

@dataclass
class MaterialPrior:
    """Degree-2 force-depth polynomials for loading and unloading phases."""

    material_id: str
    loading: np.ndarray     # (c2, c1, c0), F in N for depth in mm
    unloading: np.ndarray
    d_max: float            # mm
    rms_loading: float = 0.0
    rms_unloading: float = 0.0

    def force(self, depth_mm, loading=True):
        coef = self.loading if loading else self.unloading
        return float(np.polyval(coef, depth_mm))


def _is_loading(phase):
    if isinstance(phase, Phase):
        return phase in LOADING_PHASES
    return str(phase) in ("loading", Phase.NORMAL_INC.value, Phase.SHEAR_INC.value)


def fit_material_prior(samples, material_id="material"):
    """Least-squares quadratic force-depth fit per phase.

    ``samples`` holds (depth_mm, fz_N, phase) tuples where phase is a
    trajectory Phase or a "loading"/"unloading" string. Requires >= 3 samples
    per phase spanning more than half the depth range; validates the
    hysteresis ordering (loading >= unloading within fit tolerance) and a
    positive force at full depth.
    """
    load_pts, unload_pts = [], []
    for depth, fz, phase in samples:
        (load_pts if _is_loading(phase) else unload_pts).append((depth, fz))
    d_max = max((d for d, _ in load_pts + unload_pts), default=0.0)
    if d_max <= 0:
        raise ValueError("samples must include positive depths")

    def fit(pts, name):
        if len(pts) < 3:
            raise ValueError(f"need >= 3 {name} samples, got {len(pts)}")
        d = np.array([p[0] for p in pts])
        f = np.array([p[1] for p in pts])
        if d.max() - d.min() <= 0.5 * d_max:
            raise ValueError(f"{name} samples span <= 50% of the depth range")
        coef = np.polyfit(d, f, 2)
        rms = float(np.sqrt(np.mean((np.polyval(coef, d) - f) ** 2)))
        return coef, rms

    cl, rms_l = fit(load_pts, "loading")
    cu, rms_u = fit(unload_pts, "unloading")
    prior = MaterialPrior(material_id, cl, cu, d_max, rms_l, rms_u)
    if prior.force(d_max, loading=True) <= 0:
        raise ValueError("fitted loading force at d_max is not positive")
    eps = 3.0 * (rms_l + rms_u) + 1e-6
    grid = np.linspace(0, d_max, 33)
    if np.any(np.polyval(cl, grid) < np.polyval(cu, grid) - eps):
        raise ValueError("hysteresis ordering violated: loading < unloading")
    return prior


RATIO_CLIP = (0.1, 10.0)


def compensate_labels(labels, depths, phases, prior_src, prior_tgt,
                      floor=0.05, all_axes=True):
    """Rescale source force labels by the target/source prior ratio.

    Depths are normalized per prior (d_hat = d / d_max) so priors fitted at
    different maximum depths compare at equal normalized depth. Both the
    numerator and denominator are floored at ``floor`` N (this keeps
    identical priors an exact identity); the ratio is clipped to [0.1, 10].
    """
    labels = np.asarray(labels, dtype=float)
    depths = np.asarray(depths, dtype=float)
    out = labels.copy()
    for t in range(labels.shape[0]):
        loading = _is_loading(phases[t])
        d_hat = depths[t] / prior_src.d_max
        f_src = prior_src.force(d_hat * prior_src.d_max, loading)
        f_tgt = prior_tgt.force(d_hat * prior_tgt.d_max, loading)
        r = max(f_tgt, floor) / max(f_src, floor)
        r = min(max(r, RATIO_CLIP[0]), RATIO_CLIP[1])
        if all_axes:
            out[t] *= r
        else:
            out[t, 2] *= r
    return out


# ---------------------------------------------------------------------------
# Persistence: TFM1 model files and prior CSVs
# ---------------------------------------------------------------------------

_TFM_MAGIC = b"TFM1"


def save_model(path, model):
    """Versioned binary: magic, u32 hidden size, f64 LE parameter blocks in
    declaration order, then per-axis (min, max) bounds."""
    with open(path, "wb") as f:
        f.write(_TFM_MAGIC)
        f.write(struct.pack("<I", model.hidden))
        for _, arr in model.params():
            f.write(np.asarray(arr, dtype="<f8").tobytes())
        f.write(np.asarray(model.bounds, dtype="<f8").tobytes())


def load_model(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _TFM_MAGIC:
            raise ValueError(f"bad model magic {magic!r}")
        (hidden,) = struct.unpack("<I", f.read(4))
        model = init_model(hidden=hidden, seed=0, scale=0.0)
        for _, arr in model.params():
            raw = f.read(arr.size * 8)
            if len(raw) != arr.size * 8:
                raise ValueError("truncated model file")
            arr.flat[:] = np.frombuffer(raw, dtype="<f8")
        raw = f.read(48)
        if len(raw) != 48:
            raise ValueError("truncated model bounds")
        model.bounds = np.frombuffer(raw, dtype="<f8").reshape(3, 2).copy()
    return model


_PRIOR_COLS = ["material_id", "phase", "c2", "c1", "c0", "d_max_mm", "rms"]


def load_priors(path):
    """Read a priors CSV -> {material_id: MaterialPrior}."""
    rows = {}
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header != _PRIOR_COLS:
            raise ValueError(f"unexpected priors header {header}")
        for row in r:
            if not row:
                continue
            mid, phase = row[0], row[1]
            coef = np.array([float(row[2]), float(row[3]), float(row[4])])
            entry = rows.setdefault(mid, {})
            entry[phase] = (coef, float(row[5]), float(row[6]))
    priors = {}
    for mid, entry in rows.items():
        if "loading" not in entry or "unloading" not in entry:
            raise ValueError(f"material {mid} missing a phase row")
        cl, dmax, rms_l = entry["loading"]
        cu, _, rms_u = entry["unloading"]
        priors[mid] = MaterialPrior(mid, cl, cu, dmax, rms_l, rms_u)
    return priors


def save_priors(path, priors):
    """Write priors sorted by material id (deterministic bytes)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_PRIOR_COLS)
        for mid in sorted(priors):
            p = priors[mid]
            for phase, coef, rms in (("loading", p.loading, p.rms_loading),
                                     ("unloading", p.unloading, p.rms_unloading)):
                w.writerow([mid, phase] + [repr(float(c)) for c in coef]
                           + [repr(float(p.d_max)), repr(float(rms))])


def upsert_prior(path, prior):
    """Insert or replace one material's prior rows; True if replaced."""
    import os

    priors = load_priors(path) if os.path.exists(path) else {}
    replaced = prior.material_id in priors
    priors[prior.material_id] = prior
    save_priors(path, priors)
    return replaced
