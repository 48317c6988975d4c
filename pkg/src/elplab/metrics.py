"""Motion and blink evaluation metrics and the report they are collected in.

Per coefficient group (expression ``beta`` and head ``pose``):

* FD      Frechet distance of Gaussian fits (and a frame-aligned L1 variant)
* V-D     temporal variance, averaged over dims and clips
* SI-D    Shannon entropy of k-means cluster occupancy
* RPCC    L1 distance between speaker-listener correlations
* WTLCC   windowed, lag-maximized speaker-listener correlation
* STS     slope (first difference) distance

plus the blink WTLCC between generated and real blink sequences.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import entropy
from sklearn.cluster import KMeans

from elplab.errors import ConfigError, DomainError, ShapeError
from elplab.features import BLINK_DECISIONS
from elplab.utils import write_csv, write_json

logger = logging.getLogger(__name__)

GROUPS = ("beta", "pose")
GROUP_METRICS = ("fd", "vd", "sid", "rpcc", "wtlcc", "sts")
REPORT_COLUMNS = (
    ["method"]
    + [f"{m}_{g}" for g in GROUPS for m in GROUP_METRICS]
    + ["blink_wtlcc"]
    + [f"fd_l1_{g}" for g in GROUPS]
)


@dataclass(frozen=True)
class EvalConfig:
    """Metric settings."""

    wtlcc_window: int = 100
    wtlcc_max_lag: int = 25
    sid_clusters: int = 10
    random_scale: float = 0.05
    blink_decision: str = "expected"
    blink_threshold: float = 0.5
    baselines: tuple = ("nn_motion", "nn_audio", "random", "dls_random")

    def __post_init__(self):
        known = {"nn_motion", "nn_audio", "random", "dls_random"}
        value = tuple(self.baselines)
        unknown = set(value) - known
        if unknown:
            raise ConfigError(f"eval.baselines: unknown baselines {sorted(unknown)}")
        object.__setattr__(self, "baselines", value)
        if self.wtlcc_window < 3:
            raise ConfigError("eval.wtlcc_window must be >= 3")
        if self.wtlcc_max_lag < 0:
            raise ConfigError("eval.wtlcc_max_lag must be >= 0")
        if self.sid_clusters < 1:
            raise ConfigError("eval.sid_clusters must be >= 1")
        if self.blink_decision not in BLINK_DECISIONS:
            raise ConfigError(
                f"eval.blink_decision must be one of {BLINK_DECISIONS}, not {self.blink_decision!r}"
            )
        if not 0.0 < self.blink_threshold < 1.0:
            raise ConfigError("eval.blink_threshold must lie in (0, 1)")


def _pair(name, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"{name}: shapes {x.shape} and {y.shape} differ")
    return x, y


def pcc(x, y):
    """Pearson correlation; 0 when either sequence is constant."""
    x, y = _pair("pcc", x, y)
    if x.ndim != 1 or x.size < 2:
        raise DomainError(f"pcc: needs two 1-D sequences of length >= 2, got {x.shape}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    if denom == 0:
        return 0.0
    return float(np.clip(np.dot(xc, yc) / denom, -1.0, 1.0))


def rpcc(speaker, listener_gen, listener_gt):
    """Mean over dims of |PCC(speaker, generated) - PCC(speaker, ground truth)|."""
    speaker, listener_gen = _pair("rpcc", speaker, listener_gen)
    speaker, listener_gt = _pair("rpcc", speaker, listener_gt)
    if speaker.ndim == 1:
        speaker, listener_gen, listener_gt = (
            a[:, None] for a in (speaker, listener_gen, listener_gt)
        )
    diffs = [
        abs(pcc(speaker[:, d], listener_gen[:, d]) - pcc(speaker[:, d], listener_gt[:, d]))
        for d in range(speaker.shape[1])
    ]
    return float(np.mean(diffs))


def _lagged_pcc(xw, yw, lag):
    """PCC of x against y shifted by ``lag`` frames (y delayed when lag > 0)."""
    if lag >= 0:
        return pcc(xw[: xw.size - lag], yw[lag:])
    return pcc(xw[-lag:], yw[: yw.size + lag])


def wtlcc(x, y, window, max_lag):
    """Windowed time-lagged cross correlation.

    Windows of ``window`` frames with stride ``window // 2``; in each window
    the PCC is maximized over lags in ``[-max_lag, max_lag]`` (lags leaving
    fewer than two overlapping frames are skipped), and the window maxima are
    averaged.
    """
    x, y = _pair("wtlcc", x, y)
    if x.ndim != 1:
        raise ShapeError(f"wtlcc: expected 1-D sequences, got {x.shape}")
    if window < 3:
        raise DomainError(f"wtlcc: window must be >= 3 frames, got {window}")
    if window > x.size:
        raise DomainError(f"wtlcc: window {window} longer than the {x.size} frames")
    if not 0 <= max_lag < window:
        raise DomainError(f"wtlcc: max_lag {max_lag} must lie in [0, {window})")
    stride = max(1, window // 2)
    lag_limit = min(max_lag, window - 2)
    scores = []
    for start in range(0, x.size - window + 1, stride):
        xw = x[start : start + window]
        yw = y[start : start + window]
        scores.append(
            max(_lagged_pcc(xw, yw, lag) for lag in range(-lag_limit, lag_limit + 1))
        )
    return float(np.mean(scores))


def motion_wtlcc(speaker, listener, window, max_lag):
    """WTLCC of every speaker/listener dim pair, averaged over dims."""
    speaker, listener = _pair("motion_wtlcc", speaker, listener)
    return float(
        np.mean(
            [
                wtlcc(speaker[:, d], listener[:, d], window, max_lag)
                for d in range(speaker.shape[1])
            ]
        )
    )


def _sym_sqrt(mat):
    """Square root of a symmetric PSD matrix and the count of clamped eigenvalues."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = linalg.eigh(sym)
    clamped = int(np.sum(vals < 0))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T, clamped


def frechet_distance(gen_frames, gt_frames, mode="gaussian"):
    """Frechet distance between two frame sets.

    ``gaussian``: ``|mu_g - mu_t|^2 + Tr(S_g + S_t - 2 (S_g^1/2 S_t S_g^1/2)^1/2)``
    from sample means and covariances. ``l1``: mean over aligned frames of the
    L1 distance.
    """
    gen = np.asarray(gen_frames, dtype=np.float64)
    gt = np.asarray(gt_frames, dtype=np.float64)
    if gen.ndim != 2 or gt.ndim != 2 or gen.shape[1] != gt.shape[1]:
        raise ShapeError(f"frechet_distance: shapes {gen.shape} and {gt.shape}")
    if mode == "l1":
        if gen.shape != gt.shape:
            raise ShapeError(
                f"frechet_distance(l1): frames must be aligned, {gen.shape} vs {gt.shape}"
            )
        return float(np.abs(gen - gt).sum(axis=1).mean())
    if mode != "gaussian":
        raise DomainError(f"frechet_distance: unknown mode {mode!r}")
    dims = gen.shape[1]
    if min(gen.shape[0], gt.shape[0]) < dims + 1:
        raise DomainError(
            f"frechet_distance: need at least {dims + 1} frames per set for {dims} dims"
        )
    mu_g, mu_t = gen.mean(axis=0), gt.mean(axis=0)
    cov_g = np.atleast_2d(np.cov(gen, rowvar=False))
    cov_t = np.atleast_2d(np.cov(gt, rowvar=False))
    root_g, clamped_g = _sym_sqrt(cov_g)
    inner = root_g @ cov_t @ root_g
    inner_vals = linalg.eigvalsh(0.5 * (inner + inner.T))
    clamped = clamped_g + int(np.sum(inner_vals < 0))
    if clamped:
        logger.debug("frechet_distance: clamped %d negative eigenvalues", clamped)
    trace_root = np.sum(np.sqrt(np.clip(inner_vals, 0.0, None)))
    diff = mu_g - mu_t
    value = diff @ diff + np.trace(cov_g) + np.trace(cov_t) - 2.0 * trace_root
    return float(max(value, 0.0))


def variation_diversity(sequences):
    """Per-clip temporal variance averaged over dims, then over clips."""
    if not sequences:
        raise DomainError("variation_diversity: no sequences")
    values = []
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim == 1:
            seq = seq[:, None]
        if seq.shape[0] < 2:
            raise DomainError("variation_diversity: every clip needs at least 2 frames")
        values.append(seq.var(axis=0).mean())
    return float(np.mean(values))


def kmeans_centroids(ref_frames, k, seed=0):
    """k-means++ seeded Lloyd iterations (at most 100) on ``ref_frames``."""
    ref = np.asarray(ref_frames, dtype=np.float64)
    if ref.ndim != 2 or ref.shape[0] < k:
        raise DomainError(f"kmeans: need at least {k} reference frames, got {ref.shape}")
    model = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100, random_state=seed)
    model.fit(ref)
    return model.cluster_centers_


def assign_nearest(frames, centroids):
    """Index of the nearest centroid (squared Euclidean) for every frame."""
    frames = np.asarray(frames, dtype=np.float64)
    dist = ((frames[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(dist, axis=1)


def shannon_diversity(gen_frames, ref_frames, k=10, seed=0):
    """Entropy (nats) of the cluster histogram of ``gen_frames``.

    Clusters are fitted on ``ref_frames``; the result lies in ``[0, ln k]``.
    """
    centroids = kmeans_centroids(ref_frames, k, seed)
    labels = assign_nearest(gen_frames, centroids)
    counts = np.bincount(labels, minlength=k)
    return float(entropy(counts))


def sts_distance(x, y):
    """Mean over dims of the Euclidean distance between frame-to-frame slopes."""
    x, y = _pair("sts_distance", x, y)
    if x.ndim == 1:
        x, y = x[:, None], y[:, None]
    if x.shape[0] < 2:
        raise DomainError("sts_distance: needs at least 2 frames")
    slope = np.diff(x, axis=0) - np.diff(y, axis=0)
    return float(np.sqrt((slope * slope).sum(axis=0)).mean())


@dataclass
class GroupMetrics:
    """Metrics of one coefficient group."""

    fd: float
    fd_l1: float
    vd: float
    sid: float
    rpcc: float
    wtlcc: float
    sts: float


@dataclass
class MetricReport:
    """All metrics of one method on one clip set."""

    groups: dict
    blink_wtlcc: float
    metadata: dict = field(default_factory=dict)

    def row(self, method):
        values = [method]
        for group in GROUPS:
            metrics = self.groups[group]
            values.extend(getattr(metrics, m) for m in GROUP_METRICS)
        values.append(self.blink_wtlcc)
        values.extend(self.groups[g].fd_l1 for g in GROUPS)
        return values

    def as_dict(self):
        out = {g: asdict(self.groups[g]) for g in GROUPS}
        out["blink"] = {"wtlcc": self.blink_wtlcc}
        return out


def score_method(speakers, gen_motion, gen_blink, gt_motion, gt_blink, config, metadata=None):
    """Score generated listener clips against the ground truth.

    Parameters
    ----------
    speakers, gen_motion, gt_motion : list of MotionSequence
        Aligned per clip.
    gen_blink, gt_blink : list of BlinkSequence
    config : EvalConfig
    metadata : dict, optional

    Returns
    -------
    MetricReport
    """
    if not speakers or not (len(speakers) == len(gen_motion) == len(gt_motion)):
        raise ShapeError("score_method: clip lists are empty or differ in length")
    frames = speakers[0].frames
    window = min(config.wtlcc_window, frames)
    if window < config.wtlcc_window:
        logger.debug("wtlcc window clamped from %d to %d frames", config.wtlcc_window, window)
    max_lag = min(config.wtlcc_max_lag, window - 1)
    groups = {}
    for group in GROUPS:
        spk = [getattr(m, group) for m in speakers]
        gen = [getattr(m, group) for m in gen_motion]
        gt = [getattr(m, group) for m in gt_motion]
        gen_all, gt_all = np.vstack(gen), np.vstack(gt)
        groups[group] = GroupMetrics(
            fd=frechet_distance(gen_all, gt_all, "gaussian"),
            fd_l1=frechet_distance(gen_all, gt_all, "l1"),
            vd=variation_diversity(gen),
            sid=shannon_diversity(gen_all, gt_all, config.sid_clusters),
            rpcc=float(np.mean([rpcc(s, g, t) for s, g, t in zip(spk, gen, gt)])),
            wtlcc=float(np.mean([motion_wtlcc(s, g, window, max_lag) for s, g in zip(spk, gen)])),
            sts=float(np.mean([sts_distance(g, t) for g, t in zip(gen, gt)])),
        )
    blink = float(
        np.mean([wtlcc(g.phi, t.phi, window, max_lag) for g, t in zip(gen_blink, gt_blink)])
    )
    meta = dict(metadata or {})
    meta.setdefault("clips", len(speakers))
    return MetricReport(groups, blink, meta)


def write_reports(reports, csv_path, json_path, metadata=None):
    """Write ``{method: MetricReport}`` as CSV rows and nested JSON."""
    write_csv(csv_path, REPORT_COLUMNS, [r.row(name) for name, r in reports.items()])
    write_json(
        json_path,
        {
            "metadata": dict(metadata or {}),
            "methods": {name: r.as_dict() for name, r in reports.items()},
        },
    )


def read_report_json(path):
    with open(path, encoding="utf-8") as fpointer:
        return json.load(fpointer)
