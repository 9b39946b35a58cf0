"""Image-quality and mask metrics for text removal and segmentation."""

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .errors import ContractError, ShapeError
from .imaging import gray

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PEPS_THRESHOLD = 20 / 255


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    a, b = _pair(a, b)
    err = np.mean((a - b) ** 2)
    if err == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / err), PSNR_CAP))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b):
    """Local SSIM at every pixel of two grayscale images (symmetric reflected borders)."""
    win = gaussian_window()
    filt = lambda x: ndimage.correlate(x, win, mode="reflect")
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def mssim(a, b):
    """Mean single-scale SSIM in percent; colour inputs are converted to luma first."""
    a, b = _pair(a, b)
    a, b = gray(a), gray(b)
    if min(a.shape) < SSIM_WINDOW:
        raise ContractError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    return float(np.mean(ssim_map(a, b)) * 100.0)


def mse_pct(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2) * 100.0)


def age(a, b):
    """Mean absolute grayscale error on the 0-255 scale."""
    a, b = _pair(a, b)
    return float(np.mean(np.abs(gray(a) - gray(b))) * 255.0)


def error_pixels(a, b, threshold=PEPS_THRESHOLD):
    a, b = _pair(a, b)
    return np.abs(gray(a) - gray(b)) > threshold


def peps(a, b):
    return float(np.mean(error_pixels(a, b)))


def pceps(a, b):
    """Fraction of error pixels whose four neighbours are all error pixels.

    Neighbours outside the image count as non-error, so border pixels never qualify.
    """
    err = error_pixels(a, b)
    cross = ndimage.generate_binary_structure(2, 1)
    core = ndimage.binary_erosion(err, structure=cross, border_value=0)
    return float(np.mean(core))


# ------------------------------------------------------------------- Fréchet

@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.mean.ndim != 1 or self.cov.shape != (d, d):
            raise ShapeError(f"mean {self.mean.shape} and covariance {self.cov.shape} disagree")
        if not np.allclose(self.cov, self.cov.T, atol=1e-6):
            raise ContractError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-6:
            raise ContractError("covariance must be positive semi-definite")

    @classmethod
    def from_features(cls, feats):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ShapeError("need a [n >= 2, d] feature matrix")
        return cls(feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False)))


def _psd_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(p, q):
    if p.mean.shape != q.mean.shape:
        raise ShapeError(f"feature dims differ: {p.mean.shape[0]} vs {q.mean.shape[0]}")
    root_p = _psd_sqrt(p.cov)
    inner = root_p @ q.cov @ root_p
    tr_cross = np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0, None)).sum()
    diff = p.mean - q.mean
    value = diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2 * tr_cross
    return float(max(value, 0.0))


class ToyEmbedder:
    """Fixed random projection of 8x8 average-pooled images, for self-contained FID-style scores.

    These scores are only comparable with other scores from the same embedder.
    """

    def __init__(self, dim=64, pool=8, seed=0):
        self.dim, self.pool, self.seed = dim, pool, seed
        self._proj = {}

    def _matrix(self, n_in):
        if n_in not in self._proj:
            rng = np.random.default_rng([self.seed, n_in])
            self._proj[n_in] = rng.normal(0, 1 / np.sqrt(n_in), size=(n_in, self.dim))
        return self._proj[n_in]

    def __call__(self, images):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        n, c, h, w = images.shape
        p = self.pool
        if h % p or w % p:
            raise ShapeError(f"image size {h}x{w} not divisible by the pool size {p}")
        pooled = images.reshape(n, c, h // p, p, w // p, p).mean(axis=(3, 5)).reshape(n, -1)
        return pooled @ self._matrix(pooled.shape[1])


# -------------------------------------------------------------------- masks

def _binary(x, name):
    x = np.asarray(x)
    if not np.all((x == 0) | (x == 1)):
        raise ContractError(f"{name} mask must be binary")
    return x.astype(bool)


def fgiou_fscore(pred, gt):
    """``(fgiou %, precision, recall, fscore)``; two empty masks score perfectly."""
    pred, gt = _binary(pred, "pred"), _binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    if tp + fp + fn == 0:
        return 100.0, 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return 100.0 * tp / (tp + fp + fn), precision, recall, f


# ------------------------------------------------------------------- reports

@dataclass
class MetricReport:
    psnr: float = float("nan")
    mssim: float = float("nan")
    mse: float = float("nan")
    age: float = float("nan")
    peps: float = float("nan")
    pceps: float = float("nan")
    frechet: float = None
    fgiou: float = float("nan")
    fscore: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    count: int = 1

    def to_dict(self):
        return asdict(self)


def removal_scores(pred, gt):
    pred = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)
    out = {"psnr": psnr(pred, gt), "mse": mse_pct(pred, gt), "age": age(pred, gt),
           "peps": peps(pred, gt), "pceps": pceps(pred, gt)}
    if min(np.shape(gt)[-2:]) >= SSIM_WINDOW:
        out["mssim"] = mssim(pred, gt)
    return out


def segmentation_scores(pred_mask, gt_mask):
    iou, p, r, f = fgiou_fscore(pred_mask, gt_mask)
    return {"fgiou": iou, "precision": p, "recall": r, "fscore": f}


def evaluate_pair(pred_removal=None, gt_removal=None, pred_mask=None, gt_mask=None):
    values = {}
    if pred_removal is not None:
        values.update(removal_scores(pred_removal, gt_removal))
    if pred_mask is not None:
        values.update(segmentation_scores(pred_mask, gt_mask))
    return MetricReport(**values)


def aggregate(reports, frechet=None):
    """Mean of each field over per-sample reports (NaN fields are ignored)."""
    if not reports:
        raise ContractError("no reports to aggregate")
    out = {}
    for f in fields(MetricReport):
        if f.name in ("frechet", "count"):
            continue
        vals = np.array([getattr(r, f.name) for r in reports], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        out[f.name] = float(vals.mean()) if vals.size else float("nan")
    return MetricReport(**out, frechet=frechet, count=len(reports))


TABLE_COLUMNS = ("psnr", "mssim", "mse", "age", "peps", "pceps", "frechet", "fgiou", "fscore")
TABLE_HEADERS = ("PSNR", "MSSIM", "MSE", "AGE", "pEPs", "pCEPs", "FID", "fgIoU", "F-score")


def format_table(rows):
    """Aligned plain-text table; ``rows`` maps a dataset name to its MetricReport."""
    header = ["dataset"] + list(TABLE_HEADERS)
    body = []
    for name, rep in rows.items():
        cells = [name]
        for col in TABLE_COLUMNS:
            v = getattr(rep, col)
            cells.append("-" if v is None or np.isnan(v) else f"{v:.4f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = []
    for i, r in enumerate([header] + body):
        left = r[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join([left] + rest[:7]) + " | " + "  ".join(rest[7:]))
        if i == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines)
