"""Segmentation metrics, adjacency statistics, and forward-only loss formulas."""

import prettytable as pt
import torch
import torch.nn.functional as F
from scipy.ndimage import maximum_filter
from scipy.special import expit

from .tensors import IGNORE, LabelMask, ScoreStack
from .utils import *


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Pixel counts with rows = ground truth and columns = prediction."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        assert_eq(self.num_classes, other.num_classes)
        return ConfusionMatrix(self.counts + other.counts)

    @staticmethod
    def zeros(num_classes: int) -> "ConfusionMatrix":
        return ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64))


def confusion(pred: LabelMask, gt: LabelMask, num_classes: int) -> ConfusionMatrix:
    assert_eq(pred.shape, gt.shape)
    gt.check_classes(num_classes)
    counted = gt.counted()
    g = gt.labels[counted].astype(np.int64)
    p = pred.labels[counted].astype(np.int64)
    if (p >= num_classes).any():
        raise DomainError(f"Prediction label {int(p.max())} is out of range for {num_classes} classes.")
    counts = np.bincount(g * num_classes + p, minlength=num_classes**2)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


class MiouResult(NamedTuple):
    per_class: np.ndarray  # NaN where a class is absent from both prediction and ground truth
    mean: float


def miou(cm: ConfusionMatrix) -> MiouResult:
    diag = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - diag
    iou = np.full(cm.num_classes, np.nan)
    np.divide(diag, denom, out=iou, where=denom > 0)
    mean = float(np.nanmean(iou)) if np.any(denom > 0) else float("nan")
    return MiouResult(iou, mean)


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    return safe_div(float(np.trace(cm.counts)), cm.total)


# -----------------------------------------------------------------------------
# adjacency


@dataclass
class AdjacencyReport:
    """How much of the labeled area touches another class, and how much of that touching
    crosses group boundaries. Reports from several masks merge by addition."""

    n_pixels: int = 0
    n_adjacent: int = 0
    n_inter_class: int = 0
    pair_counts: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def adjacent_area_ratio(self) -> float:
        return self.n_adjacent / self.n_pixels if self.n_pixels else 0.0

    @property
    def inter_class_share(self) -> float:
        return self.n_inter_class / self.n_adjacent if self.n_adjacent else 0.0

    def __add__(self, other: "AdjacencyReport") -> "AdjacencyReport":
        pairs = dict(self.pair_counts)
        for k, v in other.pair_counts.items():
            pairs[k] = pairs.get(k, 0) + v
        return AdjacencyReport(
            self.n_pixels + other.n_pixels,
            self.n_adjacent + other.n_adjacent,
            self.n_inter_class + other.n_inter_class,
            pairs,
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "adjacent_area_ratio": self.adjacent_area_ratio,
            "inter_class_share": self.inter_class_share,
            "n_pixels": self.n_pixels,
            "n_adjacent": self.n_adjacent,
            "n_inter_class": self.n_inter_class,
            "pair_counts": {f"{a}-{b}": n for (a, b), n in sorted(self.pair_counts.items())},
        }


def adjacency_stats(
    gt: LabelMask, groups: Sequence[Iterable[int]] | None = None, radius: int = 1
) -> AdjacencyReport:
    """A pixel is adjacent when another non-IGNORE label lies within Chebyshev distance
    `radius`; it is inter-class when one such label belongs to a different group.
    Without `groups`, every class is its own group."""
    if radius < 1:
        raise DomainError(f"Adjacency radius must be >= 1, got {radius}.")
    labels = gt.labels
    counted = gt.counted()
    present = [int(c) for c in np.unique(labels[counted])]
    group_id = {c: c for c in present}
    if groups is not None:
        for i, g in enumerate(groups):
            for c in g:
                group_id[int(c)] = -1 - i

    size = 2 * radius + 1
    nearby = {
        c: maximum_filter((labels == c).astype(np.uint8), size=size, mode="constant", cval=0) > 0
        for c in present
    }
    adjacent = np.zeros(labels.shape, dtype=bool)
    inter = np.zeros(labels.shape, dtype=bool)
    pairs = dict[tuple[int, int], int]()
    for a in present:
        own = labels == a
        for b in present:
            if b == a:
                continue
            touching = own & nearby[b]
            n = int(touching.sum())
            if n == 0:
                continue
            pairs[(a, b)] = n
            adjacent |= touching
            if group_id[a] != group_id[b]:
                inter |= touching
    return AdjacencyReport(
        n_pixels=int(counted.sum()),
        n_adjacent=int(adjacent.sum()),
        n_inter_class=int(inter.sum()),
        pair_counts=pairs,
    )


# -----------------------------------------------------------------------------
# classification and losses


def _values(cams: ScoreStack | np.ndarray) -> np.ndarray:
    return cams.values if isinstance(cams, ScoreStack) else np.asarray(cams, dtype=np.float64)


def classify_from_cams(cams: ScoreStack | np.ndarray) -> np.ndarray:
    """Per-class probability: logistic of the spatial mean of each CAM channel."""
    return expit(_values(cams).mean(axis=(1, 2)))


def multilabel_soft_margin(logits: np.ndarray, target: np.ndarray) -> float:
    x = torch.as_tensor(np.asarray(logits, dtype=np.float64))
    y = torch.as_tensor(np.asarray(target, dtype=np.float64))
    if x.shape != y.shape or x.ndim != 1:
        raise DomainError(f"Expected two equal-length vectors, got {tuple(x.shape)} and {tuple(y.shape)}.")
    if torch.isnan(x).any() or torch.isnan(y).any():
        raise DomainError("multilabel_soft_margin got NaN input.")
    return float(F.multilabel_soft_margin_loss(x[None], y[None]))


def pixel_cross_entropy(pred: ScoreStack, target: LabelMask, eps: float = 1e-12) -> float:
    """Mean of -log pred[target] over non-IGNORE pixels; NaN when no pixel is counted."""
    assert_eq(pred.shape, target.shape)
    target.check_classes(pred.num_classes)
    counted = target.counted().ravel()
    if not counted.any():
        return float("nan")
    probs = torch.from_numpy(np.array(pred.flat()[counted]))
    t = torch.from_numpy(target.labels.ravel()[counted].astype(np.int64))
    at_target = probs.gather(1, t[:, None])
    if (at_target < eps).any():
        warnings.warn(f"Zero probability at a target label; clamping at {eps}.")
    return float(F.nll_loss(torch.log(probs.clamp(min=eps)), t))


class LossBreakdown(NamedTuple):
    cls: float
    seg: float

    @property
    def total(self) -> float:
        return self.cls + self.seg


def total_loss(
    cams: ScoreStack | np.ndarray,
    image_labels: Iterable[int],
    pred: ScoreStack,
    target: LabelMask,
) -> LossBreakdown:
    """Classification loss on the GAP of foreground CAMs (channel k = class k + 1) plus
    pixel cross-entropy of `pred` against `target`."""
    v = _values(cams)
    y = np.zeros(v.shape[0])
    for c in image_labels:
        y[c - 1] = 1.0
    return LossBreakdown(
        multilabel_soft_margin(v.mean(axis=(1, 2)), y),
        pixel_cross_entropy(pred, target),
    )


# -----------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    cm: ConfusionMatrix
    adjacency: AdjacencyReport
    n_scenes: int
    missing: list[str] = field(default_factory=list)
    class_names: list[str] | None = None

    def to_json(self) -> dict[str, Any]:
        res = miou(self.cm)
        return {
            "n_scenes": self.n_scenes,
            "miou": _nan_to_none(res.mean),
            "pixel_accuracy": _nan_to_none(pixel_accuracy(self.cm)),
            "per_class_iou": {str(c): _nan_to_none(v) for c, v in enumerate(res.per_class)},
            "adjacency": self.adjacency.to_json(),
            "missing": sorted(self.missing),
        }

    def to_text(self) -> str:
        res = miou(self.cm)
        table = pt.PrettyTable()
        table.field_names = ["class", "IoU", "gt pixels", "pred pixels"]
        table.align = "r"
        table.set_style(pt.SINGLE_BORDER)
        gt_tot, pred_tot = self.cm.counts.sum(axis=1), self.cm.counts.sum(axis=0)
        for c, iou in enumerate(res.per_class):
            name = self.class_names[c] if self.class_names else str(c)
            table.add_row([name, "-" if np.isnan(iou) else f"{iou:.4f}", gt_tot[c], pred_tot[c]])
        lines = [
            table.get_string(),
            f"scenes: {self.n_scenes}",
            f"mIoU: {res.mean:.4f}",
            f"pixel accuracy: {pixel_accuracy(self.cm):.4f}",
            f"adjacent area ratio: {self.adjacency.adjacent_area_ratio:.4f}",
            f"inter-class share: {self.adjacency.inter_class_share:.4f}",
        ]
        if self.missing:
            lines.append(f"unmatched scenes: {', '.join(sorted(self.missing))}")
        return "\n".join(lines) + "\n"


def _nan_to_none(x: float) -> float | None:
    return None if np.isnan(x) else float(x)
