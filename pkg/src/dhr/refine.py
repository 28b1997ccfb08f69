"""Boundary correction operators applied to score stacks.

`pamr` repeatedly replaces each pixel's score vector by an affinity-weighted average
over a multi-dilation 8-neighborhood, where the affinity comes from color similarity.
"""

import torch
import torch.nn.functional as F

from .tensors import ScoreStack, resample
from .utils import *

RefinerKinds = ("identity", "pamr")


@dataclass(frozen=True)
class RefinerConfig:
    kind: str = "pamr"
    iterations: int = 10
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    sigma_color: float = 0.1  # on colors scaled to [0, 1]

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.kind not in RefinerKinds:
            raise ConfigError(f"Unknown refiner {self.kind!r}, expected one of {RefinerKinds}.")
        if self.iterations < 0:
            raise ConfigError(f"Refiner iterations must be >= 0, got {self.iterations}.")
        if self.kind == "pamr" and not self.dilations:
            raise ConfigError("pamr needs at least one dilation.")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"Dilations must be positive, got {self.dilations}.")
        if not self.sigma_color > 0:
            raise ConfigError(f"sigma_color must be > 0, got {self.sigma_color}.")

    def __repr__(self):
        return repr_modified_args(self)


class RefineResult(NamedTuple):
    scores: ScoreStack
    fell_back: bool  # the refiner could not run and returned its input


def refine_identity(scores: ScoreStack) -> ScoreStack:
    return scores


def _neighbor_offsets(dilations: Sequence[int]) -> list[tuple[int, int]]:
    """The 8-neighborhood at every dilation. A pixel is never its own neighbor."""
    offsets = list[tuple[int, int]]()
    for d in dilations:
        offsets.extend(
            (dy * d, dx * d) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)
        )
    return offsets


def _gather_neighbors(x: torch.Tensor, offsets: list[tuple[int, int]], pad: int) -> list[torch.Tensor]:
    """Shifted copies of a (C, H, W) tensor, one per offset, with replicate padding."""
    _, h, w = x.shape
    padded = F.pad(x[None], [pad] * 4, mode="replicate")[0]
    return [padded[:, pad + dy : pad + dy + h, pad + dx : pad + dx + w] for dy, dx in offsets]


def _color_affinity(rgb: np.ndarray, offsets: list[tuple[int, int]], pad: int, sigma: float) -> torch.Tensor:
    img = torch.from_numpy(np.asarray(rgb, dtype=np.float64) / 255.0).permute(2, 0, 1)
    dists = torch.stack(
        [((nb - img) ** 2).sum(dim=0) for nb in _gather_neighbors(img, offsets, pad)]
    )
    # exp(-d/2s^2) normalized over the neighborhood; softmax keeps it finite for tiny sigma
    return torch.softmax(-dists / (2 * sigma**2), dim=0)


def refine_pamr(scores: ScoreStack, rgb: np.ndarray | None, cfg: RefinerConfig) -> RefineResult:
    if rgb is None:
        warnings.warn("pamr refiner got no rgb image; returning the scores unchanged.")
        return RefineResult(scores, True)
    if cfg.iterations == 0:
        return RefineResult(scores, False)
    h, w = scores.shape
    if rgb.shape[:2] != (h, w):
        rgb = resample(np.moveaxis(rgb, 2, 0), h, w, "nearest")
        rgb = np.moveaxis(rgb, 0, 2)

    offsets = _neighbor_offsets(cfg.dilations)
    pad = max(cfg.dilations)
    aff = _color_affinity(rgb, offsets, pad, cfg.sigma_color)
    x = torch.from_numpy(np.array(scores.values, dtype=np.float64))
    for _ in range(cfg.iterations):
        acc = torch.zeros_like(x)
        # fixed accumulation order keeps results independent of thread scheduling
        for k, nb in enumerate(_gather_neighbors(x, offsets, pad)):
            acc += aff[k] * nb
        x = acc
    out = x.clamp(0.0, 1.0).numpy()
    return RefineResult(ScoreStack(out, scores.has_background), False)


@dataclass(frozen=True)
class Refiner:
    """The boundary-correction operator selected by `cfg`, callable on (scores, rgb)."""

    cfg: RefinerConfig = RefinerConfig()

    def __call__(self, scores: ScoreStack, rgb: np.ndarray | None = None) -> RefineResult:
        if self.cfg.kind == "identity":
            return RefineResult(refine_identity(scores), False)
        return refine_pamr(scores, rgb, self.cfg)


def make_refiner(cfg: RefinerConfig) -> Refiner:
    return Refiner(cfg)


@contextmanager
def single_threaded():
    """Run torch kernels on one thread, restoring the caller's setting afterwards."""
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(old)
