"""OT-based seed initialization: recover minor classes that the base mask lost."""

from .refine import Refiner, RefineResult
from .sinkhorn import OtConfig, f_ot_mask_with_plan
from .tensors import LabelMask, ScoreStack, argmax_labels, one_hot
from .utils import *

BackgroundModes = ("one_minus_max", "fixed")


@dataclass(frozen=True)
class SeedConfig:
    vanish_ratio: float = 0.5  # θ_v
    bg_mode: str = "fixed"
    bg_fixed_score: float = 0.4

    def __post_init__(self):
        if not 0 < self.vanish_ratio <= 1:
            raise ConfigError(f"vanish_ratio must lie in (0, 1], got {self.vanish_ratio}.")
        if self.bg_mode not in BackgroundModes:
            raise ConfigError(f"Unknown bg_mode {self.bg_mode!r}, expected one of {BackgroundModes}.")
        if not 0 <= self.bg_fixed_score <= 1:
            raise ConfigError(f"bg_fixed_score must lie in [0, 1], got {self.bg_fixed_score}.")

    def __repr__(self):
        return repr_modified_args(self)


class SeedResult(NamedTuple):
    seed: ScoreStack
    ot_iterations: int
    ot_converged: bool
    ot_fell_back: bool
    refiner_fell_back: bool


def attach_background(cams: ScoreStack, cfg: SeedConfig) -> ScoreStack:
    """Prepend a background channel to foreground-only CAMs."""
    fg = cams.values
    if cfg.bg_mode == "one_minus_max":
        bg = np.clip(1.0 - fg.max(axis=0), 0.0, 1.0)
    else:
        bg = np.full(cams.shape, cfg.bg_fixed_score)
    return ScoreStack(np.concatenate([bg[None], fg], axis=0), has_background=True)


def restrict_to_labels(scores: ScoreStack, image_labels: Iterable[int]) -> ScoreStack:
    """Zero every foreground channel whose class is not an image label."""
    keep = np.zeros(scores.num_classes, dtype=bool)
    keep[0] = True
    keep[list(image_labels)] = True
    return ScoreStack(scores.values * keep[:, None, None], scores.has_background)


def compute_seed(
    scores: ScoreStack,
    image_labels: Iterable[int],
    refiner: Refiner,
    ot_cfg: OtConfig,
    rgb: np.ndarray | None = None,
    use_ot: bool = True,
) -> SeedResult:
    """`R_C(f_OT(A) ⊙ A)` over the background channel plus the image labels.

    A labeled class with an all-zero CAM is a `DegenerateInputError`. If the solver does
    not converge, the unmasked scores are refined instead."""
    labels = sorted(set(image_labels))
    scores = restrict_to_labels(scores, labels)
    iterations, converged, fell_back = 0, True, False
    gated = scores
    if use_ot:
        gated, plan = f_ot_mask_with_plan(scores, ot_cfg, active=[0, *labels], required=labels)
        iterations, converged = plan.iterations, plan.converged
        if not converged:
            warnings.warn(
                f"Seed OT did not converge after {plan.iterations} iterations "
                f"(violation {plan.violation:.2e}); using unmasked CAMs."
            )
            gated, fell_back = scores, True
    refined: RefineResult = refiner(gated, rgb)
    return SeedResult(refined.scores, iterations, converged, fell_back, refined.fell_back)


def class_areas(scores: ScoreStack) -> np.ndarray:
    """Pixel count of each class in the argmax view."""
    return np.bincount(argmax_labels(scores).labels.ravel(), minlength=scores.num_classes)


def detect_vanished(
    base: ScoreStack,
    seed: ScoreStack,
    image_labels: Iterable[int],
    vanish_ratio: float = 0.5,
) -> set[int]:
    """Labeled foreground classes whose base area fell below `vanish_ratio` of their seed area."""
    assert_eq(base.values.shape, seed.values.shape)
    base_area, seed_area = class_areas(base), class_areas(seed)
    return {
        c
        for c in image_labels
        if c != 0 and seed_area[c] > 0 and base_area[c] < vanish_ratio * seed_area[c]
    }


def merge_init(base: ScoreStack, seed: ScoreStack, vanished: Iterable[int]) -> ScoreStack:
    """Base argmax, overwritten wherever the seed argmax is a vanished class. Returns one-hot."""
    assert_eq(base.values.shape, seed.values.shape)
    labels = argmax_labels(base).labels.copy()
    seed_labels = argmax_labels(seed).labels
    claim = np.isin(seed_labels, list(vanished))
    labels[claim] = seed_labels[claim]
    return one_hot(LabelMask(labels), base.num_classes)
