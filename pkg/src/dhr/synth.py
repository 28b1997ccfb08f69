"""Synthetic scenes that reproduce the vanishing of small classes next to large ones.

Each scene is a Voronoi partition of "major" classes and background, plus two disc-shaped
minor classes placed inside majors: one inside a major of the same super-class (only WSS
features can tell them apart) and one inside a major of a different super-class (USS
features already separate them). Features are built hierarchically: USS features carry
the super-class prototype, WSS features a class prototype close to its super-class.
Every random draw comes from a generator keyed by (seed, scene index, field tag), so a
scene does not depend on which other scenes were generated or in which order.
"""

import zlib

from scipy.ndimage import distance_transform_edt, gaussian_filter
from skimage.segmentation import find_boundaries

from .tensors import FeatureMap, LabelMask, SceneBundle, ScoreStack, one_hot, resample, voc_palette
from .utils import *

MaxPlacementAttempts = 100


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    height: int = 64
    width: int = 64
    n_superclasses: tuple[int, int] = (2, 3)  # inclusive range per scene
    classes_per_super: tuple[int, int] = (1, 3)
    minor_area_frac: tuple[float, float] = (0.03, 0.08)
    feature_dim_us: int = 16
    feature_dim_ws: int = 16
    noise_sigma: float = 0.15
    cam_blur_radius: float = 2.0
    absorb_prob: float = 1.0
    boundary_noise: float = 0.5  # chance of flipping each boundary pixel in the base mask
    feature_stride: int = 1
    n_background_sites: int = 2

    def __post_init__(self):
        for name in ("n_superclasses", "classes_per_super", "minor_area_frac"):
            v = tuple(getattr(self, name))
            if len(v) != 2 or v[0] > v[1]:
                raise ConfigError(f"{name} must be a (min, max) pair, got {v}.")
            object.__setattr__(self, name, v)
        if self.n_superclasses[0] < 2:
            raise ConfigError("Scenes need at least 2 super-classes.")
        if self.classes_per_super[0] < 1:
            raise ConfigError("Every super-class needs at least one class.")
        lo, hi = self.minor_area_frac
        if not (0 < lo and hi < 1):
            raise ConfigError(f"minor_area_frac must lie in (0, 1), got {self.minor_area_frac}.")
        if not 0 <= self.absorb_prob <= 1:
            raise ConfigError(f"absorb_prob must lie in [0, 1], got {self.absorb_prob}.")
        if not 0 <= self.boundary_noise <= 1:
            raise ConfigError(f"boundary_noise must lie in [0, 1], got {self.boundary_noise}.")
        if self.noise_sigma < 0 or self.cam_blur_radius < 0:
            raise ConfigError("noise_sigma and cam_blur_radius must be >= 0.")
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"Grid {self.height}×{self.width} is too small.")
        if self.feature_stride < 1 or self.height % self.feature_stride or self.width % self.feature_stride:
            raise ConfigError("feature_stride must be positive and divide the grid size.")
        if self.n_background_sites < 1:
            raise ConfigError("n_background_sites must be >= 1.")
        n_super, n_class = self.n_superclasses[1], self.classes_per_super[1]
        if self.feature_dim_us < max(2, 1 + n_super):
            raise ConfigError(f"feature_dim_us must be >= {max(2, 1 + n_super)}.")
        if self.feature_dim_ws < max(2, 1 + n_super + n_super * n_class):
            raise ConfigError(f"feature_dim_ws must be >= {1 + n_super + n_super * n_class}.")
        if self.num_classes > 255:
            raise ConfigError("Too many classes for 8-bit masks.")

    @property
    def num_classes(self) -> int:
        """Size of the global class catalog, background included."""
        return 1 + self.n_superclasses[1] * self.classes_per_super[1]

    def class_id(self, super_idx: int, k: int) -> int:
        return 1 + super_idx * self.classes_per_super[1] + k

    def super_of(self, class_id: int) -> int:
        assert class_id >= 1
        return (class_id - 1) // self.classes_per_super[1]

    def class_names(self) -> list[str]:
        return ["background"] + [
            f"super{s}_class{k}"
            for s in range(self.n_superclasses[1])
            for k in range(self.classes_per_super[1])
        ]

    def __repr__(self):
        return repr_modified_args(self)


def rng_key(seed: int, scene_index: int, tag: str) -> list[int]:
    """The entropy key of one field of one scene. Index -1 is for global fields."""
    return [int(seed), int(scene_index) + 1, zlib.crc32(tag.encode())]


def make_rng(seed: int, scene_index: int, tag: str) -> np.random.Generator:
    """Counter-based generator for one field of one scene."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(rng_key(seed, scene_index, tag))))


@dataclass
class SceneMeta:
    scene_id: str
    scene_index: int
    classes: list[int]
    super_of: dict[int, int]
    majors: list[int]
    intra_minor: int | None
    cross_minor: int
    hosts: dict[int, int]  # minor class -> the major class it sits inside
    minor_target_frac: dict[int, float]
    attempts: int

    @property
    def minors(self) -> list[int]:
        return sorted(self.hosts)

    def planted_groups(self) -> list[list[int]]:
        """The super-class partition of the classes present in the scene."""
        by_super = groupby(self.classes, lambda c: self.super_of[c])
        return [sorted(cs) for _, cs in sorted(by_super.items())]

    def to_json(self) -> dict[str, Any]:
        return {
            "scene": self.scene_id,
            "index": self.scene_index,
            "classes": self.classes,
            "super_of": {str(c): s for c, s in sorted(self.super_of.items())},
            "majors": self.majors,
            "intra_minor": self.intra_minor,
            "cross_minor": self.cross_minor,
            "hosts": {str(m): h for m, h in sorted(self.hosts.items())},
            "minor_target_frac": {str(m): f for m, f in sorted(self.minor_target_frac.items())},
            "attempts": self.attempts,
        }


class SynthScene(NamedTuple):
    bundle: SceneBundle
    meta: SceneMeta


# -----------------------------------------------------------------------------
# prototypes


class Prototypes(NamedTuple):
    uss: np.ndarray  # num_classes × D_us, shared within a super-class
    wss: np.ndarray  # num_classes × D_ws, one per class


def make_prototypes(cfg: SynthConfig) -> Prototypes:
    """Unit prototypes for the whole class catalog, depending only on the seed."""
    n_super, n_class = cfg.n_superclasses[1], cfg.classes_per_super[1]
    rng = make_rng(cfg.seed, -1, "prototypes")
    us_basis, _ = np.linalg.qr(rng.standard_normal((cfg.feature_dim_us, 1 + n_super)))
    ws_basis, _ = np.linalg.qr(rng.standard_normal((cfg.feature_dim_ws, 1 + n_super + n_super * n_class)))
    us = np.zeros((cfg.num_classes, cfg.feature_dim_us))
    ws = np.zeros((cfg.num_classes, cfg.feature_dim_ws))
    us[0], ws[0] = us_basis[:, 0], ws_basis[:, 0]
    for s in range(n_super):
        for k in range(n_class):
            c = cfg.class_id(s, k)
            us[c] = us_basis[:, 1 + s]
            # offset norm 0.5 before renormalization: same-super cosine is 0.8
            offset = ws_basis[:, 1 + n_super + s * n_class + k]
            proto = ws_basis[:, 1 + s] + 0.5 * offset
            ws[c] = proto / np.linalg.norm(proto)
    return Prototypes(us, ws)


# -----------------------------------------------------------------------------
# layout


def _voronoi(sites: np.ndarray, owners: np.ndarray, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    d2 = (ys[None] - sites[:, 0, None, None]) ** 2 + (xs[None] - sites[:, 1, None, None]) ** 2
    return owners[np.argmin(d2, axis=0)]


def _room(region: np.ndarray) -> np.ndarray:
    """Distance of every pixel to the nearest pixel outside `region`, image border included."""
    return distance_transform_edt(np.pad(region, 1))[1:-1, 1:-1]


def _place_disc(
    labels: np.ndarray, hosts: Sequence[int], minor: int, frac: float, rng: np.random.Generator
) -> int | None:
    """Stamp a disc of `minor` inside the roomiest host. Returns the host, or None if no fit."""
    h, w = labels.shape
    radius = np.sqrt(frac * h * w / np.pi)
    rooms = {c: _room(labels == c) for c in hosts}
    host = max(hosts, key=lambda c: (rooms[c].max(), -c))
    cands = np.argwhere(rooms[host] >= radius + 1)
    if len(cands) == 0:
        return None
    cy, cx = cands[rng.integers(len(cands))]
    ys, xs = np.mgrid[0:h, 0:w]
    disc = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius**2
    labels[disc] = minor
    return int(host)


def _choose_classes(cfg: SynthConfig, rng: np.random.Generator) -> dict[int, list[int]]:
    """Super-class index -> the scene's classes of that super-class."""
    n_super = int(rng.integers(cfg.n_superclasses[0], cfg.n_superclasses[1] + 1))
    supers = sorted(int(s) for s in rng.choice(cfg.n_superclasses[1], n_super, replace=False))
    sizes = [int(rng.integers(cfg.classes_per_super[0], cfg.classes_per_super[1] + 1)) for _ in supers]
    if cfg.classes_per_super[1] >= 2 and max(sizes) < 2:
        sizes[0] = 2
    return {
        s: sorted(cfg.class_id(s, int(k)) for k in rng.choice(cfg.classes_per_super[1], n, replace=False))
        for s, n in zip(supers, sizes)
    }


def _plan_layout(cfg: SynthConfig, scene_index: int) -> tuple[np.ndarray, SceneMeta]:
    rng = make_rng(cfg.seed, scene_index, "layout")
    chosen = _choose_classes(cfg, rng)
    supers = list(chosen)
    intra_super = next((s for s in supers if len(chosen[s]) >= 2), None)
    intra_minor = chosen[intra_super][1] if intra_super is not None else None
    cross_super = [s for s in supers if s != intra_super][-1]
    cross_minor = chosen[cross_super][-1]
    minors = {cross_minor} | ({intra_minor} if intra_minor is not None else set())
    classes = sorted(c for cs in chosen.values() for c in cs)
    majors = [c for c in classes if c not in minors]
    super_of = {c: s for s, cs in chosen.items() for c in cs}
    if intra_minor is not None:
        intra_hosts = [c for c in majors if super_of[c] == intra_super]
    cross_hosts = [c for c in majors if super_of[c] != cross_super]
    scene_id = f"scene_{scene_index:04d}"

    h, w = cfg.height, cfg.width
    owners = np.array(majors + [0] * cfg.n_background_sites)
    for attempt in range(1, MaxPlacementAttempts + 1):
        sites = rng.uniform(0, 1, size=(len(owners), 2)) * [h, w]
        fracs = {m: float(rng.uniform(*cfg.minor_area_frac)) for m in sorted(minors)}
        labels = _voronoi(sites, owners, h, w).astype(np.uint8)
        if any(not (labels == c).any() for c in majors):
            continue
        hosts = dict[int, int]()
        if intra_minor is not None:
            host = _place_disc(labels, intra_hosts, intra_minor, fracs[intra_minor], rng)
            if host is None:
                continue
            hosts[intra_minor] = host
        host = _place_disc(labels, cross_hosts, cross_minor, fracs[cross_minor], rng)
        if host is None:
            continue
        hosts[cross_minor] = host
        meta = SceneMeta(
            scene_id=scene_id,
            scene_index=scene_index,
            classes=classes,
            super_of=super_of,
            majors=majors,
            intra_minor=intra_minor,
            cross_minor=cross_minor,
            hosts=hosts,
            minor_target_frac=fracs,
            attempts=attempt,
        )
        return labels, meta
    raise GenerationError(
        f"[{scene_id}] could not place the minor classes after {MaxPlacementAttempts} attempts."
    )


# -----------------------------------------------------------------------------
# fields


def _as_f32(x: np.ndarray) -> np.ndarray:
    # round through float32 so in-memory scenes equal their on-disk copies
    return x.astype(np.float32).astype(np.float64)


def _features(
    protos: np.ndarray, gt: np.ndarray, cfg: SynthConfig, rng: np.random.Generator
) -> FeatureMap:
    h, w = gt.shape
    hf, wf = h // cfg.feature_stride, w // cfg.feature_stride
    labels_f = resample(gt, hf, wf, "nearest")
    feats = protos[labels_f].transpose(2, 0, 1)
    if cfg.noise_sigma > 0:
        feats = feats + cfg.noise_sigma * rng.standard_normal(feats.shape)
    return FeatureMap(_as_f32(feats))


def _cams(gt: np.ndarray, meta: SceneMeta, cfg: SynthConfig, rng: np.random.Generator) -> ScoreStack:
    cams = np.zeros((cfg.num_classes - 1, *gt.shape))
    noise = np.exp(0.5 * cfg.noise_sigma * rng.standard_normal(cams.shape))
    for c in meta.classes:
        cam = gaussian_filter((gt == c).astype(np.float64), sigma=cfg.cam_blur_radius, mode="nearest")
        cam = cam * noise[c - 1]
        if c in meta.hosts:
            cam = 0.5 * cam
        cams[c - 1] = np.clip(cam, 0.0, 1.0)
    return ScoreStack(_as_f32(cams), has_background=False)


def _rgb(gt: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    palette = np.array(voc_palette(), dtype=np.float64).reshape(-1, 3)
    img = palette[gt] + 0.02 * 255 * rng.standard_normal((*gt.shape, 3))
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def degrade_base_mask(
    gt: LabelMask, minors: Iterable[int], cfg: SynthConfig, rng: np.random.Generator
) -> ScoreStack:
    """Imitate a seed propagation that swallows small classes.

    Each minor class is absorbed, with probability `absorb_prob`, into its largest-area
    neighbor; then each boundary pixel flips to a neighboring label with probability
    `boundary_noise`."""
    labels = gt.labels.copy()
    areas = np.bincount(labels.ravel(), minlength=256)
    for m in sorted(minors):
        if not rng.random() < cfg.absorb_prob:
            continue
        region = labels == m
        if not region.any():
            continue
        ring = find_boundaries(region, mode="outer") & ~region
        neighbors = [int(c) for c in np.unique(labels[ring]) if c != m and c != LabelMask.IGNORE]
        if not neighbors:
            continue
        host = max(neighbors, key=lambda c: (areas[c], -c))
        labels[region] = host
        areas[host] += areas[m]
        areas[m] = 0

    if cfg.boundary_noise > 0:
        h, w = labels.shape
        padded = np.pad(labels, 1, mode="edge")
        shifts = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
        nbs = np.stack([padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] for dy, dx in shifts])
        flip = find_boundaries(labels, mode="thick") & (rng.random((h, w)) < cfg.boundary_noise)
        start = rng.integers(len(shifts), size=(h, w))
        new = labels.copy()
        pending = flip.copy()
        for j in range(len(shifts)):
            cand = np.take_along_axis(nbs, ((start + j) % len(shifts))[None], axis=0)[0]
            take = pending & (cand != labels) & (cand != LabelMask.IGNORE)
            new[take] = cand[take]
            pending &= ~take
        labels = new
    return one_hot(LabelMask(labels), cfg.num_classes)


def generate_scene(cfg: SynthConfig, scene_index: int) -> SynthScene:
    """Deterministic in (cfg, scene_index)."""
    gt, meta = _plan_layout(cfg, scene_index)
    protos = make_prototypes(cfg)
    uss = _features(protos.uss, gt, cfg, make_rng(cfg.seed, scene_index, "uss"))
    wss = _features(protos.wss, gt, cfg, make_rng(cfg.seed, scene_index, "wss"))
    cams = _cams(gt, meta, cfg, make_rng(cfg.seed, scene_index, "cams"))
    gt_mask = LabelMask(gt)
    base = degrade_base_mask(gt_mask, meta.minors, cfg, make_rng(cfg.seed, scene_index, "degrade"))
    bundle = SceneBundle(
        id=meta.scene_id,
        cams=cams,
        base_mask=base,
        uss_features=uss,
        wss_features=wss,
        image_labels=frozenset(meta.classes),
        num_classes=cfg.num_classes,
        rgb=_rgb(gt, make_rng(cfg.seed, scene_index, "rgb")),
        ground_truth=gt_mask,
    )
    return SynthScene(bundle, meta)
