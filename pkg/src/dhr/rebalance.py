"""Hierarchical rebalancing and the full DHR propagation.

USS features decide between semantically distant (inter-class) regions, WSS features
then separate classes inside each group of USS-confusable classes (intra-class).
"""

from .refine import Refiner, RefinerConfig
from .seed_init import (
    SeedConfig,
    attach_background,
    compute_seed,
    detect_vanished,
    merge_init,
    restrict_to_labels,
)
from .sinkhorn import (
    ColMarginalModes,
    OtConfig,
    assignment_from_plan,
    estimate_col_marginal,
    f_ot_mask_with_plan,
    solve_entropic_ot,
)
from .tensors import (
    IGNORE,
    FeatureMap,
    LabelMask,
    SceneBundle,
    ScoreStack,
    argmax_labels,
    one_hot,
)
from .utils import *


@dataclass(frozen=True, eq=False)
class ClassCentroids:
    """One embedding vector per class that owns at least one pixel, in ascending class order."""

    classes: tuple[int, ...]
    vectors: np.ndarray  # len(classes) × D

    def __post_init__(self):
        assert_eq(len(self.classes), self.vectors.shape[0])
        assert np.all(np.isfinite(self.vectors))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.classes)

    def __contains__(self, c: int) -> bool:
        return c in self.classes

    def vector(self, c: int) -> np.ndarray:
        return self.vectors[self.classes.index(c)]

    def subset(self, classes: Iterable[int]) -> "ClassCentroids":
        keep = [c for c in self.classes if c in set(classes)]
        return ClassCentroids(tuple(keep), self.vectors[[self.classes.index(c) for c in keep]])


@dataclass(frozen=True)
class ClassGroups:
    """A partition of the present classes. Groups and their members are sorted."""

    groups: tuple[tuple[int, ...], ...]

    def multi(self) -> list[tuple[int, ...]]:
        return [g for g in self.groups if len(g) >= 2]

    def group_of(self, c: int) -> tuple[int, ...] | None:
        for g in self.groups:
            if c in g:
                return g
        return None

    def as_lists(self) -> list[list[int]]:
        return [list(g) for g in self.groups]


@dataclass(frozen=True)
class RebalanceConfig:
    tau: float = 0.8
    ot: OtConfig = OtConfig()
    literal_product_mode: bool = False
    # column marginal of the per-group WSS transport problems
    wss_col_marginal_mode: str = "argmax_proportional"

    def __post_init__(self):
        if not 0 <= self.tau <= 1:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}.")
        if self.wss_col_marginal_mode not in ColMarginalModes:
            raise ConfigError(f"Unknown wss_col_marginal_mode {self.wss_col_marginal_mode!r}.")

    def __repr__(self):
        return repr_modified_args(self)


@dataclass(frozen=True)
class StageToggles:
    """Switches used by ablations. Disabled stages pass their input through."""

    ot_seed: bool = True
    seed_refine: bool = True
    uss: bool = True
    wss: bool = True

    def __repr__(self):
        return repr_modified_args(self)


@dataclass(frozen=True)
class DhrConfig:
    ot: OtConfig = OtConfig()  # used by the seed stage
    seed: SeedConfig = SeedConfig()
    rebalance: RebalanceConfig = RebalanceConfig()
    refiner: RefinerConfig = RefinerConfig()
    stages: StageToggles = StageToggles()

    def __repr__(self):
        return repr_modified_args(self)


# -----------------------------------------------------------------------------
# centroids and similarities


def class_average_pool(F: FeatureMap, mask: LabelMask) -> ClassCentroids:
    """Mean feature of every class that owns at least one (non-IGNORE) pixel."""
    assert_eq(F.shape, mask.shape, extra_message=lambda: "resample features to the mask first")
    labels = mask.labels.ravel()
    keep = labels != IGNORE
    lab = labels[keep].astype(np.int64)
    X = F.values.reshape(F.dim, -1)[:, keep]
    if lab.size == 0:
        return ClassCentroids((), np.zeros((0, F.dim)))
    n = int(lab.max()) + 1
    counts = np.bincount(lab, minlength=n)
    sums = np.stack([np.bincount(lab, weights=X[d], minlength=n) for d in range(F.dim)], axis=1)
    present = np.flatnonzero(counts)
    return ClassCentroids(
        tuple(int(c) for c in present), sums[present] / counts[present, None]
    )


def _cosine(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Cosine similarity between rows of A and rows of B; zero-norm rows give 0."""
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    dots = np.einsum("id,jd->ij", A, B)
    denom = na[:, None] * nb[None, :]
    out = np.zeros_like(dots)
    np.divide(dots, denom, out=out, where=denom > 0)
    return out


def centroid_similarity(V: ClassCentroids) -> np.ndarray:
    return _cosine(V.vectors, V.vectors)


def similarity_scores(F: FeatureMap, V: ClassCentroids, num_classes: int) -> ScoreStack:
    """ReLU-cosine score of every pixel against every centroid; classes without one get 0."""
    assert_eq(F.dim, V.dim)
    if len(V) == 0:
        raise DomainError("similarity_scores needs at least one centroid.")
    X = F.values.reshape(F.dim, -1).T
    out = np.zeros((X.shape[0], num_classes))
    out[:, list(V.classes)] = np.clip(_cosine(X, V.vectors), 0.0, 1.0)
    h, w = F.shape
    return ScoreStack.from_flat(out, h, w)


# -----------------------------------------------------------------------------
# USS inter-class rebalancing


class OtRecord(NamedTuple):
    iterations: int
    converged: bool


class UssResult(NamedTuple):
    scores: ScoreStack
    centroids: ClassCentroids
    ot: OtRecord | None
    fell_back: bool


def uss_rebalance_with_info(F_us: FeatureMap, M_init: ScoreStack, cfg: RebalanceConfig) -> UssResult:
    V_us = class_average_pool(F_us, argmax_labels(M_init))
    S_us = similarity_scores(F_us, V_us, M_init.num_classes)
    gated, plan = f_ot_mask_with_plan(S_us, cfg.ot, active=V_us.classes)
    record = OtRecord(plan.iterations, plan.converged)
    if not plan.converged:
        warnings.warn(
            f"USS OT did not converge after {plan.iterations} iterations; using unmasked similarities."
        )
        return UssResult(S_us, V_us, record, True)
    return UssResult(gated, V_us, record, False)


def uss_rebalance(F_us: FeatureMap, M_init: ScoreStack, cfg: RebalanceConfig) -> ScoreStack:
    """`f_OT(S^us) ⊙ S^us` with `S^us` the similarity to the USS centroids of `M_init`."""
    return uss_rebalance_with_info(F_us, M_init, cfg).scores


# -----------------------------------------------------------------------------
# grouping


class UnionFind:
    def __init__(self, num: int):
        self.parents = list(range(num))
        self.rank = [0] * num

    def find(self, x: int) -> int:
        root = x
        while self.parents[root] != root:
            root = self.parents[root]
        while self.parents[x] != root:
            self.parents[x], x = root, self.parents[x]
        return root

    def union(self, x: int, y: int) -> None:
        x, y = self.find(x), self.find(y)
        if x == y:
            return
        if self.rank[x] < self.rank[y]:
            x, y = y, x
        self.parents[y] = x
        if self.rank[x] == self.rank[y]:
            self.rank[x] += 1


def correlation_groups(
    V_us: ClassCentroids, tau: float, no_merge: Iterable[int] = (0,)
) -> ClassGroups:
    """Connected components of the graph linking classes whose centroid cosine exceeds `tau`.

    Classes in `no_merge` (background by default) always stay singletons."""
    if len(V_us) == 0:
        raise DomainError("correlation_groups needs at least one centroid.")
    fixed = set(no_merge)
    sims = centroid_similarity(V_us)
    uf = UnionFind(len(V_us))
    for i, a in enumerate(V_us.classes):
        for j in range(i + 1, len(V_us)):
            if a in fixed or V_us.classes[j] in fixed:
                continue
            if sims[i, j] > tau:
                uf.union(i, j)
    members = groupby(range(len(V_us)), uf.find)
    groups = sorted(tuple(V_us.classes[i] for i in idx) for idx in members.values())
    return ClassGroups(tuple(groups))


# -----------------------------------------------------------------------------
# WSS intra-class rebalancing


class WssResult(NamedTuple):
    scores: ScoreStack
    ot: dict[str, OtRecord]  # keyed by the group, e.g. "3,4"
    fell_back_groups: list[list[int]]


def _row_normalize(W: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Normalize rows of W; all-zero rows use `fallback` proportions, then uniform."""
    sums = W.sum(axis=1, keepdims=True)
    out = np.where(sums > 0, W / np.where(sums > 0, sums, 1.0), 0.0)
    empty = sums[:, 0] <= 0
    if empty.any():
        fb = fallback[empty]
        fb_sums = fb.sum(axis=1, keepdims=True)
        uniform = np.full_like(fb, 1.0 / fb.shape[1])
        out[empty] = np.where(fb_sums > 0, fb / np.where(fb_sums > 0, fb_sums, 1.0), uniform)
    return out


def wss_rebalance_with_info(
    S_hat_us: ScoreStack,
    F_ws: FeatureMap,
    M_init: ScoreStack,
    groups: ClassGroups,
    cfg: RebalanceConfig,
) -> WssResult:
    V_ws = class_average_pool(F_ws, argmax_labels(M_init))
    us = S_hat_us.flat()
    out = us.copy()
    us_labels = us.argmax(axis=1)
    X = F_ws.values.reshape(F_ws.dim, -1).T
    records = dict[str, OtRecord]()
    fell_back = list[list[int]]()

    for g in groups.multi():
        members = [c for c in g if c in V_ws]
        if not members:
            continue
        pix = np.isin(us_labels, g)
        if not pix.any():
            continue
        S_ws = np.clip(_cosine(X[pix], V_ws.subset(members).vectors), 0.0, 1.0)
        if not S_ws.sum() > 0:
            fell_back.append(list(g))
            continue
        col_marginal = estimate_col_marginal(S_ws, cfg.wss_col_marginal_mode, cfg.ot.col_floor)
        plan = solve_entropic_ot(S_ws, cfg.ot, col_marginal)
        key = ",".join(map(str, g))
        records[key] = OtRecord(plan.iterations, plan.converged)
        if not plan.converged:
            warnings.warn(f"WSS OT for group {key} did not converge; keeping USS scores there.")
            fell_back.append(list(g))
            continue
        Q = assignment_from_plan(plan) if cfg.ot.scale_plan else plan.plan
        block = out[pix]
        if cfg.literal_product_mode:
            block[:, members] = Q * us[pix][:, members]
        else:
            mass = us[pix][:, list(g)].sum(axis=1)
            within = _row_normalize(Q * S_ws, us[pix][:, members])
            block[:, list(g)] = 0.0
            block[:, members] = within * mass[:, None]
        out[pix] = block

    h, w = S_hat_us.shape
    scores = ScoreStack.from_flat(np.clip(out, 0.0, 1.0), h, w, S_hat_us.has_background)
    return WssResult(scores, records, fell_back)


def wss_rebalance(
    S_hat_us: ScoreStack,
    F_ws: FeatureMap,
    M_init: ScoreStack,
    groups: ClassGroups,
    cfg: RebalanceConfig,
) -> ScoreStack:
    """Redistribute each multi-class group's USS mass among its members by WSS similarity.

    Only pixels whose USS argmax falls inside the group are touched, so the inter-class
    decision made by the USS stage is kept."""
    return wss_rebalance_with_info(S_hat_us, F_ws, M_init, groups, cfg).scores


# -----------------------------------------------------------------------------
# full propagation


@dataclass
class Provenance:
    """What each stage decided for one scene."""

    scene: str
    image_labels: list[int]
    vanished: list[int] = field(default_factory=list)
    groups: list[list[int]] = field(default_factory=list)
    ot: dict[str, Any] = field(default_factory=dict)
    fallbacks: list[str] = field(default_factory=list)
    refiner_fell_back: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "scene": self.scene,
            "image_labels": self.image_labels,
            "vanished": self.vanished,
            "groups": self.groups,
            "ot": self.ot,
            "fallbacks": self.fallbacks,
            "refiner_fell_back": self.refiner_fell_back,
        }


class PropagationResult(NamedTuple):
    scores: ScoreStack  # M^dh
    provenance: Provenance
    stages: dict[str, ScoreStack]  # base, seed, init, uss, dh


def dhr_propagate(scene: SceneBundle, refiner: Refiner, cfg: DhrConfig) -> PropagationResult:
    """Run seed initialization, USS and WSS rebalancing, and the final refinement on one scene.

    Any failure is re-raised as a `SceneError` naming the stage it happened in."""
    C = scene.num_classes
    h, w = scene.shape
    labels = sorted(scene.image_labels)
    prov = Provenance(scene.id, labels)
    stages = dict[str, ScoreStack]()
    stage = "base"
    try:
        base = restrict_to_labels(scene.base_scores(), labels)
        base = one_hot(argmax_labels(base), C)
        stages["base"] = base
        if not labels:
            background = one_hot(LabelMask(np.zeros((h, w), dtype=np.uint8)), C)
            return PropagationResult(background, prov, stages)

        stage = "seed"
        seed_refiner = refiner if cfg.stages.seed_refine else Refiner(RefinerConfig("identity"))
        seed = compute_seed(
            attach_background(scene.cams, cfg.seed),
            labels,
            seed_refiner,
            cfg.ot,
            scene.rgb,
            use_ot=cfg.stages.ot_seed,
        )
        if cfg.stages.ot_seed:
            prov.ot["seed"] = OtRecord(seed.ot_iterations, seed.ot_converged)._asdict()
        if seed.ot_fell_back:
            prov.fallbacks.append("seed_ot")
        if seed.refiner_fell_back:
            prov.fallbacks.append("seed_refiner")
        stages["seed"] = seed.seed

        stage = "init"
        vanished = detect_vanished(base, seed.seed, labels, cfg.seed.vanish_ratio)
        prov.vanished = sorted(vanished)
        init = merge_init(base, seed.seed, vanished)
        stages["init"] = init

        stage = "uss"
        F_us = scene.uss_features.resized(h, w)
        if cfg.stages.uss:
            uss = uss_rebalance_with_info(F_us, init, cfg.rebalance)
            S_hat_us, V_us = uss.scores, uss.centroids
            prov.ot["uss"] = not_none(uss.ot)._asdict()
            if uss.fell_back:
                prov.fallbacks.append("uss_ot")
        else:
            S_hat_us = init
            V_us = class_average_pool(F_us, argmax_labels(init))
        stages["uss"] = S_hat_us

        stage = "groups"
        groups = correlation_groups(V_us, cfg.rebalance.tau)
        prov.groups = groups.as_lists()

        stage = "wss"
        S_hat_dh = S_hat_us
        if cfg.stages.wss:
            F_ws = scene.wss_features.resized(h, w)
            wss = wss_rebalance_with_info(S_hat_us, F_ws, init, groups, cfg.rebalance)
            S_hat_dh = wss.scores
            prov.ot["wss"] = {k: r._asdict() for k, r in wss.ot.items()}
            prov.fallbacks.extend(f"wss_group:{','.join(map(str, g))}" for g in wss.fell_back_groups)
        stages["dh"] = S_hat_dh

        stage = "refine"
        final = refiner(S_hat_dh, scene.rgb)
        prov.refiner_fell_back = final.fell_back
    except SceneError:
        raise
    except Exception as e:
        raise SceneError(scene.id, stage, e) from e
    return PropagationResult(final.scores, prov, stages)
