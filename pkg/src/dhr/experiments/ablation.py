"""Component ablations and τ sweeps over scenes that come with ground truth."""

import dataclasses
from functools import partial

from dhr.evaluation import ConfusionMatrix, confusion, miou
from dhr.rebalance import DhrConfig, dhr_propagate
from dhr.refine import Refiner, single_threaded
from dhr.tensors import IGNORE, SceneBundle, argmax_labels
from dhr.utils import *

StageNames = ("base", "seed", "init", "uss", "dh", "final")


def ablation_variants(base: DhrConfig = DhrConfig()) -> dict[str, DhrConfig]:
    """Variants of `base` that each switch off one component of the propagation."""
    replace = dataclasses.replace

    def without(**toggles: bool) -> DhrConfig:
        return replace(base, stages=replace(base.stages, **toggles))

    return {
        "full": base,
        "no_ot_seed": without(ot_seed=False),
        "no_seed_refine": without(seed_refine=False),
        "no_uss": without(uss=False),
        "no_wss": without(wss=False),
        "seed_only": without(uss=False, wss=False),
        "literal_product": replace(
            base, rebalance=replace(base.rebalance, literal_product_mode=True)
        ),
        "identity_refiner": replace(base, refiner=replace(base.refiner, kind="identity")),
    }


class SceneScores(NamedTuple):
    scene: str
    confusions: dict[str, np.ndarray]  # stage -> confusion counts
    n_vanished: int  # ground-truth classes missing from the base mask
    n_recovered: int  # ... of which the final mask contains again
    n_multi_groups: int


def score_scene(cfg: DhrConfig, scene: SceneBundle) -> SceneScores:
    gt = not_none(scene.ground_truth)
    C = scene.num_classes
    with single_threaded():
        res = dhr_propagate(scene, Refiner(cfg.refiner), cfg)
    stacks = {name: res.stages.get(name, res.scores) for name in StageNames[:-1]}
    stacks["final"] = res.scores
    masks = {name: argmax_labels(s) for name, s in stacks.items()}
    cms = {name: confusion(m, gt, C).counts for name, m in masks.items()}

    def classes_of(labels: np.ndarray) -> set[int]:
        return {int(c) for c in np.unique(labels)} - {0, IGNORE}

    vanished = classes_of(gt.labels) - classes_of(masks["base"].labels)
    recovered = vanished & classes_of(masks["final"].labels)
    n_multi = sum(1 for g in res.provenance.groups if len(g) >= 2)
    return SceneScores(scene.id, cms, len(vanished), len(recovered), n_multi)


def _score_all(
    scenes: Sequence[SceneBundle], cfg: DhrConfig, desc: str, workers: int | None
) -> list[SceneScores]:
    return pmap(partial(score_scene, cfg), list(scenes), desc=desc, max_workers=workers)


def summarize(scores: Sequence[SceneScores], num_classes: int) -> dict[str, float]:
    """Aggregate mIoU per stage, vanished-class recovery rate, and mean multi-class groups."""
    row = dict[str, float]()
    for stage in StageNames:
        cm = ConfusionMatrix.zeros(num_classes)
        for s in scores:
            cm = cm + ConfusionMatrix(s.confusions[stage])
        row[f"miou_{stage}"] = miou(cm).mean
    row["recovery"] = safe_div(sum(s.n_recovered for s in scores), sum(s.n_vanished for s in scores))
    row["multi_groups"] = safe_div(sum(s.n_multi_groups for s in scores), len(scores))
    return row


def run_ablation(
    scenes: Sequence[SceneBundle], base: DhrConfig, workers: int | None = None
) -> pd.DataFrame:
    num_classes = scenes[0].num_classes
    rows = []
    for name, cfg in ablation_variants(base).items():
        scores = _score_all(scenes, cfg, f"ablation: {name}", workers)
        rows.append({"variant": name, **summarize(scores, num_classes)})
    return pd.DataFrame(rows)


def tau_sweep(
    scenes: Sequence[SceneBundle],
    base: DhrConfig,
    taus: Sequence[float],
    workers: int | None = None,
) -> pd.DataFrame:
    """mIoU as a function of the grouping threshold τ. τ = 1 switches WSS rebalancing off."""
    num_classes = scenes[0].num_classes
    rows = []
    for tau in taus:
        cfg = dataclasses.replace(base, rebalance=dataclasses.replace(base.rebalance, tau=tau))
        scores = _score_all(scenes, cfg, f"tau={tau}", workers)
        rows.append({"tau": tau, **summarize(scores, num_classes)})
    return pd.DataFrame(rows)

