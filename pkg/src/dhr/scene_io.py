"""On-disk scene directories and synthetic suite generation.

Layout of one scene::

    <root>/<id>/cam.npy          float32 (C_fg, H, W)
    <root>/<id>/base_mask.png    uint8 labels, background = 0
    <root>/<id>/uss_feat.npy     float32 (D_us, h_f, w_f)
    <root>/<id>/wss_feat.npy     float32 (D_ws, h_f, w_f)
    <root>/<id>/labels.json      {"classes": [...], "num_classes": C}
    <root>/<id>/rgb.png          optional
    <root>/<id>/gt.png           optional
"""

from functools import partial

from .synth import SynthConfig, SynthScene, generate_scene, rng_key
from .tensors import (
    FeatureMap,
    SceneBundle,
    ScoreStack,
    argmax_labels,
    load_mask_png,
    load_npy,
    load_rgb_png,
    save_mask_png,
    save_npy,
    save_rgb_png,
)
from .utils import *


class SceneFiles:
    Cams = "cam.npy"
    BaseMask = "base_mask.png"
    UssFeatures = "uss_feat.npy"
    WssFeatures = "wss_feat.npy"
    Labels = "labels.json"
    Rgb = "rgb.png"
    GroundTruth = "gt.png"

    Required = (Cams, BaseMask, UssFeatures, WssFeatures, Labels)


ManifestName = "manifest.json"
SynthFieldTags = ("layout", "uss", "wss", "cams", "degrade", "rgb")


def list_scenes(root: Path) -> list[str]:
    """Scene ids under `root`, sorted, so processing order never depends on the filesystem."""
    if not root.is_dir():
        raise FileNotFoundError(f"Scene directory not found: {root}")
    return sorted(p.name for p in root.iterdir() if p.is_dir())


def read_scene(scene_dir: Path) -> SceneBundle:
    scene_id = scene_dir.name
    try:
        missing = [f for f in SceneFiles.Required if not (scene_dir / f).exists()]
        if missing:
            raise FileNotFoundError(f"missing required files: {', '.join(missing)}")
        labels = json.loads(read_file(scene_dir / SceneFiles.Labels))
        rgb_path, gt_path = scene_dir / SceneFiles.Rgb, scene_dir / SceneFiles.GroundTruth
        return SceneBundle(
            id=scene_id,
            cams=ScoreStack(load_npy(scene_dir / SceneFiles.Cams), has_background=False),
            base_mask=load_mask_png(scene_dir / SceneFiles.BaseMask),
            uss_features=FeatureMap(load_npy(scene_dir / SceneFiles.UssFeatures)),
            wss_features=FeatureMap(load_npy(scene_dir / SceneFiles.WssFeatures)),
            image_labels=frozenset(int(c) for c in labels["classes"]),
            num_classes=int(labels["num_classes"]),
            rgb=load_rgb_png(rgb_path) if rgb_path.exists() else None,
            ground_truth=load_mask_png(gt_path) if gt_path.exists() else None,
        )
    except (DhrError, OSError, KeyError, ValueError) as e:
        raise SceneError(scene_id, "load", e) from e


def write_scene(bundle: SceneBundle, scene_dir: Path) -> None:
    scene_dir.mkdir(parents=True, exist_ok=True)
    base = bundle.base_mask
    if isinstance(base, ScoreStack):
        base = argmax_labels(base)
    save_npy(bundle.cams.values, scene_dir / SceneFiles.Cams)
    save_mask_png(base, scene_dir / SceneFiles.BaseMask)
    save_npy(bundle.uss_features.values, scene_dir / SceneFiles.UssFeatures)
    save_npy(bundle.wss_features.values, scene_dir / SceneFiles.WssFeatures)
    write_json(
        scene_dir / SceneFiles.Labels,
        {"classes": sorted(bundle.image_labels), "num_classes": bundle.num_classes},
    )
    if bundle.rgb is not None:
        save_rgb_png(bundle.rgb, scene_dir / SceneFiles.Rgb)
    if bundle.ground_truth is not None:
        save_mask_png(bundle.ground_truth, scene_dir / SceneFiles.GroundTruth)


def _rng_keys(cfg: SynthConfig, index: int) -> dict[str, list[int]]:
    return {tag: rng_key(cfg.seed, index, tag) for tag in SynthFieldTags}


def _generate_and_write(cfg: SynthConfig, out_dir: Path, index: int) -> SynthScene:
    scene = generate_scene(cfg, index)
    write_scene(scene.bundle, out_dir / scene.meta.scene_id)
    return scene


def generate_suite(
    cfg: SynthConfig, n_scenes: int, out_dir: Path, max_workers: int | None = None
) -> list[SynthScene]:
    """Generate scenes 0..n_scenes-1 into `out_dir` and write the manifest."""
    if n_scenes < 1:
        raise ConfigError(f"n_scenes must be >= 1, got {n_scenes}.")
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = pmap(
        partial(_generate_and_write, cfg, out_dir),
        list(range(n_scenes)),
        desc="generating scenes",
        max_workers=max_workers,
    )
    manifest = {
        "config": config_as_dict(cfg),
        "num_classes": cfg.num_classes,
        "class_names": cfg.class_names(),
        "n_scenes": n_scenes,
        "scenes": [
            {**s.meta.to_json(), "rng_keys": _rng_keys(cfg, s.meta.scene_index)} for s in scenes
        ],
    }
    write_json(out_dir / ManifestName, manifest)
    logging.info(f"[scene_io] Wrote {n_scenes} scenes to '{out_dir}'")
    return scenes


def load_manifest(path: Path) -> tuple[SynthConfig, list[int]]:
    """The generator config and scene indices recorded in a suite manifest."""
    manifest = json.loads(read_file(path))
    cfg = SynthConfig(**manifest["config"])
    return cfg, [int(s["index"]) for s in manifest["scenes"]]
