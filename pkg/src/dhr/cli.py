"""The `dhr` command line: batch refinement, evaluation, synthetic suites and benchmarks.

Exit codes: 0 on success, 1 when some scenes failed, 2 on config or usage errors.
Every failure is reported as a JSON record on stderr."""

import sys
import time
from contextlib import contextmanager
from functools import partial

import click
from termcolor import colored

from .config import PipelineConfig, load_config, with_overrides
from .evaluation import AdjacencyReport, ConfusionMatrix, EvalReport, adjacency_stats, confusion
from .experiments.ablation import run_ablation, tau_sweep
from .rebalance import DhrConfig, dhr_propagate
from .refine import RefinerKinds, make_refiner, single_threaded
from .scene_io import ManifestName, SceneFiles, generate_suite, list_scenes, read_scene
from .seed_init import BackgroundModes
from .sinkhorn import ColMarginalModes, OtConfig, solve_entropic_ot
from .synth import make_rng
from .tensors import IGNORE, LabelMask, argmax_labels, load_mask_png, save_mask_png, save_npy
from .utils import *

ErrorsName = "errors.json"
RefineSummaryName = "refine_summary.json"


class OutputFiles:
    Scores = "m_dh.npy"
    Mask = "m_dh.png"
    Provenance = "provenance.json"
    # written with --save-stages
    Seed = "m_seed.npy"
    Init = "m_init.png"
    Uss = "s_us.npy"
    Dh = "s_dh.npy"


def _emit_error(record: dict[str, Any]) -> None:
    click.echo(json.dumps(record, sort_keys=True), err=True)


@contextmanager
def _config_errors():
    """Turn config problems into an error record and exit code 2."""
    try:
        yield
    except ConfigError as e:
        _emit_error({"scene": None, "stage": "config", "error": "ConfigError", "message": str(e)})
        raise click.exceptions.Exit(2)


def _parse_list(s: str | None, conv: Callable[[str], T1], what: str) -> tuple[T1, ...] | None:
    if s is None:
        return None
    try:
        return tuple(conv(x.strip()) for x in s.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"Cannot parse {what} from {s!r}.")


def _parse_groups(s: str | None) -> list[tuple[int, ...]] | None:
    """`"1,2;3,4"` -> [(1, 2), (3, 4)]."""
    if s is None:
        return None
    return [not_none(_parse_list(g, int, "groups")) for g in s.split(";") if g.strip()]


# -----------------------------------------------------------------------------
# shared options


def ot_options(f):
    opts = [
        click.option("--lambda", "lam", type=float, default=None, help="Entropic regularization λ."),
        click.option("--tol", type=float, default=None, help="Marginal violation tolerance."),
        click.option("--max-iter", type=int, default=None, help="Sinkhorn iteration cap."),
        click.option(
            "--col-marginal",
            type=click.Choice(ColMarginalModes),
            default=None,
            help="How the class marginal is estimated.",
        ),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def pipeline_options(f):
    opts = [
        click.option(
            "--config",
            "config_path",
            type=click.Path(exists=True, dir_okay=False, path_type=Path),
            default=None,
            help="TOML config file. Flags override its values.",
        ),
        click.option("--theta-v", type=float, default=None, help="Vanishing-class area ratio."),
        click.option("--bg-mode", type=click.Choice(BackgroundModes), default=None),
        click.option("--bg-score", type=float, default=None, help="Fixed background score."),
        click.option("--tau", type=float, default=None, help="Grouping threshold τ."),
        click.option("--literal-product/--group-mass", "literal_product", default=None),
        click.option("--refiner", type=click.Choice(RefinerKinds), default=None),
        click.option("--pamr-iters", type=int, default=None),
        click.option("--pamr-dilations", type=str, default=None, help='e.g. "1,2,4,8"'),
        click.option("--pamr-sigma", type=float, default=None),
        click.option("--workers", type=int, default=None, help="Worker processes."),
    ]
    f = ot_options(f)
    for opt in reversed(opts):
        f = opt(f)
    return f


def _pipeline_config(opts: dict[str, Any], **io: Any) -> PipelineConfig:
    cfg = load_config(opts["config_path"])
    return with_overrides(
        cfg,
        {
            "ot": {
                "lam": opts["lam"],
                "tol": opts["tol"],
                "max_iter": opts["max_iter"],
                "col_marginal_mode": opts["col_marginal"],
            },
            "seed": {
                "vanish_ratio": opts["theta_v"],
                "bg_mode": opts["bg_mode"],
                "bg_fixed_score": opts["bg_score"],
            },
            "rebalance": {
                "tau": opts["tau"],
                "literal_product_mode": opts["literal_product"],
            },
            "refiner": {
                "kind": opts["refiner"],
                "iterations": opts["pamr_iters"],
                "dilations": _parse_list(opts["pamr_dilations"], int, "dilations"),
                "sigma_color": opts["pamr_sigma"],
            },
            "io": {"workers": opts["workers"], **io},
        },
    )


# -----------------------------------------------------------------------------
# refine


def refine_scene(
    input_dir: Path, output_dir: Path, cfg: DhrConfig, save_stages: bool, scene_id: str
) -> dict[str, str] | None:
    """Refine and write one scene. Returns an error record instead of raising."""
    try:
        scene = read_scene(input_dir / scene_id)
        with single_threaded():
            res = dhr_propagate(scene, make_refiner(cfg.refiner), cfg)
    except SceneError as e:
        logging.warning(f"[refine] {e}")
        return e.as_record()

    out = output_dir / scene_id
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_npy(res.scores.values, out / OutputFiles.Scores)
        save_mask_png(argmax_labels(res.scores), out / OutputFiles.Mask)
        write_json(out / OutputFiles.Provenance, res.provenance.to_json())
        if save_stages:
            if "seed" in res.stages:
                save_npy(res.stages["seed"].values, out / OutputFiles.Seed)
            if "init" in res.stages:
                save_mask_png(argmax_labels(res.stages["init"]), out / OutputFiles.Init)
            if "uss" in res.stages:
                save_npy(res.stages["uss"].values, out / OutputFiles.Uss)
            if "dh" in res.stages:
                save_npy(res.stages["dh"].values, out / OutputFiles.Dh)
    except (OSError, DhrError) as e:
        return SceneError(scene_id, "write", e).as_record()
    return None


def cmd_refine(input_dir: Path, output_dir: Path, cfg: PipelineConfig) -> int:
    """Refine every scene under `input_dir`. Returns the exit status."""
    ids = list_scenes(input_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    records = pmap(
        partial(refine_scene, input_dir, output_dir, cfg.dhr_config(), cfg.io.save_stages),
        ids,
        desc="refining scenes",
        max_workers=cfg.io.resolved_workers(),
    )
    errors = [r for r in records if r is not None]
    for r in errors:
        _emit_error(r)
    write_json(
        output_dir / RefineSummaryName,
        {"n_scenes": len(ids), "n_refined": len(ids) - len(errors), "n_failed": len(errors)},
    )
    if errors:
        write_json(output_dir / ErrorsName, errors)
        click.echo(colored(f"{len(errors)} of {len(ids)} scenes failed.", "red"))
        return 1
    click.echo(colored(f"Refined {len(ids)} scenes into '{output_dir}'.", "green"))
    return 0


# -----------------------------------------------------------------------------
# eval


def _scene_num_classes(*scene_dirs: Path) -> int | None:
    for d in scene_dirs:
        if (d / SceneFiles.Labels).exists():
            return int(json.loads(read_file(d / SceneFiles.Labels))["num_classes"])
    return None


def _class_names(gt_dir: Path, num_classes: int) -> list[str] | None:
    if not (gt_dir / ManifestName).exists():
        return None
    names = json.loads(read_file(gt_dir / ManifestName)).get("class_names")
    return names if names is not None and len(names) == num_classes else None


def cmd_eval(
    pred_dir: Path,
    gt_dir: Path,
    out_dir: Path | None = None,
    pred_name: str = OutputFiles.Mask,
    gt_name: str = SceneFiles.GroundTruth,
    num_classes: int | None = None,
    radius: int = 1,
) -> EvalReport:
    """Aggregate confusion and adjacency over scenes present in both directories.

    Scenes found on one side only are listed as missing. Writes `eval.json` and `eval.txt`
    into `out_dir` (default: `pred_dir`)."""
    pred_ids, gt_ids = set(list_scenes(pred_dir)), set(list_scenes(gt_dir))
    missing = sorted(pred_ids ^ gt_ids)
    pairs = list[tuple[str, LabelMask, LabelMask]]()
    for sid in sorted(pred_ids & gt_ids):
        p, g = pred_dir / sid / pred_name, gt_dir / sid / gt_name
        if not (p.exists() and g.exists()):
            missing.append(sid)
            continue
        pairs.append((sid, load_mask_png(p), load_mask_png(g)))

    if num_classes is None and pairs:
        num_classes = _scene_num_classes(gt_dir / pairs[0][0], pred_dir / pairs[0][0])
    if num_classes is None:
        # no labels.json anywhere: the largest label seen decides
        seen = [int(m.labels[m.labels != IGNORE].max(initial=0)) for _, p, g in pairs for m in (p, g)]
        num_classes = max(seen, default=0) + 1

    cm = ConfusionMatrix.zeros(num_classes)
    adjacency = AdjacencyReport()
    for sid, pred, gt in pairs:
        cm = cm + confusion(pred, gt, num_classes)
        adjacency = adjacency + adjacency_stats(gt, radius=radius)

    report = EvalReport(cm, adjacency, len(pairs), sorted(missing), _class_names(gt_dir, num_classes))
    out_dir = out_dir or pred_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "eval.json", report.to_json())
    write_file(out_dir / "eval.txt", report.to_text())
    return report


# -----------------------------------------------------------------------------
# ot-bench


def cmd_ot_bench(
    sizes: Sequence[tuple[int, int]], cfg: OtConfig, seed: int = 0, repeats: int = 1
) -> pd.DataFrame:
    """Solve random N×C problems and record iterations, wall time, and final violation."""
    rows = []
    for i, (N, C) in enumerate(sizes):
        if N < 1 or C < 1:
            raise ConfigError(f"Benchmark sizes must be positive, got N={N}, C={C}.")
        S = make_rng(seed, i, "ot-bench").random((N, C))
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            plan = solve_entropic_ot(S, cfg)
            times.append(time.perf_counter() - start)
        rows.append(
            {
                "N": N,
                "C": C,
                "iterations": plan.iterations,
                "time_ms": 1000 * min(times),
                "violation": plan.violation,
                "converged": plan.converged,
            }
        )
    return pd.DataFrame(rows)


def cmd_synth(cfg: PipelineConfig, n_scenes: int, output_dir: Path) -> int:
    if n_scenes < 1:
        raise ConfigError(f"--n must be >= 1, got {n_scenes}.")
    try:
        generate_suite(cfg.synth, n_scenes, output_dir, cfg.io.resolved_workers())
    except GenerationError as e:
        _emit_error({"scene": None, "stage": "synth", "error": type(e).__name__, "message": str(e)})
        return 1
    return 0


def _parse_sizes(s: str) -> list[tuple[int, int]]:
    """`"4096x21,1024x5"` -> [(4096, 21), (1024, 5)]."""
    sizes = []
    for part in s.split(","):
        try:
            n, c = part.lower().split("x")
            sizes.append((int(n), int(c)))
        except ValueError:
            raise ConfigError(f"Cannot parse size {part!r}, expected NxC.")
    return sizes


# -----------------------------------------------------------------------------
# commands


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Show info-level logs.")
def main(verbose: bool):
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )


@main.command()
@click.argument("input_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.argument("output_dir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--save-stages/--no-save-stages", default=None, help="Also write intermediate stages.")
@pipeline_options
def refine(input_dir: Path, output_dir: Path, save_stages: bool | None, **opts):
    """Refine every scene under INPUT_DIR and write the results to OUTPUT_DIR."""
    with _config_errors():
        cfg = _pipeline_config(
            opts, input_dir=str(input_dir), output_dir=str(output_dir), save_stages=save_stages
        )
        logging.info(f"[refine] Using {cfg}")
        code = cmd_refine(input_dir, output_dir, cfg)
    sys.exit(code)


@main.command("eval")
@click.argument("pred_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.argument("gt_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--pred-name", default=OutputFiles.Mask, show_default=True)
@click.option("--gt-name", default=SceneFiles.GroundTruth, show_default=True)
@click.option("--num-classes", type=int, default=None)
@click.option("--radius", type=int, default=1, show_default=True)
def eval_cmd(pred_dir, gt_dir, out_dir, pred_name, gt_name, num_classes, radius):
    """Compare predicted masks under PRED_DIR with ground truth under GT_DIR."""
    try:
        report = cmd_eval(pred_dir, gt_dir, out_dir, pred_name, gt_name, num_classes, radius)
    except DomainError as e:
        _emit_error({"scene": None, "stage": "eval", "error": type(e).__name__, "message": str(e)})
        sys.exit(2)
    click.echo(report.to_text(), nl=False)
    for sid in report.missing:
        _emit_error({"scene": sid, "stage": "eval", "error": "MissingScene", "message": "unmatched"})
    sys.exit(1 if report.missing else 0)


@main.command()
@click.argument("output_dir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--n", "n_scenes", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
)
@click.option("--workers", type=int, default=None)
def synth(output_dir: Path, n_scenes: int, seed: int | None, config_path, workers):
    """Generate a synthetic scene suite into OUTPUT_DIR."""
    with _config_errors():
        cfg = with_overrides(
            load_config(config_path), {"synth": {"seed": seed}, "io": {"workers": workers}}
        )
        status = cmd_synth(cfg, n_scenes, output_dir)
    if status:
        sys.exit(status)
    click.echo(colored(f"Wrote {n_scenes} scenes to '{output_dir}'.", "green"))


@main.command("ot-bench")
@click.option("--sizes", default="1x1,1024x5,4096x21", show_default=True, help="NxC,NxC,...")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--repeats", type=int, default=1, show_default=True)
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
)
@ot_options
def ot_bench(sizes: str, seed: int, repeats: int, config_path, **opts):
    """Time the Sinkhorn solver on random problems."""
    with _config_errors():
        cfg = with_overrides(
            load_config(config_path),
            {
                "ot": {
                    "lam": opts["lam"],
                    "tol": opts["tol"],
                    "max_iter": opts["max_iter"],
                    "col_marginal_mode": opts["col_marginal"],
                }
            },
        )
        df = cmd_ot_bench(_parse_sizes(sizes), cfg.ot, seed, max(1, repeats))
    click.echo(show_table(df))


@main.command()
@click.argument("gt_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--gt-name", default=SceneFiles.GroundTruth, show_default=True)
@click.option("--radius", type=int, default=1, show_default=True)
@click.option("--groups", type=str, default=None, help='Class groups, e.g. "1,2;3,4".')
def adjacency(gt_dir: Path, gt_name: str, radius: int, groups: str | None):
    """Adjacent-area and inter-class statistics of the masks under GT_DIR."""
    with _config_errors():
        parsed = _parse_groups(groups)
        total = AdjacencyReport()
        for sid in list_scenes(gt_dir):
            path = gt_dir / sid / gt_name
            if not path.exists():
                continue
            try:
                total = total + adjacency_stats(load_mask_png(path), parsed, radius)
            except DomainError as e:
                raise ConfigError(str(e)) from e
    click.echo(json.dumps(total.to_json(), indent=2, sort_keys=True))


def _load_scenes(scene_dir: Path) -> list:
    scenes = []
    for sid in list_scenes(scene_dir):
        try:
            scene = read_scene(scene_dir / sid)
        except SceneError as e:
            _emit_error(e.as_record())
            continue
        if scene.ground_truth is None:
            logging.warning(f"[cli] Skipping '{sid}': no ground truth.")
            continue
        scenes.append(scene)
    if not scenes:
        raise ConfigError(f"No scenes with ground truth under '{scene_dir}'.")
    return scenes


@main.command()
@click.argument("scene_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "out_csv", type=click.Path(dir_okay=False, path_type=Path), default=None)
@pipeline_options
def ablation(scene_dir: Path, out_csv: Path | None, **opts):
    """mIoU per stage for each component switched off, on scenes with ground truth."""
    with _config_errors():
        cfg = _pipeline_config(opts)
        scenes = _load_scenes(scene_dir)
        df = run_ablation(scenes, cfg.dhr_config(), cfg.io.resolved_workers())
    click.echo(show_table(df))
    if out_csv is not None:
        df.to_csv(out_csv, index=False)


@main.command("tau-sweep")
@click.argument("scene_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--taus", default="0.5,0.6,0.7,0.8,0.9,1.0", show_default=True)
@click.option("--out", "out_csv", type=click.Path(dir_okay=False, path_type=Path), default=None)
@pipeline_options
def tau_sweep_cmd(scene_dir: Path, taus: str, out_csv: Path | None, **opts):
    """mIoU as a function of the grouping threshold τ."""
    with _config_errors():
        cfg = _pipeline_config(opts)
        tau_values = not_none(_parse_list(taus, float, "taus"))
        scenes = _load_scenes(scene_dir)
        df = tau_sweep(scenes, cfg.dhr_config(), tau_values, cfg.io.resolved_workers())
    click.echo(show_table(df))
    if out_csv is not None:
        df.to_csv(out_csv, index=False)
