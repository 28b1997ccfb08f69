# %%
import os
from termcolor import colored

from dhr.evaluation import AdjacencyReport, ConfusionMatrix, EvalReport, adjacency_stats, confusion, miou
from dhr.experiments.ablation import run_ablation, tau_sweep
from dhr.rebalance import DhrConfig, dhr_propagate
from dhr.refine import make_refiner
from dhr.scene_io import generate_suite
from dhr.synth import SynthConfig
from dhr.tensors import argmax_labels
from dhr.utils import *

os.chdir(proj_root())

# %%
# -----------------------------------------------------------
# experiment configurations

n_scenes = 50
synth_config = SynthConfig(seed=42)
dhr_config = DhrConfig()
suite_dir = proj_root() / "output" / f"synth_{synth_config.seed}_{n_scenes}"
run_ablations = True  # also run the component grid and the τ sweep
ablation_workers = 4

# %%
timer = TimeLogger()
with timer.timed("generate"):
    suite = generate_suite(synth_config, n_scenes, suite_dir)
print(colored(f"Suite: {suite_dir} ({synth_config.num_classes} classes)", "blue"))

# %%
refiner = make_refiner(dhr_config.refiner)
C = synth_config.num_classes
cm_base, cm_dh = ConfusionMatrix.zeros(C), ConfusionMatrix.zeros(C)
adjacency = AdjacencyReport()
scene_gain = list[float]()
for s in suite:
    gt = not_none(s.bundle.ground_truth)
    with timer.timed("propagate"):
        res = dhr_propagate(s.bundle, refiner, dhr_config)
    scene_base = confusion(argmax_labels(res.stages["base"]), gt, C)
    scene_dh = confusion(argmax_labels(res.scores), gt, C)
    scene_gain.append(miou(scene_dh).mean - miou(scene_base).mean)
    cm_base, cm_dh = cm_base + scene_base, cm_dh + scene_dh
    adjacency = adjacency + adjacency_stats(gt)

base_miou, dh_miou = miou(cm_base).mean, miou(cm_dh).mean
color = "green" if dh_miou > base_miou else "red"
print(colored(f"mIoU base: {base_miou:.4f}  refined: {dh_miou:.4f}", color))
print("per-scene mIoU gain:")
pretty_print_dict(scalar_stats(scene_gain), level=1)
print(EvalReport(cm_dh, adjacency, len(suite), class_names=synth_config.class_names()).to_text())
print(show_table(timer.as_dataframe()))

# %%
if run_ablations:
    scenes = [s.bundle for s in suite]
    with with_default_workers(ablation_workers):
        print(colored("Component ablations", "blue"))
        print(show_table(run_ablation(scenes, dhr_config)))
        print(colored("Grouping threshold sweep", "blue"))
        print(show_table(tau_sweep(scenes, dhr_config, [0.5, 0.6, 0.7, 0.8, 0.9, 1.0])))
