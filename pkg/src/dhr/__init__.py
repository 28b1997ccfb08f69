from .rebalance import DhrConfig, PropagationResult, dhr_propagate
from .tensors import FeatureMap, LabelMask, SceneBundle, ScoreStack
from .utils import proj_root

__all__ = [
    "DhrConfig",
    "FeatureMap",
    "LabelMask",
    "PropagationResult",
    "SceneBundle",
    "ScoreStack",
    "dhr_propagate",
    "proj_root",
]
