from .protocol import Policy, RandomPolicy, eval_seeds, evaluate_policy
from .stats import iqm, stratified_bootstrap_ci

__all__ = ["Policy", "RandomPolicy", "eval_seeds", "evaluate_policy", "iqm", "stratified_bootstrap_ci"]
