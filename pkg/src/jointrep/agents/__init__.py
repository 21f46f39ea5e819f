"""Policy learners that consume RSSM features."""

from .imagination import ImaginationAgent, ImaginationConfig, imagination_update
from .returns import lambda_returns
from .sac import SacAgent, SacConfig, alpha_update, sac_update, squashed_log_prob, tanh_log_det

__all__ = [
    "ImaginationAgent", "ImaginationConfig", "imagination_update", "lambda_returns",
    "SacAgent", "SacConfig", "alpha_update", "sac_update", "squashed_log_prob", "tanh_log_det",
]
