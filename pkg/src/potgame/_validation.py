"""Input checks shared by the estimator facade."""

import numpy as np
from sklearn.utils.validation import check_array

from potgame.game import GameSpec, validate_spec


def check_game(game):
    """Accept a :class:`GameSpec`, a ``Scenario``, a scenario path or a shipped name."""
    from potgame import scenarios

    if isinstance(game, GameSpec):
        spec = game
    elif isinstance(game, scenarios.Scenario):
        spec = game.build()
    elif isinstance(game, str) or hasattr(game, "__fspath__"):
        spec = scenarios.load(game).build()
    else:
        raise TypeError(f"expected a GameSpec, Scenario or scenario path, got {type(game).__name__}")
    report = validate_spec(spec)
    if not report.ok:
        raise ValueError("invalid game: " + "; ".join(str(i) for i in report))
    return spec


def check_initial_states(X, n):
    """2-D float array of joint initial states with ``n`` columns."""
    X = check_array(X, dtype=np.float64, ensure_2d=False)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != n:
        raise ValueError(f"initial states have {X.shape[1]} columns, the game has state dimension {n}")
    return X
