"""Python interface to the hyperFastRL core."""

import json

from . import _core
from ._core import Env as _Env
from ._core import forcing_field, quantile_midpoints, tqc_targets, truncation_mean

__all__ = [
    "Env",
    "default_config",
    "desk_config",
    "config_hash",
    "train",
    "evaluate",
    "heatmap",
    "uncontrolled_heatmap",
    "forcing_field",
    "quantile_midpoints",
    "tqc_targets",
    "truncation_mean",
]


def _dumps(obj):
    return "" if obj is None else json.dumps(obj)


def Env(config=None):
    """Single controlled KS environment; `config` is an env config dict."""
    return _Env(_dumps(config))


def default_config():
    return json.loads(_core.default_config_json())


def desk_config():
    return json.loads(_core.desk_config_json())


def config_hash(config):
    return _core.config_hash(json.dumps(config))


def train(config, seed, out):
    return _core.train(json.dumps(config), seed, str(out))


def evaluate(checkpoint, protocol=None):
    return json.loads(_core.evaluate(str(checkpoint), _dumps(protocol)))


def heatmap(checkpoint, mu, case="zero", rows=1000, onset=500):
    return _core.heatmap(str(checkpoint), mu, case, rows, onset)


def uncontrolled_heatmap(env_config=None, mu=0.0, case="zero", rows=1000, onset=500):
    return _core.uncontrolled_heatmap(_dumps(env_config), mu, case, rows, onset)
