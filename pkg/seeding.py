"""
Counter-based random stream derivation.

Every random stream in a run is a numpy ``Generator`` over the Philox-4x64
bit generator with a 128-bit key built from::

    key = (scenario_code << 112) | (stream << 104) | (index << 64) | master_seed

where ``scenario_code`` (16 bits) comes from ``SCENARIO_CODES``, ``stream`` (8
bits) separates independent uses inside one scenario (trajectory ensembles,
readout shots, ...) and ``index`` (40 bits) is the trajectory or shot index.
The packing is injective, so distinct inputs never share a key. Any
implementation of Philox-4x64-10 given the same key reproduces the stream.
"""
from typing import Union

import numpy as np

from errors import ConfigError

RNG_ALGORITHM = "numpy.random.Philox(4x64-10)/standard_normal"

SCENARIO_CODES = {
    "engine": 0,
    "squeeze-scan": 1,
    "gain-map": 2,
    "calibrate-crosstalk": 3,
    "calibrate-pump-phase": 4,
    "detect-calib": 5,
    "rf-calib": 6,
    "oracle-compare": 7,
    "kunkel-compare": 8,
}

MAX_SEED = 2**64 - 1
MAX_STREAM = 2**8 - 1
MAX_INDEX = 2**40 - 1

# engine ensembles use streams below this; readout draws use READOUT_STREAM + k
READOUT_STREAM = 128


def seed_derive(master_seed: int, scenario: Union[str, int], index: int, stream: int = 0) -> int:
    if isinstance(scenario, str):
        if scenario not in SCENARIO_CODES:
            raise ConfigError(f"Unknown scenario for seed derivation: {scenario}")
        scenario = SCENARIO_CODES[scenario]
    if not 0 <= master_seed <= MAX_SEED:
        raise ConfigError(f"Seed must be an unsigned 64-bit integer, got {master_seed}")
    if not 0 <= stream <= MAX_STREAM:
        raise ConfigError(f"Stream id out of range: {stream}")
    if not 0 <= index <= MAX_INDEX:
        raise ConfigError(f"Stream index out of range: {index}")
    return (int(scenario) << 112) | (int(stream) << 104) | (int(index) << 64) | int(master_seed)


def make_rng(key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=key))
