"""Experiment configuration and seeded random streams."""
from __future__ import annotations

import configparser
import zlib
from dataclasses import dataclass, fields, replace

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    data_source: str = "synthetic"
    data_path: str = ""
    include_titles: bool = False
    title_vocab: int = 5000
    n_users: int = 1000
    n_items: int = 2000
    n_interactions: int = 100_000
    n_item_features: int = 2
    n_user_features: int = 2
    item_feature_cardinality: int = 20
    user_feature_cardinality: int = 8
    latent_dim: int = 8
    noise_rate: float = 0.1
    skew: float = 1.0
    id_noise: float = 0.7
    logit_scale: float = 4.0
    exposure_bias: float = 0.5
    # model
    base_model: str = "wide_deep"
    k: int = 16
    hidden: int = 64
    meta_hidden: int = 16
    init_std: float = 0.1
    # training
    lr: float = 0.001
    meta_lr: float = 0.001
    batch_size: int = 256
    pretrain_epochs: int = 1
    meta_epochs: int = 1
    phase_epochs: int = 1
    interaction_cap: int = 100
    online_base_update: bool = False
    # protocol
    split_n: int = 200
    split_k: int = 20
    method: str = "mwuf"
    seed: int = 0
    seeds: int = 1

    def replace(self, **changes):
        return replace(self, **changes)

    def synthetic_spec(self, seed=None):
        from .dataio import SyntheticSpec
        return SyntheticSpec(
            n_users=self.n_users, n_items=self.n_items, n_interactions=self.n_interactions,
            n_item_features=self.n_item_features, n_user_features=self.n_user_features,
            item_feature_cardinality=self.item_feature_cardinality,
            user_feature_cardinality=self.user_feature_cardinality,
            latent_dim=self.latent_dim, noise_rate=self.noise_rate, skew=self.skew,
            id_noise=self.id_noise, logit_scale=self.logit_scale,
            exposure_bias=self.exposure_bias, seed=self.seed if seed is None else seed)


CONFIG_KEYS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name, raw):
    default = CONFIG_KEYS[name].default
    if isinstance(default, bool):
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {name!r}: expected a boolean, got {raw!r}")
    try:
        return type(default)(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as "
                          f"{type(default).__name__}") from None


def load_config(path=None, overrides=None):
    """Read an INI-style key/value file (any section names) and apply overrides.

    Overrides win over the file. Unknown keys raise :class:`ConfigError`
    naming the key.
    """
    values = {}
    if path:
        parser = configparser.ConfigParser()
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        if not text.lstrip().startswith("["):
            text = "[experiment]\n" + text
        parser.read_string(text)
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in CONFIG_KEYS:
                    raise ConfigError(f"unknown config key {key!r} in section [{section}]")
                values[key] = _coerce(key, raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value)
    cfg = ExperimentConfig(**values)
    if cfg.split_n <= 3 * cfg.split_k:
        raise ConfigError("split_n must exceed 3 * split_k")
    return cfg


def rng_for(seed, component):
    """Independent generator for ``component`` derived from the root ``seed``.

    Streams are keyed by a CRC of the component name, so adding components
    or seeds never perturbs existing streams.
    """
    key = zlib.crc32(component.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))
