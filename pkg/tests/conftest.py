"""Shared helpers: small, fast synthetic benchmarks for the unit suites."""
import pytest

from ncdseg import config as cfgmod
from ncdseg import synth


def small_config(**overrides):
    """Default config shrunk to a few images and epochs; overrides on top."""
    values = dict(
        fold__n_base_images=24, fold__n_novel_images=24, fold__n_val_images=8,
        base_train__epochs=3, novel_train__epochs=3,
    )
    values.update(overrides)
    return cfgmod.default_config().replace(**values)


def build_benchmark(cfg):
    return synth.make_fold_benchmark(
        cfgmod.scene_spec(cfg), cfgmod.fold_spec(cfg), cfgmod.saliency_spec(cfg))


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_bench(small_cfg):
    """(base, novel, val) splits for the shrunk default config."""
    return build_benchmark(small_cfg)
