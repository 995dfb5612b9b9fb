import numpy as np
import pytest

from mitodml.backbone import BackboneConfig, WideResNet


@pytest.fixture(scope="session")
def desk_net():
    return WideResNet(BackboneConfig())


@pytest.fixture
def desk_params64(desk_net):
    return desk_net.init_params(np.random.default_rng(0), dtype=np.float64)


def random_patches(rng, n, side=24):
    return rng.integers(0, 256, (n, side, side, 3), dtype=np.uint8)


@pytest.fixture(scope="session")
def tiny_data():
    """A handful of synthetic images resolved to training patches."""
    from mitodml.synth import SynthConfig, synth_dataset
    from mitodml.trainer import TrainConfig, prepare_training_data

    images = synth_dataset(SynthConfig(seed=3), 10)
    cfg = TrainConfig(match_radius=15.0, patch_offset=3)
    return prepare_training_data(images[:7], images[7:], cfg)


def quick_config(**kw):
    from mitodml.trainer import TrainConfig

    base = dict(method="BCE", max_epochs=3, steps_per_epoch=2, batch_size=8, initial_nm_ratio=2.0,
                match_radius=15.0, patch_offset=3)
    return TrainConfig(**{**base, **kw})


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'} {detail}")
