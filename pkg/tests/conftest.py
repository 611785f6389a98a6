"""Shared fixtures: small solid-color crop stores and fast committee configs."""

import numpy as np
import pytest

from openworld.committee import CommitteeConfig
from openworld.data import CropStore, LabelSet, Sample

# saturated, well-separated base colors for quick-to-learn toy stores
TOY_COLORS = {
    "car": (205, 45, 45),
    "person": (45, 90, 215),
    "traffic_sign": (235, 205, 40),
    "traffic_light": (200, 50, 205),
    "building": (235, 140, 35),
    "vegetation": (45, 185, 70),
}


def toy_store(classes, per_class, seed=0, city="toycity"):
    """Solid-color 64x64 crops with mild noise; trivially separable classes."""
    rng = np.random.default_rng(seed)
    label_set = LabelSet(classes)
    store = CropStore(label_set)
    for name in classes:
        base = np.array(TOY_COLORS[name], dtype=np.int16)
        for i in range(per_class):
            noise = rng.integers(-25, 26, size=(64, 64, 3), dtype=np.int16)
            px = np.clip(base[None, None, :] + noise, 0, 255).astype(np.uint8)
            store.add(Sample(px, label_set.index(name), (city, f"{name}_{i}", i)))
    return store


def fast_config(n_members=2, epochs=4, seed=0, **overrides):
    """Tiny-filter configuration: full pipeline semantics, unit-test runtimes."""
    defaults = dict(architecture="A", conv_filters=(4, 8), dense_width=24,
                    batch_size=16)
    defaults.update(overrides)
    return CommitteeConfig(n_members=n_members, epochs=epochs, seed=seed, **defaults)


@pytest.fixture
def two_class_store():
    return toy_store(["car", "person"], per_class=40, seed=1)
