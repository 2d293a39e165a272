from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from padnet.config import parse_config

ROOT = Path(__file__).resolve().parents[1]
MNIST = ROOT / "data" / "mnist10k"


def numeric_grad(f, arr: np.ndarray, delta: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` (mutated in place and restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + delta
        hi = f()
        arr[i] = old - delta
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * delta)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def moe_raw(**over):
    raw = {
        "name": "moe-test", "seed": 0, "epochs": 3, "method": "imp",
        "model": {"input_shape": [8], "num_classes": 3,
                  "layers": [{"type": "moe", "hidden": 4, "experts": 4, "top": 2}]},
        "pad": {"kappa": 0.5, "timing": "epoch-2", "steps": 2, "batches": 2},
        "optim": {"lr": 0.1, "batch_size": 32},
        "data": {"kind": "synthetic", "dim": 8, "classes": 3, "train_size": 300, "test_size": 100,
                 "noise": 0.3, "clusters_per_class": 2},
    }
    raw.update(over)
    return raw


def cnn_raw(**over):
    raw = {
        "name": "cnn-test", "seed": 0, "epochs": 1, "method": "imp",
        "model": {"input_shape": [1, 28, 28], "num_classes": 10, "head": "flatten",
                  "layers": [{"type": "dyconv", "out_channels": 4, "stride": 2, "k": 2},
                             {"type": "dyconv", "out_channels": 6, "stride": 2, "k": 2}]},
        "pad": {"kappa": 0.3, "steps": 2, "batches": 2},
        "optim": {"lr": 0.05, "batch_size": 64},
        "temperature": {"anneal_epochs": 1},
        "data": {"kind": "idx",
                 "train_images": str(MNIST / "train-images-idx3-ubyte.gz"),
                 "train_labels": str(MNIST / "train-labels-idx1-ubyte.gz"),
                 "test_images": str(MNIST / "test-images-idx3-ubyte.gz"),
                 "test_labels": str(MNIST / "test-labels-idx1-ubyte.gz"),
                 "train_subset": 256, "test_subset": 128},
    }
    raw.update(over)
    return raw


@pytest.fixture
def moe_cfg():
    return parse_config(moe_raw())


@pytest.fixture
def cnn_cfg():
    return parse_config(cnn_raw())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
