import numpy as np
import pytest
import torch

from synthfeat.scenegen import GenConfig, generate_dataset


@pytest.fixture(scope="session")
def tiny_syn_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny_syn")
    generate_dataset(d, seed=11, count=8, resolution=(64, 64))
    return d


@pytest.fixture(scope="session")
def tiny_real_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny_real")
    generate_dataset(d, seed=23, count=8, resolution=(64, 64),
                     config=GenConfig.realproxy())
    return d


def random_targets(rng, b, h, w, device="cpu"):
    """Random but internally consistent loss targets for b items of h x w."""
    valid = torch.from_numpy(rng.random((b, h, w)) > 0.3)
    for i in range(b):
        if not valid[i].any():
            valid[i, 0, 0] = True
    contour = torch.from_numpy(
        (rng.random((b, h, w)) > 0.8).astype(np.float64)) * valid
    n_valid = valid.sum(dim=(1, 2)).double()
    n_edge = contour.sum(dim=(1, 2))
    beta = (n_valid - n_edge) / n_valid
    log_depth = torch.from_numpy(rng.normal(size=(b, h, w)))
    normal = torch.from_numpy(rng.normal(size=(b, 3, h, w)))
    normal = normal / normal.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return contour, beta, log_depth, normal, valid
