import numpy as np
import pytest

from hnet import tensor as T
from hnet.layers import LayerSpec
from hnet.model import HNet, ModelConfig, StageSpec


def tiny_stage(width, ratio=3, chunker="dc"):
    spec = LayerSpec("ssm", width=width, heads=2, d_state=4, expand=2)
    return StageSpec(
        width=width,
        target_ratio=ratio,
        encoder=[spec],
        decoder=[LayerSpec("ssm", width=width, heads=2, d_state=4, expand=2)],
        chunker=chunker,
    )


def tiny_config(n_stages=1, widths=(8, 12), window=4, chunker="dc", ratio=3):
    stages = [
        tiny_stage(widths[s], ratio=ratio, chunker=chunker if s == 0 else "dc")
        for s in range(n_stages)
    ]
    main_w = widths[n_stages]
    main = [
        LayerSpec("attention", width=main_w, heads=2, window=window),
        LayerSpec("gated_mlp", width=main_w),
    ]
    return ModelConfig(stages=stages, main=main, main_width=main_w)


def tiny_model(seed=0, **kw) -> HNet:
    return HNet(tiny_config(**kw), seed=seed)


def gradcheck(f, x, max_coords=None, eps=1e-3, tol=1e-3, floor=0.1, seed=0):
    """finite_difference_check with a floor suited to O(1)-scaled losses."""
    rep = T.finite_difference_check(
        f,
        x,
        eps=eps,
        tol=tol,
        max_coords=max_coords,
        rng=np.random.default_rng(seed),
        denom_floor=floor,
    )
    assert rep.ok, (
        f"max rel err {rep.max_rel_err:.3e} at {rep.worst_coord}: {rep.message}"
    )
    return rep


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
