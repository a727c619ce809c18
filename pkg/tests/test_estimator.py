import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from haploomni import HaploOmni
from haploomni.training import STAGES

FAST = {s: {"steps": 2, "batch_size": 2} for s in STAGES}


@pytest.fixture
def fitted(small_cfg, small_data):
    est = HaploOmni(config=small_cfg, stage_overrides=FAST, sample_steps=2, max_new_tokens=3)
    return est.fit(small_data.und_images, small_data.und_captions)


def test_params_and_clone(small_cfg):
    est = HaploOmni(config=small_cfg, seed=3, precision=64)
    params = est.get_params()
    assert params["seed"] == 3 and params["precision"] == 64
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "bundle_")


def test_not_fitted():
    with pytest.raises(NotFittedError):
        HaploOmni().predict(np.zeros((1, 16, 16, 3), np.uint8))
    with pytest.raises(NotFittedError):
        HaploOmni().sample("red square tl")


@pytest.mark.parametrize("kw", [{"precision": 16}, {"stages": ("unified", "align-1")},
                                {"stages": ("bogus",)}, {"sample_steps": 0}])
def test_bad_params(small_cfg, small_data, kw):
    with pytest.raises(ValueError):
        HaploOmni(config=small_cfg, **kw).fit(small_data.und_images, small_data.und_captions)


def test_bad_inputs(small_cfg):
    est = HaploOmni(config=small_cfg)
    with pytest.raises(ValueError, match="uint8"):
        est.fit(np.zeros((2, 8, 8, 3)), ["a", "b"])
    with pytest.raises(ValueError, match="captions"):
        est.fit(np.zeros((2, 8, 8, 3), np.uint8), ["a"])
    with pytest.raises(ValueError):
        est.fit(np.zeros((2, 16, 16, 3), np.uint8), ["a", "b"])


def test_fit_predict_sample(fitted, small_data):
    assert set(fitted.history_) == set(STAGES)
    caps = fitted.predict(small_data.und_images[:2])
    assert len(caps) == 2 and all(isinstance(c, str) for c in caps)
    imgs = fitted.sample(["red square tl", "blue cross br"], seed=1)
    assert imgs.shape == (2, 1, 8, 8, 3) and imgs.dtype == np.uint8
    assert np.array_equal(imgs, fitted.sample(["red square tl", "blue cross br"], seed=1))


def test_save_load(fitted, small_data, tmp_path):
    path = fitted.save(tmp_path / "m.ckpt")
    back = HaploOmni.load(path, sample_steps=2, max_new_tokens=3)
    assert back.predict(small_data.und_images[:1]) == fitted.predict(small_data.und_images[:1])
    assert np.array_equal(back.sample("green circle bl"), fitted.sample("green circle bl"))
