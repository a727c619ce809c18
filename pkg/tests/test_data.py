import numpy as np
import pytest

from haploomni.data import COLORS, PairDataset, generate_synthetic, render, template


def test_render_places_color_in_quadrant():
    img = render("square", "blue", "br", size=16)[0]
    assert img.shape == (16, 16, 3)
    assert (img[8:, 8:] == COLORS["blue"]).all(axis=-1).sum() == 36
    assert img[:8].sum() == 0 and img[:, :8].sum() == 0


def test_video_frames_move():
    vid = render("cross", "red", "tl", size=16, frames=3)
    assert vid.shape == (3, 16, 16, 3)
    assert not np.array_equal(vid[0], vid[1])


def test_generation_is_seeded_and_distinct():
    a, b = generate_synthetic(3, 16, 16), generate_synthetic(3, 16, 16)
    assert a.fingerprint() == b.fingerprint()
    assert len(set(a.und_captions)) == 16
    assert a.fingerprint() != generate_synthetic(4, 16, 16).fingerprint()
    assert template("square", "red", "tl") == "red square tl"


def test_pair_dataset_validates():
    imgs = np.zeros((2, 8, 8, 3), np.uint8)
    d = PairDataset(imgs, ["a", "b"], imgs[:1], ["c"])
    assert d.und_images.shape == (2, 1, 8, 8, 3)
    assert d.latents("gen", 4).shape == (1, 4, 48)
    with pytest.raises(ValueError):
        PairDataset(imgs, ["a"], imgs, ["a", "b"])
    with pytest.raises(ValueError):
        PairDataset(np.zeros((2, 8, 8)), ["a", "b"], imgs, ["a", "b"])
