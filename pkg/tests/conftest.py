import numpy as np
import pytest

from askd.synthetic import generate_corpus


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Small identity tree shared by IO/training tests: 4 ids x 6 images, 32px."""
    root = tmp_path_factory.mktemp("toycorpus") / "faces"
    paths, labels, names = generate_corpus(
        root, n_identities=4, images_per_identity=6, size=32, seed=11
    )
    return {"root": root, "paths": paths, "labels": labels, "names": names}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_images(rng, n, size=32):
    """Random natural-ish uint8 images: smooth base plus texture plus noise."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = []
    for _ in range(n):
        a, b, c = rng.uniform(-1, 1, size=3)
        base = 128 + 80 * (a * xx + b * yy + c * xx * yy)
        tex = 40 * np.sin(2 * np.pi * rng.uniform(2, 6) * xx) * np.sin(
            2 * np.pi * rng.uniform(2, 6) * yy
        )
        img = base[:, :, None] + tex[:, :, None] + rng.normal(0, 8, (size, size, 3))
        out.append(np.clip(img, 0, 255).astype(np.uint8))
    return np.stack(out)
