import numpy as np
import pytest

from latentsteer.toy import ToyBackend

SQUARE_TOP = 24
SQUARE_SIZE = 16
GRAY = 0.4


def make_planted_square(size=64, top=SQUARE_TOP, left=SQUARE_TOP,
                        side=SQUARE_SIZE, gray=GRAY):
    """Gray canvas with a pure red square; the standard masking fixture."""
    image = np.full((size, size, 3), gray, dtype=np.float64)
    image[top:top + side, left:left + side] = (1.0, 0.0, 0.0)
    return image


def square_annotation(size=64, top=SQUARE_TOP, left=SQUARE_TOP, side=SQUARE_SIZE):
    mask = np.zeros((size, size), dtype=np.float64)
    mask[top:top + side, left:left + side] = 1.0
    return mask


def iou(a, b):
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return np.logical_and(a, b).sum() / union


@pytest.fixture
def planted_square():
    return make_planted_square()


@pytest.fixture
def toy_backend():
    return ToyBackend()
