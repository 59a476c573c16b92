import numpy as np
import pytest

from invattack.dataset_io import Dataset, GrayImage, LabeledExample
from invattack.digits import make_dataset


def image_from(vals) -> GrayImage:
    return GrayImage(np.asarray(vals, dtype=np.float32))


@pytest.fixture(scope="session")
def digit_train():
    return make_dataset(900, seed=101)


@pytest.fixture(scope="session")
def digit_test():
    return make_dataset(60, seed=102)


@pytest.fixture()
def tiny_dataset():
    """Four 3x3 images, two categories, visibly distinct."""
    imgs = [
        image_from([[1, 0, 0], [1, 0, 0], [1, 0, 0]]),
        image_from([[0, 0, 1], [0, 0, 1], [0, 0, 1]]),
        image_from([[1, 1, 1], [0, 0, 0], [0, 0, 0]]),
        image_from([[0, 0, 0], [0, 0, 0], [1, 1, 1]]),
    ]
    labels = [0, 0, 1, 1]
    return Dataset([LabeledExample(im, lab) for im, lab in zip(imgs, labels)], 2)
