"""Shared fixtures for the data and acceptance tests."""

import numpy as np

from cdcm.data import ClassImageStore


def coded_store(n_train=5000, n_test=1000):
    """Tiny 2x2 images whose pixels encode (class, index) so placement is checkable."""

    def make(n):
        out = {}
        for c in range(10):
            idx = np.arange(n)
            img = np.zeros((n, 2, 2, 3), dtype=np.uint8)
            img[:, 0, 0, 0] = c
            img[:, 0, 0, 1] = idx // 256
            img[:, 0, 0, 2] = idx % 256
            out[c] = img
        return out

    return ClassImageStore(make(n_train), make(n_test))


def decode(img):
    return int(img[0, 0, 0]), int(img[0, 0, 1]) * 256 + int(img[0, 0, 2])
