"""Training-data adapter: deterministic scene stream as torch tensors."""

from __future__ import annotations

import torch

from . import scenes
from .model import PAD_ID, VOCAB


class SceneDataset:
    """Memoized view of the seeded scene stream.

    ``dataset(i)`` yields ``(image in [-1, 1], prompt ids)`` and
    ``dataset.condition(i)`` the matching global edge condition, all
    derived from ``scene_for_index(seed, i)``.
    """

    def __init__(self, seed: int, size: int = 4096, max_tokens: int = 8):
        self.seed = seed
        self.size = size
        self.max_tokens = max_tokens
        self._cache = {}

    def _build(self, index: int):
        spec = scenes.scene_for_index(self.seed, index % self.size)
        image, caption, masks = scenes.generate_scene(spec)
        img = torch.from_numpy(image).double() / 127.5 - 1.0
        ids = [1] + [VOCAB.index(tok) for tok in caption]
        ids += [PAD_ID] * (self.max_tokens - len(ids))
        cond = torch.from_numpy(
            scenes.edge_condition(masks).edges.astype(float))
        return img, torch.tensor(ids, dtype=torch.long), cond

    def _get(self, index: int):
        if index not in self._cache:
            self._cache[index] = self._build(index)
        return self._cache[index]

    def __call__(self, index: int):
        img, ids, _ = self._get(index)
        return img, ids

    def condition(self, index: int):
        return self._get(index)[2]
