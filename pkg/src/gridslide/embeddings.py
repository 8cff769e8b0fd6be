from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SOURCES = ("unimodal_cls", "contrastive_pool", "text", "mean")


@dataclass
class SlideEmbedding:
    vector: np.ndarray
    source: str
    slide_id: str = ""
    stage: str = ""

    def normalized(self) -> np.ndarray:
        n = np.linalg.norm(self.vector)
        return self.vector / n if n > 0 else self.vector.copy()
