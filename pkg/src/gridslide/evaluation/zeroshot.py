"""Prompt-ensemble zero-shot classification."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from gridslide._io import atomic_write_text
from gridslide.errors import DataError

TEMPLATES: tuple[str, ...] = (
    "CLASSNAME.",
    "an image of CLASSNAME.",
    "the image shows CLASSNAME.",
    "the image displays CLASSNAME.",
    "the image exhibits CLASSNAME.",
    "an example of CLASSNAME.",
    "CLASSNAME is shown.",
    "this is CLASSNAME.",
    "I observe CLASSNAME.",
    "the pathology image shows CLASSNAME.",
    "a pathology image shows CLASSNAME.",
    "the pathology slide shows CLASSNAME.",
    "shows CLASSNAME.",
    "contains CLASSNAME.",
    "presence of CLASSNAME.",
    "CLASSNAME is present.",
    "CLASSNAME is observed.",
    "the pathology image reveals CLASSNAME.",
    "a microscopic image of showing CLASSNAME.",
    "histology shows CLASSNAME.",
    "CLASSNAME can be seen.",
    "the tissue shows CLASSNAME.",
    "CLASSNAME is identified.",
)


def _unit(x: np.ndarray, axis: int = -1) -> np.ndarray:
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(n == 0):
        raise DataError("cannot normalize a zero vector")
    return x / n


@dataclass
class PromptEnsemble:
    class_names: list[str]
    prompts: list[list[str]]
    vectors: np.ndarray | None = None  # (C, D), unit rows once resolved

    def __post_init__(self):
        if not self.prompts or len(self.prompts) != len(self.class_names):
            raise DataError("one prompt list per class is required")
        for name, ps in zip(self.class_names, self.prompts):
            if not ps:
                raise DataError(f"class {name!r} has no prompt")

    @classmethod
    def from_templates(cls, class_names: Sequence[str], templates: Sequence[str] = TEMPLATES,
                       synonyms: Sequence[Sequence[str]] | None = None) -> "PromptEnsemble":
        """Expand every template with every name (or synonym) of each class."""
        names = synonyms or [[n] for n in class_names]
        prompts = [[t.replace("CLASSNAME", n) for n in ns for t in templates] for ns in names]
        return cls(list(class_names), prompts)

    def resolve(self, embed_text: Callable[[list[str]], np.ndarray]) -> "PromptEnsemble":
        """v_c = normalize(mean_p normalize(embed(p))) over the class's prompts."""
        vecs = []
        for ps in self.prompts:
            e = _unit(np.asarray(embed_text(ps), dtype=np.float64))
            vecs.append(e.mean(axis=0))
        self.vectors = _unit(np.stack(vecs))
        return self

    def save(self, path: str | os.PathLike) -> None:
        lines = []
        for name, ps in zip(self.class_names, self.prompts):
            lines.append(f"[{name}]")
            lines.extend(ps)
            lines.append("")
        atomic_write_text(path, "\n".join(lines))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PromptEnsemble":
        names, prompts = [], []
        with open(path, encoding="utf-8") as fh:
            for raw in fh:
                line = raw.strip()
                if not line:
                    continue
                if line.startswith("[") and line.endswith("]"):
                    names.append(line[1:-1])
                    prompts.append([])
                elif not names:
                    raise DataError(f"{path}: prompt before the first [class] section")
                else:
                    prompts[-1].append(line)
        return cls(names, prompts)


def zero_shot(slide_embs: np.ndarray, ensemble: PromptEnsemble | np.ndarray) -> np.ndarray:
    """argmax_c <u_i, v_c> over normalized slide and class vectors; ties go to
    the smallest class id."""
    V = ensemble.vectors if isinstance(ensemble, PromptEnsemble) else np.asarray(ensemble, dtype=np.float64)
    if V is None or len(V) == 0:
        raise DataError("empty or unresolved prompt ensemble")
    U = _unit(np.atleast_2d(np.asarray(slide_embs, dtype=np.float64)))
    return np.argmax(U @ _unit(V).T, axis=1)


def zero_shot_scores(slide_embs: np.ndarray, ensemble: PromptEnsemble | np.ndarray) -> np.ndarray:
    V = ensemble.vectors if isinstance(ensemble, PromptEnsemble) else np.asarray(ensemble, dtype=np.float64)
    return _unit(np.atleast_2d(np.asarray(slide_embs, dtype=np.float64))) @ _unit(V).T
