"""Routing decisions, expert-pruning masks and the LID loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, MaskError
from .numerics import Tensor

TEACHER = "teacher"
ARGMAX = "argmax"


@dataclass(frozen=True)
class ExpertMask:
    active: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "active", tuple(bool(a) for a in self.active))
        if not any(self.active):
            raise MaskError("expert mask must keep at least one expert")

    @classmethod
    def full(cls, n: int) -> "ExpertMask":
        return cls((True,) * n)

    @classmethod
    def keep(cls, n: int, indices: Sequence[int]) -> "ExpertMask":
        bad = [i for i in indices if not 0 <= i < n]
        if bad:
            raise ConfigurationError(f"expert indices {bad} outside [0, {n})")
        keep = set(indices)
        return cls(tuple(i in keep for i in range(n)))

    @classmethod
    def from_languages(cls, languages: Sequence[str], keep: str | Sequence[str]) -> "ExpertMask":
        """Parse a keep-list such as ``"zh,en"``; ``"all"`` keeps everything."""
        if isinstance(keep, str):
            keep = [s.strip() for s in keep.split(",") if s.strip()]
        if list(keep) == ["all"]:
            return cls.full(len(languages))
        unknown = [k for k in keep if k not in languages]
        if unknown:
            raise ConfigurationError(f"unknown language(s) {unknown}; known: {list(languages)}")
        return cls(tuple(lang in keep for lang in languages))

    @property
    def indices(self) -> list[int]:
        return [i for i, a in enumerate(self.active) if a]

    def __len__(self) -> int:
        return len(self.active)


@dataclass(frozen=True)
class RoutingDecision:
    lang_posterior: np.ndarray
    expert: int
    mask_used: ExpertMask
    mode: str


def _logits_array(lid_logits) -> np.ndarray:
    data = lid_logits.data if isinstance(lid_logits, Tensor) else np.asarray(lid_logits, dtype=float)
    return data


def decide(lid_logits, mask: ExpertMask | None = None, mode: str = ARGMAX,
           true_lang: int | None = None) -> RoutingDecision:
    """Pick an expert for one utterance.

    Masked experts get ``-inf`` logits before both the softmax and the argmax, so
    their posterior is exactly zero.  Ties go to the lowest index.
    """
    logits = _logits_array(lid_logits).reshape(-1)
    n = logits.size
    mask = ExpertMask.full(n) if mask is None else mask
    if len(mask) != n:
        raise ConfigurationError(f"mask over {len(mask)} experts for {n} logits")
    masked = np.where(mask.active, logits, -np.inf)
    posterior = nx.softmax(Tensor(masked)).data
    if mode == TEACHER:
        if true_lang is None:
            raise ConfigurationError("teacher routing needs the true language")
        if not 0 <= true_lang < n or not mask.active[true_lang]:
            raise ConfigurationError(f"teacher language {true_lang} is pruned or out of range")
        expert = int(true_lang)
    elif mode == ARGMAX:
        expert = int(np.argmax(masked))
    else:
        raise ConfigurationError(f"unknown routing mode {mode!r}")
    return RoutingDecision(posterior, expert, mask, mode)


def decide_batch(lid_logits, mask: ExpertMask | None = None, mode: str = ARGMAX,
                 true_langs: Sequence[int] | None = None) -> list[RoutingDecision]:
    logits = _logits_array(lid_logits)
    return [decide(row, mask, mode, None if true_langs is None else int(true_langs[i]))
            for i, row in enumerate(logits)]


def lid_loss(lid_logits: Tensor, true_lang) -> Tensor:
    """Cross-entropy ``-log softmax(logits)[true]``; batched input gives the batch mean."""
    logits = nx.as_tensor(lid_logits)
    if logits.ndim == 1:
        logits = nx.reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(true_lang, dtype=np.intp))
    B, n = logits.shape
    if labels.size != B or labels.min() < 0 or labels.max() >= n:
        raise ConfigurationError(f"labels {labels.tolist()} do not fit logits of shape {logits.shape}")
    onehot = np.zeros((B, n))
    onehot[np.arange(B), labels] = 1.0
    return nx.sum(nx.log_softmax(logits, axis=-1) * onehot) * (-1.0 / B)


def router_accuracy(decisions: Sequence[RoutingDecision], labels: Sequence[int]) -> float:
    if len(decisions) != len(labels):
        raise ValueError(f"{len(decisions)} decisions vs {len(labels)} labels")
    if not decisions:
        return float("nan")
    return sum(int(d.expert == int(l)) for d, l in zip(decisions, labels)) / len(decisions)
