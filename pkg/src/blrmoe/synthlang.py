"""Synthetic multilingual "speech" with controllable confusion and domain shift.

Each language owns a contiguous token alphabet (neighbouring alphabets share
``overlap`` ids) and a Gaussian feature cluster per alphabet position.  A
confusability knob pulls one language's clusters onto another's, so that the
frame-level evidence for which language is speaking becomes weak while the
token inventories stay different.  What remains of the language identity is a
per-language accent offset and a coarticulation strength, both utterance-wide.  Utterances are bigram token sequences, each
token held for 2-4 frames, padded with one or two silence frames at each end.

Every utterance is generated from its own seed derived from
``(corpus seed, language, index)`` so generation is order-independent.

On disk a corpus is a directory holding ``corpus.json`` (languages, vocab size,
feature dim), ``manifest.tsv`` (``utt_id  language  offset  num_frames  tokens``)
and ``features.npy`` (all frames stacked, float64, ``[sum T, F]``).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import CorpusConfig
from .errors import ConfigurationError

MIN_TOKENS, MAX_TOKENS = 3, 12
MIN_HOLD, MAX_HOLD = 2, 4


@dataclass(frozen=True)
class LanguageSpec:
    id: int
    name: str
    alphabet: tuple[int, ...]
    emission_centers: np.ndarray = field(repr=False)
    transition: np.ndarray = field(repr=False)
    initial: np.ndarray = field(repr=False)
    accent: np.ndarray | None = field(default=None, repr=False)
    coarticulation: float = 0.0

    def __post_init__(self):
        if not self.alphabet:
            raise ConfigurationError(f"language {self.name} has an empty alphabet")
        if not np.all(np.isfinite(self.emission_centers)):
            raise ConfigurationError(f"language {self.name} has non-finite emission centers")


@dataclass(frozen=True)
class DomainShift:
    feature_bias: np.ndarray
    feature_scale: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        if np.any(np.asarray(self.feature_scale) <= 0):
            raise ConfigurationError("feature_scale must be positive")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")

    @classmethod
    def zero(cls, feature_dim: int) -> "DomainShift":
        return cls(np.zeros(feature_dim), np.ones(feature_dim), 0.0)

    @classmethod
    def sample(cls, feature_dim: int, bias: float, scale: float, noise: float, seed: int) -> "DomainShift":
        rng = np.random.default_rng([seed, 7919])
        return cls(rng.normal(0.0, bias, feature_dim),
                   np.exp(rng.normal(0.0, scale, feature_dim)), noise)

    @property
    def is_identity(self) -> bool:
        return (not np.any(self.feature_bias) and np.all(self.feature_scale == 1.0)
                and self.noise_std == 0.0)

    def apply(self, features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.is_identity:
            return features
        out = features * self.feature_scale + self.feature_bias
        if self.noise_std > 0:
            out = out + rng.normal(0.0, self.noise_std, features.shape)
        return out


@dataclass(frozen=True)
class Utterance:
    """One example: features X, target tokens Y, language L."""

    features: np.ndarray = field(repr=False)
    target: tuple[int, ...]
    language: int
    utterance_id: str

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class Corpus:
    utterances: tuple[Utterance, ...]
    languages: tuple[str, ...]
    vocab_size: int
    feature_dim: int

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def by_language(self, lang: int) -> "Corpus":
        return replace(self, utterances=tuple(u for u in self.utterances if u.language == lang))

    def subset(self, utts: Sequence[Utterance]) -> "Corpus":
        return replace(self, utterances=tuple(utts))


def build_languages(names: Sequence[str], cfg: CorpusConfig, feature_dim: int,
                    seed: int | None = None) -> list[LanguageSpec]:
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 104729])
    A, step = cfg.alphabet_size, cfg.alphabet_size - cfg.overlap
    centers = {n: rng.normal(0.0, 1.0, (A, feature_dim)) for n in names}
    accents = {n: rng.normal(0.0, cfg.accent_std, feature_dim) for n in names}
    coart = {n: float(rng.uniform(0.0, cfg.coarticulation)) for n in names}
    for a, b, k in cfg.confusability:
        if a not in centers or b not in centers:
            raise ConfigurationError(f"confusability pair {a}-{b} names an unknown language")
        # pronunciations converge; each language keeps its own accent offset
        centers[b] = (1.0 - k) * centers[b] + k * centers[a]
    specs = []
    for i, name in enumerate(names):
        start = 1 + i * step
        trans = rng.dirichlet(np.full(A, 0.5), size=A)
        init = rng.dirichlet(np.full(A, 1.0))
        specs.append(LanguageSpec(i, name, tuple(range(start, start + A)), centers[name], trans, init,
                                  accents[name], coart[name]))
    return specs


def silence_center(feature_dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 15485863]).normal(0.0, 1.0, feature_dim)


def _utterance(spec: LanguageSpec, index: int, seed: int, noise_std: float,
               silence: np.ndarray) -> Utterance:
    rng = np.random.default_rng([seed, spec.id, index])
    n_tok = int(rng.integers(MIN_TOKENS, MAX_TOKENS + 1))
    phones = [int(rng.choice(len(spec.alphabet), p=spec.initial))]
    for _ in range(n_tok - 1):
        phones.append(int(rng.choice(len(spec.alphabet), p=spec.transition[phones[-1]])))
    accent = 0.0 if spec.accent is None else spec.accent
    frames = [silence] * int(rng.integers(1, 3))
    prev = silence
    for ph in phones:
        # each token's frames carry an echo of the previous token (language-specific strength)
        frame = spec.emission_centers[ph] + accent + spec.coarticulation * prev
        frames.extend([frame] * int(rng.integers(MIN_HOLD, MAX_HOLD + 1)))
        prev = spec.emission_centers[ph]
    frames.extend([silence] * int(rng.integers(1, 3)))
    clean = np.stack(frames)
    feats = clean + rng.normal(0.0, noise_std, clean.shape)
    target = tuple(spec.alphabet[p] for p in phones)
    return Utterance(feats, target, spec.id, f"{spec.name}-{seed}-{index:05d}")


def generate_corpus(specs: Sequence[LanguageSpec], utterances_per_lang: int, seed: int,
                    shift: DomainShift | None = None, noise_std: float = 0.7,
                    vocab_size: int | None = None, silence: np.ndarray | None = None) -> Corpus:
    if utterances_per_lang < 1:
        raise ConfigurationError("utterances_per_lang must be >= 1")
    F = specs[0].emission_centers.shape[1]
    if silence is None:
        silence = silence_center(F, seed)
    utts = [_utterance(s, i, seed, noise_std, silence)
            for s in specs for i in range(utterances_per_lang)]
    if vocab_size is None:
        vocab_size = 1 + max(max(s.alphabet) for s in specs)
    corpus = Corpus(tuple(utts), tuple(s.name for s in specs), vocab_size, F)
    if shift is not None:
        corpus = apply_shift(corpus, shift, seed)
    return corpus


def apply_shift(corpus: Corpus, shift: DomainShift, seed: int) -> Corpus:
    """Shifted copy; targets, languages and ids are untouched."""
    if shift.is_identity:
        return corpus
    out = []
    for k, u in enumerate(corpus.utterances):
        rng = np.random.default_rng([seed, 31337, k])
        out.append(replace(u, features=shift.apply(u.features, rng)))
    return corpus.subset(out)


def split(corpus: Corpus, fractions: Sequence[float], seed: int = 0) -> tuple[Corpus, Corpus]:
    """Per-language deterministic train/test partition."""
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigurationError(f"fractions must be two non-negatives summing to 1, got {fractions}")
    if fractions[0] == 0.0:
        raise ConfigurationError("empty training split requested")
    train, test = [], []
    for lang in range(len(corpus.languages)):
        utts = [u for u in corpus.utterances if u.language == lang]
        order = np.random.default_rng([seed, lang, 2]).permutation(len(utts))
        n_train = int(round(fractions[0] * len(utts)))
        train += [utts[i] for i in sorted(order[:n_train])]
        test += [utts[i] for i in sorted(order[n_train:])]
    return corpus.subset(train), corpus.subset(test)


@dataclass
class PaddedBatch:
    features: np.ndarray
    lengths: np.ndarray
    targets: list[tuple[int, ...]]
    languages: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def collate(utts: Sequence[Utterance]) -> PaddedBatch:
    T = max(u.num_frames for u in utts)
    F = utts[0].features.shape[1]
    feats = np.zeros((len(utts), T, F))
    for i, u in enumerate(utts):
        feats[i, :u.num_frames] = u.features
    return PaddedBatch(feats, np.array([u.num_frames for u in utts]), [u.target for u in utts],
                       np.array([u.language for u in utts]), [u.utterance_id for u in utts])


def batches(corpus: Corpus, batch_size: int, order: Sequence[int] | None = None):
    utts = corpus.utterances
    order = range(len(utts)) if order is None else order
    order = list(order)
    for i in range(0, len(order), batch_size):
        yield collate([utts[j] for j in order[i:i + batch_size]])


@dataclass(frozen=True)
class CorpusBundle:
    """Everything an experiment needs: train, in-domain test, shifted test, LID-only pairs."""

    train: Corpus
    test: Corpus
    test_shifted: Corpus
    lid_shifted: Corpus
    shift: DomainShift


def build_bundle(languages: Sequence[str], cfg: CorpusConfig, feature_dim: int,
                 seed: int | None = None) -> CorpusBundle:
    seed = cfg.seed if seed is None else seed
    specs = build_languages(languages, cfg, feature_dim, seed)
    vocab = cfg.vocab_size(len(languages))
    silence = silence_center(feature_dim, seed)
    full = generate_corpus(specs, cfg.utterances_per_lang, seed, noise_std=cfg.noise_std,
                           vocab_size=vocab, silence=silence)
    train, test = split(full, (1.0 - cfg.test_fraction, cfg.test_fraction), seed)
    shift = DomainShift.sample(feature_dim, cfg.shift_bias, cfg.shift_scale, cfg.shift_noise, seed)
    lid = generate_corpus(specs, cfg.lid_utterances_per_lang, seed + 1_000_003,
                          noise_std=cfg.noise_std, vocab_size=vocab, silence=silence)
    # the LID-only pairs see the same deployment domain but different utterances
    return CorpusBundle(train, test, apply_shift(test, shift, seed),
                        apply_shift(lid, shift, seed + 1_000_003), shift)


# --- serialization ---------------------------------------------------------

def save_corpus(corpus: Corpus, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"languages": list(corpus.languages), "vocab_size": corpus.vocab_size,
            "feature_dim": corpus.feature_dim}
    (directory / "corpus.json").write_text(json.dumps(meta, indent=2) + "\n")
    offset = 0
    with open(directory / "manifest.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["utt_id", "language", "offset", "num_frames", "tokens"])
        for u in corpus.utterances:
            w.writerow([u.utterance_id, corpus.languages[u.language], offset, u.num_frames,
                        " ".join(map(str, u.target))])
            offset += u.num_frames
    feats = (np.concatenate([u.features for u in corpus.utterances])
             if corpus.utterances else np.zeros((0, corpus.feature_dim)))
    np.save(directory / "features.npy", feats.astype(np.float64))


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    meta = json.loads((directory / "corpus.json").read_text())
    feats = np.load(directory / "features.npy")
    languages = tuple(meta["languages"])
    utts = []
    with open(directory / "manifest.tsv", newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            off, n = int(row["offset"]), int(row["num_frames"])
            tokens = tuple(int(t) for t in row["tokens"].split())
            utts.append(Utterance(feats[off:off + n].copy(), tokens,
                                  languages.index(row["language"]), row["utt_id"]))
    return Corpus(tuple(utts), languages, int(meta["vocab_size"]), int(meta["feature_dim"]))
