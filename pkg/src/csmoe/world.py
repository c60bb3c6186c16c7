"""Synthetic multilingual universe and the toy decoder.

Stands in for a speech encoder and real corpora: each language is a Gaussian
cluster in feature space (a centroid plus per-token content vectors plus
noise), and three proxy tasks replace transcription and translation:

* ASR proxy — targets are the source token ids themselves (identity task);
* ST proxy — targets are a fixed per-language random bijection of source
  tokens into a shared target vocabulary;
* CS-ST proxy — utterances concatenate segments from two languages, each
  segment mapped through its own language's bijection; the segment spans are
  recorded for analytics but withheld from training labels.

Construction guarantees, all calibrated in units of the noise scale σ:

* language centroids are rescaled so their minimum pairwise distance is
  exactly ``separation · σ``;
* token content vectors are projected orthogonal to every centroid-difference
  direction (language identity is linearly separable from content by
  construction) and rescaled so their minimum pairwise distance is
  ``2 · token_margin · σ`` — adjacent tokens' noise balls stay disjoint at
  the default margin of 3σ, keeping the decoding task solvable.

The toy decoder is a per-position classifier: a learned prompt embedding is
mean-pooled into a single vector, added to every projected speech position,
and pushed through a bias-free linear head over the shared target vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Parameter, Tensor, add, matmul
from .projector import CS_UNLABELED

__all__ = [
    "TASK_ASR",
    "TASK_ST",
    "TASK_CS_ST",
    "Segment",
    "LanguageSpec",
    "World",
    "Utterance",
    "ToyDecoder",
    "gen_world",
    "gen_utterance",
    "gen_dataset",
    "init_decoder",
    "decode",
]

TASK_ASR = "asr"
TASK_ST = "st"
TASK_CS_ST = "cs-st"
_TASKS = (TASK_ASR, TASK_ST, TASK_CS_ST)


@dataclass(frozen=True)
class Segment:
    """Half-open span [start, end) of one language inside an utterance."""

    start: int
    end: int
    language: int


@dataclass(frozen=True)
class LanguageSpec:
    language_index: int
    centroid: np.ndarray  # [d_in]
    noise_sigma: float
    vocab_start: int  # source ids occupy [vocab_start, vocab_start + vocab_size)
    vocab_size: int
    token_embeddings: np.ndarray  # [vocab_size × d_in]
    st_bijection: np.ndarray  # [vocab_size] target ids in the shared range


@dataclass(frozen=True)
class World:
    languages: tuple[LanguageSpec, ...]
    d_in: int
    separation: float
    noise_sigma: float
    vocab_per_lang: int
    token_margin: float
    seed: int

    @property
    def num_languages(self) -> int:
        return len(self.languages)

    @property
    def source_vocab_size(self) -> int:
        return self.num_languages * self.vocab_per_lang

    @property
    def target_vocab_size(self) -> int:
        # source ids (ASR targets) plus one shared translated range
        return (self.num_languages + 1) * self.vocab_per_lang


@dataclass(frozen=True)
class Utterance:
    features: np.ndarray  # [T × d_in]
    targets: np.ndarray  # [T] ids in the shared target vocab
    source_tokens: np.ndarray  # [T] global source ids
    task: str
    language: int  # concrete label, or CS_UNLABELED for code-switched
    segments: Optional[tuple[Segment, ...]]  # CS only; analytics ground truth

    @property
    def length(self) -> int:
        return len(self.targets)

    def token_languages(self) -> np.ndarray:
        """True per-token language labels (reconstructed from segments)."""
        if self.segments is None:
            return np.full(self.length, self.language, dtype=np.intp)
        labels = np.empty(self.length, dtype=np.intp)
        for seg in self.segments:
            labels[seg.start : seg.end] = seg.language
        return labels

    def training_labels(self) -> np.ndarray:
        """Labels as training sees them: CS tokens are unlabeled."""
        return np.full(self.length, self.language, dtype=np.intp)


def _min_pairwise_distance(points: np.ndarray) -> float:
    diffs = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diffs**2).sum(-1))
    return float(dist[~np.eye(len(points), dtype=bool)].min()) if len(points) > 1 else 0.0


def gen_world(
    m: int,
    d_in: int,
    separation: float,
    noise_sigma: float,
    vocab_per_lang: int,
    seed: int,
    *,
    token_margin: float = 3.0,
) -> World:
    """Draw a deterministic synthetic world of ``m`` languages.

    Raises ValueError for invalid sizes, and when ``d_in < m``: with fewer
    feature dimensions than languages there is no room to hold token content
    orthogonal to every language direction, so the requested separation
    cannot be realized independently of content.
    """
    if m < 2:
        raise ValueError(f"need at least 2 languages, got m={m}")
    if separation <= 0:
        raise ValueError(f"separation must be positive, got {separation}")
    if noise_sigma <= 0:
        raise ValueError(f"noise_sigma must be positive, got {noise_sigma}")
    if vocab_per_lang < 1:
        raise ValueError(f"vocab_per_lang must be >= 1, got {vocab_per_lang}")
    if token_margin <= 0:
        raise ValueError(f"token_margin must be positive, got {token_margin}")
    if d_in < m:
        raise ValueError(
            f"separation {separation} infeasible: d_in={d_in} leaves no content "
            f"subspace for m={m} languages (need d_in >= m)"
        )
    rng = np.random.default_rng(seed)

    centroids = rng.normal(size=(m, d_in))
    dmin = _min_pairwise_distance(centroids)
    if dmin == 0.0:
        raise ValueError("degenerate centroid draw (coincident points); change seed")
    centroids *= separation * noise_sigma / dmin

    # orthonormal basis of the centroid-difference subspace
    diffs = (centroids[1:] - centroids[0]).T  # [d_in × (m-1)]
    q, _ = np.linalg.qr(diffs)

    languages = []
    for g in range(m):
        emb = rng.normal(size=(vocab_per_lang, d_in))
        emb = emb - (emb @ q) @ q.T  # content ⟂ language directions
        if vocab_per_lang > 1:
            emin = _min_pairwise_distance(emb)
            if emin == 0.0:
                raise ValueError("degenerate token-embedding draw; change seed")
            emb *= 2.0 * token_margin * noise_sigma / emin
        st = m * vocab_per_lang + rng.permutation(vocab_per_lang)
        languages.append(
            LanguageSpec(
                language_index=g,
                centroid=centroids[g],
                noise_sigma=noise_sigma,
                vocab_start=g * vocab_per_lang,
                vocab_size=vocab_per_lang,
                token_embeddings=emb,
                st_bijection=st.astype(np.intp),
            )
        )
    return World(
        languages=tuple(languages),
        d_in=d_in,
        separation=separation,
        noise_sigma=noise_sigma,
        vocab_per_lang=vocab_per_lang,
        token_margin=token_margin,
        seed=seed,
    )


def _draw_span(
    world: World, language: int, length: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Features, global source ids, and local token ids for one language span."""
    lang = world.languages[language]
    local = rng.integers(0, lang.vocab_size, size=length)
    noise = rng.normal(0.0, lang.noise_sigma, size=(length, world.d_in))
    features = lang.centroid[None, :] + lang.token_embeddings[local] + noise
    return features, (lang.vocab_start + local).astype(np.intp), local


def gen_utterance(
    world: World,
    language: Optional[int],
    task: str,
    length: int,
    rng: np.random.Generator,
    *,
    num_switches: int = 1,
) -> Utterance:
    """Draw one utterance for the given proxy task.

    ASR/ST require a concrete ``language``; the CS task requires
    ``language=None`` and draws two distinct languages plus ``num_switches``
    uniform switch points (each resulting segment is non-empty).
    """
    if task not in _TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {_TASKS}")
    if length < 1:
        raise ValueError(f"utterance length must be >= 1, got {length}")

    if task in (TASK_ASR, TASK_ST):
        if language is None or not 0 <= language < world.num_languages:
            raise ValueError(
                f"task {task!r} requires a concrete language in 0..{world.num_languages - 1}, "
                f"got {language}"
            )
        features, source, local = _draw_span(world, language, length, rng)
        if task == TASK_ASR:
            targets = source.copy()
        else:
            targets = world.languages[language].st_bijection[local]
        return Utterance(
            features=features,
            targets=targets.astype(np.intp),
            source_tokens=source,
            task=task,
            language=language,
            segments=None,
        )

    # code-switched translation
    if language is not None and language != CS_UNLABELED:
        raise ValueError("code-switched utterances draw their own languages; pass language=None")
    if num_switches < 1:
        raise ValueError(f"num_switches must be >= 1, got {num_switches}")
    if length < num_switches + 1:
        raise ValueError(
            f"length {length} too short for {num_switches} switch point(s); "
            f"need at least {num_switches + 1} tokens"
        )
    pair = rng.choice(world.num_languages, size=2, replace=False)
    cuts = np.sort(rng.choice(np.arange(1, length), size=num_switches, replace=False))
    bounds = [0, *cuts.tolist(), length]
    segments = []
    feature_parts, target_parts, source_parts = [], [], []
    for i in range(len(bounds) - 1):
        start, end = bounds[i], bounds[i + 1]
        seg_lang = int(pair[i % 2])
        feats, source, local = _draw_span(world, seg_lang, end - start, rng)
        feature_parts.append(feats)
        source_parts.append(source)
        target_parts.append(world.languages[seg_lang].st_bijection[local])
        segments.append(Segment(start=start, end=end, language=seg_lang))
    return Utterance(
        features=np.concatenate(feature_parts),
        targets=np.concatenate(target_parts).astype(np.intp),
        source_tokens=np.concatenate(source_parts),
        task=TASK_CS_ST,
        language=CS_UNLABELED,
        segments=tuple(segments),
    )


def gen_dataset(
    world: World,
    task: str,
    language: Optional[int],
    count: int,
    length: int,
    seed,
    *,
    num_switches: int = 1,
    max_workers: int = 1,
) -> tuple[Utterance, ...]:
    """Draw ``count`` utterances on independent per-index rng streams.

    Utterance i is generated from ``default_rng([*seed, i])``, so the result
    is byte-identical regardless of generation order or worker count;
    ``max_workers > 1`` parallelizes across utterances with threads.
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    base = (
        (int(seed),)
        if isinstance(seed, (int, np.integer))
        else tuple(int(s) for s in seed)
    )

    def one(i: int) -> Utterance:
        rng = np.random.default_rng([*base, i])
        return gen_utterance(world, language, task, length, rng, num_switches=num_switches)

    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return tuple(pool.map(one, range(count)))
    return tuple(one(i) for i in range(count))


@dataclass(frozen=True)
class ToyDecoder:
    """Per-position classifier standing in for a large language model."""

    prompt_embedding: Parameter  # [prompt_len × d_model]
    output_head: Parameter  # [d_model × vocab_size]

    @property
    def d_model(self) -> int:
        return self.output_head.value.data.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.prompt_embedding, self.output_head]


def init_decoder(d_model: int, vocab_size: int, prompt_len: int, seed: int) -> ToyDecoder:
    if d_model < 1 or vocab_size < 1 or prompt_len < 1:
        raise ValueError("d_model, vocab_size, and prompt_len must all be >= 1")
    rng = np.random.default_rng(seed)
    prompt = rng.normal(size=(prompt_len, d_model)) / np.sqrt(d_model)
    bound = np.sqrt(6.0 / (d_model + vocab_size))
    head = rng.uniform(-bound, bound, size=(d_model, vocab_size))
    return ToyDecoder(
        prompt_embedding=Parameter("decoder.prompt", Tensor(prompt)),
        output_head=Parameter("decoder.head", Tensor(head)),
    )


def decode(decoder: ToyDecoder, h_s: Tensor) -> Tensor:
    """Per-position logits for projected speech features.

    The prompt embedding is mean-pooled into one summary vector, added to
    every position of ``h_s``, and mapped through the bias-free output head.
    """
    d_model = decoder.d_model
    if h_s.data.ndim != 2 or h_s.data.shape[1] != d_model:
        raise ValueError(
            f"decoder expects features of width {d_model}, got shape {h_s.data.shape}"
        )
    prompt = decoder.prompt_embedding.value
    prompt_len = prompt.data.shape[0]
    pool = Tensor(np.full((1, prompt_len), 1.0 / prompt_len))
    prompt_mean = matmul(pool, prompt)  # [1 × d_model]
    tiled = matmul(Tensor(np.ones((h_s.data.shape[0], 1))), prompt_mean)
    return matmul(add(h_s, tiled), decoder.output_head.value)
