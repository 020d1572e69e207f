"""Seeded generator of minimal-contrast image/response pairs.

A scene has four slots (object, attribute, count, relation). A pair holds two
scenes that differ in exactly one slot; each scene is rendered as a
fixed-grammar response and as an image vector built from per-slot codewords
plus Gaussian noise. An optional "style" coordinate marks the contrastive
image, standing in for the artifacts left by image editing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

OBJECTS = ("cube", "ball", "cone", "cup", "book", "shoe")
ATTRIBUTES = ("red", "green", "blue", "yellow", "wooden", "striped")
COUNTS = ("one", "two", "three", "four")
RELATIONS = ("left_of", "right_of")
CONTRAST_TYPES = ("object", "attribute", "count", "position")

_FUNCTION_WORDS = (
    "the", "is", "box", "?", "what", "does", "look", "like",
    "how", "many", "are", "there", "where", "near",
)
VOCAB: tuple[str, ...] = ("<pad>", "<bos>") + _FUNCTION_WORDS + OBJECTS + ATTRIBUTES + COUNTS + RELATIONS
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD, BOS = 0, 1

VOCAB_SIZE = 64  # model vocabulary; ids >= len(VOCAB) are never emitted
RESPONSE_LEN = 8

# image layout: one block per slot, then the style coordinate
_BLOCKS = (("object", 7, len(OBJECTS)), ("attribute", 7, len(ATTRIBUTES)),
           ("count", 5, len(COUNTS)), ("relation", 4, len(RELATIONS)))
IMAGE_DIM = sum(dim for _, dim, _ in _BLOCKS) + 1
STYLE_INDEX = IMAGE_DIM - 1
NOISE_SIGMA = 0.05
_CODEBOOK_SEED = 20250218

# object+attribute replacement share 7189 records in the source table; split evenly
MVC_TYPE_MIX = {
    "object": 7189 / 2 / 11149,
    "attribute": 7189 / 2 / 11149,
    "count": 919 / 11149,
    "position": 3041 / 11149,
}
UNIFORM_TYPE_MIX = {t: 0.25 for t in CONTRAST_TYPES}

CORPUS_FORMAT = "vcontrast.corpus"
CORPUS_VERSION = 1


@dataclass(frozen=True)
class Scene:
    object_id: int
    attribute_id: int
    count: int
    relation: str

    def __post_init__(self):
        if not 0 <= self.object_id < len(OBJECTS):
            raise ValueError(f"object_id out of range: {self.object_id}")
        if not 0 <= self.attribute_id < len(ATTRIBUTES):
            raise ValueError(f"attribute_id out of range: {self.attribute_id}")
        if not 1 <= self.count <= len(COUNTS):
            raise ValueError(f"count must be in [1, {len(COUNTS)}], got {self.count}")
        if self.relation not in RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")

    def slot_values(self) -> dict[str, int]:
        return {
            "object": self.object_id,
            "attribute": self.attribute_id,
            "count": self.count - 1,
            "relation": RELATIONS.index(self.relation),
        }


@dataclass(frozen=True, eq=False)
class ContrastPair:
    query: tuple[int, ...]
    img_w: np.ndarray
    img_l: np.ndarray
    y_w: tuple[int, ...]
    y_l: tuple[int, ...]
    contrast_type: str
    shortcut_flag_on_il: bool = False

    def __post_init__(self):
        if self.contrast_type not in CONTRAST_TYPES:
            raise ValueError(f"unknown contrast type {self.contrast_type!r}")
        if tuple(self.y_w) == tuple(self.y_l):
            raise ValueError("y_w and y_l must differ")
        for name in ("img_w", "img_l"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (IMAGE_DIM,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be {IMAGE_DIM} finite values")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "query", tuple(int(t) for t in self.query))
        object.__setattr__(self, "y_w", tuple(int(t) for t in self.y_w))
        object.__setattr__(self, "y_l", tuple(int(t) for t in self.y_l))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ContrastPair):
            return NotImplemented
        return (
            self.query == other.query
            and self.y_w == other.y_w
            and self.y_l == other.y_l
            and self.contrast_type == other.contrast_type
            and self.shortcut_flag_on_il == other.shortcut_flag_on_il
            and np.array_equal(self.img_w, other.img_w)
            and np.array_equal(self.img_l, other.img_l)
        )

    def exchanged(self) -> "ContrastPair":
        """The same pair with the (image, response) roles swapped."""
        return ContrastPair(self.query, self.img_l, self.img_w, self.y_l, self.y_w,
                            self.contrast_type, self.shortcut_flag_on_il)

    def to_record(self) -> dict:
        return {
            "query": list(self.query),
            "img_w": self.img_w.tolist(),
            "img_l": self.img_l.tolist(),
            "y_w": list(self.y_w),
            "y_l": list(self.y_l),
            "contrast_type": self.contrast_type,
            "shortcut_flag_on_il": self.shortcut_flag_on_il,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "ContrastPair":
        return cls(
            query=rec["query"],
            img_w=np.asarray(rec["img_w"], dtype=np.float64),
            img_l=np.asarray(rec["img_l"], dtype=np.float64),
            y_w=rec["y_w"],
            y_l=rec["y_l"],
            contrast_type=rec["contrast_type"],
            shortcut_flag_on_il=bool(rec["shortcut_flag_on_il"]),
        )


@lru_cache(maxsize=None)
def codebook() -> dict[str, np.ndarray]:
    """Per-slot codewords: orthonormal rows inside each block, fixed forever."""
    rng = np.random.default_rng(_CODEBOOK_SEED)
    book = {}
    for name, dim, n in _BLOCKS:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        words = q[:n].copy()
        words.setflags(write=False)
        book[name] = words
    return book


def _block_slices() -> dict[str, slice]:
    out, start = {}, 0
    for name, dim, _ in _BLOCKS:
        out[name] = slice(start, start + dim)
        start += dim
    return out


def render_image(scene: Scene, rng: np.random.Generator, style: float = 0.0) -> np.ndarray:
    book = codebook()
    values = scene.slot_values()
    clean = np.concatenate([book[name][values[name]] for name, _, _ in _BLOCKS])
    img = np.empty(IMAGE_DIM)
    img[:STYLE_INDEX] = clean + rng.normal(0.0, NOISE_SIGMA, size=STYLE_INDEX)
    img[STYLE_INDEX] = style
    return img


def decode_image(img: np.ndarray) -> Scene:
    """Nearest-codeword decoding of each block."""
    book, slices = codebook(), _block_slices()
    img = np.asarray(img, dtype=np.float64)
    idx = {
        name: int(np.argmin(((book[name] - img[slices[name]]) ** 2).sum(axis=1)))
        for name in slices
    }
    return Scene(idx["object"], idx["attribute"], idx["count"] + 1, RELATIONS[idx["relation"]])


def encode(words: Iterable[str]) -> tuple[int, ...]:
    return tuple(TOKEN_ID[w] for w in words)


def decode_tokens(tokens: Iterable[int]) -> list[str]:
    return [VOCAB[t] if t < len(VOCAB) else f"<{t}>" for t in tokens]


def detokenize(tokens: Iterable[int]) -> str:
    return " ".join(decode_tokens(tokens)).replace("_", " ")


def verbalize(scene: Scene) -> tuple[int, ...]:
    return encode(["the", COUNTS[scene.count - 1], ATTRIBUTES[scene.attribute_id],
                   OBJECTS[scene.object_id], "is", scene.relation, "the", "box"])


def make_query(scene: Scene, contrast_type: str) -> tuple[int, ...]:
    """A question about the contrasted slot that only mentions shared slots."""
    obj = OBJECTS[scene.object_id]
    if contrast_type == "object":
        words = ["what", "is", scene.relation, "the", "box", "?"]
    elif contrast_type == "attribute":
        words = ["what", "does", "the", obj, "look", "like", "?"]
    elif contrast_type == "count":
        words = ["how", "many", obj, "are", "there", "?"]
    elif contrast_type == "position":
        words = ["where", "is", "the", obj, "?"]
    else:
        raise ValueError(f"unknown contrast type {contrast_type!r}")
    return encode(words)


def random_scene(rng: np.random.Generator) -> Scene:
    return Scene(
        object_id=int(rng.integers(len(OBJECTS))),
        attribute_id=int(rng.integers(len(ATTRIBUTES))),
        count=int(rng.integers(1, len(COUNTS) + 1)),
        relation=RELATIONS[int(rng.integers(len(RELATIONS)))],
    )


def _other(rng: np.random.Generator, n: int, current: int) -> int:
    k = int(rng.integers(n - 1))
    return k if k < current else k + 1


def contrast_scene(scene: Scene, contrast_type: str, rng: np.random.Generator) -> Scene:
    if contrast_type == "object":
        return replace(scene, object_id=_other(rng, len(OBJECTS), scene.object_id))
    if contrast_type == "attribute":
        return replace(scene, attribute_id=_other(rng, len(ATTRIBUTES), scene.attribute_id))
    if contrast_type == "count":
        return replace(scene, count=_other(rng, len(COUNTS), scene.count - 1) + 1)
    if contrast_type == "position":
        return replace(scene, relation=RELATIONS[1 - RELATIONS.index(scene.relation)])
    raise ValueError(f"unknown contrast type {contrast_type!r}")


def gen_pair(rng: np.random.Generator, contrast_type: str, shortcut: bool = False) -> ContrastPair:
    scene_w = random_scene(rng)
    scene_l = contrast_scene(scene_w, contrast_type, rng)
    img_w = render_image(scene_w, rng)
    img_l = render_image(scene_l, rng, style=1.0 if shortcut else 0.0)
    return ContrastPair(
        query=make_query(scene_w, contrast_type),
        img_w=img_w,
        img_l=img_l,
        y_w=verbalize(scene_w),
        y_l=verbalize(scene_l),
        contrast_type=contrast_type,
        shortcut_flag_on_il=shortcut,
    )


def _check_mix(type_mix: Mapping[str, float]) -> tuple[list[str], np.ndarray]:
    unknown = set(type_mix) - set(CONTRAST_TYPES)
    if unknown:
        raise ValueError(f"unknown contrast types in mix: {sorted(unknown)}")
    types = [t for t in CONTRAST_TYPES if t in type_mix]
    probs = np.array([type_mix[t] for t in types], dtype=np.float64)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError(f"mix proportions must be non-negative and sum to 1, got {probs.sum()}")
    return types, probs


def gen_corpus(seed: int, n: int, type_mix: Mapping[str, float] | None = None,
               shortcut: bool = False) -> list[ContrastPair]:
    """``n`` pairs; pair ``k`` depends only on ``(seed, k)``."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    types, probs = _check_mix(MVC_TYPE_MIX if type_mix is None else type_mix)
    corpus = []
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        ctype = types[int(rng.choice(len(types), p=probs))]
        corpus.append(gen_pair(rng, ctype, shortcut))
    return corpus


def strip_shortcut(corpus: Sequence[ContrastPair]) -> list[ContrastPair]:
    """The shortcut-removed twin of a corpus: style coordinate zeroed everywhere."""
    out = []
    for p in corpus:
        img_w, img_l = p.img_w.copy(), p.img_l.copy()
        img_w[STYLE_INDEX] = 0.0
        img_l[STYLE_INDEX] = 0.0
        out.append(ContrastPair(p.query, img_w, img_l, p.y_w, p.y_l, p.contrast_type, False))
    return out


def save_corpus(corpus: Sequence[ContrastPair], path: str | Path, meta: Mapping | None = None) -> None:
    header = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION, "n": len(corpus),
              "image_dim": IMAGE_DIM, "vocab_size": VOCAB_SIZE}
    if meta:
        header["meta"] = dict(meta)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for pair in corpus:
            fh.write(json.dumps(pair.to_record(), sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> list[ContrastPair]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty corpus file")
    header = json.loads(lines[0])
    if header.get("format") != CORPUS_FORMAT:
        raise ValueError(f"{path}: not a corpus file (format={header.get('format')!r})")
    if header.get("version") != CORPUS_VERSION:
        raise ValueError(f"{path}: unsupported corpus version {header.get('version')}")
    corpus = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            corpus.append(ContrastPair.from_record(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad record: {exc}") from exc
    return corpus


def captions(pair: ContrastPair) -> tuple[str, str]:
    return detokenize(pair.y_w), detokenize(pair.y_l)
