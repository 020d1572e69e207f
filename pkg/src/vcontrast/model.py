"""Tiny teacher-forced conditional token model ``p(y | image, query)``.

Each response position t is scored from the sum of four d-dimensional
features: the previous token's embedding, a position embedding, the image
feature, and the mean embedding of the query tokens. The image feature is
``tanh(image @ img_proj)`` for an image and the learned ``null_img`` vector
when no image is given, so all three conditions share one code path. One
tanh mixing layer and a linear read-out produce next-token logits.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .objectives import LogProbBundle
from .synthetic import BOS, IMAGE_DIM, VOCAB_SIZE

if TYPE_CHECKING:
    from .synthetic import ContrastPair

DEFAULT_WIDTH = 32
MAX_LEN = 12

PARAM_NAMES = ("tok_emb", "pos_emb", "img_proj", "null_img", "mix_w", "mix_b", "out_w", "out_b")

CHECKPOINT_MAGIC = b"VCTOYCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Image:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("image vector must be 1-D and finite")
        object.__setattr__(self, "vector", v)


class NoImage:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NO_IMAGE"


NO_IMAGE = NoImage()
ImageCondition = Image | NoImage


class ModelParams:
    """Named parameter tensors plus the fixed sizes V, d, m."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        missing = set(PARAM_NAMES) - set(tensors)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        self.tensors = {name: tensors[name] for name in PARAM_NAMES}
        V, d = self.tensors["tok_emb"].shape
        m = self.tensors["img_proj"].shape[0]
        expected = {
            "tok_emb": (V, d), "img_proj": (m, d), "null_img": (d,), "mix_w": (d, d),
            "mix_b": (d,), "out_w": (d, V), "out_b": (V,),
        }
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")
        if self.tensors["pos_emb"].shape[1] != d:
            raise ValueError("pos_emb width mismatch")
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"non-finite values in {name}")

    @classmethod
    def init(cls, seed: int, vocab_size: int = VOCAB_SIZE, width: int = DEFAULT_WIDTH,
             image_dim: int = IMAGE_DIM, max_len: int = MAX_LEN, *, requires_grad: bool = False) -> "ModelParams":
        rng = np.random.default_rng(seed)
        V, d, m = vocab_size, width, image_dim
        arrays = {
            "tok_emb": rng.normal(0.0, 0.5, (V, d)),
            "pos_emb": rng.normal(0.0, 0.5, (max_len, d)),
            "img_proj": rng.normal(0.0, 1.0 / np.sqrt(m), (m, d)),
            "null_img": rng.normal(0.0, 0.5, d),
            "mix_w": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
            "mix_b": np.zeros(d),
            "out_w": rng.normal(0.0, 1.0 / np.sqrt(d), (d, V)),
            "out_b": np.zeros(V),
        }
        return cls({k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()})

    @property
    def vocab_size(self) -> int:
        return self.tensors["tok_emb"].shape[0]

    @property
    def width(self) -> int:
        return self.tensors["tok_emb"].shape[1]

    @property
    def image_dim(self) -> int:
        return self.tensors["img_proj"].shape[0]

    @property
    def max_len(self) -> int:
        return self.tensors["pos_emb"].shape[0]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self, requires_grad: bool = False) -> "ModelParams":
        """Deep copy; the copy shares no arrays with ``self``."""
        return ModelParams({k: Tensor(t.data.copy(), requires_grad=requires_grad)
                            for k, t in self.tensors.items()})

    def replace(self, **arrays) -> "ModelParams":
        tensors = dict(self.tensors)
        for k, v in arrays.items():
            tensors[k] = Tensor(v, requires_grad=self.tensors[k].requires_grad)
        return ModelParams(tensors)

    def sgd_step(self, grads: Mapping[Tensor, np.ndarray], lr: float) -> "ModelParams":
        return ModelParams({
            k: Tensor(t.data - lr * grads[t], requires_grad=True) for k, t in self.tensors.items()
        })

    def equal(self, other: "ModelParams") -> bool:
        return all(np.array_equal(t.data, other.tensors[k].data) for k, t in self.tensors.items())


def _validate(params: ModelParams, query: Sequence[int], response: Sequence[int]) -> None:
    V = params.vocab_size
    if len(response) == 0:
        raise ValueError("response must be non-empty")
    if len(response) > params.max_len:
        raise ValueError(f"response longer than max_len={params.max_len}")
    for tok in (*query, *response):
        if not 0 <= tok < V:
            raise ValueError(f"token id {tok} outside vocabulary of size {V}")


def sequence_logprobs(params: ModelParams, conds: Sequence[ImageCondition],
                      queries: Sequence[Sequence[int]], responses: Sequence[Sequence[int]]):
    """Batched scoring.

    Returns ``(totals, per_token, offsets)``: ``totals`` has shape (B,),
    ``per_token`` holds every response token's log-probability concatenated
    in batch order, and sequence b owns ``per_token[offsets[b]:offsets[b+1]]``.
    """
    B = len(responses)
    if not (len(conds) == len(queries) == B) or B == 0:
        raise ValueError("conds, queries and responses must be equally long and non-empty")
    m, V = params.image_dim, params.vocab_size
    images = np.zeros((B, m))
    has_image = np.zeros((B, 1))
    bag = np.zeros((B, V))
    prev, pos, seq, target = [], [], [], []
    for b, (cond, q, y) in enumerate(zip(conds, queries, responses)):
        _validate(params, q, y)
        if isinstance(cond, Image):
            if cond.vector.shape != (m,):
                raise ValueError(f"image vector must have {m} entries")
            images[b] = cond.vector
            has_image[b] = 1.0
        elif cond is not NO_IMAGE:
            raise TypeError(f"unsupported condition {cond!r}")
        for tok in q:
            bag[b, tok] += 1.0
        if len(q):
            bag[b] /= len(q)
        for t, tok in enumerate(y):
            prev.append(BOS if t == 0 else y[t - 1])
            pos.append(t)
            seq.append(b)
            target.append(tok)
    offsets = np.concatenate([[0], np.cumsum([len(y) for y in responses])])

    p = params.tensors
    img_feat = ad.tanh(ad.matmul(Tensor(images), p["img_proj"])) * Tensor(has_image)
    null_feat = ad.matmul(Tensor(1.0 - has_image), ad.reshape(p["null_img"], (1, -1)))
    context = img_feat + null_feat + ad.matmul(Tensor(bag), p["tok_emb"])
    x = ad.take(p["tok_emb"], prev) + ad.take(p["pos_emb"], pos) + ad.take(context, seq)
    h = ad.tanh(ad.matmul(x, p["mix_w"]) + p["mix_b"])
    logits = ad.matmul(h, p["out_w"]) + p["out_b"]
    per_token = ad.pick(ad.log_softmax(logits, axis=-1), target)

    segments = np.zeros((B, len(target)))
    segments[seq, np.arange(len(target))] = 1.0
    totals = ad.reshape(ad.matmul(Tensor(segments), ad.reshape(per_token, (-1, 1))), (B,))
    return totals, per_token, offsets


def log_prob(params: ModelParams, cond: ImageCondition, query: Sequence[int],
             response: Sequence[int]) -> tuple[Tensor, Tensor]:
    """``(total, per_token)`` log-likelihood of ``response`` given image and query."""
    totals, per_token, _ = sequence_logprobs(params, [cond], [query], [response])
    return totals[0], per_token


# column order of pair_logprobs
PAIR_COLUMNS = ("w_iw", "w_il", "w_noimg", "l_iw", "l_il", "l_noimg")


def pair_logprobs(params: ModelParams, pairs: Sequence["ContrastPair"]) -> Tensor:
    """Log-probabilities of y_w and y_l under (i_w, i_l, no image); shape (B, 6)."""
    conds, queries, responses = [], [], []
    for pair in pairs:
        for y in (pair.y_w, pair.y_l):
            conds += [Image(pair.img_w), Image(pair.img_l), NO_IMAGE]
            queries += [pair.query] * 3
            responses += [y] * 3
    totals, _, _ = sequence_logprobs(params, conds, queries, responses)
    return ad.reshape(totals, (len(pairs), 6))


def bundles_from_table(policy: Tensor, reference: Tensor | np.ndarray) -> tuple[LogProbBundle, LogProbBundle]:
    """Split (B, 6) policy/reference tables into the y_w and y_l bundles."""
    ref = reference if isinstance(reference, Tensor) else Tensor(reference)
    cols = [policy[:, k] for k in range(6)]
    rcols = [ref[:, k] for k in range(6)]
    return (LogProbBundle(*cols[:3], *rcols[:3]), LogProbBundle(*cols[3:], *rcols[3:]))


def make_bundle(policy: ModelParams, reference: ModelParams, pair: "ContrastPair",
                which_response: str = "w") -> LogProbBundle:
    """The six conditionals for one response of ``pair``."""
    if which_response not in ("w", "l"):
        raise ValueError(f"which_response must be 'w' or 'l', got {which_response!r}")
    y = pair.y_w if which_response == "w" else pair.y_l
    conds = [Image(pair.img_w), Image(pair.img_l), NO_IMAGE]
    pol, _, _ = sequence_logprobs(policy, conds, [pair.query] * 3, [y] * 3)
    ref, _, _ = sequence_logprobs(reference, conds, [pair.query] * 3, [y] * 3)
    return LogProbBundle(pol[0], pol[1], pol[2], ref[0].detach(), ref[1].detach(), ref[2].detach())


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Versioned little-endian container: header, then each named float64 tensor."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<5I", CHECKPOINT_VERSION, params.vocab_size, params.width,
                             params.image_dim, len(PARAM_NAMES)))
        for name in PARAM_NAMES:
            arr = params.tensors[name].data
            raw = name.encode("ascii")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, requires_grad: bool = False) -> ModelParams:
    blob = Path(path).read_bytes()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, V, d, m, count = struct.unpack_from("<5I", blob, off)
    off += 20
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, off)
        name = blob[off + 2: off + 2 + n].decode("ascii")
        off += 2 + n
        (ndim,) = struct.unpack_from("<B", blob, off)
        shape = struct.unpack_from(f"<{ndim}I", blob, off + 1)
        off += 1 + 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        tensors[name] = Tensor(arr.astype(np.float64), requires_grad=requires_grad)
    params = ModelParams(tensors)
    if (params.vocab_size, params.width, params.image_dim) != (V, d, m):
        raise ValueError(f"{path}: header sizes disagree with stored tensors")
    return params
