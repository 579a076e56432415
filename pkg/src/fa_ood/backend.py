"""Frozen encoders: the image encoder f(.) and the text encoder g(.).

Three backends share one surface:

* :class:`ToyBackend` -- a tiny deterministic encoder pair with analytic
  vector-Jacobian products, used by the whole test-suite.
* :class:`CacheBackend` -- image features read back from an ``FAEMB1`` cache
  file; text encoding is delegated to another backend.
* ``fa_ood.clip_adapter.ClipAdapter`` -- optional real-checkpoint plug-in.

Every emitted feature vector is L2-normalised once, here, so that cosine
similarity downstream is a plain dot product.
"""
from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContextLengthError, DimensionError, FormatError, VocabularyError

NORM_ATOL = 1e-6
TOKEN_STD = 0.1  # per-entry scale of toy token embeddings
MIX_GAIN = 4.0
CACHE_MAGIC = b"FAEMB1\0"
_TOKEN_SPLIT = re.compile(r"[\s_]+")


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Normalise along ``axis``; zero vectors map to the basis vector e_1."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    zero = norm == 0.0
    out = x / np.where(zero, 1.0, norm)
    if np.any(zero):
        e1 = np.zeros(x.shape[axis])
        e1[0] = 1.0
        shape = [1] * x.ndim
        shape[axis] = -1
        out = np.where(zero, e1.reshape(shape), out)
    return out


def tokenize(text: str) -> list[str]:
    """Lower-case whitespace/underscore tokenisation used by the toy vocabulary."""
    return [t for t in _TOKEN_SPLIT.split(text.strip().lower()) if t]


@dataclass(frozen=True)
class EncoderSpec:
    embed_dim: int
    token_dim: int
    num_locals: int
    vocab: Mapping[str, np.ndarray] = field(repr=False, compare=False)
    max_context_len: int = 16

    def __post_init__(self):
        if self.embed_dim < 1 or self.token_dim < 1 or self.max_context_len < 1:
            raise DimensionError("embed_dim, token_dim and max_context_len must be >= 1")
        if self.num_locals < 0:
            raise DimensionError("num_locals must be >= 0")
        for tok, row in self.vocab.items():
            if np.shape(row) != (self.token_dim,):
                raise DimensionError(
                    f"vocab row for {tok!r} has shape {np.shape(row)}, expected ({self.token_dim},)"
                )

    def lookup(self, token: str) -> np.ndarray:
        try:
            return np.asarray(self.vocab[token], dtype=np.float32)
        except KeyError:
            raise VocabularyError(token) from None

    def embed(self, text: str) -> np.ndarray:
        """Token-embedding rows (m, token_dim) for a piece of text."""
        toks = tokenize(text)
        if not toks:
            raise VocabularyError(text)
        return np.stack([self.lookup(t) for t in toks])


@dataclass(frozen=True)
class ImageFeatures:
    """Unit-norm global feature plus ``N`` unit-norm local features."""

    global_: np.ndarray
    locals_: np.ndarray  # (N, d)

    @property
    def num_locals(self) -> int:
        return self.locals_.shape[0]


def toy_vocab(tokens: Iterable[str], token_dim: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Deterministic per-token embedding rows (float32).

    Each row depends only on ``(seed, token)`` so adding words to the
    vocabulary never perturbs existing rows.
    """
    vocab = {}
    for tok in tokens:
        key = zlib.crc32(tok.encode("utf-8"))
        rng = np.random.default_rng([seed, key])
        vocab[tok] = (rng.standard_normal(token_dim) * TOKEN_STD).astype(np.float32)
    return vocab


def _prompt_arrays(prompt, spec: EncoderSpec):
    """Validate a PromptContext-like object and return (ctx, class_tokens)."""
    ctx = np.asarray(prompt.context)
    class_tokens = prompt.class_tokens
    n_cls = len(class_tokens)
    if ctx.ndim == 2:
        L = ctx.shape[0]
    elif ctx.ndim == 3:
        if ctx.shape[0] != n_cls:
            raise DimensionError(f"per-class context has {ctx.shape[0]} copies for {n_cls} classes")
        L = ctx.shape[1]
    else:
        raise DimensionError(f"context must be 2-D or 3-D, got shape {ctx.shape}")
    if ctx.shape[-1] != spec.token_dim:
        raise DimensionError(f"context token_dim {ctx.shape[-1]} != encoder token_dim {spec.token_dim}")
    for c, w in enumerate(class_tokens):
        if np.ndim(w) != 2 or np.shape(w)[1] != spec.token_dim:
            raise DimensionError(f"class {c} token rows have shape {np.shape(w)}")
        if L + len(w) > spec.max_context_len:
            raise ContextLengthError(
                f"class {c}: {L} context + {len(w)} class tokens exceeds max_context_len={spec.max_context_len}"
            )
    return ctx, class_tokens


class ToyBackend:
    """Attention-free toy text encoder and linear toy image encoder.

    Text, per class ``c`` with token rows ``u_c = [v_1..v_L, w_c]``::

        s_c = sum_p a_p u_c[p]        positional mixing
        h_c = tanh(W s_c + b)
        t_c = normalize(P h_c)

    Image: the raw vector is cut into ``max(N, 1)`` disjoint slices of
    length ``d``; local ``i`` is ``normalize(A x_i)`` and the global
    feature is ``normalize(A sum_i x_i)`` with ``A`` orthogonal.
    """

    kind = "toy"

    def __init__(self, spec: EncoderSpec, seed: int = 0):
        self.spec = spec
        self.seed = int(seed)
        d, td, n = spec.embed_dim, spec.token_dim, spec.max_context_len
        rng = np.random.default_rng(self.seed)
        self.pos_weights = rng.uniform(0.5, 1.5, size=n)
        self.W = rng.standard_normal((td, td)) * (MIX_GAIN / np.sqrt(td))
        self.b = rng.standard_normal(td) * 0.05
        self.P = rng.standard_normal((d, td)) / np.sqrt(td)
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        self.A = q * np.sign(np.diag(r))
        for arr in (self.pos_weights, self.W, self.b, self.P, self.A):
            arr.setflags(write=False)

    @property
    def image_dim(self) -> int:
        return max(self.spec.num_locals, 1) * self.spec.embed_dim

    def describe(self) -> dict:
        s = self.spec
        return {
            "kind": self.kind,
            "seed": self.seed,
            "embed_dim": s.embed_dim,
            "token_dim": s.token_dim,
            "num_locals": s.num_locals,
            "max_context_len": s.max_context_len,
            "local_features": "disjoint input slices",
        }

    # -- text ------------------------------------------------------------
    def _mix(self, ctx: np.ndarray, class_tokens: Sequence[np.ndarray]) -> np.ndarray:
        a = self.pos_weights
        ctx = np.asarray(ctx, dtype=np.float64)
        L = ctx.shape[-2]
        cls_part = np.stack(
            [a[L:L + len(w)] @ np.asarray(w, dtype=np.float64) for w in class_tokens]
        )
        if ctx.ndim == 2:
            return (a[:L] @ ctx)[None, :] + cls_part
        return np.einsum("p,cpk->ck", a[:L], ctx) + cls_part

    def encode_text(self, prompt) -> np.ndarray:
        """Unit-norm text features, one row per class: (C, d)."""
        return self.encode_text_vjp(prompt)[0]

    def encode_text_vjp(self, prompt) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
        """Text features and a closure mapping dLoss/dT to dLoss/dcontext."""
        ctx, class_tokens = _prompt_arrays(prompt, self.spec)
        s = self._mix(ctx, class_tokens)
        h = np.tanh(s @ self.W.T + self.b)
        y = h @ self.P.T
        norm = np.linalg.norm(y, axis=1, keepdims=True)
        t = l2_normalize(y)
        L = ctx.shape[-2]
        shared = ctx.ndim == 2

        def vjp(grad_t: np.ndarray) -> np.ndarray:
            g = np.asarray(grad_t, dtype=np.float64)
            if g.shape != t.shape:
                raise DimensionError(f"gradient shape {g.shape} != feature shape {t.shape}")
            safe = np.where(norm == 0.0, np.inf, norm)
            gy = (g - t * np.sum(t * g, axis=1, keepdims=True)) / safe
            gs = ((gy @ self.P) * (1.0 - h * h)) @ self.W
            a = self.pos_weights[:L]
            if shared:
                return np.outer(a, gs.sum(axis=0))
            return a[None, :, None] * gs[:, None, :]

        return t, vjp

    # -- image -----------------------------------------------------------
    def encode_images(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batch encode raw vectors (B, image_dim) -> globals (B, d), locals (B, N, d)."""
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.image_dim:
            raise DimensionError(f"expected images of shape (B, {self.image_dim}), got {x.shape}")
        d, n = self.spec.embed_dim, self.spec.num_locals
        slices = x.reshape(x.shape[0], max(n, 1), d)
        proj = slices @ self.A.T
        glob = l2_normalize(proj.sum(axis=1))
        locs = l2_normalize(proj) if n else np.zeros((x.shape[0], 0, d))
        return glob, locs

    def encode_image(self, image: np.ndarray) -> ImageFeatures:
        x = np.asarray(image, dtype=np.float64)
        if x.shape != (self.image_dim,):
            raise DimensionError(f"expected an image vector of length {self.image_dim}, got shape {x.shape}")
        g, loc = self.encode_images(x[None, :])
        return ImageFeatures(g[0], loc[0])


def make_toy_backend(
    class_names: Sequence[str],
    *,
    seed: int = 0,
    embed_dim: int = 32,
    token_dim: int = 16,
    num_locals: int = 4,
    max_context_len: int = 8,
    extra_tokens: Iterable[str] = (),
) -> ToyBackend:
    """Toy backend whose vocabulary covers the template and ``class_names``."""
    from .prompts import TEMPLATE

    words = set(tokenize(TEMPLATE)) | set(extra_tokens)
    for name in class_names:
        words.update(tokenize(name))
    spec = EncoderSpec(
        embed_dim=embed_dim,
        token_dim=token_dim,
        num_locals=num_locals,
        vocab=toy_vocab(sorted(words), token_dim, seed),
        max_context_len=max_context_len,
    )
    return ToyBackend(spec, seed)


toy_encoder = ToyBackend


# ---------------------------------------------------------------------------
# FAEMB1 embedding cache
# ---------------------------------------------------------------------------

def write_embedding_cache(path, globals_: np.ndarray, locals_: np.ndarray, rows: Sequence[dict]) -> None:
    """Write an FAEMB1 file plus its sibling ``<path>.json`` row manifest.

    ``rows`` holds one dict per row with keys ``split``, ``label`` and ``source``.
    """
    g = np.asarray(globals_, dtype="<f4")
    loc = np.asarray(locals_, dtype="<f4")
    count, dim = g.shape
    if loc.ndim != 3 or loc.shape[0] != count or loc.shape[2] != dim:
        raise DimensionError(f"locals shape {loc.shape} incompatible with globals {g.shape}")
    if len(rows) != count:
        raise DimensionError(f"{len(rows)} manifest rows for {count} cached vectors")
    path = Path(path)
    body = np.concatenate([g[:, None, :], loc], axis=1)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + b"\0")
        fh.write(struct.pack("<III", count, dim, loc.shape[1]))
        fh.write(np.ascontiguousarray(body, dtype="<f4").tobytes())
    sidecar = {
        "format": "FAEMB1",
        "rows": [
            {"index": i, "split": r["split"], "label": int(r["label"]), "source": r["source"]}
            for i, r in enumerate(rows)
        ],
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")


def read_embedding_cache(path) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """Return ``(globals (n, d), locals (n, N, d), rows)`` as float32 arrays."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read embedding cache {path}: {exc}") from exc
    if raw[:7] != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:7]!r}, expected {CACHE_MAGIC!r}")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header")
    count, dim, n_loc = struct.unpack("<III", raw[8:20])
    expected = 20 + count * (1 + n_loc) * dim * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: size {len(raw)} bytes, header implies {expected}")
    body = np.frombuffer(raw, dtype="<f4", offset=20).reshape(count, 1 + n_loc, dim)
    side = Path(str(path) + ".json")
    rows = json.loads(side.read_text())["rows"] if side.exists() else []
    if rows and len(rows) != count:
        raise FormatError(f"{side}: {len(rows)} rows listed, cache holds {count}")
    return body[:, 0, :].copy(), body[:, 1:, :].copy(), rows


class CacheBackend:
    """Image features served from an FAEMB1 file; text goes to ``text_backend``."""

    kind = "cache"

    def __init__(self, path, text_backend=None):
        self.path = Path(path)
        self.globals_, self.locals_, self.rows = read_embedding_cache(self.path)
        self.text_backend = text_backend
        self.embed_dim = self.globals_.shape[1]
        self.num_locals = self.locals_.shape[1]

    @property
    def spec(self) -> EncoderSpec:
        if self.text_backend is None:
            raise DimensionError("cache backend has no text encoder attached")
        return self.text_backend.spec

    def describe(self) -> dict:
        out = {"kind": self.kind, "path": str(self.path), "num_locals": self.num_locals}
        if self.text_backend is not None:
            out["text"] = self.text_backend.describe()
        return out

    def encode_text(self, prompt):
        self.spec  # raises without a text encoder
        return self.text_backend.encode_text(prompt)

    def encode_text_vjp(self, prompt):
        self.spec
        return self.text_backend.encode_text_vjp(prompt)

    def encode_image(self, image) -> ImageFeatures:
        """Accept a row index or a flat row of ``d * (1 + N)`` values; pass it through."""
        d, n = self.embed_dim, self.num_locals
        if isinstance(image, (int, np.integer)):
            return ImageFeatures(
                self.globals_[image].astype(np.float64), self.locals_[image].astype(np.float64)
            )
        row = np.asarray(image, dtype=np.float64)
        if row.shape != (d * (1 + n),):
            raise DimensionError(f"cache row must have length {d * (1 + n)}, got shape {row.shape}")
        row = row.reshape(1 + n, d)
        return ImageFeatures(row[0], row[1:])

    def encode_indices(self, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self.globals_)):
            raise DimensionError(f"cache row index out of range [0, {len(self.globals_)})")
        return self.globals_[idx].astype(np.float64), self.locals_[idx].astype(np.float64)
