"""Dual prompt bank: a learnable *forced* prompt and a frozen *original* prompt.

Both prompts have the CoOp layout ``u_c = [v_1, ..., v_L, w_c]``: ``L``
context rows followed by the (frozen) token rows of class ``c``'s name.
Context and class rows are stored as float32, the precision of the bank
file; encoders upcast to float64.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backend import EncoderSpec, tokenize
from .errors import ConfigError, FormatError

TEMPLATE = "a photo of a"
INIT_MODES = ("manual", "random")
RANDOM_INIT_STD = 0.02

BANK_MAGIC = b"FABANK1\0"
BANK_VERSION = 1


@dataclass(eq=False)
class PromptContext:
    context: np.ndarray  # (L, td) when shared, (C, L, td) otherwise
    class_tokens: tuple  # per-class (m_c, td) arrays, never learnable
    learnable: bool
    shared: bool
    init_mode: str

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.float32)
        want = 2 if self.shared else 3
        if self.context.ndim != want:
            raise ConfigError(f"shared={self.shared} needs a {want}-D context, got {self.context.shape}")
        toks = []
        for w in self.class_tokens:
            w = np.array(w, dtype=np.float32)
            w.setflags(write=False)
            toks.append(w)
        self.class_tokens = tuple(toks)
        if not toks:
            raise ConfigError("a prompt needs at least one class")
        if not self.shared and self.context.shape[0] != len(toks):
            raise ConfigError(f"{self.context.shape[0]} context copies for {len(toks)} classes")
        if self.length < 1:
            raise ConfigError("context length L must be >= 1")
        if not self.learnable:
            self.context.setflags(write=False)

    @property
    def length(self) -> int:
        return self.context.shape[-2]

    @property
    def num_classes(self) -> int:
        return len(self.class_tokens)

    def equals(self, other: "PromptContext") -> bool:
        return (
            self.learnable == other.learnable
            and self.shared == other.shared
            and self.init_mode == other.init_mode
            and _bit_equal(self.context, other.context)
            and len(self.class_tokens) == len(other.class_tokens)
            and all(_bit_equal(a, b) for a, b in zip(self.class_tokens, other.class_tokens))
        )


@dataclass(eq=False)
class DualPromptBank:
    forced: PromptContext
    original: PromptContext
    class_names: list
    K: float = 3
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def equals(self, other: "DualPromptBank") -> bool:
        return (
            self.forced.equals(other.forced)
            and self.original.equals(other.original)
            and list(self.class_names) == list(other.class_names)
            and self.K == other.K
            and type(self.K) is type(other.K)
            and self.seed == other.seed
            and self.meta == other.meta
        )

    def copy(self) -> "DualPromptBank":
        return bank_from_bytes(bank_to_bytes(self))


def _bit_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def check_k(K) -> None:
    if isinstance(K, bool) or not np.isfinite(K) or K < 0:
        raise ConfigError(f"forced coefficient K must be a finite number >= 0, got {K!r}")


def _init_context(mode: str, spec: EncoderSpec, rng: np.random.Generator, copies: int | None):
    if mode == "manual":
        rows = np.stack([spec.lookup(t) for t in tokenize(TEMPLATE)])
        return rows if copies is None else np.repeat(rows[None], copies, axis=0)
    shape = (4, spec.token_dim) if copies is None else (copies, 4, spec.token_dim)
    return (rng.standard_normal(shape) * RANDOM_INIT_STD).astype(np.float32)


def build_dual_prompts(
    class_names: Sequence[str],
    spec: EncoderSpec,
    init_mode: str = "manual",
    shared: bool = True,
    K: float = 3,
    seed: int = 0,
    original_init_mode: str = "manual",
) -> DualPromptBank:
    """Build the forced/original pair.

    ``init_mode`` applies to the forced prompt, ``original_init_mode`` to the
    frozen reference. When both prompts use the same mode (and layout) they
    start bit-identical; random mode draws N(0, 0.02^2) rows from ``seed``.
    """
    names = list(class_names)
    if not names:
        raise ConfigError("class_names must be non-empty")
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"duplicate class names: {dupes}")
    for mode in (init_mode, original_init_mode):
        if mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {mode!r}")
    check_k(K)

    class_tokens = tuple(spec.embed(n) for n in names)
    rng = np.random.default_rng(seed)
    forced_ctx = _init_context(init_mode, spec, rng, None if shared else len(names))
    if original_init_mode == init_mode and shared:
        orig_ctx = forced_ctx.copy()
    else:
        orig_ctx = _init_context(original_init_mode, spec, rng, None)
    forced = PromptContext(forced_ctx, class_tokens, learnable=True, shared=shared, init_mode=init_mode)
    original = PromptContext(
        orig_ctx, class_tokens, learnable=False, shared=True, init_mode=original_init_mode
    )
    return DualPromptBank(forced, original, names, K=K, seed=int(seed))


def trainable_parameters(bank: DualPromptBank) -> np.ndarray:
    """The forced context itself (not a copy); writes land in ``bank.forced``."""
    return bank.forced.context


def num_trainable_parameters(bank: DualPromptBank) -> int:
    return int(trainable_parameters(bank).size)


def text_features(bank: DualPromptBank, backend) -> tuple[np.ndarray, np.ndarray]:
    """Forced and original text features, each (C, d) and unit-norm."""
    return backend.encode_text(bank.forced), backend.encode_text(bank.original)


# ---------------------------------------------------------------------------
# bank file: magic, u32 header length, JSON header, float32 payload
# ---------------------------------------------------------------------------

def bank_to_bytes(bank: DualPromptBank) -> bytes:
    f, o = bank.forced, bank.original
    header = {
        "version": BANK_VERSION,
        "C": bank.num_classes,
        "L": f.length,
        "token_dim": int(f.context.shape[-1]),
        "K": bank.K,
        "seed": bank.seed,
        "init_mode": f.init_mode,
        "original_init_mode": o.init_mode,
        "original_L": o.length,
        "shared": f.shared,
        "class_names": list(bank.class_names),
        "class_token_counts": [len(w) for w in f.class_tokens],
        "meta": bank.meta,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [BANK_MAGIC, struct.pack("<I", len(hb)), hb]
    for arr in (f.context, o.context, *f.class_tokens):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def bank_from_bytes(raw: bytes, source: str = "<bytes>") -> DualPromptBank:
    if raw[:8] != BANK_MAGIC:
        raise FormatError(f"{source}: not a prompt-bank file (magic {raw[:8]!r})")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{source}: unreadable header: {exc}") from exc
    if header.get("version") != BANK_VERSION:
        raise FormatError(f"{source}: bank version {header.get('version')!r}, expected {BANK_VERSION}")
    C, L, td = header["C"], header["L"], header["token_dim"]
    shared = header["shared"]
    f_shape = (L, td) if shared else (C, L, td)
    o_shape = (header["original_L"], td)
    shapes = [f_shape, o_shape] + [(m, td) for m in header["class_token_counts"]]
    arrays, off = [], 12 + hlen
    for shp in shapes:
        n = int(np.prod(shp)) * 4
        if off + n > len(raw):
            raise FormatError(f"{source}: truncated payload")
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n // 4, offset=off).reshape(shp).astype(np.float32))
        off += n
    if off != len(raw):
        raise FormatError(f"{source}: {len(raw) - off} trailing bytes")
    toks = tuple(arrays[2:])
    forced = PromptContext(arrays[0], toks, learnable=True, shared=shared, init_mode=header["init_mode"])
    original = PromptContext(
        arrays[1], toks, learnable=False, shared=True, init_mode=header["original_init_mode"]
    )
    return DualPromptBank(
        forced, original, header["class_names"], K=header["K"], seed=header["seed"], meta=header["meta"]
    )


def save_bank(bank: DualPromptBank, path) -> str:
    """Write ``bank`` to ``path``; returns the sha256 of the file content."""
    raw = bank_to_bytes(bank)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_bank(path) -> DualPromptBank:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read bank {path}: {exc}") from exc
    return bank_from_bytes(raw, str(path))


def bank_digest(bank: DualPromptBank) -> str:
    return hashlib.sha256(bank_to_bytes(bank)).hexdigest()
