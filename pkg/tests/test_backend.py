import json
import math
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fa_ood.backend import (
    CacheBackend,
    EncoderSpec,
    ToyBackend,
    l2_normalize,
    make_toy_backend,
    read_embedding_cache,
    toy_vocab,
    write_embedding_cache,
)
from fa_ood.errors import ContextLengthError, DimensionError, FormatError, VocabularyError
from fa_ood.prompts import build_dual_prompts

DATA = Path(__file__).parent / "data"


def _prompt(context, class_tokens):
    """Minimal prompt stand-in: keeps the context in float64 for finite differences."""
    return SimpleNamespace(context=np.asarray(context, dtype=np.float64), class_tokens=list(class_tokens))


def _load_golden():
    import importlib.util

    spec = importlib.util.spec_from_file_location("make_toy_golden", DATA / "make_toy_golden.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


# -- encode_text --------------------------------------------------------------

def test_single_class_feature_is_unit_norm():
    be = make_toy_backend(["cat"], seed=1)
    t = be.encode_text(build_dual_prompts(["cat"], be.spec).forced)
    assert t.shape == (1, be.spec.embed_dim)
    assert abs(np.linalg.norm(t[0]) - 1.0) <= 1e-6


def test_identical_contexts_give_bitwise_identical_features(small_backend, small_bank):
    a = small_backend.encode_text(small_bank.forced)
    b = small_backend.encode_text(small_bank.original)
    assert a.tobytes() == b.tobytes()


def test_text_features_match_pure_python_golden_file():
    gen = _load_golden()
    golden = json.loads((DATA / "toy_text_golden.json").read_text())
    assert golden["setup"] == gen.SETUP
    backend, prompt = gen.setup_prompt()
    np.testing.assert_allclose(backend.encode_text(prompt), np.array(golden["features"]), rtol=0, atol=1e-12)


def test_unknown_token_names_the_token(small_backend):
    with pytest.raises(VocabularyError) as exc:
        small_backend.spec.embed("zebra")
    assert exc.value.token == "zebra"
    with pytest.raises(VocabularyError):
        build_dual_prompts(["zebra"], small_backend.spec)


def test_context_overflow_raises_length_error():
    be = make_toy_backend(["sea lion"], max_context_len=5)
    with pytest.raises(ContextLengthError):
        be.encode_text(build_dual_prompts(["sea lion"], be.spec).forced)  # 4 + 2 > 5


def test_token_dim_mismatch_raises(small_backend, small_bank):
    bad = _prompt(np.zeros((4, 3)), small_bank.forced.class_tokens)
    with pytest.raises(DimensionError):
        small_backend.encode_text(bad)


def _jvp_probe_errors(backend, prompt, probes, rng, h=1e-3):
    """Relative error of the Jacobian-vector product J v, central differences vs analytic.

    The analytic J v is assembled from the VJP applied to every output basis
    vector; each probe direction ``v`` has unit norm.
    """
    base = np.asarray(prompt.context, dtype=np.float64)
    t, vjp = backend.encode_text_vjp(_prompt(base, prompt.class_tokens))
    rows = np.stack([vjp(e.reshape(t.shape)) for e in np.eye(t.size)])  # (C*d, *context.shape)
    errs = []
    for _ in range(probes):
        v = rng.standard_normal(base.shape)
        v /= np.linalg.norm(v)
        analytic = np.tensordot(rows, v, axes=v.ndim)
        hi = backend.encode_text(_prompt(base + h * v, prompt.class_tokens)).ravel()
        lo = backend.encode_text(_prompt(base - h * v, prompt.class_tokens)).ravel()
        fd = (hi - lo) / (2 * h)
        errs.append(np.linalg.norm(fd - analytic) / np.linalg.norm(fd))
    return np.array(errs)


@pytest.mark.parametrize("shared", [True, False])
def test_vjp_matches_central_differences(small_backend, shared, rng):
    bank = build_dual_prompts(["cat", "sea lion", "dog"], small_backend.spec, shared=shared)
    assert _jvp_probe_errors(small_backend, bank.forced, 100, rng).max() < 1e-4


def test_vjp_rejects_wrong_gradient_shape(small_backend, small_bank):
    _, vjp = small_backend.encode_text_vjp(small_bank.forced)
    with pytest.raises(DimensionError):
        vjp(np.zeros((1, 1)))


# -- toy encoder construction ---------------------------------------------------

def test_same_seed_same_weights_different_seed_differs():
    spec = make_toy_backend(["cat"]).spec
    a, b, c = ToyBackend(spec, 5), ToyBackend(spec, 5), ToyBackend(spec, 6)
    for name in ("pos_weights", "W", "b", "P", "A"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert any(not np.array_equal(getattr(a, n), getattr(c, n)) for n in ("W", "P", "A"))


def test_vocab_rows_do_not_depend_on_other_tokens():
    a = toy_vocab(["cat"], 6, seed=2)
    b = toy_vocab(["dog", "cat", "owl"], 6, seed=2)
    assert np.array_equal(a["cat"], b["cat"])


def test_encoder_spec_validates_dimensions():
    with pytest.raises(DimensionError):
        EncoderSpec(embed_dim=0, token_dim=2, num_locals=0, vocab={})
    with pytest.raises(DimensionError):
        EncoderSpec(embed_dim=2, token_dim=2, num_locals=-1, vocab={})
    with pytest.raises(DimensionError):
        EncoderSpec(embed_dim=2, token_dim=2, num_locals=0, vocab={"a": np.zeros(3)})


# -- encode_image ---------------------------------------------------------------

def test_zero_image_maps_to_e1(small_backend):
    img = small_backend.encode_image(np.zeros(small_backend.image_dim))
    e1 = np.eye(small_backend.spec.embed_dim)[0]
    assert np.array_equal(img.global_, e1)
    assert all(np.array_equal(v, e1) for v in img.locals_)


def test_image_matches_straight_line_reevaluation(small_backend, rng):
    x = rng.standard_normal(small_backend.image_dim)
    img = small_backend.encode_image(x)
    d, A = small_backend.spec.embed_dim, small_backend.A.tolist()

    def project(v):
        y = [sum(A[i][j] * v[j] for j in range(d)) for i in range(d)]
        n = math.sqrt(sum(c * c for c in y))
        return [c / n for c in y]

    slices = [x[i * d:(i + 1) * d].tolist() for i in range(small_backend.spec.num_locals)]
    summed = [sum(s[j] for s in slices) for j in range(d)]
    np.testing.assert_allclose(img.global_, project(summed), rtol=0, atol=1e-12)
    for i, s in enumerate(slices):
        np.testing.assert_allclose(img.locals_[i], project(s), rtol=0, atol=1e-12)


def test_image_shape_mismatch_raises(small_backend):
    with pytest.raises(DimensionError):
        small_backend.encode_image(np.ones(small_backend.image_dim + 1))


def test_batched_image_encoding_equals_per_item(small_backend, rng):
    X = rng.standard_normal((7, small_backend.image_dim))
    G, Lc = small_backend.encode_images(X)
    for i in range(len(X)):
        one = small_backend.encode_image(X[i])
        np.testing.assert_allclose(G[i], one.global_, atol=1e-6)
        np.testing.assert_allclose(Lc[i], one.locals_, atol=1e-6)


def test_batched_text_encoding_equals_per_class(small_backend, small_bank):
    T = small_backend.encode_text(small_bank.forced)
    for c, w in enumerate(small_bank.forced.class_tokens):
        one = small_backend.encode_text(_prompt(small_bank.forced.context, [w]))
        np.testing.assert_allclose(T[c], one[0], atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=16, max_size=16))
def test_all_emitted_image_features_are_unit_norm(values):
    be = make_toy_backend(["cat"], seed=0, embed_dim=8, token_dim=4, num_locals=2)
    img = be.encode_image(np.array(values))
    for v in [img.global_, *img.locals_]:
        assert abs(np.linalg.norm(v) - 1.0) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_all_emitted_text_features_are_unit_norm(seed):
    be = make_toy_backend(["cat", "sea lion"], seed=seed % 1000, embed_dim=8, token_dim=6)
    bank = build_dual_prompts(["cat", "sea lion"], be.spec, init_mode="random", seed=seed)
    T = be.encode_text(bank.forced)
    assert np.all(np.abs(np.linalg.norm(T, axis=1) - 1.0) <= 1e-6)


def test_l2_normalize_zero_rows_only():
    out = l2_normalize(np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 4.0]]))
    np.testing.assert_array_equal(out, [[1.0, 0.0, 0.0], [0.6, 0.0, 0.8]])


# -- embedding cache ------------------------------------------------------------

def _cache_fixture(tmp_path, rng, n=3, d=8, N=2):
    G = l2_normalize(rng.standard_normal((n, d))).astype(np.float32)
    Lc = l2_normalize(rng.standard_normal((n, N, d))).astype(np.float32)
    rows = [{"split": "test", "label": i % 2 if i < n - 1 else -1, "source": f"img{i}.png"} for i in range(n)]
    path = tmp_path / "x.faemb"
    write_embedding_cache(path, G, Lc, rows)
    return path, G, Lc, rows


def test_cache_file_size_and_header(tmp_path, rng):
    path, *_ = _cache_fixture(tmp_path, rng)
    raw = path.read_bytes()
    assert len(raw) == 8 + 12 + 3 * 3 * 8 * 4
    assert raw[:8] == b"FAEMB1\0\0"
    assert raw[8:20] == (3).to_bytes(4, "little") + (8).to_bytes(4, "little") + (2).to_bytes(4, "little")
    # global first, then locals, little-endian float32
    row0 = np.frombuffer(raw[20:20 + 3 * 8 * 4], dtype="<f4").reshape(3, 8)
    G, Lc = read_embedding_cache(path)[:2]
    assert np.array_equal(row0[0], G[0]) and np.array_equal(row0[1:], Lc[0])


def test_cache_round_trip_is_exact(tmp_path, rng):
    path, G, Lc, rows = _cache_fixture(tmp_path, rng)
    G2, L2, rows2 = read_embedding_cache(path)
    assert G2.tobytes() == G.tobytes() and L2.tobytes() == Lc.tobytes()
    assert [(r["split"], r["label"], r["source"]) for r in rows2] == [(r["split"], r["label"], r["source"]) for r in rows]


def test_cache_bad_magic_and_truncation(tmp_path, rng):
    path, *_ = _cache_fixture(tmp_path, rng)
    raw = path.read_bytes()
    bad = tmp_path / "bad.faemb"
    bad.write_bytes(b"NOTEMB\0\0" + raw[8:])
    with pytest.raises(FormatError):
        read_embedding_cache(bad)
    bad.write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        read_embedding_cache(bad)


def test_cache_backend_passes_rows_through(tmp_path, rng):
    path, G, Lc, _ = _cache_fixture(tmp_path, rng)
    cb = CacheBackend(path)
    row = np.concatenate([G[1], Lc[1].ravel()]).astype(np.float64)
    img = cb.encode_image(row)
    assert np.array_equal(img.global_, row[:8]) and np.array_equal(img.locals_.ravel(), row[8:])
    img_i = cb.encode_image(1)
    assert np.array_equal(img_i.global_, G[1].astype(np.float64))
    with pytest.raises(DimensionError):
        cb.encode_image(np.ones(5))
    with pytest.raises(DimensionError):
        cb.spec  # no text encoder attached
