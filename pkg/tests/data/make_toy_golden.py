"""Regenerate ``toy_text_golden.json`` with a pure-Python reference.

The reference reads the toy encoder's weights and token rows, then evaluates
the text-encoder definition with scalar loops and the ``math`` module only:

    s_c = sum_p a_p u_c[p];  h_c = tanh(W s_c + b);  t_c = P h_c / |P h_c|

Run from the repository root:  python3 tests/data/make_toy_golden.py
"""
import json
import math
from pathlib import Path

import numpy as np

from fa_ood.backend import make_toy_backend
from fa_ood.prompts import build_dual_prompts

GOLDEN = Path(__file__).with_name("toy_text_golden.json")
SETUP = {
    "class_names": ["cat", "sea lion", "dog"],
    "seed": 7,
    "embed_dim": 6,
    "token_dim": 5,
    "num_locals": 2,
    "max_context_len": 8,
    "context_seed": 123,
    "context_scale": 0.05,
}


def setup_prompt():
    s = SETUP
    backend = make_toy_backend(
        s["class_names"], seed=s["seed"], embed_dim=s["embed_dim"], token_dim=s["token_dim"],
        num_locals=s["num_locals"], max_context_len=s["max_context_len"],
    )
    bank = build_dual_prompts(s["class_names"], backend.spec)
    rng = np.random.default_rng(s["context_seed"])
    bank.forced.context[...] += (rng.standard_normal(bank.forced.context.shape) * s["context_scale"]).astype(np.float32)
    return backend, bank.forced


def reference_features(backend, prompt):
    a = backend.pos_weights.tolist()
    W, b, P = backend.W.tolist(), backend.b.tolist(), backend.P.tolist()
    ctx = np.asarray(prompt.context, dtype=np.float64).tolist()
    out = []
    for w in prompt.class_tokens:
        rows = ctx + np.asarray(w, dtype=np.float64).tolist()
        td = len(rows[0])
        s = [0.0] * td
        for p, row in enumerate(rows):
            for k in range(td):
                s[k] += a[p] * row[k]
        h = [math.tanh(sum(W[i][k] * s[k] for k in range(td)) + b[i]) for i in range(td)]
        y = [sum(P[j][i] * h[i] for i in range(td)) for j in range(len(P))]
        n = math.sqrt(sum(v * v for v in y))
        out.append([v / n for v in y])
    return out


def main():
    backend, prompt = setup_prompt()
    doc = {"setup": SETUP, "features": reference_features(backend, prompt)}
    GOLDEN.write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote {GOLDEN}")


if __name__ == "__main__":
    main()
