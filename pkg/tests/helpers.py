"""Shared builders for tests: tiny configs, random sequences, a plain reference forward."""

import math

import numpy as np

from groundrl.model import ModelConfig, SegmentedSequence, init_model
from groundrl.vocab import Segment

SMALL = ModelConfig(n_layers=2, n_heads=2, d_model=16, vocab_size=45, grid=(2, 3), patch_px=2, max_len=20)


def random_params(cfg=SMALL, seed=0, scale=1.0):
    p = init_model(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    for k, v in p.arrays.items():
        if k.endswith("norm"):
            p.arrays[k] = 1.0 + 0.3 * rng.normal(size=v.shape)
        else:
            p.arrays[k] = v * scale
    return p


def random_image(cfg=SMALL, rng=None):
    rng = rng or np.random.default_rng(0)
    return rng.random(cfg.image_shape)


def random_sequence(cfg=SMALL, rng=None, n_prompt=None, n_think=None, n_answer=None):
    """Visual block + prompt + think + answer with random non-special content tokens."""
    rng = rng or np.random.default_rng(0)
    room = cfg.max_len - cfg.num_patches
    n_prompt = n_prompt if n_prompt is not None else int(rng.integers(1, 4))
    n_think = n_think if n_think is not None else int(rng.integers(1, 5))
    n_answer = n_answer if n_answer is not None else int(rng.integers(1, 4))
    assert n_prompt + n_think + n_answer <= room
    hi = min(cfg.vocab_size, 45)
    toks = [1] * cfg.num_patches + list(rng.integers(5, hi, size=n_prompt + n_think + n_answer))
    segs = (
        [Segment.VISUAL] * cfg.num_patches
        + [Segment.PROMPT] * n_prompt
        + [Segment.THINK] * n_think
        + [Segment.ANSWER] * n_answer
    )
    return SegmentedSequence(toks, segs)


def reference_forward(params, image, tokens):
    """Unbatched loop-per-head forward, written independently of the library."""
    cfg = params.config
    a = params.arrays
    p, (rows, cols) = cfg.patch_px, cfg.grid
    n = len(tokens)
    x = np.zeros((n, cfg.d_model))
    for r in range(rows):
        for c in range(cols):
            patch = image[r * p : (r + 1) * p, c * p : (c + 1) * p].reshape(-1)
            x[r * cols + c] = patch @ a["patch_embed"]
    for i in range(cfg.num_patches, n):
        x[i] = a["tok_embed"][tokens[i]]
    h = x + a["pos_embed"][:n]

    def norm(v, g):
        return g * v / np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + cfg.eps)

    dh = cfg.head_dim
    for l in range(cfg.n_layers):
        hn = norm(h, a[f"l{l}.attn_norm"])
        attn = np.zeros_like(h)
        for hd in range(cfg.n_heads):
            q, k, v = hn @ a[f"l{l}.wq"][hd], hn @ a[f"l{l}.wk"][hd], hn @ a[f"l{l}.wv"][hd]
            for i in range(n):
                s = np.array([q[i] @ k[j] / math.sqrt(dh) for j in range(i + 1)])
                w = np.exp(s - s.max())
                w /= w.sum()
                attn[i] += (w @ v[: i + 1]) @ a[f"l{l}.wo"][hd]
        h = h + attn
        h = h + np.maximum(norm(h, a[f"l{l}.ffn_norm"]) @ a[f"l{l}.w1"], 0) @ a[f"l{l}.w2"]
    return norm(h, a["final_norm"]) @ a["unembed"], h
