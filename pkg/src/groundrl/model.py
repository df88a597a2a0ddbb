"""A small decoder-only multimodal transformer.

Images enter as a contiguous prefix of patch tokens (one linear map from the
flattened patch pixels), text tokens come from an embedding table, and
learned absolute positions are added to both. Every block is pre-norm:

    h = h + ATTN(RMSNorm(h));  h = h + FFN(RMSNorm(h))

so the final residual stream is exactly ``h0 + sum(attention outputs) +
sum(FFN outputs)``. :func:`forward_with_trace` keeps every term of that sum.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vocab import END_THINK, EOS, IMG, Segment

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class SegmentError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    vocab_size: int = 64
    grid: tuple[int, int] = (6, 6)
    patch_px: int = 4
    max_len: int = 64
    eps: float = 1e-6
    d_ff: int = 0  # 0 means 2 * d_model

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return self.d_ff or 2 * self.d_model

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.grid[0] * self.patch_px, self.grid[1] * self.patch_px, 3)

    def validate(self) -> "ModelConfig":
        if min(self.n_layers, self.n_heads, self.d_model, self.vocab_size, self.patch_px) < 1:
            raise ConfigError(f"non-positive size in {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ConfigError(f"bad grid {self.grid}")
        if self.num_patches >= self.max_len:
            raise ConfigError("visual block leaves no room for text in max_len")
        if self.eps < 0:
            raise ConfigError("eps must be non-negative")
        return self

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d).validate()


@dataclass
class SegmentedSequence:
    tokens: list[int]
    segments: list[Segment]

    def __post_init__(self):
        self.tokens = [int(t) for t in self.tokens]
        self.segments = [Segment(s) for s in self.segments]

    def __len__(self) -> int:
        return len(self.tokens)

    def positions(self, *segs: Segment) -> list[int]:
        return [i for i, s in enumerate(self.segments) if s in segs]

    def generated_positions(self) -> list[int]:
        return self.positions(Segment.THINK, Segment.ANSWER)

    def response_tokens(self) -> list[int]:
        return [self.tokens[i] for i in self.generated_positions()]

    def answer_tokens(self) -> list[int]:
        return [self.tokens[i] for i in self.positions(Segment.ANSWER)]

    def validate(self, num_visual: int | None = None) -> "SegmentedSequence":
        if len(self.tokens) != len(self.segments):
            raise SegmentError("tokens and segments differ in length")
        vis = self.positions(Segment.VISUAL)
        if vis != list(range(len(vis))):
            raise SegmentError("visual positions must form a prefix block")
        if num_visual is not None and len(vis) != num_visual:
            raise SegmentError(f"expected {num_visual} visual positions, found {len(vis)}")
        think, ans = self.positions(Segment.THINK), self.positions(Segment.ANSWER)
        if think and ans and max(think) > min(ans):
            raise SegmentError("think positions must precede answer positions")
        return self

    def extended(self, token: int, seg: Segment) -> "SegmentedSequence":
        return SegmentedSequence(self.tokens + [int(token)], self.segments + [seg])

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "segments": "".join(s.value for s in self.segments)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SegmentedSequence":
        return cls(list(d["tokens"]), [Segment(c) for c in d["segments"]])


def prompt_sequence(num_visual: int, question: Sequence[int]) -> SegmentedSequence:
    return SegmentedSequence(
        [IMG] * num_visual + list(question),
        [Segment.VISUAL] * num_visual + [Segment.PROMPT] * len(question),
    )


def response_sequence(prompt: SegmentedSequence, response: Sequence[int]) -> SegmentedSequence:
    """Append ``response`` to ``prompt`` tagging Think until ``</think>`` then Answer."""
    seq = SegmentedSequence(list(prompt.tokens), list(prompt.segments))
    seg = Segment.ANSWER if END_THINK in prompt.tokens else Segment.THINK
    for tok in response:
        seq = seq.extended(tok, seg)
        if tok == END_THINK:
            seg = Segment.ANSWER
    return seq


def patchify(images: np.ndarray, patch_px: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, rows*cols, patch_px*patch_px*3), patches row-major."""
    b, h, w, c = images.shape
    if h % patch_px or w % patch_px:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch_px}")
    rows, cols = h // patch_px, w // patch_px
    x = images.reshape(b, rows, patch_px, cols, patch_px, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, rows * cols, patch_px * patch_px * c)


class ModelParams:
    """Named float64 arrays plus the config they were built for."""

    def __init__(self, config: ModelConfig, arrays: Mapping[str, np.ndarray]):
        self.config = config
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.arrays.items()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.arrays.values()])

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.config == other.config
            and self.arrays.keys() == other.arrays.keys()
            and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items())
        )


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, dh = cfg.d_model, cfg.n_heads, cfg.head_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed": (cfg.patch_px * cfg.patch_px * 3, d),
        "tok_embed": (cfg.vocab_size, d),
        "pos_embed": (cfg.max_len, d),
    }
    for l in range(cfg.n_layers):
        shapes[f"l{l}.attn_norm"] = (d,)
        shapes[f"l{l}.wq"] = (h, d, dh)
        shapes[f"l{l}.wk"] = (h, d, dh)
        shapes[f"l{l}.wv"] = (h, d, dh)
        shapes[f"l{l}.wo"] = (h, dh, d)
        shapes[f"l{l}.ffn_norm"] = (d,)
        shapes[f"l{l}.w1"] = (d, cfg.ffn_dim)
        shapes[f"l{l}.w2"] = (cfg.ffn_dim, d)
    shapes["final_norm"] = (d,)
    shapes["unembed"] = (d, cfg.vocab_size)
    return shapes


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    config.validate()
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(config.d_model)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("norm"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, arrays)


# ------------------------------------------------------------------ forward

@dataclass
class ForwardTrace:
    """Everything the logit decomposition needs, for one sequence.

    Shapes: h (L+1, T, d); alpha (L, H, T, T) with alpha[l, h, i, p] the
    weight query i puts on key p; vout (L, H, T, d) the per-head value-output
    vectors; ffn (L, T, d); final_sigma (T,) the rms statistic of h[L].
    """

    h: np.ndarray
    alpha: np.ndarray
    vout: np.ndarray
    ffn: np.ndarray
    final_sigma: np.ndarray
    final_gain: np.ndarray
    unembed: np.ndarray
    logits: np.ndarray
    grid: tuple[int, int] = (0, 0)

    @property
    def length(self) -> int:
        return self.h.shape[1]


def _as_param_tensors(params) -> Mapping[str, Tensor]:
    if isinstance(params, ModelParams):
        return params.tensors()
    return params


def forward_batch(
    params: ModelParams | Mapping[str, Tensor],
    cfg: ModelConfig,
    images: np.ndarray,
    tokens: np.ndarray,
    collect: bool = False,
):
    """Batched forward. ``tokens`` is (B, T) and includes the visual placeholders.

    Returns the (B, T, N) logits tensor and, with ``collect``, a dict of
    batched trace arrays.
    """
    p = _as_param_tensors(params)
    tokens = np.asarray(tokens, dtype=np.int64)
    b, t = tokens.shape
    nv = cfg.num_patches
    if t > cfg.max_len:
        raise CapacityError(f"sequence length {t} exceeds max_len {cfg.max_len}")
    if t < nv:
        raise SegmentError(f"sequence length {t} shorter than the visual block {nv}")

    patches = patchify(np.asarray(images, dtype=np.float64), cfg.patch_px)
    x = T.matmul(Tensor(patches), p["patch_embed"])
    if t > nv:
        x = T.concat([x, T.embed(p["tok_embed"], tokens[:, nv:])], axis=1)
    pos = Tensor(np.arange(t))
    h = T.add(x, T.embed(p["pos_embed"], pos.data.astype(np.int64)))

    mask = np.tril(np.ones((t, t), dtype=bool))
    scale = 1.0 / math.sqrt(cfg.head_dim)
    trace = {"h": [h.data], "alpha": [], "vout": [], "ffn": []} if collect else None

    for l in range(cfg.n_layers):
        xn = T.reshape(T.rmsnorm(h, p[f"l{l}.attn_norm"], cfg.eps), (b, 1, t, cfg.d_model))
        q = T.mul(T.matmul(xn, p[f"l{l}.wq"]), scale)
        k = T.matmul(xn, p[f"l{l}.wk"])
        v = T.matmul(xn, p[f"l{l}.wv"])
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        alpha = T.softmax(scores, mask=mask)
        if collect:
            vout = T.matmul(v, p[f"l{l}.wo"])
            attn = T.sum(T.matmul(alpha, vout), axis=1)
        else:
            attn = T.sum(T.matmul(T.matmul(alpha, v), p[f"l{l}.wo"]), axis=1)
        mid = T.add(h, attn)
        f = T.matmul(T.relu(T.matmul(T.rmsnorm(mid, p[f"l{l}.ffn_norm"], cfg.eps), p[f"l{l}.w1"])), p[f"l{l}.w2"])
        h = T.add(mid, f)
        if collect:
            trace["alpha"].append(alpha.data)
            trace["vout"].append(vout.data)
            trace["ffn"].append(f.data)
            trace["h"].append(h.data)

    logits = T.matmul(T.rmsnorm(h, p["final_norm"], cfg.eps), p["unembed"])
    if collect:
        trace = {
            "h": np.stack(trace["h"], axis=1),
            "alpha": np.stack(trace["alpha"], axis=1),
            "vout": np.stack(trace["vout"], axis=1),
            "ffn": np.stack(trace["ffn"], axis=1),
            "final_sigma": T.rms_stat(h.data, cfg.eps)[..., 0],
            "final_gain": p["final_norm"].data,
            "unembed": p["unembed"].data,
            "logits": logits.data,
        }
    return logits, trace


def _split_trace(trace: dict, i: int, length: int, grid: tuple[int, int]) -> ForwardTrace:
    sl = slice(0, length)
    return ForwardTrace(
        h=trace["h"][i][:, sl],
        alpha=trace["alpha"][i][:, :, sl, sl],
        vout=trace["vout"][i][:, :, sl],
        ffn=trace["ffn"][i][:, sl],
        final_sigma=trace["final_sigma"][i][sl],
        final_gain=trace["final_gain"],
        unembed=trace["unembed"],
        logits=trace["logits"][i][sl],
        grid=grid,
    )


def _check_seq(cfg: ModelConfig, seq: SegmentedSequence):
    seq.validate(cfg.num_patches)
    if len(seq) > cfg.max_len:
        raise CapacityError(f"sequence length {len(seq)} exceeds max_len {cfg.max_len}")


def forward_with_trace(params: ModelParams, image: np.ndarray, seq: SegmentedSequence):
    cfg = params.config
    _check_seq(cfg, seq)
    logits, trace = forward_batch(params, cfg, image[None], np.array([seq.tokens]), collect=True)
    return logits.data[0], _split_trace(trace, 0, len(seq), cfg.grid)


def trace_batch(params: ModelParams, images: np.ndarray, seqs: Sequence[SegmentedSequence]) -> list[ForwardTrace]:
    """Traces for several sequences, right-padded into one forward pass."""
    cfg = params.config
    for s in seqs:
        _check_seq(cfg, s)
    tokens = _pad([s.tokens for s in seqs])
    _, trace = forward_batch(params, cfg, images, tokens, collect=True)
    return [_split_trace(trace, i, len(s), cfg.grid) for i, s in enumerate(seqs)]


def _pad(rows: Sequence[Sequence[int]], fill: int = EOS) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


# --------------------------------------------------------------- generation

def _pick(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    if temperature == 0:
        return int(np.argmax(logits))
    z = logits / temperature
    pr = np.exp(z - z.max())
    cdf = np.cumsum(pr)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def generate_many(
    params: ModelParams,
    images: np.ndarray,
    prompts: Sequence[SegmentedSequence],
    temperature: float,
    max_new: int,
    seeds: Sequence[int],
) -> list[SegmentedSequence]:
    """Lock-step sampling of several continuations with independent RNG streams.

    All prompts must share one length. Each row's result is identical to a
    single-row :func:`generate` with the same seed up to floating-point
    batching effects.
    """
    cfg = params.config
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if len({len(p) for p in prompts}) != 1:
        raise ValueError("prompts in one batch must share a length")
    for pr in prompts:
        _check_seq(cfg, pr)
        if pr.positions(Segment.ANSWER):
            raise SegmentError("prompt already contains answer tokens")
    rngs = [np.random.default_rng(s) for s in seeds]
    seqs = [SegmentedSequence(list(p.tokens), list(p.segments)) for p in prompts]
    state = [Segment.ANSWER if END_THINK in p.tokens else Segment.THINK for p in prompts]
    done = [False] * len(seqs)
    arrays = params.tensors()
    images = np.asarray(images, dtype=np.float64)
    for _ in range(max_new):
        if all(done) or len(seqs[0]) >= cfg.max_len:
            break
        tokens = np.array([s.tokens for s in seqs])
        logits, _ = forward_batch(arrays, cfg, images, tokens)
        last = logits.data[:, -1]
        for j, s in enumerate(seqs):
            if done[j]:
                seqs[j] = s.extended(EOS, Segment.ANSWER)  # filler, trimmed below
                continue
            tok = _pick(last[j], temperature, rngs[j])
            seqs[j] = s.extended(tok, state[j])
            if tok == END_THINK:
                state[j] = Segment.ANSWER
            if tok == EOS:
                done[j] = True
    out = []
    for j, s in enumerate(seqs):
        n = len(prompts[j])
        resp = s.tokens[n:]
        if EOS in resp:
            resp = resp[: resp.index(EOS) + 1]
        out.append(SegmentedSequence(s.tokens[: n + len(resp)], s.segments[: n + len(resp)]))
    return out


def generate(
    params: ModelParams,
    image: np.ndarray,
    prompt: SegmentedSequence,
    temperature: float,
    max_new: int,
    seed: int,
) -> SegmentedSequence:
    return generate_many(params, np.asarray(image)[None], [prompt], temperature, max_new, [seed])[0]


# ----------------------------------------------------------------- logprobs

def response_logprobs(
    params: ModelParams | Mapping[str, Tensor],
    cfg: ModelConfig,
    images: np.ndarray,
    seqs: Sequence[SegmentedSequence],
) -> tuple[Tensor, np.ndarray]:
    """Per-position log-probabilities of each sequence's generated tokens.

    Returns a (B, T-1) tensor whose column t holds log p(token[t+1] | prefix)
    and a matching 0/1 mask selecting generated (Think/Answer) targets. Works
    on tape-tracked parameter tensors so it can feed the policy objective.
    """
    tokens = _pad([s.tokens for s in seqs])
    mask = np.zeros((len(seqs), tokens.shape[1] - 1))
    for i, s in enumerate(seqs):
        for pos in s.generated_positions():
            if pos == 0:
                raise SegmentError("a generated token cannot sit at position 0")
            mask[i, pos - 1] = 1.0
    logits, _ = forward_batch(params, cfg, images, tokens)
    lp = T.log_softmax(T.narrow(logits, 1, 0, tokens.shape[1] - 1))
    return T.take_last(lp, tokens[:, 1:]), mask


def sequence_logprob(params: ModelParams, image: np.ndarray, seq: SegmentedSequence) -> tuple[float, list[float]]:
    cfg = params.config
    _check_seq(cfg, seq)
    positions = seq.generated_positions()
    if not positions:
        raise SegmentError("sequence has no generated positions")
    lp, mask = response_logprobs(params, cfg, np.asarray(image)[None], [seq])
    per_token = [float(lp.data[0, p - 1]) for p in positions]
    return math.fsum(per_token), per_token


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, params: ModelParams, extra: Mapping | None = None) -> None:
    cfg = asdict(params.config)
    cfg["grid"] = list(cfg["grid"])
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg,
        "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in params.arrays.items()},
    }
    if extra:
        doc["extra"] = dict(extra)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('format_version')!r} in {path}")
    cfg = ModelConfig.from_dict(doc["config"])
    arrays = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    expected = param_shapes(cfg)
    if {k: a.shape for k, a in arrays.items()} != expected:
        raise ConfigError(f"checkpoint {path} parameter shapes do not match its config")
    return ModelParams(cfg, arrays)
