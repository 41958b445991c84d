"""A small pre-norm decoder-only transformer with tied embeddings."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, MhaWeights, MlaWeights, attention_forward
from .tensor import DTYPES, Tensor

CHECKPOINT_FORMAT = 1


class VocabularyError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    d_ff: Optional[int] = None
    n_layer: int = 2
    context_length: int = 64
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    tie_embeddings: bool = True
    precision: str = "double"
    embed_std: float = 0.02
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.context_length < 2:
            raise ValueError("context_length must be at least 2")
        if self.attention.d_model != self.d_model:
            raise ValueError("attention.d_model must equal d_model")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def n_head(self) -> int:
        return self.attention.n_head

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["attention"] = AttentionConfig(**d["attention"])
        return cls(**d)


def attention_param_names(cfg: ModelConfig, layer: int) -> dict[str, list[str] | str]:
    """Parameter names of one layer's attention block, grouped by family."""
    a = cfg.attention
    p = f"layers.{layer}.attn"
    heads = range(a.n_head)
    if a.variant == "mha":
        names = {fam: [f"{p}.{fam}.{h}" for h in heads] for fam in ("wq", "wk", "wv")}
    else:
        names = {fam: f"{p}.{fam}" for fam in ("w_dq", "w_dkv", "w_kr")}
        names.update({fam: [f"{p}.{fam}.{h}" for h in heads]
                      for fam in ("w_uq", "w_qr", "w_uk", "w_uv")})
    names["wo"] = f"{p}.wo"
    if a.qk_norm_enabled:
        names["q_gain"] = [f"{p}.q_gain.{h}" for h in heads]
        names["k_gain"] = [f"{p}.k_gain.{h}" for h in heads]
    return names


def _shapes(cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...], int | None]]:
    """(name, shape, fan_in) for every parameter, in canonical order.

    fan_in None marks a norm gain (initialised to 1); the embedding is
    flagged with fan_in 0.
    """
    a = cfg.attention
    d = cfg.d_model
    yield "embed", (cfg.vocab_size, d), 0
    for layer in range(cfg.n_layer):
        p = f"layers.{layer}"
        yield f"{p}.attn_norm", (d,), None
        names = attention_param_names(cfg, layer)
        if a.variant == "mha":
            for fam in ("wq", "wk", "wv"):
                for n in names[fam]:
                    yield n, (d, a.d_head), d
        else:
            yield names["w_dq"], (d, a.d_cq), d
            yield names["w_dkv"], (d, a.d_ckv), d
            yield names["w_kr"], (d, a.d_rope), d
            for n in names["w_uq"]:
                yield n, (a.d_cq, a.d_nope), a.d_cq
            for n in names["w_qr"]:
                yield n, (a.d_cq, a.d_rope), a.d_cq
            for n in names["w_uk"]:
                yield n, (a.d_ckv, a.d_nope), a.d_ckv
            for n in names["w_uv"]:
                yield n, (a.d_ckv, a.d_head), a.d_ckv
        yield names["wo"], (a.n_head * a.d_head, d), a.n_head * a.d_head
        for n in names.get("q_gain", []) + names.get("k_gain", []):
            yield n, (a.d_head,), None
        yield f"{p}.mlp_norm", (d,), None
        yield f"{p}.mlp.w_gate", (d, cfg.d_ff), d
        yield f"{p}.mlp.w_up", (d, cfg.d_ff), d
        yield f"{p}.mlp.w_down", (cfg.d_ff, d), cfg.d_ff
    yield "final_norm", (d,), None
    if not cfg.tie_embeddings:
        yield "unembed", (cfg.vocab_size, d), 0


class ModelParams:
    """Named parameter tensors plus structured per-layer views."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def unembed(self) -> Tensor:
        return self.tensors["embed"] if self.cfg.tie_embeddings else self.tensors["unembed"]

    def attention(self, layer: int) -> MhaWeights | MlaWeights:
        names = attention_param_names(self.cfg, layer)
        t = self.tensors
        pick = {k: ([t[n] for n in v] if isinstance(v, list) else t[v]) for k, v in names.items()}
        if self.cfg.attention.variant == "mha":
            return MhaWeights(**pick)
        return MlaWeights(**pick)

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {n: Tensor(t.data.copy(), requires_grad=True, name=n)
                                      for n, t in self.tensors.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Seeded Gaussian init: std 1/sqrt(fan_in) for linear maps, gains at 1."""
    rng = np.random.default_rng(seed)
    dtype = DTYPES[cfg.precision]
    tensors = {}
    for name, shape, fan_in in _shapes(cfg):
        if fan_in is None:
            arr = np.ones(shape)
        elif fan_in == 0:
            arr = rng.standard_normal(shape) * cfg.embed_std
        else:
            arr = rng.standard_normal(shape) / np.sqrt(fan_in)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return ModelParams(cfg, tensors)


class ForwardResult(NamedTuple):
    logits: Tensor
    max_logits: dict[tuple[int, int], float]


def forward(params: ModelParams, tokens, attn_logits: Optional[dict] = None,
            attn_inputs: Optional[dict] = None) -> ForwardResult:
    """Next-token logits for a (b, s) token array.

    ``attn_logits``, when a dict, is filled with (layer, head) -> scaled
    attention logits (masked entries NaN); ``attn_inputs`` with layer ->
    the normalised input the attention block saw.
    """
    cfg = params.cfg
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise VocabularyError(f"tokens must lie in [0, {cfg.vocab_size})")
    if tokens.shape[-1] > cfg.context_length:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds context "
                         f"{cfg.context_length}")
    t = params.tensors
    x = T.embedding(t["embed"], tokens)
    max_logits = {}
    for layer in range(cfg.n_layer):
        p = f"layers.{layer}"
        captured = {} if attn_logits is not None else None
        h = T.rms_norm(x, t[f"{p}.attn_norm"], cfg.norm_eps)
        if attn_inputs is not None:
            attn_inputs[layer] = h.data.copy()
        out, maxes = attention_forward(h, params.attention(layer), cfg.attention, captured)
        x = x + out
        for head, m in enumerate(maxes):
            max_logits[(layer, head)] = m
        if captured is not None:
            for head, arr in captured.items():
                attn_logits[(layer, head)] = arr
        h = T.rms_norm(x, t[f"{p}.mlp_norm"], cfg.norm_eps)
        gate = T.silu(h @ t[f"{p}.mlp.w_gate"])
        x = x + (gate * (h @ t[f"{p}.mlp.w_up"])) @ t[f"{p}.mlp.w_down"]
    x = T.rms_norm(x, t["final_norm"], cfg.norm_eps)
    return ForwardResult(x @ params.unembed.T, max_logits)


def loss_and_stats(params: ModelParams, batch) -> tuple[Tensor, dict[tuple[int, int], float]]:
    batch = np.asarray(batch)
    if batch.shape[-1] < 2:
        raise ValueError("need at least two tokens per sequence")
    result = forward(params, batch[:, :-1])
    return T.cross_entropy(result.logits, batch[:, 1:]), result.max_logits


def forward_loss(params: ModelParams, batch) -> Tensor:
    """Mean next-token cross-entropy over every position of a (b, s) batch."""
    return loss_and_stats(params, batch)[0]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, **meta) -> None:
    header = {"format": CHECKPOINT_FORMAT, "config": params.cfg.to_dict(),
              "names": params.names(), "meta": meta}
    arrays = {f"p{i}": t.data for i, t in enumerate(params.tensors.values())}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path) -> ModelParams:
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header["format"] != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {header['format']}")
        cfg = ModelConfig.from_dict(header["config"])
        tensors = {name: Tensor(data[f"p{i}"].copy(), requires_grad=True, name=name)
                   for i, name in enumerate(header["names"])}
    return ModelParams(cfg, tensors)
