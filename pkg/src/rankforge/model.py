"""Toy transformer rankers.

Three heads share one pre-layernorm encoder:

* ``encdec_token_logit`` runs a single decoder step from a learned start
  vector and reads the unnormalized vocabulary logit of a reserved token;
* ``enc_pool_dense`` pools the encoder states (first token or masked mean)
  and projects them to a scalar;
* ``generation_baseline`` reads the logits of the true/false tokens and
  scores by the probability of "true" under a two-way softmax.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

HEAD_VARIANTS = ("encdec_token_logit", "enc_pool_dense", "generation_baseline")
POOLINGS = ("first", "mean")

PRESETS = {
    "tiny": dict(model_dim=32, num_heads=4, ff_dim=64, encoder_layers=1, decoder_layers=1),
    "small": dict(model_dim=64, num_heads=4, ff_dim=128, encoder_layers=2, decoder_layers=2),
    "base-toy": dict(model_dim=128, num_heads=8, ff_dim=256, encoder_layers=4, decoder_layers=4),
}

# ids follow data.special_tokens(): pad, unk, empty, true, false, <extra_id_0>, ...
PAD_ID = 0
TRUE_ID = 3
FALSE_ID = 4
FIRST_SENTINEL_ID = 5

CHECKPOINT_MAGIC = b"RKFGCKPT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    model_dim: int = 32
    num_heads: int = 4
    ff_dim: int = 64
    encoder_layers: int = 1
    decoder_layers: int = 1
    max_seq_len: int = 128
    head_variant: str = "encdec_token_logit"
    pooling: str = "first"
    target_token_id: int = FIRST_SENTINEL_ID + 10
    pos_token_id: int = TRUE_ID
    neg_token_id: int = FALSE_ID
    num_special_tokens: int = FIRST_SENTINEL_ID + 100
    init_scale: float = 1.0
    layernorm_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.head_variant not in HEAD_VARIANTS:
            raise ConfigError(f"head_variant must be one of {HEAD_VARIANTS}, got {self.head_variant!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.encoder_layers < 1 or self.decoder_layers < 0:
            raise ConfigError("need >= 1 encoder layer and >= 0 decoder layers")
        if self.uses_decoder and self.decoder_layers < 1:
            raise ConfigError(f"{self.head_variant} needs decoder_layers >= 1")
        if not 0 < self.num_special_tokens <= self.vocab_size:
            raise ConfigError("num_special_tokens must lie within the vocabulary")
        # any reserved token other than pad/unk/empty may carry the score
        if not 3 <= self.target_token_id < self.num_special_tokens:
            raise ConfigError(f"target_token_id {self.target_token_id} is not a reserved unused token")
        for name in ("pos_token_id", "neg_token_id"):
            if not 0 <= getattr(self, name) < self.vocab_size:
                raise ConfigError(f"{name} out of vocabulary range")
        if self.pos_token_id == self.neg_token_id:
            raise ConfigError("pos_token_id and neg_token_id must differ")

    @property
    def uses_decoder(self) -> bool:
        return self.head_variant in ("encdec_token_logit", "generation_baseline")

    @classmethod
    def preset(cls, name: str, vocab_size: int, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        return cls(vocab_size=vocab_size, **{**PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def parameter_shapes(cfg: ModelConfig) -> dict:
    """Ordered ``{name: shape}`` for every parameter of ``cfg``."""
    d, f, v = cfg.model_dim, cfg.ff_dim, cfg.vocab_size
    shapes = {"tok_emb": (v, d), "pos_emb": (cfg.max_seq_len, d)}

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{w}"] = (d, d)

    def norm(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ff(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.w2"] = (f, d)

    for i in range(cfg.encoder_layers):
        norm(f"enc{i}.ln1")
        attn(f"enc{i}.attn")
        norm(f"enc{i}.ln2")
        ff(f"enc{i}.ff")
    norm("enc_final")
    if cfg.uses_decoder:
        shapes["dec_start"] = (1, d)
        for i in range(cfg.decoder_layers):
            norm(f"dec{i}.ln1")
            attn(f"dec{i}.self")
            norm(f"dec{i}.ln2")
            attn(f"dec{i}.cross")
            norm(f"dec{i}.ln3")
            ff(f"dec{i}.ff")
        norm("dec_final")
        shapes["lm.w"] = (d, v)
        shapes["lm.b"] = (v,)
    else:
        shapes["score.w"] = (d, 1)
        shapes["score.b"] = (1,)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count."""
    d, f, v = cfg.model_dim, cfg.ff_dim, cfg.vocab_size
    enc_layer = 4 * d * d + 2 * d * f + 4 * d
    total = v * d + cfg.max_seq_len * d + cfg.encoder_layers * enc_layer + 2 * d
    if cfg.uses_decoder:
        dec_layer = 8 * d * d + 2 * d * f + 6 * d
        total += d + cfg.decoder_layers * dec_layer + 2 * d + d * v + v
    else:
        total += d + 1
    return total


def _init_value(name: str, shape: tuple, cfg: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf == "b":
        return np.zeros(shape)
    # lookup tables behave like a one-hot input, so their fan-in is 1
    fan_in = 1 if name in ("tok_emb", "pos_emb", "dec_start") else shape[0]
    bound = cfg.init_scale / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class EncoderOutput:
    states: Tensor
    mask: np.ndarray

    @property
    def length(self) -> int:
        return self.states.shape[1]


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> np.ndarray:
    """Right-pad token id sequences into an ``(n, max_len)`` int64 array."""
    if not len(sequences):
        raise ValueError("empty batch")
    width = max(len(s) for s in sequences)
    out = np.full((len(sequences), width), pad_id, dtype=np.int64)
    for i, s in enumerate(sequences):
        if len(s) == 0:
            raise ValueError(f"sequence {i} is empty")
        out[i, : len(s)] = s
    return out


class RankerModel:
    """Parameters plus the forward pass for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            missing = [n for n in expected if n not in params]
            extra = [n for n in params if n not in expected]
            problem = missing[0] if missing else (extra[0] if extra else "<order>")
            raise CheckpointError(f"parameter set does not match config (first offending: {problem!r})")
        self.params = {}
        for name, shape in expected.items():
            value = params[name]
            data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            if data.shape != shape:
                raise CheckpointError(f"parameter {name!r} has shape {data.shape}, config expects {shape}")
            self.params[name] = Tensor(data, requires_grad=True, name=name)

    @classmethod
    def init(cls, config: ModelConfig) -> "RankerModel":
        rng = np.random.default_rng(config.seed)
        params = {
            name: _init_value(name, shape, config, rng) for name, shape in parameter_shapes(config).items()
        }
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.data.astype("<f8").tobytes())
        return h.hexdigest()

    def with_config(self, **changes) -> "RankerModel":
        """Same parameters under a config that differs only in non-shape fields."""
        return RankerModel(replace(self.config, **changes), {n: p.data.copy() for n, p in self.params.items()})

    # ------------------------------------------------------------ building blocks

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.layernorm(x, self[f"{prefix}.g"], self[f"{prefix}.b"], self.config.layernorm_eps)

    def _attn(self, prefix: str, q_in: Tensor, kv_in: Tensor, mask) -> Tensor:
        return T.multihead_attention(
            q_in,
            kv_in,
            kv_in,
            self[f"{prefix}.wq"],
            self[f"{prefix}.wk"],
            self[f"{prefix}.wv"],
            self[f"{prefix}.wo"],
            self.config.num_heads,
            mask,
        )

    def _ff(self, x: Tensor, prefix: str) -> Tensor:
        return T.gelu(x @ self[f"{prefix}.w1"]) @ self[f"{prefix}.w2"]

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size == 0:
            raise ValueError("token_ids must be nonempty")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            bad = int(ids.max() if ids.max() >= self.config.vocab_size else ids.min())
            raise ValueError(f"token id {bad} outside vocabulary of size {self.config.vocab_size}")
        if ids.shape[1] > self.config.max_seq_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")

    def _as_batch(self, token_ids) -> np.ndarray:
        if isinstance(token_ids, np.ndarray) and token_ids.ndim == 2:
            ids = token_ids.astype(np.int64, copy=False)
        elif len(token_ids) and np.ndim(token_ids[0]) == 0:
            ids = np.asarray(token_ids, dtype=np.int64)[None, :]
        else:
            ids = pad_batch(token_ids)
        self._check_ids(ids)
        return ids

    # ------------------------------------------------------------ forward

    def encode(self, token_ids) -> EncoderOutput:
        """Encoder states for one sequence or a batch of sequences.

        A single sequence (1-d ids) gives states of shape ``(1, l, dim)``.
        """
        ids = self._as_batch(token_ids)
        mask = ids != PAD_ID
        n, length = ids.shape
        x = T.embedding(self["tok_emb"], ids) + T.getitem(self["pos_emb"], slice(0, length))
        for i in range(self.config.encoder_layers):
            x = self._encoder_block(x, i, mask)
        return EncoderOutput(self._ln(x, "enc_final"), mask)

    def _encoder_block(self, x: Tensor, i: int, mask: np.ndarray) -> Tensor:
        h = self._ln(x, f"enc{i}.ln1")
        x = x + self._attn(f"enc{i}.attn", h, h, mask)
        return x + self._ff(self._ln(x, f"enc{i}.ln2"), f"enc{i}.ff")

    def decode(self, enc: EncoderOutput) -> Tensor:
        """One decoder step from the learned start vector; returns ``(n, dim)``."""
        if not self.config.uses_decoder:
            raise ConfigError(f"{self.config.head_variant} has no decoder")
        n = enc.states.shape[0]
        d = self.config.model_dim
        y = T.reshape(self["dec_start"], (1, 1, d)) + Tensor(np.zeros((n, 1, d)))
        for i in range(self.config.decoder_layers):
            h = self._ln(y, f"dec{i}.ln1")
            y = y + self._attn(f"dec{i}.self", h, h, None)
            y = y + self._attn(f"dec{i}.cross", self._ln(y, f"dec{i}.ln2"), enc.states, enc.mask)
            y = y + self._ff(self._ln(y, f"dec{i}.ln3"), f"dec{i}.ff")
        return T.reshape(self._ln(y, "dec_final"), (n, d))

    def token_logits(self, dec_state: Tensor, token_ids: Sequence[int]) -> Tensor:
        """Logits ``(n, len(token_ids))`` for selected vocabulary columns only."""
        cols = np.asarray(token_ids, dtype=np.int64)
        w = T.getitem(self["lm.w"], (slice(None), cols))
        b = T.getitem(self["lm.b"], cols)
        return dec_state @ w + b

    def vocab_logits(self, token_ids) -> Tensor:
        """Full unnormalized vocabulary logits ``(n, vocab_size)`` (debug view)."""
        dec = self.decode(self.encode(token_ids))
        return dec @ self["lm.w"] + self["lm.b"]

    def pool(self, enc: EncoderOutput) -> Tensor:
        n, length, d = enc.states.shape
        if self.config.pooling == "first":
            return T.reshape(T.getitem(enc.states, (slice(None), 0)), (n, d))
        weights = enc.mask / enc.mask.sum(axis=1, keepdims=True)
        return T.sum_(enc.states * Tensor(weights[:, :, None]), axis=1)

    def forward(self, token_ids, quantity: str = "score") -> Tensor:
        """Scores ``(n,)`` for a batch, recorded on the active tape if any.

        ``quantity="margin"`` returns ``z_pos - z_neg`` for the generation
        baseline, the input of its two-class training loss; other heads
        ignore it.
        """
        cfg = self.config
        enc = self.encode(token_ids)
        n = enc.states.shape[0]
        if cfg.head_variant == "enc_pool_dense":
            return T.reshape(self.pool(enc) @ self["score.w"] + self["score.b"], (n,))
        dec = self.decode(enc)
        if cfg.head_variant == "encdec_token_logit":
            return T.reshape(self.token_logits(dec, [cfg.target_token_id]), (n,))
        z = self.token_logits(dec, [cfg.pos_token_id, cfg.neg_token_id])
        margin = T.reshape(z[:, 0:1] - z[:, 1:2], (n,))
        return margin if quantity == "margin" else T.sigmoid(margin)

    def scores(self, sequences: Sequence[Sequence[int]], chunk_size: int = 512) -> np.ndarray:
        """Inference scores as a float array, batched in chunks."""
        out = []
        for lo in range(0, len(sequences), chunk_size):
            out.append(self.forward(pad_batch(sequences[lo : lo + chunk_size])).data.copy())
        return np.concatenate(out) if out else np.zeros(0)

    # ------------------------------------------------------------ checkpoints

    def to_bytes(self) -> bytes:
        entries = []
        offset = 0
        for name, p in self.params.items():
            nbytes = p.size * 8
            entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": nbytes})
            offset += nbytes
        header = json.dumps(
            {"version": CHECKPOINT_VERSION, "config": self.config.to_dict(), "params": entries},
            sort_keys=True,
            separators=(",", ":"),
        ).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<Q", len(header)))
        buf.write(header)
        for p in self.params.values():
            buf.write(p.data.astype("<f8").tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes, config: Optional[ModelConfig] = None) -> "RankerModel":
        if blob[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a rankforge checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", blob[8:16])
        header = json.loads(blob[16 : 16 + hlen])
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        stored = ModelConfig.from_dict(header["config"])
        if config is not None and config != stored:
            diff = [k for k, v in config.to_dict().items() if stored.to_dict()[k] != v]
            raise CheckpointError(f"checkpoint config differs from expected config in {diff}")
        body = blob[16 + hlen :]
        params = {}
        for e in header["params"]:
            raw = body[e["offset"] : e["offset"] + e["nbytes"]]
            if len(raw) != e["nbytes"]:
                raise CheckpointError(f"truncated data for parameter {e['name']!r}")
            params[e["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
        return cls(stored, params)

    @classmethod
    def load(cls, path, config: Optional[ModelConfig] = None) -> "RankerModel":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read(), config)


def init_params(config: ModelConfig) -> RankerModel:
    return RankerModel.init(config)


def _require(model: RankerModel, variant: str) -> None:
    if model.config.head_variant != variant:
        raise ConfigError(f"model head is {model.config.head_variant!r}, not {variant!r}")


def encode(model: RankerModel, token_ids) -> EncoderOutput:
    return model.encode(token_ids)


def score_encdec(model: RankerModel, token_ids) -> float:
    _require(model, "encdec_token_logit")
    return float(model.forward(token_ids).data[0])


def score_enc(model: RankerModel, token_ids) -> float:
    _require(model, "enc_pool_dense")
    return float(model.forward(token_ids).data[0])


def score_generation_baseline(model: RankerModel, token_ids) -> float:
    _require(model, "generation_baseline")
    return float(model.forward(token_ids).data[0])


def generation_score(z_pos, z_neg):
    """Probability of the positive token under a softmax over two logits."""
    d = np.asarray(z_pos, dtype=np.float64) - np.asarray(z_neg, dtype=np.float64)
    return T.sigmoid(Tensor(d)).data


def score_list(model: RankerModel, sequences: Sequence[Sequence[int]]) -> np.ndarray:
    return model.scores(sequences)
