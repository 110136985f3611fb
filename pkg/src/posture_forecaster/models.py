"""Per-segment next-frame predictors: a single-layer bidirectional LSTM and an
encoder-decoder transformer. Both map a normalised (25, f) window to the 3m
normalised coordinates of the following frame."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .motion.markers import N_META
from .motion.preprocess import NormalizerStats

CHECKPOINT_VERSION = 1


@dataclass
class BlstmConfig:
    input_width: int
    output_width: int
    hidden_units: int = 128

    def __post_init__(self):
        if self.hidden_units <= 0 or self.input_width <= 0 or self.output_width <= 0:
            raise ValueError("BLSTM widths must be positive")


@dataclass
class TransformerConfig:
    input_width: int
    output_width: int
    model_width: int = 96
    encoder_layers: int = 1
    decoder_layers: int = 3
    heads: int = 16
    feedforward_width: int = 512
    head_hidden: int = 64
    dropout: float = 0.25
    residual: bool = False  # predict the change from the decoder token instead of the frame itself

    def __post_init__(self):
        if self.model_width % self.heads:
            raise ValueError(f"model width {self.model_width} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")
        if self.input_width != self.output_width + N_META:
            raise ValueError(
                f"input width {self.input_width} must equal output width {self.output_width} + {N_META}")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def linear(self, name: str, n_in: int, n_out: int, bias: bool = True):
        self.add(f"{name}.w", _glorot(self.rng, n_in, n_out))
        if bias:
            self.add(f"{name}.b", np.zeros(n_out))

    def add(self, name: str, value: np.ndarray):
        self.params[name] = Tensor(value, requires_grad=True, name=name)


def _linear(x, params, name: str):
    out = ad.matmul(x, params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return out if b is None else ad.add(out, b)


def _as_batch(X) -> np.ndarray:
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    return X[None] if X.ndim == 2 else X


class Model:
    kind = ""

    def __init__(self, config, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __call__(self, X, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.forward(X, train, rng)

    def forward(self, X, train: bool = False, rng=None) -> Tensor:
        raise NotImplementedError

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    def _check_width(self, X: np.ndarray):
        if X.ndim != 3 or X.shape[-1] != self.config.input_width:
            raise ad.ShapeError(
                f"{self.kind}: expected windows of width {self.config.input_width}, got shape {X.shape}")


class BLSTM(Model):
    kind = "blstm"

    @classmethod
    def init(cls, config: BlstmConfig, seed: int = 0) -> "BLSTM":
        H, f = config.hidden_units, config.input_width
        b = _Builder(seed)
        for d in ("fwd", "bwd"):
            b.add(f"{d}.wx", _glorot(b.rng, f, 4 * H))
            b.add(f"{d}.wh", _glorot(b.rng, H, 4 * H))
            bias = np.zeros(4 * H)
            bias[H:2 * H] = 1.0  # forget gate
            b.add(f"{d}.b", bias)
        b.linear("head", 2 * H, config.output_width)
        return cls(config, b.params)

    def _run(self, X: np.ndarray, direction: str, steps) -> Tensor:
        p = self.params
        H = self.config.hidden_units
        B = X.shape[0]
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        for t in steps:
            z = ad.add(ad.add(ad.matmul(Tensor(X[:, t, :]), p[f"{direction}.wx"]),
                              ad.matmul(h, p[f"{direction}.wh"])), p[f"{direction}.b"])
            i = ad.sigmoid(ad.take(z, (slice(None), slice(0, H))))
            fg = ad.sigmoid(ad.take(z, (slice(None), slice(H, 2 * H))))
            g = ad.tanh(ad.take(z, (slice(None), slice(2 * H, 3 * H))))
            o = ad.sigmoid(ad.take(z, (slice(None), slice(3 * H, 4 * H))))
            c = ad.add(ad.mul(fg, c), ad.mul(i, g))
            h = ad.mul(o, ad.tanh(c))
        return h

    def forward(self, X, train: bool = False, rng=None) -> Tensor:
        X = _as_batch(X)
        self._check_width(X)
        T = X.shape[1]
        h_fwd = self._run(X, "fwd", range(T))
        h_bwd = self._run(X, "bwd", range(T - 1, -1, -1))
        return _linear(ad.concat([h_fwd, h_bwd], axis=-1), self.params, "head")

    @staticmethod
    def parameter_count(config: BlstmConfig) -> int:
        H, f, o = config.hidden_units, config.input_width, config.output_width
        return 2 * (f * 4 * H + H * 4 * H + 4 * H) + 2 * H * o + o


def positional_encoding(length: int, width: int) -> np.ndarray:
    """Sinusoidal position table, sin on even and cos on odd channels."""
    pos = np.arange(length)[:, None]
    i = np.arange(0, width, 2)[None, :]
    angle = pos / np.power(10000.0, i / width)
    pe = np.zeros((length, width))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : width // 2])
    return pe


class Transformer(Model):
    kind = "transformer"

    @classmethod
    def init(cls, config: TransformerConfig, seed: int = 0) -> "Transformer":
        d, ff = config.model_width, config.feedforward_width
        b = _Builder(seed)
        b.linear("expand", config.input_width, d)
        b.linear("dec_expand", config.output_width, d)

        def mha(prefix):
            b.linear(f"{prefix}.q", d, d)
            # a key bias only shifts every score of a query equally, so it is omitted
            b.linear(f"{prefix}.k", d, d, bias=False)
            b.linear(f"{prefix}.v", d, d)
            b.linear(f"{prefix}.o", d, d)

        def norm(name):
            b.add(f"{name}.g", np.ones(d))
            b.add(f"{name}.b", np.zeros(d))

        def ffn(prefix):
            b.linear(f"{prefix}.ff1", d, ff)
            b.linear(f"{prefix}.ff2", ff, d)

        for i in range(config.encoder_layers):
            mha(f"enc{i}.attn")
            norm(f"enc{i}.ln1")
            ffn(f"enc{i}")
            norm(f"enc{i}.ln2")
        for i in range(config.decoder_layers):
            mha(f"dec{i}.self")
            norm(f"dec{i}.ln1")
            mha(f"dec{i}.cross")
            norm(f"dec{i}.ln2")
            ffn(f"dec{i}")
            norm(f"dec{i}.ln3")
        b.linear("head", d, config.head_hidden)
        b.linear("out", config.head_hidden, config.output_width)
        return cls(config, b.params)

    @staticmethod
    def parameter_count(config: TransformerConfig) -> int:
        d, ff = config.model_width, config.feedforward_width
        mha = 4 * d * d + 3 * d
        ln = 2 * d
        ffn = d * ff + ff + ff * d + d
        enc = mha + ffn + 2 * ln
        dec = 2 * mha + ffn + 3 * ln
        return ((config.input_width + 1) * d + (config.output_width + 1) * d
                + config.encoder_layers * enc + config.decoder_layers * dec
                + (d + 1) * config.head_hidden + (config.head_hidden + 1) * config.output_width)

    def _attend(self, prefix: str, x: Tensor, memory: Tensor) -> Tensor:
        p = self.params
        H = self.config.heads
        d = self.config.model_width
        dh = d // H

        def split(t: Tensor) -> Tensor:
            B, T, _ = t.shape
            return ad.transpose(ad.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q = split(_linear(x, p, f"{prefix}.q"))
        k = split(_linear(memory, p, f"{prefix}.k"))
        v = split(_linear(memory, p, f"{prefix}.v"))
        a = ad.transpose(ad.attention(q, k, v), (0, 2, 1, 3))
        B, T = a.shape[0], a.shape[1]
        return _linear(ad.reshape(a, (B, T, d)), p, f"{prefix}.o")

    def _sublayer(self, x: Tensor, y: Tensor, norm: str, train: bool, rng) -> Tensor:
        p = self.params
        y = ad.dropout(y, self.config.dropout, rng, train)
        return ad.layer_norm(ad.add(x, y), p[f"{norm}.g"], p[f"{norm}.b"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        return _linear(ad.relu(_linear(x, self.params, f"{prefix}.ff1")), self.params, f"{prefix}.ff2")

    def decoder_token(self, X: np.ndarray) -> np.ndarray:
        """Normalised marker coordinates of the last input frame, (B, 1, 3m)."""
        return X[:, -1:, : self.config.output_width]

    def forward(self, X, train: bool = False, rng=None) -> Tensor:
        X = _as_batch(X)
        self._check_width(X)
        cfg, p = self.config, self.params
        T = X.shape[1]
        h = ad.add(_linear(Tensor(X), p, "expand"), positional_encoding(T, cfg.model_width))
        for i in range(cfg.encoder_layers):
            h = self._sublayer(h, self._attend(f"enc{i}.attn", h, h), f"enc{i}.ln1", train, rng)
            h = self._sublayer(h, self._ffn(f"enc{i}", h), f"enc{i}.ln2", train, rng)
        t = _linear(Tensor(self.decoder_token(X)), p, "dec_expand")
        for i in range(cfg.decoder_layers):
            t = self._sublayer(t, self._attend(f"dec{i}.self", t, t), f"dec{i}.ln1", train, rng)
            t = self._sublayer(t, self._attend(f"dec{i}.cross", t, h), f"dec{i}.ln2", train, rng)
            t = self._sublayer(t, self._ffn(f"dec{i}", t), f"dec{i}.ln3", train, rng)
        t = ad.reshape(t, (t.shape[0], cfg.model_width))
        out = _linear(ad.relu(_linear(t, p, "head")), p, "out")
        if cfg.residual:
            out = ad.add(out, self.decoder_token(X)[:, 0])
        return out


MODEL_TYPES = {"blstm": (BLSTM, BlstmConfig), "transformer": (Transformer, TransformerConfig)}


def init_model(config, seed: int = 0) -> Model:
    if isinstance(config, BlstmConfig):
        return BLSTM.init(config, seed)
    if isinstance(config, TransformerConfig):
        return Transformer.init(config, seed)
    raise TypeError(f"unsupported config type {type(config).__name__}")


def blstm_forward(X, model: BLSTM, train_mode: bool = False) -> Tensor:
    return model.forward(X, train_mode)


def transformer_forward(X, model: Transformer, train_mode: bool = False,
                        rng: np.random.Generator | None = None) -> Tensor:
    return model.forward(X, train_mode, rng)


@dataclass
class Checkpoint:
    model: Model
    stats: NormalizerStats
    segment: str
    meta: dict

    def save(self, path) -> Path:
        path = Path(path)
        header = {
            "version": CHECKPOINT_VERSION,
            "kind": self.model.kind,
            "config": asdict(self.model.config),
            "segment": self.segment,
            "param_names": list(self.model.params),
            "meta": self.meta,
        }
        arrays = {f"param/{k}": v.data for k, v in self.model.params.items()}
        arrays["stats/mean"] = self.stats.mean
        arrays["stats/std"] = self.stats.std
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header.get('version')!r} in {path}")
            model_cls, cfg_cls = MODEL_TYPES[header["kind"]]
            params = {k: Tensor(z[f"param/{k}"].copy(), requires_grad=True, name=k)
                      for k in header["param_names"]}
            stats = NormalizerStats(z["stats/mean"].copy(), z["stats/std"].copy())
        return cls(model_cls(cfg_cls(**header["config"]), params), stats, header["segment"],
                   header.get("meta", {}))
