"""LSTM, CNN and transformer classifiers over windows of event sets.

All three share the input encoder: per step, the mean embedding of the
step's events concatenated with (log_dt, log_sent, log_recv). Parameters
are split into ``embed.*``, ``enc.*`` (the encoder body, transferred after
pre-training) and ``head.*``.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, replace

import numpy as np

from .ndcore import Tensor, glorot_init, ops
from .ndcore import checkpoint as ckpt
from .telemetry import PAD_ID, EventVocabulary, WindowBatch, WindowInstance, stack_windows

ARCHS = ("lstm", "cnn", "transformer")
N_NUMERIC = 3


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    vocab_size: int
    n_out: int
    head: str = "softmax"  # or "sigmoid" for the pre-training head
    preset: str = "desk"
    embedding_dim: int = 32
    lstm_layers: int = 1
    lstm_units: int = 64
    cnn_layers: int = 3
    kernel: int = 4
    filters: int = 16
    tf_blocks: int = 2
    heads: int = 4
    d_model: int = 32
    ffn_units: int = 64
    dense_layers: int = 2
    dense_units: int = 64
    dropout: float = 0.1
    w: int = 21

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.head not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown head {self.head!r}")
        for name in ("vocab_size", "n_out", "embedding_dim", "lstm_layers", "lstm_units",
                     "cnn_layers", "kernel", "filters", "tf_blocks", "heads", "d_model",
                     "ffn_units", "dense_layers", "dense_units", "w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.arch == "cnn":
            cnn_plan(self.w, self.cnn_layers, self.kernel)

    @property
    def input_dim(self) -> int:
        return self.embedding_dim + N_NUMERIC

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


PRESETS = {
    "paper": dict(embedding_dim=128, lstm_layers=1, lstm_units=1024, cnn_layers=3, kernel=4,
                  filters=32, tf_blocks=2, heads=8, d_model=128, ffn_units=512),
    "desk": dict(embedding_dim=32, lstm_layers=1, lstm_units=64, cnn_layers=3, kernel=4,
                 filters=16, tf_blocks=2, heads=4, d_model=32, ffn_units=64),
}
HEAD_PRESETS = {
    "paper": {"lstm": (2, 256), "cnn": (2, 256), "transformer": (2, 512)},
    "desk": {"lstm": (2, 64), "cnn": (2, 64), "transformer": (2, 64)},
}


def make_config(arch: str, preset: str, vocab_size: int, n_out: int, **overrides) -> ModelConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {tuple(PRESETS)}")
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    dense_layers, dense_units = HEAD_PRESETS[preset][arch]
    kw = dict(PRESETS[preset], dense_layers=dense_layers, dense_units=dense_units)
    kw.update(overrides)
    return ModelConfig(arch=arch, vocab_size=vocab_size, n_out=n_out, preset=preset, **kw)


def cnn_plan(w: int, layers: int, kernel: int) -> list[tuple[int, bool]]:
    """Per stage (output length, pooled?) for valid convolutions of width ``kernel``.

    A stage pools by 2 only when the next convolution still fits afterwards
    (the last stage pools whenever the result is non-empty).
    """
    length = w
    plan = []
    for i in range(layers):
        if length < kernel:
            raise ValueError(f"cnn: stage {i + 1} input length {length} shorter than kernel {kernel}")
        length = length - kernel + 1
        last = i == layers - 1
        pooled = length // 2 >= (1 if last else kernel)
        if pooled:
            length //= 2
        plan.append((length, pooled))
    return plan


def _param_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


class Model:
    """Parameters plus the forward pass for one architecture."""

    def __init__(self, config: ModelConfig, seed: int = 0, vocab: EventVocabulary | None = None,
                 classes: list | None = None, task: str | None = None):
        self.config = config
        self.vocab = vocab
        self.classes = list(classes) if classes is not None else None
        self.task = task
        self.params: dict[str, Tensor] = {}
        self._seed = seed
        self._build()

    # -- parameters ---------------------------------------------------------

    def _add(self, name, shape, init="glorot", seed=None):
        seed = self._seed if seed is None else seed
        if init == "glorot":
            data = glorot_init(shape, _param_seed(seed, name))
        elif init == "zeros":
            data = np.zeros(shape, dtype=np.float32)
        elif init == "ones":
            data = np.ones(shape, dtype=np.float32)
        else:
            raise ValueError(init)
        self.params[name] = Tensor(data, name=name, requires_grad=True)

    def _build(self):
        c = self.config
        self._add("embed.table", (c.vocab_size, c.embedding_dim))
        self.params["embed.table"].data[PAD_ID] = 0.0
        d_in = c.input_dim
        if c.arch == "lstm":
            for layer in range(c.lstm_layers):
                H = c.lstm_units
                for direction in ("fw", "bw"):
                    p = f"enc.lstm{layer}.{direction}"
                    self._add(p + ".W", (d_in + H, 4 * H))
                    self._add(p + ".b", (4 * H,), "zeros")
                    self.params[p + ".b"].data[H:2 * H] = 1.0  # forget-gate bias
                d_in = 2 * H
            rep = 2 * c.lstm_units
        elif c.arch == "cnn":
            for layer in range(c.cnn_layers):
                self._add(f"enc.conv{layer}.W", (c.kernel, d_in, c.filters))
                self._add(f"enc.conv{layer}.b", (c.filters,), "zeros")
                d_in = c.filters
            rep = c.filters
        else:
            d = c.d_model
            self._add("enc.proj.W", (d_in, d))
            self._add("enc.proj.b", (d,), "zeros")
            for blk in range(c.tf_blocks):
                p = f"enc.block{blk}"
                for m in ("q", "k", "v", "o"):
                    self._add(f"{p}.attn.W{m}", (d, d))
                    self._add(f"{p}.attn.b{m}", (d,), "zeros")
                self._add(f"{p}.ln1.g", (d,), "ones")
                self._add(f"{p}.ln1.b", (d,), "zeros")
                self._add(f"{p}.ffn1.W", (d, c.ffn_units))
                self._add(f"{p}.ffn1.b", (c.ffn_units,), "zeros")
                self._add(f"{p}.ffn2.W", (c.ffn_units, d))
                self._add(f"{p}.ffn2.b", (d,), "zeros")
                self._add(f"{p}.ln2.g", (d,), "ones")
                self._add(f"{p}.ln2.b", (d,), "zeros")
            rep = d
        self.rep_dim = rep
        self.init_head(self._seed)

    def init_head(self, seed: int) -> None:
        """(Re)create the head with fresh Glorot weights."""
        c = self.config
        for name in [n for n in self.params if n.startswith("head.")]:
            del self.params[name]
        d = self.rep_dim
        if c.head == "softmax":
            for i in range(c.dense_layers):
                self._add(f"head.dense{i}.W", (d, c.dense_units), seed=seed)
                self._add(f"head.dense{i}.b", (c.dense_units,), "zeros", seed=seed)
                d = c.dense_units
        self._add("head.out.W", (d, c.n_out), seed=seed)
        self._add("head.out.b", (c.n_out,), "zeros", seed=seed)

    def names(self, prefix: str) -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- forward ------------------------------------------------------------

    def embed(self, event_ids) -> Tensor:
        ids = np.asarray(event_ids)
        if ids.size and ids.max() >= self.config.vocab_size:
            raise ValueError(f"event id {int(ids.max())} >= vocabulary size {self.config.vocab_size}")
        return ops.embedding_lookup(self.params["embed.table"], ids, padding_idx=PAD_ID)

    def step_features(self, emb: Tensor, event_mask, numerics) -> Tensor:
        """(B, w, S, D) event embeddings -> (B, w, D + 3) step features."""
        mean = ops.mean_over_set(emb, event_mask)
        return ops.concat([mean, np.asarray(numerics, dtype=emb.dtype)], axis=-1)

    def encode(self, feats: Tensor, pad_mask, training=False, rng=None) -> Tensor:
        """Step features -> fixed-size representation (B, rep_dim)."""
        c, P = self.config, self.params
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if c.arch == "lstm":
            h = feats
            final = None
            for layer in range(c.lstm_layers):
                p = f"enc.lstm{layer}"
                h, final = ops.bidirectional_lstm_layer(
                    h, pad_mask, P[p + ".fw.W"], P[p + ".fw.b"], P[p + ".bw.W"], P[p + ".bw.b"])
            return final
        if c.arch == "cnn":
            h = feats
            for layer, (_, pooled) in enumerate(cnn_plan(h.shape[1], c.cnn_layers, c.kernel)):
                h = ops.relu(ops.conv1d(h, P[f"enc.conv{layer}.W"], P[f"enc.conv{layer}.b"]))
                if pooled:
                    h = ops.maxpool1d(h, 2)
            return ops.global_average_pool(h)
        # transformer
        B, L, _ = feats.shape
        h = ops.affine(feats, P["enc.proj.W"], P["enc.proj.b"])
        # positions count back from the final (labeled) step so that left
        # padding never shifts the encoding of real steps
        h = ops.positional_encoding_add(h, np.arange(L - 1, -1, -1))
        for blk in range(c.tf_blocks):
            p = f"enc.block{blk}"
            a = ops.multi_head_attention(
                h, P[f"{p}.attn.Wq"], P[f"{p}.attn.bq"], P[f"{p}.attn.Wk"], P[f"{p}.attn.bk"],
                P[f"{p}.attn.Wv"], P[f"{p}.attn.bv"], P[f"{p}.attn.Wo"], P[f"{p}.attn.bo"],
                heads=c.heads, key_mask=pad_mask)
            a = ops.dropout(a, c.dropout, rng, training)
            h = ops.layer_norm(ops.add(h, a), P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
            f = ops.dense(h, P[f"{p}.ffn1.W"], P[f"{p}.ffn1.b"], "relu")
            f = ops.dropout(ops.affine(f, P[f"{p}.ffn2.W"], P[f"{p}.ffn2.b"]), c.dropout, rng, training)
            h = ops.layer_norm(ops.add(h, f), P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
        return ops.global_average_pool(h, pad_mask)

    def head(self, rep: Tensor, training=False, rng=None) -> Tensor:
        c, P = self.config, self.params
        h = rep
        if c.head == "softmax":
            for i in range(c.dense_layers):
                h = ops.dense(h, P[f"head.dense{i}.W"], P[f"head.dense{i}.b"], "relu")
                h = ops.dropout(h, c.dropout, rng, training)
        return ops.affine(h, P["head.out.W"], P["head.out.b"])

    def forward(self, batch: WindowBatch, training=False, rng=None, embeddings: Tensor | None = None) -> Tensor:
        """Logits (B, n_out). ``embeddings`` overrides the table lookup."""
        emb = self.embed(batch.event_ids) if embeddings is None else embeddings
        feats = self.step_features(emb, batch.event_mask, batch.numerics)
        rep = self.encode(feats, batch.pad_mask, training, rng)
        return self.head(rep, training, rng)

    def output(self, logits: Tensor) -> Tensor:
        return ops.softmax(logits) if self.config.head == "softmax" else ops.sigmoid(logits)

    def predict_proba(self, batch: WindowBatch, chunk: int = 512) -> np.ndarray:
        out = []
        for s in range(0, len(batch), chunk):
            part = batch.take(np.arange(s, min(s + chunk, len(batch))))
            out.append(self.output(self.forward(part)).data)
        if not out:
            return np.zeros((0, self.config.n_out), dtype=np.float32)
        return np.concatenate(out, axis=0)

    def encoder_activations(self, batch: WindowBatch) -> np.ndarray:
        emb = self.embed(batch.event_ids)
        return self.encode(self.step_features(emb, batch.event_mask, batch.numerics),
                           batch.pad_mask).data

    # -- persistence ----------------------------------------------------------

    def metadata(self, **extra) -> dict:
        meta = {
            "arch": self.config.arch,
            "preset": self.config.preset,
            "n_classes": str(self.config.n_out),
            "head": self.config.head,
            "config": self.config.to_json(),
        }
        if self.vocab is not None:
            meta["vocab_hash"] = self.vocab.hash()
            meta["vocab"] = json.dumps(self.vocab.names, separators=(",", ":"))
        if self.classes is not None:
            meta["classes"] = json.dumps(self.classes, separators=(",", ":"))
        if self.task is not None:
            meta["task"] = self.task
        meta.update({k: str(v) for k, v in extra.items()})
        return meta

    def to_bytes(self, **extra) -> bytes:
        return ckpt.dumps({n: p.data for n, p in self.params.items()}, self.metadata(**extra))

    def save(self, path, **extra) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(**extra))

    @classmethod
    def from_parts(cls, tensors, meta) -> "Model":
        if meta.get("arch") == "rf":
            raise ValueError("checkpoint holds a random forest, not a neural model")
        config = ModelConfig.from_json(meta["config"])
        vocab = EventVocabulary(json.loads(meta["vocab"])) if "vocab" in meta else None
        classes = json.loads(meta["classes"]) if "classes" in meta else None
        model = cls(config, seed=0, vocab=vocab, classes=classes, task=meta.get("task"))
        if set(tensors) != set(model.params):
            missing = set(model.params) ^ set(tensors)
            raise ckpt.CheckpointError(f"checkpoint tensors do not match architecture: {sorted(missing)[:5]}")
        for name, arr in tensors.items():
            if arr.shape != model.params[name].shape:
                raise ckpt.CheckpointError(f"tensor {name} has shape {arr.shape}, "
                                           f"expected {model.params[name].shape}")
            model.params[name] = Tensor(arr.copy(), name=name, requires_grad=True)
        return model

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_parts(*ckpt.load(path))

    def copy(self) -> "Model":
        return Model.from_parts(*ckpt.loads(self.to_bytes()))

    def with_config(self, **changes) -> ModelConfig:
        return replace(self.config, **changes)


def encode_input(instance: WindowInstance, model: Model) -> np.ndarray:
    """Per-step feature matrix (w, embedding_dim + 3) for one window."""
    batch = stack_windows([instance])
    return model.step_features(model.embed(batch.event_ids), batch.event_mask,
                               batch.numerics).data[0]


def argmax_lowest(probs: np.ndarray) -> int:
    """Index of the largest probability; ties go to the lowest index."""
    return int(np.argmax(probs))


def predict(instance: WindowInstance, model: Model):
    """(class id, probability vector, cache) for one window.

    The cache holds the embeddings and array batch so attribution can reuse
    them without another lookup.
    """
    batch = stack_windows([instance])
    emb = model.embed(batch.event_ids)
    probs = model.output(model.forward(batch, embeddings=emb)).data[0]
    return argmax_lowest(probs), probs, {"batch": batch, "embeddings": emb.data}
