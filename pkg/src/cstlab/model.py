"""Recurrent Transformer encoder.

``L`` self-attention blocks are applied ``T`` times in sequence, with the
weights of each block reused on every recurrence. A single output head (layer
norm followed by a bias-free projection and a softmax) reads the hidden state
after every block, so one forward pass yields ``T * L`` probability matrices
and the matching attention matrices.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, UsageError

FORMAT_VERSION = 1
INIT_STD = 0.02
LN_EPS = 1e-5

_ARCH_RE = re.compile(r"^L(\d+)R(\d+)H(\d+)$")


@dataclass
class ModelConfig:
    L: int = 1
    R: int = 32
    H: int = 4
    d_h: int = 128
    t: int = 81
    v: int = 10
    c: int = 9
    d_mlp: int = None
    dropout: float = 0.1
    loss_placement: str = "all"
    use_positional: bool = True
    embedder: str = "lookup"  # "lookup" over v token ids, or "linear" over v features

    def __post_init__(self):
        if self.d_mlp is None:
            self.d_mlp = 4 * self.d_h
        for name in ("L", "R", "H", "d_h", "t", "v", "c", "d_mlp"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_h % self.H:
            raise ConfigError(f"d_h={self.d_h} is not divisible by H={self.H}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if self.loss_placement not in ("all", "last"):
            raise ConfigError(f"loss_placement must be 'all' or 'last', got {self.loss_placement!r}")
        if self.embedder not in ("lookup", "linear"):
            raise ConfigError(f"unknown embedder {self.embedder!r}")

    @property
    def d_head(self):
        return self.d_h // self.H

    @property
    def arch(self):
        return f"L{self.L}R{self.R}H{self.H}"


def parse_arch(name):
    """``"L1R32H4"`` -> ``(1, 32, 4)``."""
    m = _ARCH_RE.match(name.strip())
    if not m:
        raise ConfigError(f"architecture {name!r} does not match LxRyHz")
    return tuple(int(g) for g in m.groups())


def param_count(config):
    d, dm = config.d_h, config.d_mlp
    token = config.v * d
    positional = config.t * d if config.use_positional else 0
    attention = 4 * (d * d + d)
    block_norms = 2 * 2 * d
    mlp = d * dm + dm + dm * d + d
    head = 2 * d + d * config.c
    return token + positional + config.L * (attention + block_norms + mlp) + head


def _param_shapes(config):
    d, dm = config.d_h, config.d_mlp
    shapes = [("tok.weight", (config.v, d))]
    if config.use_positional:
        shapes.append(("pos.weight", (config.t, d)))
    for l in range(config.L):
        p = f"blocks.{l}."
        shapes += [
            (p + "ln1.gamma", (d,)),
            (p + "ln1.beta", (d,)),
            (p + "attn.wk", (d, d)),
            (p + "attn.bk", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.bq", (d,)),
            (p + "attn.wv", (d, d)),
            (p + "attn.bv", (d,)),
            (p + "attn.wp", (d, d)),
            (p + "attn.bp", (d,)),
            (p + "ln2.gamma", (d,)),
            (p + "ln2.beta", (d,)),
            (p + "mlp.w1", (d, dm)),
            (p + "mlp.b1", (dm,)),
            (p + "mlp.w2", (dm, d)),
            (p + "mlp.b2", (d,)),
        ]
    shapes += [("head.ln.gamma", (d,)), ("head.ln.beta", (d,)), ("head.w_out", (d, config.c))]
    return shapes


class Model:
    def __init__(self, config, params, seed=0):
        self.config = config
        self.params = params
        self.rng = np.random.default_rng(seed)

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype):
        params = {k: T.Tensor(p.data.astype(dtype), requires_grad=True, name=k)
                  for k, p in self.params.items()}
        return Model(self.config, params)

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def embed(self, tokens):
        """Token embeddings for a batch: ids ``(B, t)`` or features ``(B, t, v)``."""
        if self.config.embedder == "lookup":
            return T.embedding(self.params["tok.weight"], tokens)
        feats = np.asarray(tokens, dtype=self.params["tok.weight"].dtype)
        if feats.shape[-1] != self.config.v:
            raise DataError(f"feature width {feats.shape[-1]} != v={self.config.v}")
        return T.matmul(feats, self.params["tok.weight"])


def init_model(config, seed=0, dtype=T.DEFAULT_DTYPE):
    """Gaussian(0, 0.02) weights, zero biases, unit/zero layer-norm affine."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(config):
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf == "beta" or leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = T.Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return Model(config, params, seed=seed)


def _heads(x, B, t, H, dh):
    return T.transpose(T.reshape(x, (B, t, H, dh)), (0, 2, 1, 3))


def block_forward(model, l, h_in, train_mode=False, rng=None):
    """One self-attention block. Returns the new hidden state and the
    per-head attention weights ``(B, H, t, t)``."""
    cfg = model.config
    p = model.params
    pre = f"blocks.{l}."
    rng = rng if rng is not None else model.rng
    drop = cfg.dropout if train_mode else 0.0
    B, t, d = h_in.shape
    H, dh = cfg.H, cfg.d_head

    x = T.layer_norm(h_in, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], LN_EPS)
    k = _heads(x @ p[pre + "attn.wk"] + p[pre + "attn.bk"], B, t, H, dh)
    q = _heads(x @ p[pre + "attn.wq"] + p[pre + "attn.bq"], B, t, H, dh)
    v = _heads(x @ p[pre + "attn.wv"] + p[pre + "attn.bv"], B, t, H, dh)
    scores = (q @ T.swap_last(k)) * (1.0 / math.sqrt(dh))
    att = T.softmax(scores, axis=-1)
    mixed = T.dropout(att, drop, rng, train_mode) @ v  # (B, H, t, dh)
    mixed = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (B, t, d))
    proj = mixed @ p[pre + "attn.wp"] + p[pre + "attn.bp"]
    v_star = T.dropout(proj, drop, rng, train_mode) + h_in

    y = T.layer_norm(v_star, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], LN_EPS)
    y = T.gelu(y @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]) @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
    h_out = T.dropout(y, drop, rng, train_mode) + v_star
    return h_out, att


def output_head(model, h):
    p = model.params
    z = T.layer_norm(h, p["head.ln.gamma"], p["head.ln.beta"], LN_EPS) @ p["head.w_out"]
    return T.softmax(z, axis=-1)


@dataclass
class TraceEntry:
    r: int  # 1-based recurrence
    l: int  # 1-based block
    X: T.Tensor  # (B, t, c)
    A: T.Tensor  # (B, H, t, t)


@dataclass
class ForwardTrace:
    entries: list = field(default_factory=list)
    final_hidden: T.Tensor = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def at(self, r, l):
        for e in self.entries:
            if e.r == r and e.l == l:
                return e
        raise UsageError(f"no trace entry for recurrence {r}, block {l}")

    @property
    def last(self):
        return self.entries[-1]


def _batched(tokens, config):
    tokens = np.asarray(tokens)
    feature_dims = 2 if config.embedder == "linear" else 1
    single = tokens.ndim == feature_dims
    if single:
        tokens = tokens[None]
    if tokens.ndim != feature_dims + 1 or tokens.shape[1] != config.t:
        raise DataError(f"token array of shape {tokens.shape} does not fit t={config.t}")
    return tokens, single


def forward(model, tokens, T_steps=None, train_mode=False, rng=None):
    """Run ``T_steps`` recurrences (default ``R``); tokens are ``(t,)`` or ``(B, t)``.

    Trace tensors always carry a leading batch axis.
    """
    cfg = model.config
    T_steps = cfg.R if T_steps is None else int(T_steps)
    if T_steps < 1:
        raise UsageError("need at least one recurrence")
    tokens, _ = _batched(tokens, cfg)
    if cfg.embedder == "lookup" and (tokens.min() < 0 or tokens.max() >= cfg.v):
        raise DataError(f"token id outside [0, {cfg.v})")
    rng = rng if rng is not None else model.rng
    h = model.embed(tokens)
    if cfg.use_positional:
        h = h + model.params["pos.weight"]
    trace = ForwardTrace()
    for r in range(1, T_steps + 1):
        for l in range(1, cfg.L + 1):
            h, att = block_forward(model, l - 1, h, train_mode, rng)
            trace.entries.append(TraceEntry(r, l, output_head(model, h), att))
    trace.final_hidden = h
    return trace


def predict(model, tokens, T_steps=None):
    """Argmax class id per position of the final output (ties -> smallest id)."""
    tokens_b, single = _batched(tokens, model.config)
    X = forward(model, tokens_b, T_steps, train_mode=False).last.X.data
    pred = np.argmax(X, axis=-1)  # argmax returns the first maximum
    return pred[0] if single else pred


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, directory, extra=None):
    """Write ``manifest.json`` and little-endian ``params.bin`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dtype = model.parameters()[0].dtype
    le = np.dtype(dtype).newbyteorder("<")
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": np.dtype(dtype).name,
        "config": asdict(model.config),
        "params": [{"name": k, "shape": list(p.shape)} for k, p in model.named_parameters()],
    }
    if extra:
        manifest["extra"] = extra
    with open(directory / "params.bin", "wb") as f:
        for p in model.parameters():
            f.write(np.ascontiguousarray(p.data, dtype=le).tobytes())
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise UsageError(f"no checkpoint manifest in {directory}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format {manifest.get('format_version')}")
    config = ModelConfig(**manifest["config"])
    le = np.dtype(manifest["dtype"]).newbyteorder("<")
    raw = (directory / "params.bin").read_bytes()
    expected = dict(_param_shapes(config))
    params, offset = {}, 0
    for entry in manifest["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise DataError(f"checkpoint parameter {name} has unexpected shape {shape}")
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype=le, count=n, offset=offset).reshape(shape)
        offset += n * le.itemsize
        params[name] = T.Tensor(arr.astype(manifest["dtype"]), requires_grad=True, name=name)
    if offset != len(raw) or set(params) != set(expected):
        raise DataError("checkpoint parameter data does not match its manifest")
    return Model(config, params)
