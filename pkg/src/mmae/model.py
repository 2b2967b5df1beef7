"""Multimodal autoencoder: three encoders into one latent space, three decoders out.

Each modality ``m`` has an encoder ``E_m`` (input dim -> latent) and a decoder
``D_m`` (latent -> input dim). Encoder outputs are combined by a fusion rule
into ``z_fused`` and every decoder reconstructs its modality from ``z_fused``,
so reconstruction gradients reach all encoders.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data.dataset import (
    MODALITIES,
    Modality,
    TripletBatch,
    TripletDataset,
    batch_iter,
)
from .exceptions import CheckpointError, ConfigError, IoError, NumericsError, ShapeError
from .nn import (
    EVAL,
    TRAIN,
    AdamState,
    Mlp,
    adam_step,
    check_gradients,
    mse_loss,
    parameter_names,
    read_mlp,
    sse_loss,
    write_mlp,
)

FUSIONS = ("mean", "image", "audio", "text")
SOURCES = ("fused", "image", "audio", "text")


@dataclass
class MmaeConfig:
    input_dims: tuple = (50, 1024, 768)
    latent_dim: int = 128
    hidden_sizes: tuple = (128, 128)
    loss_weights: tuple = (1.0, 1.0, 1.0)
    fusion: str = "mean"
    align_weight: float = 0.0
    # "mean": per-element MSE per modality; "sum": squared error summed over features
    reconstruction: str = "mean"
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    seed: int = 42
    dtype: str = "float64"
    batch_norm: bool = True

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.validate()

    def validate(self):
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ConfigError(f"input_dims must be three positive integers, got {self.input_dims}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden sizes must be positive")
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0 or max(self.loss_weights) == 0:
            raise ConfigError("loss_weights must be three non-negative numbers, not all zero")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}")
        if self.align_weight < 0:
            raise ConfigError("align_weight must be >= 0")
        if self.reconstruction not in ("mean", "sum"):
            raise ConfigError("reconstruction must be 'mean' or 'sum'")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be 'float64' or 'float32'")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass
class MmaeNetwork:
    config: MmaeConfig
    encoders: Dict[Modality, Mlp]
    decoders: Dict[Modality, Mlp]
    extras: Dict[str, np.ndarray] = field(default_factory=dict)

    def mlps(self) -> List[Mlp]:
        return [self.encoders[m] for m in MODALITIES] + [self.decoders[m] for m in MODALITIES]

    def parameters(self) -> List[np.ndarray]:
        return [p for mlp in self.mlps() for p in mlp.parameters()]

    def buffers(self) -> List[np.ndarray]:
        return [b for mlp in self.mlps() for b in mlp.buffers()]

    def state(self) -> List[np.ndarray]:
        return [a.copy() for a in self.parameters() + self.buffers()]

    def load_state(self, state) -> None:
        for dst, src in zip(self.parameters() + self.buffers(), state):
            dst[...] = src

    def copy(self) -> "MmaeNetwork":
        other = mmae_init(self.config)
        other.load_state(self.state())
        other.extras = {k: v.copy() for k, v in self.extras.items()}
        return other


def mmae_init(cfg: MmaeConfig) -> MmaeNetwork:
    """Six freshly initialised MLPs; decoders mirror the encoder layer sizes."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    hidden = list(cfg.hidden_sizes)
    encoders, decoders = {}, {}
    for m, d in zip(MODALITIES, cfg.input_dims):
        encoders[m] = Mlp([d] + hidden + [cfg.latent_dim], rng, cfg.batch_norm, cfg.dtype)
    for m, d in zip(MODALITIES, cfg.input_dims):
        decoders[m] = Mlp([cfg.latent_dim] + hidden[::-1] + [d], rng, cfg.batch_norm, cfg.dtype)
    return MmaeNetwork(cfg, encoders, decoders)


# ---------------------------------------------------------------------------
# Forward / loss / backward


@dataclass
class ForwardTrace:
    z: Dict[Modality, np.ndarray]
    z_fused: np.ndarray
    reconstructions: Dict[Modality, np.ndarray]
    encoder_tapes: dict
    decoder_tapes: dict

    def relu_inputs(self) -> list:
        tapes = list(self.encoder_tapes.values()) + list(self.decoder_tapes.values())
        return [r for t in tapes for r in t.relu_inputs]


@dataclass
class LossBreakdown:
    rec_image: float
    rec_audio: float
    rec_text: float
    align: float
    total: float

    def as_row(self) -> tuple:
        return (self.rec_image, self.rec_audio, self.rec_text, self.align, self.total)


def _arrays(batch):
    if isinstance(batch, (TripletBatch, TripletDataset)):
        return batch.arrays
    arrays = tuple(batch)
    if len(arrays) != 3:
        raise ShapeError("expected three modality arrays (image, audio, text)")
    return arrays


def fuse(z: Dict[Modality, np.ndarray], fusion: str) -> np.ndarray:
    if fusion == "mean":
        return (z[Modality.IMAGE] + z[Modality.AUDIO] + z[Modality.TEXT]) / 3.0
    return z[Modality(fusion)]


def mmae_forward(net: MmaeNetwork, batch, mode=TRAIN, update_stats=True) -> ForwardTrace:
    cfg = net.config
    arrays = _arrays(batch)
    n = {a.shape[0] for a in arrays}
    if len(n) != 1:
        raise ShapeError(f"modality batches disagree on row count: {sorted(n)}")
    z, enc_tapes = {}, {}
    for m, x in zip(MODALITIES, arrays):
        z[m], enc_tapes[m] = net.encoders[m].forward(x, mode, update_stats)
    z_fused = fuse(z, cfg.fusion)
    recon, dec_tapes = {}, {}
    for m in MODALITIES:
        recon[m], dec_tapes[m] = net.decoders[m].forward(z_fused, mode, update_stats)
    return ForwardTrace(z, z_fused, recon, enc_tapes, dec_tapes)


_PAIRS = ((Modality.IMAGE, Modality.AUDIO), (Modality.IMAGE, Modality.TEXT),
          (Modality.AUDIO, Modality.TEXT))


def _alignment(z):
    """Mean over the three encoder pairs and rows of ``||z_a - z_b||^2``."""
    n = next(iter(z.values())).shape[0]
    value = 0.0
    grads = {m: np.zeros_like(z[m]) for m in MODALITIES}
    for a, b in _PAIRS:
        diff = z[a] - z[b]
        value += float(np.sum(diff * diff)) / (3 * n)
        g = (2.0 / (3 * n)) * diff
        grads[a] += g
        grads[b] -= g
    return value, grads


def mmae_loss(trace: ForwardTrace, batch, cfg: MmaeConfig, with_grads: bool = False):
    """Weighted reconstruction loss plus optional encoder-alignment penalty."""
    arrays = _arrays(batch)
    loss_fn = mse_loss if cfg.reconstruction == "mean" else sse_loss
    rec, rec_grads = {}, {}
    for m, x in zip(MODALITIES, arrays):
        rec[m], rec_grads[m] = loss_fn(trace.reconstructions[m], x)
    if cfg.align_weight > 0:
        align, align_grads = _alignment(trace.z)
    else:
        align, align_grads = 0.0, None
    w = dict(zip(MODALITIES, cfg.loss_weights))
    total = sum(w[m] * rec[m] for m in MODALITIES) + cfg.align_weight * align
    breakdown = LossBreakdown(rec[Modality.IMAGE], rec[Modality.AUDIO], rec[Modality.TEXT],
                              align, float(total))
    if not with_grads:
        return breakdown
    return breakdown, {m: w[m] * rec_grads[m] for m in MODALITIES}, align_grads


def mmae_backward(net: MmaeNetwork, trace: ForwardTrace, rec_grads, align_grads) -> list:
    """Gradients for ``net.parameters()`` given output-side loss gradients."""
    cfg = net.config
    dec_grads = {}
    grad_zf = None
    for m in MODALITIES:
        gz, dec_grads[m] = net.decoders[m].backward(trace.decoder_tapes[m], rec_grads[m])
        grad_zf = gz if grad_zf is None else grad_zf + gz
    enc_grads = {}
    for m in MODALITIES:
        if cfg.fusion == "mean":
            gz = grad_zf / 3.0
        elif cfg.fusion == m.value:
            gz = grad_zf
        else:
            gz = np.zeros_like(trace.z[m])
        if align_grads is not None:
            gz = gz + cfg.align_weight * align_grads[m]
        _, enc_grads[m] = net.encoders[m].backward(trace.encoder_tapes[m], gz)
    return [g for m in MODALITIES for g in enc_grads[m]] + [g for m in MODALITIES for g in dec_grads[m]]


def mmae_grad_check(net: MmaeNetwork, batch, h: float = 1e-5, tolerance: float = 1e-4):
    """Finite-difference check of the total loss through all six networks."""
    cfg = net.config
    trace = mmae_forward(net, batch, TRAIN, update_stats=False)
    _, rec_grads, align_grads = mmae_loss(trace, batch, cfg, with_grads=True)
    grads = mmae_backward(net, trace, rec_grads, align_grads)

    def evaluate():
        t = mmae_forward(net, batch, TRAIN, update_stats=False)
        return mmae_loss(t, batch, cfg).total, t.relu_inputs()

    names = [n for kind, group in (("encoder", net.encoders), ("decoder", net.decoders))
             for m in MODALITIES for n in parameter_names(group[m], f"{kind}.{m.value}.")]
    return check_gradients(evaluate, net.parameters(), grads, h, tolerance, names=names)


# ---------------------------------------------------------------------------
# Training


@dataclass
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    seconds: float


@dataclass
class TrainHistory:
    config: MmaeConfig
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.loss.total for r in self.records])

    def to_csv(self, path, header: Optional[str] = None) -> None:
        """Write ``epoch,rec_I,rec_A,rec_T,align,total`` (wall-clock omitted)."""
        lines = []
        if header:
            lines.extend(f"# {h}" for h in header.splitlines())
        lines.append("epoch,rec_I,rec_A,rec_T,align,total")
        for r in self.records:
            lines.append(",".join([str(r.epoch)] + [repr(float(v)) for v in r.loss.as_row()]))
        try:
            with open(path, "w", newline="\n") as fh:
                fh.write("\n".join(lines) + "\n")
        except OSError as exc:
            raise IoError(str(exc)) from None


def _epoch_mean(parts, weights) -> LossBreakdown:
    arr = np.array([p.as_row() for p in parts])
    w = np.asarray(weights, dtype=np.float64)
    return LossBreakdown(*(float(v) for v in (w @ arr) / w.sum()))


def train(net: MmaeNetwork, data: TripletDataset, cfg: Optional[MmaeConfig] = None,
          callback=None):
    """Optimise ``net`` in place with Adam; returns ``(net, TrainHistory)``.

    Rows are reshuffled each epoch from ``(cfg.seed, epoch)``. A trailing batch
    of one row is skipped because batch statistics are undefined for it.
    """
    cfg = cfg or net.config
    cfg.validate()
    if tuple(data.dims) != tuple(net.config.input_dims):
        raise ShapeError(f"dataset dims {data.dims} do not match model dims {net.config.input_dims}")
    dtype = np.dtype(cfg.dtype)
    if dtype != np.float64:
        data = TripletDataset.from_arrays(*(a.astype(dtype) for a in data.arrays), data.labels,
                                          data.split, data.n_classes)
    params = net.parameters()
    state = AdamState(lr=cfg.learning_rate)
    history = TrainHistory(cfg)
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        last_good = net.state()
        parts, sizes = [], []
        for batch in batch_iter(data, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch):
            if batch.size < 2 and cfg.batch_norm:
                continue
            trace = mmae_forward(net, batch, TRAIN)
            loss, rec_grads, align_grads = mmae_loss(trace, batch, cfg, with_grads=True)
            if not np.isfinite(loss.total):
                net.load_state(last_good)
                err = NumericsError(f"non-finite loss in epoch {epoch}")
                err.checkpoint = net
                raise err
            grads = mmae_backward(net, trace, rec_grads, align_grads)
            try:
                adam_step(params, grads, state)
            except NumericsError as exc:
                net.load_state(last_good)
                exc.checkpoint = net
                raise
            parts.append(loss)
            sizes.append(batch.size)
        record = EpochRecord(epoch, _epoch_mean(parts, sizes), time.perf_counter() - started)
        history.records.append(record)
        if callback is not None:
            callback(record)
    return net, history


# ---------------------------------------------------------------------------
# Embedding extraction


def embed(net: MmaeNetwork, data, source: str = "fused", block: int = 4096) -> np.ndarray:
    """Latent codes in eval mode (running batch-norm statistics), row order kept."""
    if source not in SOURCES:
        raise ConfigError(f"source must be one of {SOURCES}")
    arrays = _arrays(data)
    for m, x, d in zip(MODALITIES, arrays, net.config.input_dims):
        if x.ndim != 2 or x.shape[1] != d:
            raise ShapeError(f"{m.value} features must have dim {d}, got shape {x.shape}")
    n = arrays[0].shape[0]
    if source == "fused":
        needed = MODALITIES if net.config.fusion == "mean" else (Modality(net.config.fusion),)
    else:
        needed = (Modality(source),)
    out = []
    for start in range(0, n, block):
        z = {m: net.encoders[m].forward(x[start:start + block], EVAL)[0]
             for m, x in zip(MODALITIES, arrays) if m in needed}
        out.append(fuse(z, net.config.fusion) if source == "fused" else z[needed[0]])
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Checkpoints
#
#   file  := magic "MMAECKPT", u32 version, u32 n, config json[n],
#            mlp x 6 (encoders I/A/T then decoders I/A/T, see nn.write_mlp),
#            u32 n_extras, extra*, sha256[32] of everything before it
#   extra := u16 n, name[n], u32 ndim, u64[ndim] shape, f64 payload

CHECKPOINT_MAGIC = b"MMAECKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(net: MmaeNetwork, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg = net.config.to_json().encode()
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
    buf.write(cfg)
    for mlp in net.mlps():
        write_mlp(buf, mlp)
    buf.write(struct.pack("<I", len(net.extras)))
    for name in sorted(net.extras):
        arr = np.ascontiguousarray(net.extras[name], dtype="<f8")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)) + key)
        buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    try:
        with open(path, "wb") as fh:
            fh.write(payload + hashlib.sha256(payload).digest())
    except OSError as exc:
        raise IoError(str(exc)) from None


def load_checkpoint(path) -> MmaeNetwork:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from None
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 + 32 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload, digest = blob[:-32], blob[-32:]
    (version,) = struct.unpack_from("<I", payload, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    fh = io.BytesIO(payload)
    fh.seek(len(CHECKPOINT_MAGIC) + 4)
    try:
        (n,) = struct.unpack("<I", fh.read(4))
        cfg = MmaeConfig(**json.loads(fh.read(n).decode()))
        dtype = np.dtype(cfg.dtype)
        mlps = [read_mlp(fh, dtype) for _ in range(6)]
        (n_extras,) = struct.unpack("<I", fh.read(4))
        extras = {}
        for _ in range(n_extras):
            (klen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(klen).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            count = int(np.prod(shape))
            extras[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
    except (struct.error, ValueError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    net = MmaeNetwork(cfg, dict(zip(MODALITIES, mlps[:3])), dict(zip(MODALITIES, mlps[3:])), extras)
    for m, d in zip(MODALITIES, cfg.input_dims):
        if net.encoders[m].in_dim != d or net.decoders[m].out_dim != d \
                or net.encoders[m].out_dim != cfg.latent_dim or net.decoders[m].in_dim != cfg.latent_dim:
            raise CheckpointError(f"{path}: layer shapes disagree with stored config")
    return net


# ---------------------------------------------------------------------------
# Estimator


class MultimodalAutoencoder(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`mmae_init`, :func:`train` and :func:`embed`.

    ``X`` is a :class:`TripletDataset` or a sequence ``(image, audio, text)``
    of row-aligned arrays. Inputs are expected to be standardized already.
    """

    def __init__(self, latent_dim=128, hidden_sizes=(128, 128), loss_weights=(1.0, 1.0, 1.0),
                 fusion="mean", align_weight=0.0, reconstruction="mean", learning_rate=1e-3,
                 batch_size=128, epochs=100, random_state=42, dtype="float64"):
        self.latent_dim = latent_dim
        self.hidden_sizes = hidden_sizes
        self.loss_weights = loss_weights
        self.fusion = fusion
        self.align_weight = align_weight
        self.reconstruction = reconstruction
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state
        self.dtype = dtype

    def _config(self, input_dims) -> MmaeConfig:
        return MmaeConfig(
            input_dims=input_dims, latent_dim=self.latent_dim, hidden_sizes=self.hidden_sizes,
            loss_weights=self.loss_weights, fusion=self.fusion, align_weight=self.align_weight,
            reconstruction=self.reconstruction, learning_rate=self.learning_rate,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.random_state,
            dtype=self.dtype,
        )

    @staticmethod
    def _dataset(X, y=None) -> TripletDataset:
        if isinstance(X, TripletDataset):
            return X
        arrays = _arrays(X)
        labels = np.zeros(arrays[0].shape[0], dtype=np.int64) if y is None else y
        return TripletDataset.from_arrays(*arrays, labels)

    def fit(self, X, y=None):
        data = self._dataset(X, y)
        cfg = self._config(data.dims)
        self.network_, self.history_ = train(mmae_init(cfg), data, cfg)
        self.n_features_in_ = sum(data.dims)
        return self

    def transform(self, X, source="fused"):
        check_is_fitted(self)
        return embed(self.network_, X if isinstance(X, TripletDataset) else _arrays(X), source)

    def reconstruct(self, X) -> tuple:
        check_is_fitted(self)
        trace = mmae_forward(self.network_, _arrays(X), EVAL)
        return tuple(trace.reconstructions[m] for m in MODALITIES)

    def score(self, X, y=None) -> float:
        """Negative total loss in eval mode (higher is better)."""
        check_is_fitted(self)
        arrays = _arrays(X)
        trace = mmae_forward(self.network_, arrays, EVAL)
        return -mmae_loss(trace, arrays, self.network_.config).total

    def save(self, path) -> None:
        check_is_fitted(self)
        save_checkpoint(self.network_, path)

    @classmethod
    def load(cls, path) -> "MultimodalAutoencoder":
        net = load_checkpoint(path)
        cfg = net.config
        est = cls(latent_dim=cfg.latent_dim, hidden_sizes=cfg.hidden_sizes,
                  loss_weights=cfg.loss_weights, fusion=cfg.fusion, align_weight=cfg.align_weight,
                  reconstruction=cfg.reconstruction, learning_rate=cfg.learning_rate,
                  batch_size=cfg.batch_size, epochs=cfg.epochs, random_state=cfg.seed,
                  dtype=cfg.dtype)
        est.network_ = net
        est.n_features_in_ = sum(cfg.input_dims)
        return est
