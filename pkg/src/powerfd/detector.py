"""Spatio-temporal detector for stealthy measurement tampering.

Each frame of a measurement window is encoded by three convolutional stages
sharing weights across time: a per-bus stage and a per-line stage compress
each unit's channels to a 4-value representation, and a spatial stage mixes
all units into a 128-value frame feature. A four-layer LSTM stack reads the
frame features in order and a sigmoid head turns the final step into the
probability that the window's last frame is attacked.

Layer geometry is fixed by the width ledger asserted in the tests: bus path
3 -> 3 -> 3 -> 12 -> 6 -> 4, line path 6 -> 6 -> 6 -> 12 -> 6 -> 4, spatial
path (m_b + m_l) x 4 -> 256 x 4 -> 256 x 1 -> 128, temporal path
128 -> 256 -> 256 -> 256 -> 128 -> 1. The line stage's first two
convolutions keep width 6 under a width-6 kernel, which forces uneven
left/right padding of (2, 3).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .dataset import MeasurementWindow
from .grid import BUS_CHANNELS, LINE_CHANNELS
from .metrics import f1_score
from . import nncore as nn

FEATURE_WIDTH = 128
SPATIAL_CHANNELS = 256
REPR_WIDTH = 4
UNIT_FEATURES = 12
TA_HIDDEN = (256, 256, 256, 128)
CHECKPOINT_MAGIC = b"PWFDCKPT"
CHECKPOINT_VERSION = 1


class DetectorError(Exception):
    """Base class for detector failures."""


class TrainingDivergenceError(DetectorError):
    """Training loss became non-finite."""


class CheckpointFormatError(DetectorError):
    """The checkpoint file is malformed or truncated."""


class CheckpointVersionError(CheckpointFormatError):
    """The checkpoint was written by an incompatible format version."""


class CheckpointConfigError(DetectorError):
    """The checkpoint's model geometry does not match the expected one."""


@dataclass(frozen=True)
class PowerFdConfig:
    """Model geometry: unit counts, channel widths, and history length."""

    m_b: int
    m_l: int
    history: int
    c_b: int = len(BUS_CHANNELS)
    c_l: int = len(LINE_CHANNELS)

    def __post_init__(self) -> None:
        if self.m_b < 1 or self.m_l < 1:
            raise ValueError(f"need at least one bus and one line, got {self.m_b}/{self.m_l}")
        if self.history < 1:
            raise ValueError(f"history must be at least 1, got {self.history}")
        if self.c_b != 3:
            raise ValueError(f"bus channel width must be 3, got {self.c_b}")
        if self.c_l != 6:
            raise ValueError(f"line channel width must be 6, got {self.c_l}")

    @property
    def window_length(self) -> int:
        return self.history + 1

    def to_dict(self) -> dict:
        return {
            "m_b": self.m_b,
            "m_l": self.m_l,
            "history": self.history,
            "c_b": self.c_b,
            "c_l": self.c_l,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PowerFdConfig":
        return cls(**doc)


class _ConvBlock:
    """A grouped convolution followed by batch normalization and ELU."""

    def __init__(self, conv: nn.GroupedConv2d, dtype):
        self.conv = conv
        self.bn = nn.BatchNorm2d(conv.spec.out_channels, dtype=dtype)

    def __call__(self, x: nn.Tensor, training: bool) -> nn.Tensor:
        return nn.elu(self.bn(self.conv(x), training))

    def parameters(self) -> list[nn.Tensor]:
        return self.conv.parameters() + self.bn.parameters()

    def named_arrays(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        out = [(f"{prefix}.weight", self.conv.weight.data)]
        if self.conv.bias is not None:
            out.append((f"{prefix}.bias", self.conv.bias.data))
        out.extend(
            [
                (f"{prefix}.gamma", self.bn.gamma.data),
                (f"{prefix}.beta", self.bn.beta.data),
                (f"{prefix}.running_mean", self.bn.running_mean),
                (f"{prefix}.running_var", self.bn.running_var),
            ]
        )
        return out


def _unit_stage(units: int, channels: int, width_pad, rng, dtype) -> list[_ConvBlock]:
    """The five-convolution per-unit chain shared by the bus and line paths.

    ``channels`` is the unit's channel count (kernel width of the first three
    convolutions) and ``width_pad`` the left/right padding that keeps the
    width at ``channels`` through the first two convolutions.
    """
    def conv(in_ch, out_ch, kernel, stride=1, padding=(0, 0)):
        return _ConvBlock(
            nn.GroupedConv2d(
                in_ch, out_ch, kernel, groups=units, stride=stride, padding=padding,
                rng=rng, dtype=dtype,
            ),
            dtype,
        )

    return [
        conv(units, units, (1, channels), padding=((0, 0), width_pad)),
        conv(units, units, (2, channels), padding=((0, 0), width_pad)),
        conv(units, units * UNIT_FEATURES, (2, channels)),
        conv(units, units, (1, 3), stride=2, padding=(0, 1)),
        conv(units, units, (1, 3)),
    ]


class PowerFdModel:
    """The full detector: per-unit and spatial encoders plus the LSTM head."""

    def __init__(self, config: PowerFdConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.bus_stage = _unit_stage(config.m_b, config.c_b, (1, 1), rng, dtype)
        self.line_stage = _unit_stage(config.m_l, config.c_l, (2, 3), rng, dtype)
        m_total = config.m_b + config.m_l
        self.spatial_stage = [
            _ConvBlock(
                nn.GroupedConv2d(1, SPATIAL_CHANNELS, (m_total, 1), rng=rng, dtype=dtype),
                dtype,
            ),
            _ConvBlock(
                nn.GroupedConv2d(
                    SPATIAL_CHANNELS, SPATIAL_CHANNELS, (1, REPR_WIDTH),
                    groups=SPATIAL_CHANNELS, rng=rng, dtype=dtype,
                ),
                dtype,
            ),
            _ConvBlock(
                nn.GroupedConv2d(1, FEATURE_WIDTH, (SPATIAL_CHANNELS, 1), rng=rng, dtype=dtype),
                dtype,
            ),
        ]
        widths = (FEATURE_WIDTH,) + TA_HIDDEN
        self.lstm_stack = [
            nn.LstmLayer(widths[i], widths[i + 1], rng=rng, dtype=dtype) for i in range(4)
        ]
        self.head = nn.Linear(TA_HIDDEN[-1], 1, rng=rng, dtype=dtype)

    def sa_bus_forward(self, x: nn.Tensor, training: bool = False) -> nn.Tensor:
        """[N, m_b, 1, c_b] frames to [N, m_b, 1, 4] per-bus representations."""
        return self._unit_forward(x, self.bus_stage, self.config.m_b, self.config.c_b, training)

    def sa_line_forward(self, x: nn.Tensor, training: bool = False) -> nn.Tensor:
        """[N, m_l, 1, c_l] frames to [N, m_l, 1, 4] per-line representations."""
        return self._unit_forward(x, self.line_stage, self.config.m_l, self.config.c_l, training)

    def _unit_forward(self, x, stage, units, channels, training):
        if x.data.ndim != 4 or x.data.shape[1:] != (units, 1, channels):
            raise ValueError(
                f"expected [N, {units}, 1, {channels}] input, got {x.data.shape}"
            )
        n = x.data.shape[0]
        h1 = stage[0](x, training)
        h2 = stage[1](nn.concat([h1, x], axis=2), training)
        h3 = stage[2](nn.concat([h2, x], axis=2), training)
        r3 = nn.reshape(h3, (n, units, 1, UNIT_FEATURES))
        h4 = stage[3](r3, training)
        return stage[4](h4, training)

    def sa_spatial_forward(
        self, bus_repr: nn.Tensor, line_repr: nn.Tensor, training: bool = False
    ) -> nn.Tensor:
        """Per-unit representations to a [N, 128] spatial feature per frame."""
        n = bus_repr.data.shape[0]
        m_total = self.config.m_b + self.config.m_l
        stacked = nn.concat([bus_repr, line_repr], axis=1)
        grid_image = nn.reshape(stacked, (n, 1, m_total, REPR_WIDTH))
        h1 = self.spatial_stage[0](grid_image, training)
        h2 = self.spatial_stage[1](h1, training)
        h3 = self.spatial_stage[2](nn.reshape(h2, (n, 1, SPATIAL_CHANNELS, 1)), training)
        return nn.reshape(h3, (n, FEATURE_WIDTH))

    def sa_forward(self, bus: nn.Tensor, line: nn.Tensor, training: bool = False) -> nn.Tensor:
        """Frame batches ([N, m, 1, c] each) to [N, 128] spatial features."""
        return self.sa_spatial_forward(
            self.sa_bus_forward(bus, training),
            self.sa_line_forward(line, training),
            training,
        )

    def ta_forward(self, features: nn.Tensor) -> nn.Tensor:
        """[B, T+1, 128] frame features to [B, 1] window probabilities."""
        if features.data.ndim != 3 or features.data.shape[2] != FEATURE_WIDTH:
            raise ValueError(
                f"expected [B, T+1, {FEATURE_WIDTH}] features, got {features.data.shape}"
            )
        h = features
        for layer in self.lstm_stack:
            h = layer(h)
        batch, steps, width = h.data.shape
        final = nn.reshape(nn.narrow(h, 1, steps - 1, 1), (batch, width))
        return nn.sigmoid(self.head(final))

    def forward(self, bus: nn.Tensor, line: nn.Tensor, training: bool = False) -> nn.Tensor:
        """Window batches to probabilities.

        ``bus`` is [B, T+1, m_b, c_b] and ``line`` [B, T+1, m_l, c_l]; the
        result is [B, 1]. Frames are encoded with shared weights by
        flattening batch and time, so batch normalization sees batch x time
        samples during training.
        """
        cfg = self.config
        if bus.data.ndim != 4 or bus.data.shape[1:] != (cfg.window_length, cfg.m_b, cfg.c_b):
            raise ValueError(
                f"expected bus windows [B, {cfg.window_length}, {cfg.m_b}, {cfg.c_b}],"
                f" got {bus.data.shape}"
            )
        if line.data.ndim != 4 or line.data.shape[1:] != (cfg.window_length, cfg.m_l, cfg.c_l):
            raise ValueError(
                f"expected line windows [B, {cfg.window_length}, {cfg.m_l}, {cfg.c_l}],"
                f" got {line.data.shape}"
            )
        batch = bus.data.shape[0]
        frames = batch * cfg.window_length
        bus_flat = nn.reshape(bus, (frames, cfg.m_b, 1, cfg.c_b))
        line_flat = nn.reshape(line, (frames, cfg.m_l, 1, cfg.c_l))
        features = self.sa_forward(bus_flat, line_flat, training)
        return self.ta_forward(nn.reshape(features, (batch, cfg.window_length, FEATURE_WIDTH)))

    def predict(self, bus: np.ndarray, line: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Probabilities for window arrays, in eval mode, without gradients."""
        bus = np.asarray(bus, dtype=self.dtype)
        line = np.asarray(line, dtype=self.dtype)
        out = np.empty(bus.shape[0], dtype=np.float64)
        for start in range(0, bus.shape[0], batch_size):
            stop = min(start + batch_size, bus.shape[0])
            probs = self.forward(
                nn.Tensor(bus[start:stop]), nn.Tensor(line[start:stop]), training=False
            )
            out[start:stop] = probs.data[:, 0]
        return out

    def predict_window(self, window: MeasurementWindow) -> float:
        """Probability that a single window's final frame is attacked."""
        return float(
            self.predict(window.bus_tensor()[None], window.line_tensor()[None])[0]
        )

    def parameters(self) -> list[nn.Tensor]:
        params: list[nn.Tensor] = []
        for block in self.bus_stage + self.line_stage + self.spatial_stage:
            params.extend(block.parameters())
        for layer in self.lstm_stack:
            params.extend(layer.parameters())
        params.extend(self.head.parameters())
        return params

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Live arrays (parameters and BN statistics) in checkpoint order."""
        out: list[tuple[str, np.ndarray]] = []
        for prefix, stage in (
            ("bus", self.bus_stage), ("line", self.line_stage), ("spatial", self.spatial_stage),
        ):
            for i, block in enumerate(stage, start=1):
                out.extend(block.named_arrays(f"{prefix}{i}"))
        for k, layer in enumerate(self.lstm_stack):
            for name in (
                "w_xf", "w_xi", "w_xc", "w_xo", "w_hf", "w_hi", "w_hc", "w_ho",
                "b_f", "b_i", "b_c", "b_o",
            ):
                out.append((f"lstm{k}.{name}", getattr(layer.params, name).data))
        out.append(("head.weight", self.head.weight.data))
        out.append(("head.bias", self.head.bias.data))
        return out


class WindowBatch(NamedTuple):
    """Window arrays ready for the model: bus, line, and labels."""

    bus: np.ndarray
    line: np.ndarray
    labels: np.ndarray


def windows_to_batch(windows: Sequence[MeasurementWindow]) -> WindowBatch:
    """Stack windows into arrays ([B, T+1, m, c] features, [B] labels)."""
    if not windows:
        raise ValueError("no windows to stack")
    lengths = {len(w.frames) for w in windows}
    if len(lengths) != 1:
        raise ValueError(f"windows have mixed lengths {sorted(lengths)}")
    return WindowBatch(
        bus=np.stack([w.bus_tensor() for w in windows]),
        line=np.stack([w.line_tensor() for w in windows]),
        labels=np.array([w.label for w in windows], dtype=np.float64),
    )


def _as_batch(data) -> WindowBatch:
    if isinstance(data, WindowBatch):
        return data
    return windows_to_batch(data)


@dataclass
class TrainingResult:
    """Per-epoch history plus the best validation checkpoint's identity."""

    history: list[dict]
    best_epoch: int
    best_val_f1: float
    final_lr: float
    checkpoint_path: str | None = None


def _batch_loss(probs: np.ndarray, labels: np.ndarray, reduction: str) -> float:
    loss = nn.bce_loss(
        nn.Tensor(np.asarray(probs, dtype=np.float64)),
        np.asarray(labels, dtype=np.float64),
        reduction=reduction,
    )
    return float(loss.data)


def train_model(
    model: PowerFdModel,
    train_data,
    val_data,
    epochs: int = 50,
    batch_size: int = 64,
    lr: float = 1e-4,
    seed: int = 0,
    loss_reduction: str = "mean",
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> TrainingResult:
    """Mini-batch training with Adam and a plateau schedule on validation loss.

    ``train_data`` and ``val_data`` are window sequences or ``WindowBatch``
    tuples. Each epoch appends one JSON line (epoch, losses, val F1, lr) to
    ``log_path`` if given. The parameters with the best validation F1 are
    restored into the model at the end and, if ``checkpoint_path`` is given,
    saved there. Raises ``TrainingDivergenceError`` on a non-finite loss.
    """
    train = _as_batch(train_data)
    val = _as_batch(val_data)
    if epochs < 1:
        raise ValueError(f"epochs must be at least 1, got {epochs}")
    rng = np.random.default_rng(seed)
    optimizer = nn.Adam(model.parameters(), lr=lr)
    scheduler = nn.PlateauScheduler(optimizer)
    train_bus = train.bus.astype(model.dtype)
    train_line = train.line.astype(model.dtype)
    train_labels = train.labels.astype(np.float64)
    history: list[dict] = []
    best_f1 = -1.0
    best_epoch = 0
    best_state: dict[str, np.ndarray] = {}
    log_file = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(train_labels))
            total = 0.0
            for start in range(0, len(order), batch_size):
                idx = order[start : start + batch_size]
                probs = model.forward(
                    nn.Tensor(train_bus[idx]), nn.Tensor(train_line[idx]), training=True
                )
                loss = nn.bce_loss(
                    probs, train_labels[idx, None].astype(model.dtype), reduction=loss_reduction
                )
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise TrainingDivergenceError(
                        f"non-finite training loss at epoch {epoch}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss_value * len(idx) if loss_reduction == "mean" else loss_value
            if loss_reduction == "mean":
                train_loss = total / len(order)
            else:
                train_loss = total
            val_probs = model.predict(val.bus, val.line, batch_size=max(batch_size, 256))
            val_loss = _batch_loss(val_probs, val.labels, loss_reduction)
            val_f1 = f1_score(val_probs, val.labels)
            current_lr = scheduler.step(val_loss)
            record = {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "val_f1": val_f1,
                "lr": current_lr,
            }
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            if val_f1 > best_f1:
                best_f1 = val_f1
                best_epoch = epoch
                best_state = {name: arr.copy() for name, arr in model.named_arrays()}
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path)
    finally:
        if log_file is not None:
            log_file.close()
    for name, arr in model.named_arrays():
        arr[...] = best_state[name]
    return TrainingResult(
        history=history,
        best_epoch=best_epoch,
        best_val_f1=best_f1,
        final_lr=optimizer.lr,
        checkpoint_path=None if checkpoint_path is None else str(checkpoint_path),
    )


def save_checkpoint(model: PowerFdModel, path: str | Path) -> None:
    """Write the model's geometry and arrays as a versioned binary file."""
    arrays = model.named_arrays()
    meta = {
        "config": model.config.to_dict(),
        "dtype": np.dtype(model.dtype).name,
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as out:
        out.write(CHECKPOINT_MAGIC)
        out.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        out.write(blob)
        for _, arr in arrays:
            out.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(
    path: str | Path, expected_config: PowerFdConfig | None = None
) -> PowerFdModel:
    """Rebuild a model from a checkpoint file, byte-validating the layout."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError(
                f"truncated checkpoint: needed {n} bytes for {what},"
                f" got {len(data) - pos}"
            )
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    version, meta_len = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})"
        )
    try:
        meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
        config = PowerFdConfig.from_dict(meta["config"])
        dtype = np.dtype(meta["dtype"])
        manifest = [(str(name), tuple(int(s) for s in shape)) for name, shape in meta["arrays"]]
    except CheckpointFormatError:
        raise
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"bad checkpoint metadata: {exc}") from exc
    if expected_config is not None and config != expected_config:
        raise CheckpointConfigError(
            f"checkpoint geometry {config.to_dict()} does not match"
            f" expected {expected_config.to_dict()}"
        )
    model = PowerFdModel(config, seed=0, dtype=dtype.type)
    arrays = model.named_arrays()
    if [(name, arr.shape) for name, arr in arrays] != manifest:
        raise CheckpointFormatError("checkpoint manifest does not match the model layout")
    for name, arr in arrays:
        raw = take(arr.size * dtype.itemsize, name)
        arr[...] = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).reshape(arr.shape)
    if pos != len(data):
        raise CheckpointFormatError(f"{len(data) - pos} trailing bytes after checkpoint data")
    return model
