"""The VGG8 age regressor: five conv blocks, three dense layers.

Each block is conv3d(3x3x3, pad 1) -> batchnorm3d -> relu -> maxpool(2),
with the channel ladder 16/32/64/128/256, then dense 512 -> 128 -> 1 on
the flattened encoder output. Training uses Adam on MAE loss with
early stopping on validation MAE; the checkpoint returned is always the
best-validation epoch, not the last.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import AdamState, Tensor
from .rng import SplitMix64, derive_seed

CHANNEL_LADDER = (16, 32, 64, 128, 256)
FC_DIMS = (512, 128, 1)

# strict improvement threshold for early stopping, in years
IMPROVEMENT_TOL = 1e-4

PREDICT_BATCH = 16

CHECKPOINT_MAGIC = b"BAGE"
CHECKPOINT_VERSION = 1


class Vgg8Error(Exception):
    pass


class BadEdgeError(Vgg8Error):
    pass


class EmptySplitError(Vgg8Error):
    pass


@dataclass(frozen=True)
class Vgg8Config:
    input_edge: int = 32
    channels: tuple = CHANNEL_LADDER
    fc_dims: tuple = FC_DIMS
    init_seed: int = 0

    def __post_init__(self):
        e = self.input_edge
        if e < 32 or (e & (e - 1)) != 0:
            raise BadEdgeError(f"input_edge must be a power of 2 >= 32, got {e}")
        if tuple(self.channels) != CHANNEL_LADDER:
            raise Vgg8Error(f"channel ladder is fixed to {CHANNEL_LADDER}")
        if len(self.fc_dims) != 3 or self.fc_dims[-1] != 1:
            raise Vgg8Error(f"fc dims must be three layers ending in 1, got {self.fc_dims}")

    @property
    def encoder_edge(self) -> int:
        return self.input_edge // 2 ** len(self.channels)

    @property
    def flatten_size(self) -> int:
        return self.channels[-1] * self.encoder_edge**3


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 3
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise Vgg8Error("batch_size must be >= 1")
        if not 0 < self.patience < self.max_epochs:
            raise Vgg8Error("patience must be positive and below max_epochs")
        if self.lr <= 0:
            raise Vgg8Error("lr must be positive")


class Vgg8Model:
    """Parameters plus batchnorm running buffers; forward builds the graph."""

    def __init__(self, cfg: Vgg8Config, params: dict, running: dict):
        self.cfg = cfg
        self.params = params
        self.running = running

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, x: Tensor, training: bool, capture_block5: bool = False):
        """Run the network; optionally also return the block-5 conv output.

        Input must be (N, 1, E, E, E) with E = cfg.input_edge.
        """
        e = self.cfg.input_edge
        if x.data.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (e, e, e):
            raise ag.ShapeMismatchError(f"expected (N, 1, {e}, {e}, {e}), got {x.shape}")
        p = self.params
        h = x
        block5_conv = None
        for i in range(1, 6):
            h = ag.conv3d(h, p[f"block{i}.conv.weight"], p[f"block{i}.conv.bias"])
            if i == 5:
                block5_conv = h
            h = ag.batchnorm3d(
                h,
                p[f"block{i}.bn.gamma"],
                p[f"block{i}.bn.beta"],
                self.running[f"block{i}.bn.running_mean"],
                self.running[f"block{i}.bn.running_var"],
                training=training,
            )
            h = ag.relu(h)
            h = ag.maxpool3d(h)
        h = ag.flatten(h)
        h = ag.relu(ag.linear(h, p["fc1.weight"], p["fc1.bias"]))
        h = ag.relu(ag.linear(h, p["fc2.weight"], p["fc2.bias"]))
        out = ag.linear(h, p["fc3.weight"], p["fc3.bias"])
        if capture_block5:
            return out, block5_conv
        return out

    def state_arrays(self) -> dict:
        """All learnable and running arrays, in canonical order."""
        out = {name: t.data for name, t in self.params.items()}
        out.update(self.running)
        return out


def parameter_count(cfg: Vgg8Config) -> int:
    total = 0
    c_in = 1
    for c_out in cfg.channels:
        total += c_out * c_in * 27 + c_out  # conv weight + bias
        total += 2 * c_out  # bn gamma + beta
        c_in = c_out
    f_in = cfg.flatten_size
    for f_out in cfg.fc_dims:
        total += f_out * f_in + f_out
        f_in = f_out
    return total


def build_vgg8(cfg: Vgg8Config) -> Vgg8Model:
    """He-initialized model: N(0, 2/fan_in) weights, zero biases, unit gammas.

    All draws come from one SplitMix64 stream seeded by cfg.init_seed,
    consumed in layer order.
    """
    stream = SplitMix64(cfg.init_seed)

    def he(shape, fan_in):
        std = np.sqrt(2.0 / fan_in)
        return (stream.gaussians(int(np.prod(shape))) * std).astype(np.float32).reshape(shape)

    params: dict[str, Tensor] = {}
    running: dict[str, np.ndarray] = {}
    c_in = 1
    for i, c_out in enumerate(cfg.channels, start=1):
        params[f"block{i}.conv.weight"] = Tensor(he((c_out, c_in, 3, 3, 3), c_in * 27), requires_grad=True)
        params[f"block{i}.conv.bias"] = Tensor(np.zeros(c_out, np.float32), requires_grad=True)
        params[f"block{i}.bn.gamma"] = Tensor(np.ones(c_out, np.float32), requires_grad=True)
        params[f"block{i}.bn.beta"] = Tensor(np.zeros(c_out, np.float32), requires_grad=True)
        running[f"block{i}.bn.running_mean"] = np.zeros(c_out, np.float32)
        running[f"block{i}.bn.running_var"] = np.ones(c_out, np.float32)
        c_in = c_out
    f_in = cfg.flatten_size
    for j, f_out in enumerate(cfg.fc_dims, start=1):
        params[f"fc{j}.weight"] = Tensor(he((f_out, f_in), f_in), requires_grad=True)
        params[f"fc{j}.bias"] = Tensor(np.zeros(f_out, np.float32), requires_grad=True)
        f_in = f_out
    return Vgg8Model(cfg, params, running)


@dataclass(frozen=True)
class Checkpoint:
    """Snapshot of weights + running stats; reloading reproduces predictions bitwise."""

    arrays: dict
    input_edge: int
    epoch: int
    val_mae: float

    @classmethod
    def from_model(cls, model: Vgg8Model, epoch: int, val_mae: float) -> "Checkpoint":
        arrays = {k: v.copy() for k, v in model.state_arrays().items()}
        return cls(arrays=arrays, input_edge=model.cfg.input_edge, epoch=epoch, val_mae=val_mae)

    def to_model(self) -> Vgg8Model:
        cfg = Vgg8Config(input_edge=self.input_edge)
        model = build_vgg8(cfg)
        for name, tensor in model.params.items():
            tensor.data = self.arrays[name].astype(np.float32).copy()
        for name in model.running:
            model.running[name] = self.arrays[name].astype(np.float32).copy()
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary format: magic, version u32, then {name_len u32, name utf-8,
    ndim u32, dims u32 x ndim, payload f32 LE} per array."""
    entries = dict(ckpt.arrays)
    entries["meta.input_edge"] = np.array([ckpt.input_edge], np.float32)
    entries["meta.epoch"] = np.array([ckpt.epoch], np.float32)
    entries["meta.val_mae"] = np.array([ckpt.val_mae], np.float32)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in entries.items():
            blob = name.encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise Vgg8Error(f"{path}: bad checkpoint magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise Vgg8Error(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    entries = {}
    while pos < len(data):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
        pos += 4 * count
        entries[name] = arr
    meta_edge = int(entries.pop("meta.input_edge")[0])
    meta_epoch = int(entries.pop("meta.epoch")[0])
    meta_val = float(entries.pop("meta.val_mae")[0])
    return Checkpoint(arrays=entries, input_edge=meta_edge, epoch=meta_epoch, val_mae=meta_val)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_mae: float
    val_mae: float


def save_history_csv(history: list[EpochStats], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,train_mae,val_mae\n")
        for h in history:
            f.write(f"{h.epoch},{h.train_mae!r},{h.val_mae!r}\n")


def _eval_forward(model: Vgg8Model, x: np.ndarray) -> np.ndarray:
    """Eval-mode predictions in fixed-size batches; (M,) float64."""
    outs = []
    for lo in range(0, x.shape[0], PREDICT_BATCH):
        batch = Tensor(x[lo : lo + PREDICT_BATCH])
        outs.append(model.forward(batch, training=False).data[:, 0])
    return np.concatenate(outs).astype(np.float64)


def evaluate_mae(model: Vgg8Model, x: np.ndarray, y: np.ndarray) -> float:
    preds = _eval_forward(model, x)
    return float(np.mean(np.abs(preds - y.astype(np.float64).ravel())))


def train(
    model: Vgg8Model,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    tc: TrainConfig,
    val_metric=None,
    log=None,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Adam/MAE training with early stopping on validation MAE.

    Per epoch: seeded shuffle, batches of tc.batch_size (final partial
    batch kept), one Adam step each. Stops after tc.patience epochs
    without a strict > IMPROVEMENT_TOL improvement, or at max_epochs.
    Returns the checkpoint of the best epoch and the full history.

    `val_metric(model, epoch) -> float` overrides the validation MAE
    computation (used to test the stopping rule in isolation).
    """
    n = train_x.shape[0]
    if n == 0 or val_x.shape[0] == 0:
        raise EmptySplitError("training and validation sets must both be nonempty")
    train_y = train_y.reshape(-1, 1).astype(np.float32)
    params = model.parameters()
    state = AdamState.for_params(params)
    best_ckpt = None
    best_val = np.inf
    bad_epochs = 0
    history: list[EpochStats] = []
    for epoch in range(1, tc.max_epochs + 1):
        order = SplitMix64(derive_seed(tc.seed, "epoch", epoch)).permutation(n)
        total_abs = 0.0
        for lo in range(0, n, tc.batch_size):
            idx = order[lo : lo + tc.batch_size]
            x = Tensor(train_x[idx])
            loss = ag.mae_loss(model.forward(x, training=True), train_y[idx])
            loss.backward()
            ag.adam_step(params, state, tc.lr)
            ag.zero_grads(params)
            total_abs += loss.item() * len(idx)
        train_mae = total_abs / n
        if val_metric is not None:
            val_mae = float(val_metric(model, epoch))
        else:
            val_mae = evaluate_mae(model, val_x, val_y)
        history.append(EpochStats(epoch, train_mae, val_mae))
        if log is not None:
            log(history[-1])
        if val_mae < best_val - IMPROVEMENT_TOL:
            best_val = val_mae
            best_ckpt = Checkpoint.from_model(model, epoch, val_mae)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= tc.patience:
                break
    return best_ckpt, history


def predict(ckpt: Checkpoint, volumes: np.ndarray) -> np.ndarray:
    """Eval-mode ages for (M, 1, E, E, E) inputs; deterministic, order-preserving."""
    model = ckpt.to_model()
    e = ckpt.input_edge
    if volumes.ndim != 5 or volumes.shape[1] != 1 or volumes.shape[2:] != (e, e, e):
        raise ag.ShapeMismatchError(f"expected (M, 1, {e}, {e}, {e}), got {volumes.shape}")
    return _eval_forward(model, volumes.astype(np.float32))
