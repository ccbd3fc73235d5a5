"""AdamW, plateau decay, the training loop and the binary checkpoint format."""

from __future__ import annotations

import csv
import logging
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Sample, augment_flip, make_rng
from .metrics import EvalReport, evaluate
from .model import IMLModel, LossWeights, ModelConfig, composite_loss
from .tensor import Tape, Tensor, backward, no_grad
from .vssd import BackboneConfig

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        theta = p.data - state.lr * state.weight_decay * p.data
        p.data = (theta - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass
class PlateauState:
    lr_init: float = 1e-4
    factor: float = 0.9
    patience: int = 5
    best: float = float("inf")
    bad_epochs: int = 0
    decays: int = 0

    @property
    def lr(self) -> float:
        return self.lr_init * self.factor ** self.decays


def plateau_schedule(val_loss: float, state: PlateauState) -> float:
    """Feed one epoch's validation loss; returns the learning rate for the next epoch."""
    if val_loss < state.best:
        state.best = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.decays += 1
            state.bad_epochs = 0
    return state.lr


# ---------------------------------------------------------------------------
# checkpoint file
#
# magic "GGNN" | u32 version | u32 count | per tensor:
#   u32 name_len | utf-8 name | u8 dtype code | u8 rank | u32 dims[rank] | raw LE data
# | u32 CRC32 of all preceding bytes

MAGIC = b"GGNN"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_CODE_OF = {np.dtype(v).newbyteorder("=") if v.itemsize > 1 else v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("=") if arr.dtype.itemsize > 1 else arr.dtype
    if dt not in _CODE_OF:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return _CODE_OF[dt]


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(raw) < 16:
        raise CheckpointError(f"{source}: truncated checkpoint ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {raw[:4]!r}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: version {version} not supported (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    pos = 12
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            if pos + n > len(body):
                raise CheckpointError(f"{source}: truncated at byte {pos}")
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            if code not in _CODES:
                raise CheckpointError(f"{source}: unknown dtype code {code} for {name!r}")
            dt = _CODES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CheckpointError(f"{source}: truncated data for {name!r} at byte {pos}")
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{source}: truncated checkpoint at byte {pos}") from exc
    if pos != len(body):
        raise CheckpointError(f"{source}: {len(body) - pos} trailing bytes before checksum")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{source}: checksum mismatch")
    return out


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    version: int = VERSION

    def save(self, path) -> None:
        Path(path).write_bytes(encode_checkpoint(self.tensors))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls(decode_checkpoint(Path(path).read_bytes(), str(path)))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    ckpt.save(path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(path)


# ---------------------------------------------------------------------------
# training configuration


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr_init: float = 1e-4
    plateau_factor: float = 0.9
    plateau_patience: int = 5
    weight_decay: float = 0.01
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)


def config_to_text(cfg: TrainConfig) -> str:
    from .config import dump_config
    return dump_config(cfg)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[IMLModel, TrainConfig]:
    from .config import parse_config
    text = ckpt.tensors["meta.config"].tobytes().decode("utf-8")
    cfg = parse_config(text)
    model = IMLModel(cfg.model, seed=cfg.seed)
    prefix = "param."
    model.load_state_dict({k[len(prefix):]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)})
    return model, cfg


@dataclass
class TrainState:
    model: IMLModel
    opt: OptimizerState
    plateau: PlateauState
    rng: np.random.Generator
    epoch: int = 0
    best_val: float = float("inf")

    def to_checkpoint(self, cfg: TrainConfig) -> Checkpoint:
        t: dict[str, np.ndarray] = {
            "meta.config": np.frombuffer(config_to_text(cfg).encode("utf-8"), dtype=np.uint8),
            "meta.epoch": np.array([self.epoch], dtype=np.int64),
            "meta.best_val": np.array([self.best_val], dtype=np.float64),
        }
        for name, p in self.model.named_parameters():
            t[f"param.{name}"] = p.data
        o = self.opt
        t["optim.scalars"] = np.array([o.lr, o.beta1, o.beta2, o.eps, o.weight_decay], dtype=np.float64)
        t["optim.t"] = np.array([o.t], dtype=np.int64)
        for name in o.m:
            t[f"optim.m.{name}"] = o.m[name]
            t[f"optim.v.{name}"] = o.v[name]
        pl = self.plateau
        t["plateau.floats"] = np.array([pl.lr_init, pl.factor, pl.best], dtype=np.float64)
        t["plateau.ints"] = np.array([pl.patience, pl.bad_epochs, pl.decays], dtype=np.int64)
        st = self.rng.bit_generator.state
        t["rng.philox"] = np.array(
            list(st["state"]["counter"]) + list(st["state"]["key"]) + list(st["buffer"])
            + [st["buffer_pos"], st["has_uint32"], st["uinteger"]], dtype=np.uint64)
        return Checkpoint(t)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> tuple["TrainState", TrainConfig]:
        model, cfg = model_from_checkpoint(ckpt)
        t = ckpt.tensors
        lr, b1, b2, eps, wd = (float(v) for v in t["optim.scalars"])
        opt = OptimizerState(lr, b1, b2, eps, wd, int(t["optim.t"][0]))
        for name, _ in model.named_parameters():
            if f"optim.m.{name}" in t:
                opt.m[name] = t[f"optim.m.{name}"].copy()
                opt.v[name] = t[f"optim.v.{name}"].copy()
        lr_init, factor, best = (float(v) for v in t["plateau.floats"])
        patience, bad, decays = (int(v) for v in t["plateau.ints"])
        plateau = PlateauState(lr_init, factor, patience, best, bad, decays)
        r = [int(v) for v in t["rng.philox"]]
        bg = np.random.Philox(0)
        bg.state = {
            "bit_generator": "Philox",
            "state": {"counter": np.array(r[0:4], dtype=np.uint64), "key": np.array(r[4:6], dtype=np.uint64)},
            "buffer": np.array(r[6:10], dtype=np.uint64),
            "buffer_pos": r[10], "has_uint32": r[11], "uinteger": r[12],
        }
        state = cls(model, opt, plateau, np.random.Generator(bg), int(t["meta.epoch"][0]), float(t["meta.best_val"][0]))
        return state, cfg


def init_state(cfg: TrainConfig) -> TrainState:
    model = IMLModel(cfg.model, seed=cfg.seed)
    opt = OptimizerState(lr=cfg.lr_init, weight_decay=cfg.weight_decay)
    plateau = PlateauState(cfg.lr_init, cfg.plateau_factor, cfg.plateau_patience)
    return TrainState(model, opt, plateau, make_rng(cfg.seed))


# ---------------------------------------------------------------------------
# loop


def _stack(samples: Sequence[Sample], dtype):
    images = np.stack([s.image for s in samples]).astype(dtype)
    masks = np.stack([s.mask for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.float64)
    return images, masks, labels


def batch_loss(model: IMLModel, samples: Sequence[Sample], weights: LossWeights) -> Tensor:
    images, masks, labels = _stack(samples, model.dtype)
    out = model(Tensor(images), masks)
    return composite_loss(out, masks, labels, weights)


def train_step(state: TrainState, samples: Sequence[Sample], weights: LossWeights) -> float:
    params = dict(state.model.named_parameters())
    with Tape() as tape:
        loss = batch_loss(state.model, samples, weights)
        value = loss.item()
        if not np.isfinite(value):
            tape.clear()
            raise FloatingPointError(f"non-finite training loss {value}")
        grads = backward(loss, accumulate=False)
        tape.clear()
    named = {name: grads[id(p)] for name, p in params.items() if id(p) in grads}
    adamw_step(params, named, state.opt)
    state.model.project_constraints()
    return value


def eval_loss(model: IMLModel, samples: Sequence[Sample], weights: LossWeights, batch_size: int = 32) -> float:
    total, n = 0.0, 0
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            total += batch_loss(model, chunk, weights).item() * len(chunk)
            n += len(chunk)
    return total / n


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    state: TrainState
    log: list[EpochLog]
    best: Checkpoint | None


def train_loop(cfg: TrainConfig, train: Sequence[Sample], val: Sequence[Sample], state: TrainState | None = None,
               log_path=None, ckpt_path=None, last_ckpt_path=None) -> TrainResult:
    """Run epochs ``state.epoch + 1 .. cfg.epochs``; keeps the best-validation checkpoint."""
    if not train or not val:
        raise ValueError("training and validation sets must be non-empty")
    state = state or init_state(cfg)
    rows: list[EpochLog] = []
    best: Checkpoint | None = None
    while state.epoch < cfg.epochs:
        epoch = state.epoch + 1
        t0 = time.perf_counter()
        state.opt.lr = state.plateau.lr
        order = state.rng.permutation(len(train))
        flip_seeds = state.rng.integers(0, 2**62, size=len(train))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            batch = [augment_flip(train[i], int(flip_seeds[i])) for i in idx]
            try:
                losses.append(train_step(state, batch, cfg.loss) * len(batch))
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch}, batch {b // cfg.batch_size}: {exc}") from exc
        train_loss = float(sum(losses) / len(train))
        val_loss = eval_loss(state.model, val, cfg.loss, cfg.batch_size)
        lr_used = state.opt.lr
        plateau_schedule(val_loss, state.plateau)
        state.epoch = epoch
        row = EpochLog(epoch, train_loss, val_loss, lr_used, time.perf_counter() - t0)
        rows.append(row)
        log.info("epoch %d train %.5f val %.5f lr %.3g (%.1fs)", *asdict(row).values())
        if val_loss < state.best_val:
            state.best_val = val_loss
            best = state.to_checkpoint(cfg)
            if ckpt_path:
                best.save(ckpt_path)
        if last_ckpt_path:
            state.to_checkpoint(cfg).save(last_ckpt_path)
        if log_path:
            write_log(log_path, rows)
    return TrainResult(state, rows, best)


def write_log(path, rows: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
        for r in rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr), f"{r.seconds:.3f}"])


# ---------------------------------------------------------------------------
# inference helpers


def predict(model: IMLModel, images: np.ndarray, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """(N, 3, H, W) images -> (mask probabilities (N, H, W), fake scores (N,))."""
    probs, scores = [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out = model(Tensor(np.asarray(images[i:i + batch_size], dtype=model.dtype)))
            probs.append(out.mask_logits.sigmoid().data[:, 0])
            scores.append(out.det_logit.sigmoid().data)
    return np.concatenate(probs), np.concatenate(scores)


def evaluate_model(model: IMLModel, samples: Sequence[Sample], batch_size: int = 32, ids=None) -> EvalReport:
    images = np.stack([s.image for s in samples])
    probs, scores = predict(model, images, batch_size)
    return evaluate(list(probs), [s.mask for s in samples], scores, [s.label for s in samples], ids)


def default_toy_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(model=ModelConfig(backbone=BackboneConfig()))
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


# ---------------------------------------------------------------------------
# toy end-to-end experiment

TOY_DATA_SEEDS = {"train": 1000, "val": 2000, "test": 3000}
TOY_COUNTS = {"train": 256, "val": 64, "test": 64}


def toy_datasets(size: int = 64, fake_ratio: float = 0.5) -> dict[str, list[Sample]]:
    from .data import make_samples
    return {k: make_samples(TOY_COUNTS[k], size, fake_ratio, TOY_DATA_SEEDS[k]) for k in TOY_COUNTS}


@dataclass
class ToyResult:
    seed: int
    gamma: float
    pixel_f1: float
    baseline_pixel_f1: float
    image_f1: float
    image_auc: float | None
    seconds: float
    log: list[EpochLog]
    checkpoint: Checkpoint


def all_positive_pixel_f1(samples: Sequence[Sample]) -> float:
    from .metrics import mean_pixel_f1
    return mean_pixel_f1([np.ones(s.mask.shape) for s in samples], [s.mask for s in samples])


def toy_config(seed: int = 0, gamma: float = 0.001, epochs: int = 30, batch_size: int = 8,
               lr: float = 5e-4) -> TrainConfig:
    """Desk-scale schedule: the default architecture with more, smaller optimizer steps."""
    cfg = default_toy_config(epochs=epochs, batch_size=batch_size, lr_init=lr, seed=seed)
    cfg.loss.gamma = gamma
    return cfg


def run_toy_experiment(seed: int = 0, gamma: float = 0.001, epochs: int = 30, batch_size: int = 8,
                       lr: float = 5e-4, data: dict[str, list[Sample]] | None = None) -> ToyResult:
    """Train on the toy splits and score the best-validation checkpoint on the test split."""
    data = data or toy_datasets()
    cfg = toy_config(seed, gamma, epochs, batch_size, lr)
    t0 = time.perf_counter()
    res = train_loop(cfg, data["train"], data["val"])
    seconds = time.perf_counter() - t0
    model, _ = model_from_checkpoint(res.best)
    rep = evaluate_model(model, data["test"])
    return ToyResult(seed, gamma, rep.pixel_f1, all_positive_pixel_f1(data["test"]), rep.image_f1, rep.image_auc,
                     seconds, res.log, res.best)
