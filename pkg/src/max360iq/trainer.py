"""Adam training loop, binary checkpoints, and prediction."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import ndgrad as ng
from .backbone import BackboneConfig
from .data import ManifestEntry
from .evaluation import DegenerateInputError, plcc, srcc
from .head import HeadConfig
from .model import Max360IQModel
from .ndgrad import ParamStore
from .objective import DegenerateBatchError, LossConfig, LOSSES
from .sphere import ErpImage, extract_sequences

CKPT_MAGIC = b"MXIQCKPT"
CKPT_SCHEMA = 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 16
    epochs: int = 10
    max_steps: int | None = None
    k: int = 7
    fov_deg: float = 90.0
    viewport_size: int = 32
    seed: int = 0
    loss: str = "norm_in_norm"
    loss_p: float = 1.0
    loss_q: float = 2.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (loss needs N >= 2)")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


def weight_decay_applies(name: str, tensor) -> bool:
    """Decay weight matrices only: never biases, norm scales, pooling
    exponents, or relative-position tables."""
    return tensor.ndim >= 2 and "rel_bias" not in name


def adam_step(params: ParamStore, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """Adam with bias correction and decoupled weight decay; gradients are
    read from each parameter's .grad."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g.shape != p.data.shape:
            raise ng.ShapeError(f"gradient shape mismatch for {name}")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay and weight_decay_applies(name, p):
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def init_adam_state(params: ParamStore) -> dict:
    return {"t": 0,
            "m": {n: np.zeros_like(p.data) for n, p in params.items()},
            "v": {n: np.zeros_like(p.data) for n, p in params.items()}}


# ---------------------------------------------------------------------------
# sample assembly


@dataclass
class SequenceSample:
    image_id: str
    condition: str | None
    viewports: np.ndarray  # (K, 3, S, S)
    label: float


def build_samples(entries: list[ManifestEntry], cfg: TrainConfig,
                  mode: str) -> list[SequenceSample]:
    """Render viewport sequences up front. Uniform mode: one equator sequence
    per image labeled with the image MOS. Nonuniform: one sequence per viewing
    condition labeled with the condition MOS."""
    fov = np.deg2rad(cfg.fov_deg)
    samples = []
    for entry in entries:
        img = ErpImage.load(entry.erp_path)
        if mode == "uniform" or not entry.scanpaths:
            seqs = extract_sequences(img, None, cfg.k, fov, cfg.viewport_size,
                                     entry.image_id)
            samples.append(SequenceSample(entry.image_id, None,
                                          np.stack(seqs[0].viewports),
                                          entry.mos))
        else:
            scanpaths = [entry.scanpaths[c] for c in sorted(entry.scanpaths,
                                                            key=lambda c: c.value)]
            seqs = extract_sequences(img, scanpaths, cfg.k, fov,
                                     cfg.viewport_size, entry.image_id)
            for seq in seqs:
                samples.append(SequenceSample(
                    entry.image_id, seq.condition.value,
                    np.stack(seq.viewports),
                    entry.condition_mos[seq.condition]))
    return samples


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: Max360IQModel, cfg: TrainConfig,
                    adam_state: dict, epoch: int,
                    rng_states: dict | None = None) -> None:
    """Versioned binary container: magic, schema, JSON config block, then
    named raw float64 tensor blocks. Atomic via temp-file rename."""
    path = Path(path)
    meta = {
        "train_config": asdict(cfg),
        "backbone_config": asdict(model.bb_cfg),
        "head_config": asdict(model.head_cfg),
        "epoch": epoch,
        "adam_t": adam_state["t"],
        "rng_states": rng_states or {},
    }
    blocks: list[tuple[str, np.ndarray]] = []
    for name, p in model.params.items():
        blocks.append((f"param/{name}", p.data))
    for name, buf in model.params.buffers.items():
        blocks.append((f"buffer/{name}", buf))
    for name in model.params.names():
        blocks.append((f"adam_m/{name}", adam_state["m"][name]))
        blocks.append((f"adam_v/{name}", adam_state["v"][name]))
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_SCHEMA))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks:
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[Max360IQModel, TrainConfig, dict, dict]:
    """Returns (model, train config, adam state, metadata)."""
    path = Path(path)
    with path.open("rb") as f:
        if f.read(8) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (schema,) = struct.unpack("<I", f.read(4))
        if schema != CKPT_SCHEMA:
            raise ValueError(f"{path}: unsupported schema {schema}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        meta = json.loads(f.read(mlen))
        (nblocks,) = struct.unpack("<I", f.read(4))
        blocks: dict[str, np.ndarray] = {}
        for _ in range(nblocks):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(count * 8), dtype=np.float64).reshape(shape)
            blocks[name] = arr.copy()
    bb_cfg = BackboneConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in meta["backbone_config"].items()})
    head_cfg = HeadConfig(**meta["head_config"])
    cfg = TrainConfig(**meta["train_config"])
    model = Max360IQModel(bb_cfg, head_cfg)
    for name, arr in blocks.items():
        kind, _, pname = name.partition("/")
        if kind == "param":
            model.params.add(pname, arr)
        elif kind == "buffer":
            model.params.add_buffer(pname, arr)
    adam_state = {"t": meta["adam_t"],
                  "m": {n: blocks[f"adam_m/{n}"] for n in model.params.names()},
                  "v": {n: blocks[f"adam_v/{n}"] for n in model.params.names()}}
    return model, cfg, adam_state, meta


# ---------------------------------------------------------------------------
# training / prediction


@dataclass
class TrainResult:
    model: Max360IQModel
    best_checkpoint: Path | None
    log: list[dict] = field(default_factory=list)


def _eval_samples(model: Max360IQModel, samples: list[SequenceSample],
                  batch: int = 32) -> np.ndarray:
    preds = []
    for i in range(0, len(samples), batch):
        chunk = np.stack([s.viewports for s in samples[i:i + batch]])
        scores, _ = model.forward(chunk, train=False)
        preds.extend(scores.data.tolist())
    return np.array(preds)


def train(cfg: TrainConfig, bb_cfg: BackboneConfig, head_cfg: HeadConfig,
          train_samples: list[SequenceSample],
          val_samples: list[SequenceSample] | None = None,
          out_dir: str | Path | None = None,
          log_file: Path | None = None) -> TrainResult:
    """Deterministic training loop: fixed shuffle and dropout streams from the
    seed, per-epoch JSONL log, best-val-SRCC checkpoint retained."""
    seq = np.random.SeedSequence(cfg.seed)
    init_ss, shuffle_ss, dropout_ss = seq.spawn(3)
    model = Max360IQModel(bb_cfg, head_cfg, np.random.default_rng(init_ss))
    adam_state = init_adam_state(model.params)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    loss_cfg = LossConfig(p=cfg.loss_p, q=cfg.loss_q)
    loss_fn = LOSSES[cfg.loss]

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    best_srcc = -np.inf
    best_path = out_dir / "best.ckpt" if out_dir is not None else None
    log: list[dict] = []
    steps_done = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_samples))
        epoch_losses = []
        skipped = 0
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and steps_done >= cfg.max_steps:
                break
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            batch = [train_samples[i] for i in idx]
            labels = np.array([s.label for s in batch])
            vps = np.stack([s.viewports for s in batch])
            model.params.zero_grad()
            scores, _ = model.forward(vps, train=True, rng=dropout_rng)
            try:
                loss = loss_fn(scores, labels, loss_cfg)
            except DegenerateBatchError:
                skipped += 1
                continue
            ng.backward(loss)
            adam_step(model.params, adam_state, cfg.lr,
                      weight_decay=cfg.weight_decay)
            epoch_losses.append(loss.item())
            steps_done += 1
        record = {"epoch": epoch, "steps": steps_done,
                  "loss": float(np.mean(epoch_losses)) if epoch_losses else None,
                  "skipped_batches": skipped}
        if val_samples:
            preds = _eval_samples(model, val_samples)
            labels = np.array([s.label for s in val_samples])
            try:
                record["val_plcc"] = plcc(preds, labels)
                record["val_srcc"] = srcc(preds, labels)
            except (DegenerateInputError, ValueError):
                # constant or too-short validation set: log the epoch anyway
                record["val_plcc"] = record["val_srcc"] = None
            if record["val_srcc"] is not None and record["val_srcc"] > best_srcc:
                best_srcc = record["val_srcc"]
                if best_path is not None:
                    save_checkpoint(best_path, model, cfg, adam_state, epoch,
                                    _rng_states(shuffle_rng, dropout_rng))
        log.append(record)
        if log_file is not None:
            with log_file.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if cfg.max_steps is not None and steps_done >= cfg.max_steps:
            break
    if out_dir is not None:
        save_checkpoint(out_dir / "last.ckpt", model, cfg, adam_state,
                        cfg.epochs - 1, _rng_states(shuffle_rng, dropout_rng))
        if best_path is not None and not best_path.exists():
            best_path = out_dir / "last.ckpt"
    return TrainResult(model, best_path, log)


def _rng_states(shuffle_rng, dropout_rng) -> dict:
    def enc(rng):
        st = rng.bit_generator.state
        return json.loads(json.dumps(st, default=int))
    return {"shuffle": enc(shuffle_rng), "dropout": enc(dropout_rng)}


def predict(model: Max360IQModel, samples: list[SequenceSample],
            batch: int = 32) -> tuple[list[dict], dict[str, float]]:
    """Eval-mode sequence scores plus per-image means over sequences."""
    preds = _eval_samples(model, samples, batch)
    rows = [{"image_id": s.image_id, "condition": s.condition or "",
             "pred": float(p), "mos": s.label}
            for s, p in zip(samples, preds)]
    per_image: dict[str, list[float]] = {}
    for row in rows:
        per_image.setdefault(row["image_id"], []).append(row["pred"])
    image_scores = {k: float(np.mean(v)) for k, v in per_image.items()}
    return rows, image_scores
