"""Training configuration, checkpoints, training loop, evaluation and export."""
from __future__ import annotations

import dataclasses
import io
import logging
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensorio
from .backbone import BackboneConfig, ConfigError
from .capsules import CapsuleConfig
from .data import ArrayDataset, DatasetManifest, grayscale_target, load_arrays, split_indices
from .losses import LossConfig
from .model import ATTENTION_VARIANTS, CAPSULE_VARIANTS, VARIANTS, Model, build_variant, ShallowFrontConfig
from .optim import Adam
from .tensor import no_grad

logger = logging.getLogger(__name__)

METRICS_HEADER = "epoch,total_loss,margin_loss,recon_loss,train_acc,test_acc,seconds"
CHECKPOINT_MAGIC = "E2CK v1"


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    variant: str = "E2Capsnet"
    profile: str = "toy"
    input_size: int = 64
    widths: tuple = (8, 16, 32, 32, 32)
    fusion_stages: str = "auto"         # "auto" or comma list, e.g. "3,4"
    n_classes: int = 0                  # 0: take from the dataset
    caps_channels: int = 16
    primary_kernel: int = 1
    routing_iters: int = 3
    decoder_hidden: tuple = (512, 1024)
    recon_size: int = 32                # 0: native input resolution
    front_width: int = 16
    front_kernel: int = 9
    front_primary_kernel: int = 8
    front_primary_stride: int = 6
    lr: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 300
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5
    recon_weight: float = 0.0005
    seed: int = 0
    split_seed: int = 0
    train_fraction: float = 0.8
    eval_batch: int = 100
    log_wallclock: bool = True
    save_checkpoints: bool = True

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        base = dict(profile="full", input_size=224, widths=(64, 128, 256, 512, 512),
                    caps_channels=32, primary_kernel=2, recon_size=28, front_width=256)
        base.update(kw)
        return cls(**base)

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        for name in ("batch_size", "epochs", "routing_iters", "input_size", "eval_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        self.loss_config()
        stages = self.fusion_set()
        if self.fusion_stages != "auto":
            if stages and self.variant not in ATTENTION_VARIANTS:
                raise ConfigError(f"fusion stages set but {self.variant} has no attention")
            if not stages and self.variant in ATTENTION_VARIANTS:
                raise ConfigError(f"{self.variant} needs fusion stages")
        return self

    def fusion_set(self) -> frozenset:
        if self.fusion_stages == "auto":
            return frozenset({3, 4}) if self.variant in ATTENTION_VARIANTS else frozenset()
        text = str(self.fusion_stages).strip()
        return frozenset(int(s) for s in text.split(",") if s.strip()) if text else frozenset()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.m_plus, self.m_minus, self.lam, self.recon_weight).validate()

    @property
    def recon_side(self) -> int:
        return self.recon_size or self.input_size

    def build_model(self, n_classes: Optional[int] = None, dtype=np.float32) -> Model:
        n_classes = n_classes or self.n_classes
        if not n_classes:
            raise ConfigError("class count unknown")
        bb = BackboneConfig(profile=self.profile, input_size=self.input_size,
                            widths=tuple(self.widths), fusion_stages=self.fusion_set())
        caps = CapsuleConfig(n_classes=n_classes, caps_channels=self.caps_channels,
                             primary_kernel=self.primary_kernel, routing_iters=self.routing_iters,
                             decoder_hidden=tuple(self.decoder_hidden),
                             recon_size=self.recon_side)
        front = ShallowFrontConfig(self.input_size, 3, self.front_width, self.front_kernel)
        return build_variant(self.variant, bb, caps, front, seed=self.seed, dtype=dtype,
                             front_primary_kernel=self.front_primary_kernel,
                             front_primary_stride=self.front_primary_stride)

    # -- key=value text ---------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        base = overrides.pop("_base", None) or cls()
        kinds = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            ln = raw.split("#", 1)[0].strip()
            if not ln:
                continue
            key, sep, val = ln.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or key not in kinds:
                raise ConfigError(f"config line {n}: unknown or malformed entry {raw!r}")
            values[key] = _coerce(kinds[key], val, key)
        values.update(overrides)
        return dataclasses.replace(base, **values).validate()

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _coerce(kind, val: str, key: str):
    try:
        if kind is bool:
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return val.lower() in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(x) for x in val.split(",") if x.strip())
        return kind(val)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {val!r}") from None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    n_classes: int
    params: dict             # name -> float32 array
    adam_step: int = 0
    adam_m: dict = dataclasses.field(default_factory=dict)
    adam_v: dict = dataclasses.field(default_factory=dict)
    epoch: int = 0
    metrics: dict = dataclasses.field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        head = [CHECKPOINT_MAGIC, "[config]", self.config.to_text().rstrip("\n"), "[state]",
                f"n_classes={self.n_classes}", f"epoch={self.epoch}",
                f"adam_step={self.adam_step}"]
        head += [f"metric.{k}={v!r}" for k, v in sorted(self.metrics.items())]
        head.append("[tensors]")
        buf.write(("\n".join(head) + "\n").encode())
        for prefix, table in (("param", self.params), ("adam.m", self.adam_m),
                              ("adam.v", self.adam_v)):
            for name, arr in table.items():
                buf.write(f"{prefix}:{name}\n".encode())
                buf.write(tensorio.encode(arr))
        buf.write(b"[end]\n")
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        stream = io.BytesIO(data)
        if stream.readline().decode().strip() != CHECKPOINT_MAGIC:
            raise ConfigError("not a checkpoint file")
        section, cfg_lines, state = None, [], {}
        while True:
            line = stream.readline()
            if not line:
                raise ConfigError("truncated checkpoint header")
            text = line.decode().rstrip("\n")
            if text in ("[config]", "[state]"):
                section = text
                continue
            if text == "[tensors]":
                break
            if section == "[config]":
                cfg_lines.append(text)
            else:
                k, _, v = text.partition("=")
                state[k] = v
        tables = {"param": {}, "adam.m": {}, "adam.v": {}}
        while True:
            line = stream.readline()
            if not line:
                raise ConfigError("truncated checkpoint tensors")
            if line == b"[end]\n":
                break
            prefix, _, name = line.decode().rstrip("\n").partition(":")
            tables[prefix][name] = tensorio.read_from(stream)
        metrics = {k[len("metric."):]: float(v) for k, v in state.items()
                   if k.startswith("metric.")}
        return cls(config=TrainConfig.from_text("\n".join(cfg_lines)),
                   n_classes=int(state["n_classes"]), params=tables["param"],
                   adam_step=int(state["adam_step"]), adam_m=tables["adam.m"],
                   adam_v=tables["adam.v"], epoch=int(state["epoch"]), metrics=metrics)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def build_model(self) -> Model:
        model = self.config.build_model(self.n_classes)
        missing = set(model.params) ^ set(self.params)
        if missing:
            raise ConfigError(f"checkpoint/model parameter mismatch: {sorted(missing)[:5]}")
        for name, t in model.params.items():
            t.data = np.array(self.params[name], dtype=t.dtype)
        return model


def snapshot(cfg: TrainConfig, model: Model, opt: Optional[Adam], epoch: int,
             metrics: dict) -> Checkpoint:
    st = opt.state if opt else None
    return Checkpoint(
        config=cfg, n_classes=model.n_classes,
        params={n: p.data.copy() for n, p in model.params.items()},
        adam_step=st.step if st else 0,
        adam_m={n: a.copy() for n, a in st.m.items()} if st else {},
        adam_v={n: a.copy() for n, a in st.v.items()} if st else {},
        epoch=epoch, metrics=dict(metrics))


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    metrics: list
    best_test_acc: float
    steps: int
    out_dir: Optional[Path]


def predict(model: Model, ds: ArrayDataset, batch: int = 100) -> np.ndarray:
    preds = np.empty(len(ds), dtype=np.int64)
    with no_grad():
        for lo in range(0, len(ds), batch):
            sl = slice(lo, lo + batch)
            out = model.forward(ds.images[sl], ds.attention[sl])
            preds[sl] = out.predictions()
    return preds


def confusion_matrix(labels, preds, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def format_metrics_row(row: dict) -> str:
    return (f"{row['epoch']},{row['total_loss']:.9g},{row['margin_loss']:.9g},"
            f"{row['recon_loss']:.9g},{row['train_acc']:.6f},{row['test_acc']:.6f},"
            f"{row['seconds']:.3f}")


def train(cfg: TrainConfig, data, out_dir=None, progress=None) -> TrainResult:
    """Train ``cfg.variant`` on ``data`` (a manifest or pre-loaded ArrayDataset
    plus (train_idx, test_idx) tuple).  Writes ``metrics.csv``, ``last.ckpt``
    and ``best.ckpt`` into ``out_dir`` when given."""
    cfg.validate()
    if isinstance(data, DatasetManifest):
        ds = load_arrays(data, cfg.input_size)
        tr_idx, te_idx = split_indices(data, cfg.train_fraction, cfg.split_seed)
    else:
        ds, (tr_idx, te_idx) = data
    n_classes = cfg.n_classes or len(ds.classes)
    if ds.labels.max() >= n_classes:
        raise ConfigError(f"dataset labels exceed configured class count {n_classes}")
    model = cfg.build_model(n_classes)
    loss_cfg = cfg.loss_config()
    opt = Adam(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    targets = grayscale_target(ds.images, cfg.recon_side) if model.uses_capsules else None
    train_ds, test_ds = ds.subset(tr_idx), ds.subset(te_idx)
    train_targets = targets[tr_idx] if targets is not None else None
    shuffle = np.random.Generator(np.random.PCG64([cfg.seed, 0x5EED]))

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
        (out / "metrics.csv").write_text(METRICS_HEADER + "\n")

    rows, best, steps = [], -1.0, 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(len(train_ds))
        sums = np.zeros(3)
        correct = 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            labels = train_ds.labels[idx]
            opt.zero_grad()
            output = model.forward(train_ds.images[idx], train_ds.attention[idx])
            tgt = train_targets[idx] if train_targets is not None else None
            total, margin, recon = model.losses(output, labels, tgt, loss_cfg)
            tval = float(total.data)
            if not math.isfinite(tval):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            total.backward()
            opt.step()
            steps += 1
            n = len(idx)
            sums += n * np.array([tval, float(margin.data),
                                  float(recon.data) if recon is not None else 0.0])
            correct += int((output.predictions() == labels).sum())
        means = sums / len(train_ds)
        test_acc = float((predict(model, test_ds, cfg.eval_batch) == test_ds.labels).mean())
        row = {"epoch": epoch, "total_loss": means[0], "margin_loss": means[1],
               "recon_loss": means[2], "train_acc": correct / len(train_ds),
               "test_acc": test_acc,
               "seconds": time.perf_counter() - t0 if cfg.log_wallclock else 0.0}
        rows.append(row)
        if out:
            with open(out / "metrics.csv", "a") as fh:
                fh.write(format_metrics_row(row) + "\n")
            if cfg.save_checkpoints:
                ck = snapshot(cfg, model, opt, epoch, {"test_acc": test_acc,
                                                       "train_acc": row["train_acc"]})
                ck.save(out / "last.ckpt")
                if test_acc > best:
                    ck.save(out / "best.ckpt")
        best = max(best, test_acc)
        if progress:
            progress(row)
    return TrainResult(rows, best, steps, out)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    n: int


def evaluate(checkpoint, manifest: DatasetManifest, which: str = "test") -> EvalResult:
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    if len(manifest.classes) != ck.n_classes:
        raise ConfigError(f"checkpoint has {ck.n_classes} classes, data has "
                          f"{len(manifest.classes)}")
    cfg = ck.config
    model = ck.build_model()
    ds = load_arrays(manifest, cfg.input_size)
    tr, te = split_indices(manifest, cfg.train_fraction, cfg.split_seed)
    idx = {"train": tr, "test": te, "all": np.arange(len(ds))}[which]
    sub = ds.subset(idx)
    preds = predict(model, sub, cfg.eval_batch)
    cm = confusion_matrix(sub.labels, preds, ck.n_classes)
    return EvalResult(float(np.trace(cm)) / max(len(sub), 1), cm, len(sub))


def export_embeddings(checkpoint, manifest: DatasetManifest, out_csv) -> int:
    """Write one FaceCaps row per sample; returns the row count."""
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    if ck.config.variant not in CAPSULE_VARIANTS:
        raise ConfigError(f"{ck.config.variant} has no capsules to export")
    model = ck.build_model()
    ds = load_arrays(manifest, ck.config.input_size)
    width = model.n_classes * model.cfg.capsules.face_dim
    lines = ["id,label," + ",".join(f"v{i}" for i in range(width))]
    with no_grad():
        for lo in range(0, len(ds), ck.config.eval_batch):
            sl = slice(lo, lo + ck.config.eval_batch)
            caps = model.forward(ds.images[sl], ds.attention[sl]).caps.data
            for rid, lab, vec in zip(ds.ids[sl], ds.labels[sl], caps.reshape(len(caps), -1)):
                lines.append(f"{rid},{lab}," + ",".join(f"{x:.9g}" for x in vec.tolist()))
    Path(out_csv).write_text("\n".join(lines) + "\n")
    return len(ds)
