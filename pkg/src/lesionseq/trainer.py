"""Training and evaluation harness.

Single-process SGD with Nesterov momentum and polynomial LR decay over
longitudinal volume pairs. Batch-size-N steps accumulate N single-pair
gradients before one parameter update, so the whole run is deterministic for
a fixed seed. Checkpoints are a self-contained binary container (config
echo, named tensors, optimizer velocities, RNG state) whose reload
reproduces forward outputs bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import engine as eng
from . import losses, metrics, network, synthdata
from .engine import Tensor
from .network import ConfigError

CKPT_MAGIC = b"LCKP\x00\x01\x00\x00"
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; the message names the batch."""


@dataclass
class TrainConfig:
    stages: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    in_channels: int = 1
    variant: str = "full"
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    lambda_bcr: float = 0.1
    bcr_eps: float = 0.1
    bcr_reduction: str = "sum"
    lr: float = 1e-2
    momentum: float = 0.99
    lr_power: float = 0.9
    batch_size: int = 2
    epochs: int = 200
    seed: int = 0
    val_interval: int = 10
    augment_flips: bool = False
    log_attention: bool = True
    fold: str = ""
    data: str = ""
    out: str = ""

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        for name in ("lambda_dice", "lambda_ce", "lambda_bcr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.val_interval < 1:
            raise ConfigError(f"val_interval must be >= 1, got {self.val_interval}")
        if self.variant not in network.VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.bcr_reduction not in losses.BCR_REDUCTIONS:
            raise ConfigError(f"bcr_reduction must be one of {losses.BCR_REDUCTIONS}")
        if self.fold:
            _parse_fold(self.fold)
        self.network_config()  # surfaces channel-list/stage mismatches early

    def normalized(self) -> "TrainConfig":
        """The 'no-bcr' variant IS lambda_bcr = 0; normalize so both run one code path."""
        cfg = TrainConfig(**self.to_dict())
        if cfg.variant == "no-bcr":
            cfg.lambda_bcr = 0.0
        return cfg

    def network_config(self) -> network.NetworkConfig:
        return network.NetworkConfig(self.stages, tuple(self.channels),
                                     self.in_channels, self.variant)

    def bcr_config(self) -> losses.BcrConfig:
        return losses.BcrConfig.for_levels(self.stages, eps=self.bcr_eps,
                                           lambda_bcr=self.lambda_bcr,
                                           reduction=self.bcr_reduction)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, Tensor]
    velocities: dict[str, np.ndarray]
    epoch: int
    rng_state: dict

    def network_config(self) -> network.NetworkConfig:
        return self.config.network_config()


def save_checkpoint(path, config: TrainConfig, params: dict[str, Tensor],
                    velocities: dict[str, np.ndarray], epoch: int, rng_state: dict) -> None:
    cfg = config.normalized()
    cfg_dict = cfg.to_dict()
    cfg_dict["data"] = ""   # paths are runtime inputs, not model state
    cfg_dict["out"] = ""
    entries = []
    buffers = []
    for name, t in params.items():
        entries.append({"name": name, "shape": list(t.shape),
                        "dtype": _DTYPE_NAMES[t.data.dtype]})
        buffers.append(np.ascontiguousarray(t.data))
    for name, v in velocities.items():
        entries.append({"name": f"opt:{name}", "shape": list(v.shape),
                        "dtype": _DTYPE_NAMES[v.dtype]})
        buffers.append(np.ascontiguousarray(v))
    meta = {"version": 1, "config": cfg_dict, "epoch": int(epoch),
            "rng_state": rng_state, "tensors": entries}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for buf in buffers:
            f.write(buf.tobytes(order="C"))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(8) != CKPT_MAGIC:
            raise IOError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(hlen).decode("utf-8"))
        params: dict[str, Tensor] = {}
        velocities: dict[str, np.ndarray] = {}
        for entry in meta["tensors"]:
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = f.read(count * dtype.itemsize)
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
            if entry["name"].startswith("opt:"):
                velocities[entry["name"][4:]] = arr
            else:
                params[entry["name"]] = Tensor(arr, requires_grad=True)
    config = TrainConfig.from_dict(meta["config"])
    return Checkpoint(config=config, params=params, velocities=velocities,
                      epoch=meta["epoch"], rng_state=meta["rng_state"])


def checkpoint_digest(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


# -- data handling ---------------------------------------------------------------


@dataclass
class LoadedCase:
    case_id: str
    patient_id: str
    curr: np.ndarray        # normalized (1, D, H, W) float32
    prior: np.ndarray
    mask: np.ndarray        # (D, H, W) uint8
    birads_curr: int
    birads_prior: int
    spacing: tuple[float, ...]


def _normalize_volume(vol: np.ndarray) -> np.ndarray:
    v = vol.astype(np.float32)
    return (v - v.mean()) / (v.std() + np.float32(1e-8))


def _parse_fold(fold: str) -> tuple[int, int]:
    try:
        k, n = fold.split("/")
        k, n = int(k), int(n)
    except ValueError as e:
        raise ConfigError(f"fold must look like 'k/N', got {fold!r}") from e
    if not 0 <= k < n:
        raise ConfigError(f"fold index {k} out of range for {n} folds")
    return k, n


def load_split(manifest_path, split: str, fold: str = "") -> list[LoadedCase]:
    """Load the cases of one split, sorted by case id.

    split 'all' takes every row. A non-empty fold 'k/N' overrides the
    manifest split tags: patients are sorted and assigned round-robin, fold k
    becomes 'val' and the rest 'train'.
    """
    rows = synthdata.load_manifest(manifest_path)
    if fold:
        k, n = _parse_fold(fold)
        patients = sorted({r["patient_id"] for r in rows})
        fold_of = {p: ("val" if i % n == k else "train") for i, p in enumerate(patients)}
        rows = [r for r in rows if split == "all" or fold_of[r["patient_id"]] == split]
    else:
        rows = [r for r in rows if split == "all" or r["split"] == split]
    rows.sort(key=lambda r: r["case_id"])
    cases = []
    for row in rows:
        arrays = synthdata.load_case_arrays(manifest_path, row)
        cases.append(LoadedCase(
            case_id=arrays["case_id"], patient_id=arrays["patient_id"],
            curr=_normalize_volume(arrays["current"]),
            prior=_normalize_volume(arrays["prior"]),
            mask=arrays["mask"].astype(np.uint8),
            birads_curr=arrays["birads_t"], birads_prior=arrays["birads_prev"],
            spacing=arrays["spacing"]))
    return cases


def _maybe_flip(case: LoadedCase, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    curr, prior, mask = case.curr, case.prior, case.mask
    for axis in range(3):
        if rng.random() < 0.5:
            curr = np.flip(curr, axis=axis + 1)
            prior = np.flip(prior, axis=axis + 1)
            mask = np.flip(mask, axis=axis)
    return np.ascontiguousarray(curr), np.ascontiguousarray(prior), np.ascontiguousarray(mask)


# -- optimization ------------------------------------------------------------------


def _sgd_nesterov_step(params: dict[str, Tensor], velocities: dict[str, np.ndarray],
                       lr: float, momentum: float) -> None:
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        v = velocities[name]
        v *= momentum
        v += g
        p.data -= (lr * (g + momentum * v)).astype(p.data.dtype, copy=False)


@dataclass
class TrainResult:
    final_checkpoint: str
    best_checkpoint: str
    loss_log: str
    val_log: str
    best_val_dice: float
    epochs: int


def _mean_dice(cases: list[LoadedCase], params: dict[str, Tensor],
               netcfg: network.NetworkConfig) -> float:
    total = 0.0
    with eng.no_grad():
        for case in cases:
            res = network.forward(case.curr, case.prior, params, netcfg)
            pred = res.logits.data.argmax(axis=0).astype(np.uint8)
            total += metrics.dice_score(pred, case.mask)
    return total / len(cases)


def train(cfg: TrainConfig) -> TrainResult:
    """Run the full optimization loop; writes logs and checkpoints under cfg.out."""
    cfg.validate()
    cfg = cfg.normalized()
    if not cfg.data:
        raise ConfigError("config needs a manifest path ('data')")
    if not cfg.out:
        raise ConfigError("config needs an output directory ('out')")
    os.makedirs(cfg.out, exist_ok=True)

    train_cases = load_split(cfg.data, "train", cfg.fold)
    val_cases = load_split(cfg.data, "val", cfg.fold)
    if not train_cases:
        raise ConfigError(f"no training cases in manifest {cfg.data}")

    netcfg = cfg.network_config()
    f = netcfg.downsample_factor
    sp = train_cases[0].curr.shape[1:]
    if any(e % f for e in sp):
        raise ConfigError(f"volume extents {sp} not divisible by {f} "
                          f"(network has {cfg.stages} stages)")

    params = network.init_params(netcfg, seed=cfg.seed, dtype=np.float32)
    velocities = {k: np.zeros_like(t.data) for k, t in params.items()}
    bcr_cfg = cfg.bcr_config()
    rng = np.random.default_rng(cfg.seed + 1)

    with open(os.path.join(cfg.out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)

    loss_path = os.path.join(cfg.out, "loss_log.csv")
    val_path = os.path.join(cfg.out, "val_log.csv")
    att_path = os.path.join(cfg.out, "attention_log.csv")
    final_path = os.path.join(cfg.out, "checkpoint_final.lckp")
    best_path = os.path.join(cfg.out, "checkpoint_best.lckp")

    loss_fh = open(loss_path, "w", encoding="utf-8", buffering=1)
    loss_fh.write("epoch,dice,ce,bcr,total,lr\n")
    val_fh = open(val_path, "w", encoding="utf-8", buffering=1)
    val_fh.write("epoch,dice\n")
    att_fh = open(att_path, "w", encoding="utf-8", buffering=1) if cfg.log_attention else None
    if att_fh:
        att_fh.write("epoch,batch,level,w1,w2\n")

    try:
        best_val = _run_epochs(cfg, netcfg, bcr_cfg, params, velocities, rng, train_cases,
                               val_cases, loss_fh, val_fh, att_fh, best_path, final_path)
    finally:
        loss_fh.close()
        val_fh.close()
        if att_fh:
            att_fh.close()

    return TrainResult(final_checkpoint=final_path, best_checkpoint=best_path,
                       loss_log=loss_path, val_log=val_path,
                       best_val_dice=best_val, epochs=cfg.epochs)


def _run_epochs(cfg, netcfg, bcr_cfg, params, velocities, rng, train_cases, val_cases,
                loss_fh, val_fh, att_fh, best_path, final_path) -> float:
    best_val = -1.0
    n_train = len(train_cases)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (1.0 - epoch / cfg.epochs) ** cfg.lr_power
        order = rng.permutation(n_train)
        sums = {"dice": 0.0, "ce": 0.0, "bcr": 0.0, "total": 0.0}
        for b in range(0, n_train, cfg.batch_size):
            batch = order[b:b + cfg.batch_size]
            network.zero_grad(params)
            gates_sum: list[list[float]] = [[0.0, 0.0] for _ in range(cfg.stages)]
            for idx in batch:
                case = train_cases[idx]
                if cfg.augment_flips:
                    curr, prior, mask = _maybe_flip(case, rng)
                else:
                    curr, prior, mask = case.curr, case.prior, case.mask
                res = network.forward(curr, prior, params, netcfg)
                br = losses.total_loss(res.logits, mask, res.features,
                                       case.birads_curr, case.birads_prior, bcr_cfg,
                                       cfg.lambda_dice, cfg.lambda_ce)
                vals = br.scalars()
                if not math.isfinite(vals["total"]):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch} batch {b // cfg.batch_size} "
                        f"(case {case.case_id}); reduce the learning rate")
                for k in sums:
                    sums[k] += vals[k]
                for lvl, (w1, w2) in enumerate(res.attention):
                    gates_sum[lvl][0] += float(w1)
                    gates_sum[lvl][1] += float(w2)
                (br.total * (1.0 / len(batch))).backward()
            _sgd_nesterov_step(params, velocities, lr, cfg.momentum)
            if att_fh:
                for lvl in range(cfg.stages):
                    att_fh.write(f"{epoch},{b // cfg.batch_size},{lvl},"
                                 f"{gates_sum[lvl][0] / len(batch):.6f},"
                                 f"{gates_sum[lvl][1] / len(batch):.6f}\n")
        loss_fh.write(f"{epoch},{sums['dice'] / n_train:.8f},{sums['ce'] / n_train:.8f},"
                      f"{sums['bcr'] / n_train:.8f},{sums['total'] / n_train:.8f},{lr:.8f}\n")

        if val_cases and ((epoch + 1) % cfg.val_interval == 0 or epoch == cfg.epochs - 1):
            vd = _mean_dice(val_cases, params, netcfg)
            val_fh.write(f"{epoch},{vd:.6f}\n")
            if vd > best_val:
                best_val = vd
                save_checkpoint(best_path, cfg, params, velocities, epoch,
                                rng.bit_generator.state)

    rng_state = rng.bit_generator.state
    save_checkpoint(final_path, cfg, params, velocities, cfg.epochs - 1, rng_state)
    if not val_cases:
        save_checkpoint(best_path, cfg, params, velocities, cfg.epochs - 1, rng_state)
    return best_val


# -- evaluation --------------------------------------------------------------------


def predict_mask(logits: Tensor) -> np.ndarray:
    """Argmax over the two class channels; returns a uint8 foreground mask."""
    return (logits.data.argmax(axis=0) == 1).astype(np.uint8)


def evaluate_case(logits: Tensor, gt_mask: np.ndarray,
                  spacing: tuple[float, ...], case_id: str) -> metrics.MetricsRecord:
    pred = predict_mask(logits)
    precision, recall = metrics.precision_recall(pred, gt_mask)
    return metrics.MetricsRecord(
        case_id=case_id,
        dice=metrics.dice_score(pred, gt_mask),
        hd95=metrics.hd95(pred, gt_mask, spacing),
        precision=precision, recall=recall)


def evaluate(ckpt: Checkpoint | str, manifest_path, split: str = "test",
             out_csv=None, fold: str = "") -> list[metrics.MetricsRecord]:
    """Per-case metrics for one split; optionally writes the aggregate CSV."""
    if isinstance(ckpt, str):
        ckpt = load_checkpoint(ckpt)
    netcfg = ckpt.network_config()
    cases = load_split(manifest_path, split, fold)
    if not cases:
        raise ConfigError(f"no cases for split {split!r} in {manifest_path}")
    records = []
    with eng.no_grad():
        for case in cases:
            res = network.forward(case.curr, case.prior, ckpt.params, netcfg)
            records.append(evaluate_case(res.logits, case.mask, case.spacing, case.case_id))
    if out_csv:
        metrics.write_metrics_csv(out_csv, records)
    return records


def bottleneck_embedding(vol: np.ndarray, params: dict[str, Tensor],
                         netcfg: network.NetworkConfig) -> np.ndarray:
    """Spatially pooled deepest encoder features of one volume."""
    with eng.no_grad():
        feats = network.encode(Tensor(vol), params, netcfg)
        return eng.global_avg_pool(feats[-1]).data.copy()


def embed_analysis(ckpt: Checkpoint | str, manifest_path, split: str = "all",
                   out_csv=None, fold: str = "") -> list[dict]:
    """Per-case distance between the pooled bottleneck embeddings of both visits."""
    if isinstance(ckpt, str):
        ckpt = load_checkpoint(ckpt)
    netcfg = ckpt.network_config()
    cases = load_split(manifest_path, split, fold)
    rows = []
    for case in cases:
        emb_c = bottleneck_embedding(case.curr, ckpt.params, netcfg)
        emb_p = bottleneck_embedding(case.prior, ckpt.params, netcfg)
        rows.append({"case": case.case_id, "birads_prev": case.birads_prior,
                     "birads_t": case.birads_curr,
                     "distance": float(np.linalg.norm(emb_c - emb_p))})
    if out_csv:
        lines = ["case,birads_prev,birads_t,distance"]
        for r in rows:
            lines.append(f"{r['case']},{r['birads_prev']},{r['birads_t']},{r['distance']:.6f}")
        with open(out_csv, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return rows


# -- qualitative export -------------------------------------------------------------


def _write_pgm(path, img: np.ndarray) -> None:
    if img.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D image, got {img.shape}")
    data = img.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def export_slices(ckpt: Checkpoint | str, manifest_path, case_id: str, out_dir) -> list[str]:
    """Mid-axial slices of image, ground truth, and prediction as PGM files."""
    if isinstance(ckpt, str):
        ckpt = load_checkpoint(ckpt)
    cases = [c for c in load_split(manifest_path, "all") if c.case_id == case_id]
    if not cases:
        raise ConfigError(f"case {case_id!r} not found in {manifest_path}")
    case = cases[0]
    netcfg = ckpt.network_config()
    with eng.no_grad():
        res = network.forward(case.curr, case.prior, ckpt.params, netcfg)
    pred = predict_mask(res.logits)
    z = case.curr.shape[1] // 2
    img = case.curr[0, z]
    lo, hi = float(img.min()), float(img.max())
    img8 = np.zeros_like(img, dtype=np.uint8) if hi <= lo else \
        np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, arr in (("img", img8), ("gt", case.mask[z] * 255), ("pred", pred[z] * 255)):
        path = os.path.join(out_dir, f"{case_id}_{name}.pgm")
        _write_pgm(path, arr)
        paths.append(path)
    return paths
