"""Experiment configuration and the deterministic, resumable training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .losses import FeatureExtractor, LossWeights, composite_terms
from .metrics import psnr, ssim_index
from .network import HeroMamba, ModelConfig, build_network, read_tensor_file, write_tensor_file
from .optim import OptimizerState, adamw_step
from .simulation import load_dataset

log = logging.getLogger(__name__)

MODEL_FILE = "model.hmam"
OPTIM_FILE = "optim.hmam"
LOG_FILE = "train_log.jsonl"


class DataError(Exception):
    """Dataset missing, unreadable or inconsistent with the config."""


class NumericalAbort(Exception):
    """A non-finite loss or gradient stopped training."""


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}


@dataclass
class ExperimentConfig:
    """Flat training configuration; every field has a default except the
    dataset path, so ``{"data_dir": "..."}`` is a complete config.

    Model fields mirror :class:`ModelConfig` and the loss weights mirror
    :class:`LossWeights`.
    """

    data_dir: str = ""
    eval_dir: str = ""
    out_dir: str = "run"
    # model
    image_size: int = 32
    base_channels: int = 8
    multipliers: list = field(default_factory=lambda: [1, 2, 4, 8])
    d_state: int = 4
    expand_factor: int = 2
    use_ms_fusion: bool = True
    use_ss2d: bool = True
    use_fft_branch: bool = True
    use_color_fusion: bool = True
    tie_scan_directions: bool = False
    global_residual: bool = True
    init_std: Optional[float] = None
    head_skip: bool = True
    bn_momentum: float = 0.1
    seed: int = 0
    # objective
    alpha: float = 0.3
    beta_w: float = 0.8
    gamma: float = 0.1
    feature_seed: int = 0
    # optimizer and schedule
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 4
    total_steps: int = 500
    min_lr: float = 0.0
    # bookkeeping
    checkpoint_every: int = 100
    eval_every: int = 100
    max_steps: Optional[int] = None
    resume: bool = False
    eval_fsim: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.checkpoint_every < 1 or self.eval_every < 1:
            raise ValueError("checkpoint_every and eval_every must be >= 1")
        self.loss_weights()
        self.model_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in _MODEL_KEYS})

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta_w, self.gamma)

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                              weight_decay=self.weight_decay, total_steps=self.total_steps,
                              min_lr=self.min_lr)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_pairs(root) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Stack a dataset directory into float32 (degraded, clean) batches."""
    try:
        _, pairs = load_dataset(root)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    bad = [p for p in pairs if p.error]
    if bad:
        raise DataError("unreadable pairs: " + "; ".join(f"{p.id}: {p.error}" for p in bad))
    if not pairs:
        raise DataError(f"{root}: dataset is empty")
    shapes = {p.clean.shape for p in pairs} | {p.degraded.shape for p in pairs}
    if len(shapes) != 1:
        raise DataError(f"{root}: mixed image shapes {sorted(shapes)}")
    I = np.stack([p.degraded for p in pairs]).astype(np.float32)
    J = np.stack([p.clean for p in pairs]).astype(np.float32)
    return I, J, [p.id for p in pairs]


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Sample order for one epoch, a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    per_epoch = math.ceil(n / batch_size)
    epoch, k = divmod(step, per_epoch)
    return epoch_order(seed, epoch, n)[k * batch_size:(k + 1) * batch_size]


def evaluate(model: HeroMamba, I: np.ndarray, J: np.ndarray, with_fsim: bool = False) -> dict:
    """Mean PSNR/SSIM (and optionally FSIM) of the model in eval mode."""
    from .metrics import fsim

    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            out = np.concatenate([model(T.Tensor(I[i:i + 4])).data for i in range(0, len(I), 4)])
    finally:
        model.train(was_training)
    rec = {
        "psnr": float(np.mean([psnr(o, j) for o, j in zip(out, J)])),
        "ssim": float(np.mean([ssim_index(o, j) for o, j in zip(out, J)])),
    }
    if with_fsim:
        rec["fsim"] = float(np.mean([fsim(o, j) for o, j in zip(out, J)]))
    return rec


def save_optimizer(st: OptimizerState, path, extra: dict) -> None:
    tensors = {f"m/{k}": v for k, v in st.m.items()}
    tensors.update({f"v/{k}": v for k, v in st.v.items()})
    write_tensor_file(path, {"kind": "optimizer", "hyper": st.hyper(), **extra}, tensors)


def load_optimizer(path) -> tuple[OptimizerState, dict]:
    header, tensors = read_tensor_file(path)
    if header.get("kind") != "optimizer":
        raise ValueError(f"{path}: not an optimizer checkpoint")
    st = OptimizerState(**header["hyper"])
    for name, arr in tensors.items():
        kind, pname = name.split("/", 1)
        (st.m if kind == "m" else st.v)[pname] = arr.copy()
    return st, header


def _finite(x: float) -> bool:
    return math.isfinite(x)


@dataclass
class TrainResult:
    steps_done: int
    first_loss: Optional[float]
    last_loss: Optional[float]
    best_eval: Optional[dict]
    omega_min: float
    omega_max: float
    out_dir: Path


def train(cfg: ExperimentConfig, progress=None) -> TrainResult:
    """Run (or resume) training and return a summary.

    Step ``s`` draws batch ``s mod ceil(n / batch)`` of the permutation for
    epoch ``s // ceil(n / batch)``, so a resumed run replays exactly the
    batches an uninterrupted run would have seen. Checkpoints are written
    every ``checkpoint_every`` steps and at the end; on a non-finite loss or
    gradient the run stops with :class:`NumericalAbort` and the last good
    checkpoint is left untouched.
    """
    if not cfg.data_dir:
        raise DataError("config needs data_dir")
    I, J, _ = load_pairs(cfg.data_dir)
    if I.shape[2:] != (cfg.image_size, cfg.image_size):
        raise DataError(f"dataset images are {I.shape[2:]}, config expects {cfg.image_size}")
    if cfg.eval_dir:
        eI, eJ, _ = load_pairs(cfg.eval_dir)
    else:
        eI, eJ = I, J

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / LOG_FILE
    model = build_network(cfg.model_config())
    st = cfg.optimizer_state()
    best: Optional[dict] = None
    om_lo, om_hi = math.inf, -math.inf

    if cfg.resume and (out / MODEL_FILE).exists() and (out / OPTIM_FILE).exists():
        from .network import load_checkpoint

        model = load_checkpoint(out / MODEL_FILE)
        st, header = load_optimizer(out / OPTIM_FILE)
        best = header.get("best_eval")
        om_lo, om_hi = header.get("omega_range") or (math.inf, -math.inf)
        _truncate_log(log_path, st.step)
        log.info("resuming from step %d", st.step)
    else:
        log_path.write_text("")
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    fx = FeatureExtractor(cfg.feature_seed)
    weights = cfg.loss_weights()
    model.train()
    stop = cfg.total_steps if cfg.max_steps is None else min(cfg.total_steps, cfg.max_steps)
    first_loss = last_loss = None
    t0 = time.perf_counter()

    def checkpoint():
        from .network import save_checkpoint

        save_checkpoint(model, out / MODEL_FILE)
        omega_range = [om_lo, om_hi] if om_lo <= om_hi else None
        save_optimizer(st, out / OPTIM_FILE, {"best_eval": best, "omega_range": omega_range})

    with log_path.open("a") as fh:
        while st.step < stop:
            step = st.step
            idx = batch_indices(cfg.seed, step, len(I), cfg.batch_size)
            model.zero_grad()
            try:
                pred = model(T.Tensor(I[idx]))
                terms = composite_terms(pred, J[idx], I[idx], weights, fx)
            except T.NonFiniteError as exc:
                raise NumericalAbort(f"step {step}: {exc}") from exc
            loss = float(terms["total"].data)
            if not _finite(loss):
                raise NumericalAbort(f"non-finite loss at step {step}")
            T.backward(terms["total"])
            try:
                lr = adamw_step(model, st)
            except FloatingPointError as exc:
                raise NumericalAbort(f"step {step}: {exc}") from exc

            omegas = model.omegas()
            rec = {
                "step": step, "lr": lr, "loss": loss,
                "terms": {k: float(v.data) for k, v in terms.items() if k != "total"},
            }
            if omegas:
                rec["omega_min"], rec["omega_max"] = min(omegas), max(omegas)
                om_lo, om_hi = min(om_lo, rec["omega_min"]), max(om_hi, rec["omega_max"])
            if first_loss is None:
                first_loss = loss
            last_loss = loss
            done = st.step
            if done % cfg.eval_every == 0 or done == cfg.total_steps:
                ev = evaluate(model, eI, eJ, cfg.eval_fsim)
                rec["eval"] = ev
                if best is None or ev["psnr"] > best["psnr"]:
                    best = {"step": step, **ev}
            rec["wall_s"] = round(time.perf_counter() - t0, 3)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            if progress:
                progress(rec)
            if done % cfg.checkpoint_every == 0 or done == stop:
                checkpoint()

    return TrainResult(st.step, first_loss, last_loss, best, om_lo, om_hi, out)


def _truncate_log(path: Path, next_step: int) -> None:
    """Drop records at or beyond ``next_step`` (written after the checkpoint)."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        if line.strip() and json.loads(line)["step"] < next_step:
            keep.append(line)
    path.write_text("".join(k + "\n" for k in keep))


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
