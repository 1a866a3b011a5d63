"""Adam training loop with stepwise exponential LR decay and checkpointing."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .labelgen import CharScene, build_pyramid, generate_targets
from .network import DetectorNet, ModelConfig
from .synthdata import augment, resize_keep_aspect
from .tensor import Tensor, use_dtype, vtns
from .vloss import total_loss

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    decay: float = 0.95
    decay_every: int = 1000
    batch_size: int = 8
    max_iters: int = 500
    checkpoint_every: int = 0
    kl_weight: float = 1.0
    seed: int = 0
    long_side: int = 128
    augment: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.lr0 * cfg.decay ** (iteration // cfg.decay_every)


@dataclass
class OptState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0


def adam_step(params: dict, grads: dict, state: OptState, lr: float) -> bool:
    """One bias-corrected Adam update in place. Returns False (and counts a
    skip) if any gradient is non-finite."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            logger.warning("non-finite gradient in %s; skipping step", name)
            return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return True


# -- batching -----------------------------------------------------------------------

def prepare_example(scene: CharScene, rng: np.random.Generator, long_side: int,
                    do_augment: bool = True):
    if do_augment:
        scene = augment(scene, rng)
    scene, _ = resize_keep_aspect(scene, long_side)
    return scene.image, generate_targets(scene)


def make_batch(scenes, rng, long_side: int, do_augment: bool = True):
    examples = [prepare_example(s, rng, long_side, do_augment) for s in scenes]
    H = max(img.shape[1] for img, _ in examples)
    W = max(img.shape[2] for img, _ in examples)
    images = np.zeros((len(examples), 3, H, W))
    full = np.zeros((len(examples), 2, H // 2, W // 2))
    for i, (img, tp) in enumerate(examples):
        images[i, :, :img.shape[1], :img.shape[2]] = img
        full[i, :, :tp.full.shape[1], :tp.full.shape[2]] = tp.full
    return images, full, build_pyramid(full)


class BatchSampler:
    """Seeded shuffle, reshuffled every epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise ValueError("empty corpus")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> list[int]:
        out = []
        while len(out) < self.batch_size:
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(self.batch_size - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + take].tolist())
            self.pos += take
        return out


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(path, model: DetectorNet, iteration: int, opt: OptState | None = None,
                    train_cfg: TrainConfig | None = None) -> Path:
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    names = []
    for name, p in model.named_parameters():
        vtns.save(root / "params" / f"{name}.vtns", p.data)
        names.append(name)
    buffers = []
    for name, b in model.named_buffers():
        vtns.save(root / "params" / f"{name}.mean.vtns", b.mean)
        vtns.save(root / "params" / f"{name}.var.vtns", b.var)
        buffers.append(name)
    manifest = {
        "config": model.cfg.to_dict(),
        "iteration": int(iteration),
        "parameters": names,
        "buffers": buffers,
    }
    if train_cfg is not None:
        manifest["train_config"] = train_cfg.to_dict()
    if opt is not None:
        (root / "optim").mkdir(exist_ok=True)
        for name in opt.m:
            vtns.save(root / "optim" / f"{name}.m.vtns", opt.m[name])
            vtns.save(root / "optim" / f"{name}.v.vtns", opt.v[name])
        manifest["optimizer"] = {"t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2,
                                 "eps": opt.eps, "skipped": opt.skipped, "names": list(opt.m)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_checkpoint(path) -> tuple[DetectorNet, dict, OptState | None]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    model = DetectorNet(ModelConfig(**manifest["config"]))
    params = dict(model.named_parameters())
    for name in manifest["parameters"]:
        arr = vtns.load(root / "params" / f"{name}.vtns")
        if params[name].shape != arr.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        params[name].data = arr.copy()
    buffers = dict(model.named_buffers())
    for name in manifest["buffers"]:
        buffers[name].mean = vtns.load(root / "params" / f"{name}.mean.vtns").copy()
        buffers[name].var = vtns.load(root / "params" / f"{name}.var.vtns").copy()
    opt = None
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        opt = OptState(t=o["t"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                       skipped=o["skipped"])
        for name in o["names"]:
            opt.m[name] = vtns.load(root / "optim" / f"{name}.m.vtns").copy()
            opt.v[name] = vtns.load(root / "optim" / f"{name}.v.vtns").copy()
    return model, manifest, opt


# -- loop ---------------------------------------------------------------------------

FUSION_CSV_HEADER = ["iter", "node", "coefficient_0", "coefficient_1", "coefficient_2"]


def fusion_rows(iteration: int, model: DetectorNet) -> list[list]:
    rows = []
    for node, coefs in model.fusion_coefficients().items():
        padded = [f"{c:.8f}" for c in coefs] + [""] * (3 - len(coefs))
        rows.append([iteration, node, *padded])
    return rows


@dataclass
class TrainResult:
    model: DetectorNet
    history: list
    opt: OptState
    seconds: float


def train_loop(scenes: list[CharScene], model_cfg: ModelConfig, cfg: TrainConfig,
               out_dir=None, model: DetectorNet | None = None, start_iter: int = 0,
               opt: OptState | None = None,
               callback: Callable[[int, dict, DetectorNet], None] | None = None) -> TrainResult:
    """Train for ``cfg.max_iters`` iterations (counting from ``start_iter``)."""
    if not scenes:
        raise ValueError("corpus is empty")
    dtype = np.dtype(cfg.dtype).type
    out = Path(out_dir) if out_dir is not None else None
    log_fh = csv_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if start_iter else "w"
        log_fh = open(out / "train_log.jsonl", mode)
        csv_fh = open(out / "fusion_weights.csv", mode, newline="")
        writer = csv.writer(csv_fh)
        if not start_iter:
            writer.writerow(FUSION_CSV_HEADER)
        (out / "config.json").write_text(json.dumps(
            {"model": model_cfg.to_dict(), "train": cfg.to_dict()}, indent=2))

    with use_dtype(dtype):
        if model is None:
            model = DetectorNet(model_cfg, seed=cfg.seed)
        model.astype(dtype)
        opt = opt or OptState()
        data_rng = np.random.default_rng([cfg.seed, 1, start_iter])
        noise_rng = np.random.default_rng([cfg.seed, 2, start_iter])
        sampler = BatchSampler(len(scenes), cfg.batch_size, data_rng)
        params = dict(model.named_parameters())
        history = []
        t0 = time.perf_counter()
        if csv_fh is not None and not start_iter:
            writer.writerows(fusion_rows(start_iter, model))
        for it in range(start_iter, start_iter + cfg.max_iters):
            idx = sampler.next()
            images, full, levels = make_batch([scenes[i] for i in idx], data_rng,
                                              cfg.long_side, cfg.augment)
            model.zero_grad()
            res = model.forward(Tensor(images), mode="train", rng=noise_rng)
            res.latents.prior_target = levels[:len(res.latents.theta)]
            report = total_loss(res.scores, full, res.latents, cfg.kl_weight)
            lr = lr_at(it, cfg)
            record = {"iter": it + 1, **report.to_json(), "lr": lr, "skipped": False}
            if math.isfinite(report.total):
                report.total_tensor.backward()
                grads = {n: p.grad for n, p in params.items()}
                record["skipped"] = not adam_step(params, grads, opt, lr)
            else:
                opt.skipped += 1
                record["skipped"] = True
                logger.warning("non-finite loss at iteration %d; skipped", it + 1)
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                writer.writerows(fusion_rows(it + 1, model))
            if callback is not None:
                callback(it + 1, record, model)
            if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{it + 1:06d}", model, it + 1, opt, cfg)
        if out is not None:
            save_checkpoint(out / "final", model, start_iter + cfg.max_iters, opt, cfg)
    for fh in (log_fh, csv_fh):
        if fh is not None:
            fh.close()
    return TrainResult(model, history, opt, time.perf_counter() - t0)
